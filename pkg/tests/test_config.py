import pytest

from glancefocus import config
from glancefocus.errors import ConfigError


def test_defaults_validate_and_round_trip():
    cfg = config.loads("")
    assert cfg.ppo.gamma == 0.7 and cfg.skip.lam == 1e-6 and cfg.skip.etas == (0.9, 0.7, 0.5)
    assert cfg.model.grid_k == 5 and cfg.eval.patch_sizes == (16, 24, 32)
    again = config.loads(cfg.to_ini())
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_overrides_and_lambda_alias():
    cfg = config.loads("[skip]\nlambda = 0.01\n", ["run.seed=4", "model.patch_size=24", "skip.etas=0.5"])
    assert cfg.seed == 4 and cfg.model.patch_size == 24 and cfg.skip.lam == 0.01 and cfg.skip.etas == (0.5,)
    assert cfg.train_config().lam == 0.01
    assert "lambda = 0.01" in cfg.to_ini()


def test_hash_changes_with_content():
    assert config.loads("").config_hash() != config.loads("", ["run.seed=1"]).config_hash()


@pytest.mark.parametrize("text,overrides", [
    ("[nope]\nx = 1\n", None),
    ("[run]\nseedz = 1\n", None),
    ("[run]\nseed = one\n", None),
    ("", ["run.seed"]),
    ("", ["seed=1"]),
    ("[model]\npatch_size = 80\n", None),
    ("[skip]\netas = 0.5, 1.0\n", None),
    ("[eval]\npolicies = learned, oracle\n", None),
    ("[data]\nn_test = 3\n", None),
    ("[skip]\nenabled = true\n[model]\nreuse_glance = false\n", None),
    ("not an ini", None),
])
def test_invalid_configs_rejected(text, overrides):
    with pytest.raises(ConfigError):
        config.loads(text, overrides)


def test_train_tuple_key_parses():
    cfg = config.loads("[train]\nstage3_keep_fractions = 1.0, 0.5\nstage3_skip_rule = sample\n")
    assert cfg.train.stage3_keep_fractions == (1.0, 0.5) and cfg.train.stage3_skip_rule == "sample"
    assert config.loads(cfg.to_ini()).to_ini() == cfg.to_ini()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.ini")


def test_model_config_picks_up_data_and_skip():
    cfg = config.loads("[data]\nnum_classes = 5\n[skip]\nenabled = true\n")
    m = cfg.model_config()
    assert m.num_classes == 5 and m.skip_gate
