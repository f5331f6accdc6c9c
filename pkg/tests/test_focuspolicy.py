import numpy as np
import pytest
import torch

from glancefocus.errors import ConfigError, ContractError
from glancefocus.focuspolicy import (PatchPolicy, SkipPolicy, build_grid, crop, crop_batch, decide_skip,
                                     policy_step, select_patch, skip_step)
from glancefocus import nets


def test_grid_spacing():
    g = build_grid(32, 16, 3)
    assert sorted(set(g.offsets[:, 0].tolist())) == [0, 8, 16]
    assert g.K == 9
    assert g.offsets[1].tolist() == [0, 8]  # row-major


def test_grid_49_candidates():
    assert build_grid(224, 96, 7).K == 49


def test_grid_single_candidate_is_centered():
    g = build_grid(64, 16, 1)
    assert g.offsets.tolist() == [[24, 24]]


def test_grid_full_frame_warns():
    with pytest.warns(UserWarning):
        g = build_grid(32, 32, 4)
    assert (g.offsets == 0).all()


def test_grid_offsets_in_bounds():
    for H, P, k in [(64, 16, 5), (64, 24, 5), (64, 32, 7), (224, 96, 7)]:
        g = build_grid(H, P, k)
        assert g.offsets.min() == 0 and g.offsets.max() == H - P


def test_grid_rejects_oversize_patch():
    with pytest.raises(ConfigError):
        build_grid(32, 33, 3)


def test_crop_cases():
    frame = torch.arange(2 * 8 * 8, dtype=torch.float32).reshape(2, 8, 8)
    assert torch.equal(crop(frame, (0, 0), 8), frame)
    assert torch.equal(crop(frame, (5, 5), 3), frame[:, 5:, 5:])
    with pytest.raises(ContractError):
        crop(frame, (6, 0), 3)


def test_crop_batch_matches_crop():
    frames = torch.rand(4, 2, 10, 10)
    offs = torch.tensor([[0, 0], [3, 5], [6, 6], [1, 2]])
    out = crop_batch(frames, offs, 4)
    for i in range(4):
        assert torch.equal(out[i], crop(frames[i], offs[i], 4))
    with pytest.raises(ContractError):
        crop_batch(frames, torch.tensor([[7, 0]] * 4), 4)


def _policy(K=9):
    torch.manual_seed(0)
    return PatchPolicy(16, 4, K, 8, 12).eval()


def test_zero_head_gives_uniform():
    pi = _policy()
    torch.nn.init.zeros_(pi.head.weight)
    torch.nn.init.zeros_(pi.head.bias)
    dist, value, _ = policy_step(pi, torch.randn(3, 16, 4, 4), pi.init_state(3))
    assert torch.allclose(dist, torch.full((3, 9), 1 / 9))


def test_policy_distribution_normalised_and_pure():
    pi = _policy()
    e = torch.randn(5, 16, 4, 4)
    h = torch.randn(5, 12)
    d1, v1, h1 = policy_step(pi, e, h)
    d2, v2, h2 = policy_step(pi, e, h)
    assert torch.allclose(d1.sum(-1), torch.ones(5), atol=1e-6)
    assert torch.equal(d1, d2) and torch.equal(h1, h2) and torch.isfinite(v1).all()


def test_policy_rejects_pooled_features():
    pi = _policy()
    with pytest.raises(ContractError):
        policy_step(pi, torch.randn(2, 16), pi.init_state(2))


def test_select_patch_one_hot_and_ties():
    d = torch.zeros(1, 9)
    d[0, 5] = 1.0
    assert int(select_patch(d, "argmax")[0]) == 5
    assert int(select_patch(d, "sample", torch.Generator().manual_seed(0))[0]) == 5
    assert int(select_patch(torch.full((1, 9), 1 / 9), "argmax")[0]) == 0
    _, logp = select_patch(d, "argmax")
    assert float(logp) == 0.0


def test_sample_frequencies_uniform():
    gen = torch.Generator().manual_seed(123)
    idx, logp = select_patch(torch.full((10000, 4), 0.25), "sample", gen)
    freq = np.bincount(idx.numpy(), minlength=4) / 10000
    assert np.all(np.abs(freq - 0.25) <= 0.02)
    assert (logp <= 0).all()


def test_skip_zero_head_is_half():
    torch.manual_seed(0)
    ps = SkipPolicy(16, 4, 8, 12)
    torch.nn.init.zeros_(ps.head.weight)
    torch.nn.init.zeros_(ps.head.bias)
    p, _, _ = skip_step(ps, torch.randn(3, 16, 4, 4), ps.init_state(3))
    assert torch.allclose(p, torch.full((3,), 0.5))


def test_skip_prob_open_interval():
    torch.manual_seed(0)
    ps = SkipPolicy(16, 4, 8, 12)
    with torch.no_grad():
        ps.head.bias.fill_(1e4)
    p, _, _ = skip_step(ps, torch.randn(3, 16, 4, 4), ps.init_state(3))
    assert ((p > 0) & (p < 1)).all()
    with torch.no_grad():
        ps.head.bias.fill_(-1e4)
    p, _, _ = skip_step(ps, torch.randn(3, 16, 4, 4), ps.init_state(3))
    assert ((p > 0) & (p < 1)).all()


def test_skip_state_advances_regardless_of_decision():
    torch.manual_seed(0)
    ps = SkipPolicy(16, 4, 8, 12)
    e = torch.randn(1, 16, 4, 4)
    _, _, h = skip_step(ps, e, ps.init_state(1))
    assert not torch.equal(h, ps.init_state(1))


def test_keep_rate_matches_probability():
    b, _ = decide_skip(torch.full((10000,), 0.7), "sample", generator=torch.Generator().manual_seed(5))
    assert abs(float(b.mean()) - 0.7) <= 0.02


@pytest.mark.parametrize("p,rho,expect", [(0.9, 0.5, 1.0), (0.5, 0.5, 1.0), (0.3, 0.5, 0.0)])
def test_threshold_rule(p, rho, expect):
    b, _ = decide_skip(torch.tensor([p]), "threshold", rho)
    assert float(b) == expect


def test_policy_gradients():
    torch.manual_seed(3)
    for pi in (PatchPolicy(4, 3, 9, 2, 5).double(), SkipPolicy(4, 3, 2, 5).double()):
        obs = torch.randn(2, 3, 4, 3, 3, dtype=torch.float64, requires_grad=True)
        actions = torch.randint(0, pi.num_outputs if pi.num_outputs > 1 else 2, (2, 3))

        def loss():
            logp, ent, v = pi.evaluate(obs, actions)
            return logp.sum() + 0.3 * ent.sum() + 0.5 * (v ** 2).sum()

        assert nets.projected_gradcheck(loss, [obs, *pi.parameters()]) <= 1e-3
