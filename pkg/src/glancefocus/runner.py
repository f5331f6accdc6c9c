"""Run-directory management and one function per CLI command.

Layout of a run directory::

    config.ini            resolved configuration (authoritative once written)
    manifest.json         seed, config hash, data/checkpoint/metric hashes, stage lineage
    data/                 train / calibration / test splits
    checkpoints/          pretrain, stage1, stage2, stage3
    metrics/              histories, calibration, eval, ablations, sweeps
    plots/                images plus their backing data

Nothing written here carries a timestamp, so the same config and seed give
byte-identical directories.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import config as config_mod
from .container import atomic_write_bytes, file_sha256
from .errors import ConfigError, ContractError
from .evalbench import (MetricsRecord, ablate_feature_reuse, ablate_policies, emit_plots, evaluate,
                        export_selections, overlap_rate, write_records)
from .model import ModelBundle
from .pipeline import (glance_head_accuracy, pretrain, skip_scores, stage1_warmup, stage2_policy_learning,
                       stage3_finetune)
from .rltrain import REWARD_VARIANTS, calibrate_threshold
from .seeding import derive_seed
from .synthdata import ROLES, DatasetSplit, generate_split, load_split, save_split

log = logging.getLogger(__name__)

STAGES = ("pretrain", "stage1", "stage2", "stage3")
PARENT = {"pretrain": None, "stage1": "pretrain", "stage2": "stage1", "stage3": "stage2"}


def default_run_dir(cfg: config_mod.RunConfig, root: str | Path = "runs") -> Path:
    return Path(root) / f"{cfg.config_hash()}-seed{cfg.seed}"


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


class RunDir:
    """A run directory bound to one resolved config."""

    def __init__(self, path, cfg: config_mod.RunConfig):
        self.path = Path(path)
        self.cfg = cfg

    @classmethod
    def open(cls, path, cfg: config_mod.RunConfig | None = None) -> "RunDir":
        """Bind ``path`` to ``cfg``; an existing config.ini must match it exactly.

        With ``cfg`` None the stored config is loaded (and must exist).
        """
        path = Path(path)
        stored = path / "config.ini"
        if stored.exists():
            on_disk = config_mod.load(stored)
            if cfg is not None and cfg.to_ini() != on_disk.to_ini():
                raise ConfigError(f"{path} was created with a different config (hash {on_disk.config_hash()} "
                                  f"vs {cfg.config_hash()}); use a fresh run directory")
            return cls(path, on_disk)
        if cfg is None:
            raise ConfigError(f"{path} has no config.ini; run gen-data first or pass a config")
        return cls(path, cfg)

    def ensure_config(self) -> None:
        if not (self.path / "config.ini").exists():
            atomic_write_bytes(self.path / "config.ini", self.cfg.to_ini().encode())
            self._update_manifest(lambda m: m)

    # --- paths ---------------------------------------------------------------

    def data_path(self, role: str) -> Path:
        return self.path / "data" / f"{role}.gfd"

    def checkpoint(self, stage: str) -> Path:
        return self.path / "checkpoints" / f"{stage}.ckpt"

    def metrics(self, name: str) -> Path:
        return self.path / "metrics" / name

    def check_writable(self, paths, overwrite: bool) -> None:
        existing = [str(p) for p in paths if Path(p).exists()]
        if existing and not overwrite:
            raise ConfigError(f"outputs already exist ({', '.join(existing)}); pass --overwrite to replace them")

    # --- manifest ------------------------------------------------------------

    def manifest(self) -> dict:
        p = self.path / "manifest.json"
        if p.exists():
            return json.loads(p.read_text())
        return {}

    def _update_manifest(self, fn) -> None:
        m = self.manifest()
        m.setdefault("seed", self.cfg.seed)
        m.setdefault("config_hash", self.cfg.config_hash())
        for k in ("data", "checkpoints", "metrics"):
            m.setdefault(k, {})
        fn(m)
        atomic_write_bytes(self.path / "manifest.json", _dump(m))

    def record(self, section: str, key: str, path: Path, **extra) -> None:
        entry = {"path": str(path.relative_to(self.path)), "sha256": file_sha256(path), **extra}
        self._update_manifest(lambda m: m[section].__setitem__(key, entry))

    def write_json(self, name: str, obj) -> Path:
        p = self.metrics(name)
        atomic_write_bytes(p, _dump(obj))
        self.record("metrics", name, p)
        return p

    # --- loading -------------------------------------------------------------

    def load_data(self, role: str) -> DatasetSplit:
        p = self.data_path(role)
        if not p.exists():
            raise ConfigError(f"missing {role} split at {p}; run gen-data first")
        split = load_split(p)
        if split.config != self.cfg.synth_config():
            raise ConfigError(f"{p} was generated with a different data config")
        return split

    def load_stage(self, stage: str, required_by: str) -> ModelBundle:
        p = self.checkpoint(stage)
        if not p.exists():
            raise ConfigError(f"{required_by} needs the {stage} checkpoint at {p}; run {stage} first")
        return ModelBundle.load(p).eval()

    def save_stage(self, bundle: ModelBundle, stage: str) -> None:
        p = self.checkpoint(stage)
        bundle.save(p, config_hash=self.cfg.config_hash())
        parent = PARENT[stage]
        self.record("checkpoints", stage, p, parent=parent, lineage=list(bundle.meta.get("lineage", [])))


# --- commands ------------------------------------------------------------------

def gen_data(run: RunDir, overwrite: bool = False) -> dict[str, DatasetSplit]:
    sizes = {"train": run.cfg.data.n_train, "calibration": run.cfg.data.n_calibration, "test": run.cfg.data.n_test}
    run.check_writable([run.data_path(r) for r in ROLES], overwrite)
    run.ensure_config()
    synth = run.cfg.synth_config()
    out = {}
    for role in ROLES:
        split = generate_split(synth, sizes[role], role, derive_seed(run.cfg.seed, f"data.{role}"))
        save_split(split, run.data_path(role))
        run.record("data", role, run.data_path(role), n=len(split))
        out[role] = split
    return out


def _fresh_bundle(run: RunDir, **overrides) -> ModelBundle:
    return ModelBundle(run.cfg.model_config(**overrides), derive_seed(run.cfg.seed, "model"))


def cmd_pretrain(run: RunDir, overwrite: bool = False) -> ModelBundle:
    train, test = run.load_data("train"), run.load_data("test")
    run.check_writable([run.checkpoint("pretrain"), run.metrics("pretrain.json")], overwrite)
    bundle = _fresh_bundle(run)
    res = pretrain(bundle, train, run.cfg.train_config(), run.cfg.seed)
    acc = None if not res.history else glance_head_accuracy(bundle, res.glance_head, test)
    run.save_stage(bundle, "pretrain")
    run.write_json("pretrain.json", {"history": res.history, "glance_head_test_accuracy": acc})
    return bundle


def cmd_stage1(run: RunDir, overwrite: bool = False) -> ModelBundle:
    bundle = run.load_stage("pretrain", "stage1")
    train = run.load_data("train")
    run.check_writable([run.checkpoint("stage1"), run.metrics("stage1.json")], overwrite)
    hist = stage1_warmup(bundle, train, run.cfg.train_config(), run.cfg.seed)
    run.save_stage(bundle, "stage1")
    run.write_json("stage1.json", {"history": hist})
    return bundle


def cmd_stage2(run: RunDir, overwrite: bool = False) -> ModelBundle:
    bundle = run.load_stage("stage1", "stage2")
    train = run.load_data("train")
    run.check_writable([run.checkpoint("stage2"), run.metrics("stage2.json")], overwrite)
    hist = stage2_policy_learning(bundle, train, run.cfg.train_config(), run.cfg.ppo, run.cfg.seed)
    run.save_stage(bundle, "stage2")
    run.write_json("stage2.json", {"history": hist})
    return bundle


def cmd_stage3(run: RunDir, overwrite: bool = False) -> ModelBundle:
    bundle = run.load_stage("stage2", "stage3")
    train = run.load_data("train")
    run.check_writable([run.checkpoint("stage3"), run.metrics("stage3.json")], overwrite)
    hist = stage3_finetune(bundle, train, run.cfg.train_config(), run.cfg.seed)
    run.save_stage(bundle, "stage3")
    run.write_json("stage3.json", {"history": hist})
    return bundle


def cmd_calibrate(run: RunDir, overwrite: bool = False) -> dict:
    bundle = run.load_stage("stage3", "calibrate")
    if bundle.pi_skip is None:
        raise ConfigError("calibrate needs a model trained with skip.enabled = true")
    split = run.load_data(run.cfg.skip.calibrate_on)
    run.check_writable([run.metrics("calibration.json")], overwrite)
    scores = skip_scores(bundle, split)
    table = {}
    for eta in run.cfg.skip.etas:
        cal = calibrate_threshold(scores, eta)
        table[repr(float(eta))] = dataclasses.asdict(cal)
    out = {"split": run.cfg.skip.calibrate_on, "n_scores": int(scores.size), "thresholds": table}
    run.write_json("calibration.json", out)
    return out


def _load_calibration(run: RunDir) -> dict[float, float]:
    p = run.metrics("calibration.json")
    if not p.exists():
        raise ConfigError("skip gate is enabled but no calibration exists; run calibrate first")
    data = json.loads(p.read_text())
    return {float(k): v["rho"] for k, v in data["thresholds"].items()}


def cmd_eval(run: RunDir, overwrite: bool = False) -> list[MetricsRecord]:
    bundle = run.load_stage("stage3", "eval")
    test = run.load_data("test")
    run.check_writable([run.metrics("eval.csv"), run.metrics("eval.json")], overwrite)
    rhos = _load_calibration(run) if bundle.pi_skip is not None else {}
    h, seed = run.cfg.config_hash(), run.cfg.seed
    records = []
    for mode in ("online", "offline"):
        records.append(evaluate(bundle, test, mode, "learned", seed=seed, config_hash=h, batch=run.cfg.eval.batch,
                                label="eta=1.0"))
        for eta, rho in rhos.items():
            records.append(evaluate(bundle, test, mode, "learned", rho=rho, seed=seed, config_hash=h,
                                    batch=run.cfg.eval.batch, label=f"eta={eta}"))
    for p in write_records(records, run.path / "metrics", "eval"):
        run.record("metrics", p.name, p)
    return records


def cmd_ablate(run: RunDir, kind: str = "policies", overwrite: bool = False) -> dict:
    test = run.load_data("test")
    h, seed = run.cfg.config_hash(), run.cfg.seed
    if kind == "policies":
        bundle = run.load_stage("stage3", "ablate")
        fixed = bundle if run.cfg.eval.hold_model_constant else run.load_stage("stage1", "ablate")
        names = ["ablate_policies.csv", "ablate_policies.json", "selections.json"]
        run.check_writable([run.metrics(n) for n in names], overwrite)
        recs = ablate_policies(bundle, test, fixed, seed, h, run.cfg.eval.policies)
        overlaps = {}
        for v in run.cfg.eval.policies:
            src = bundle if v == "learned" else fixed
            overlaps[v] = overlap_rate(export_selections(src, test, v, seed))
        for p in write_records(recs, run.path / "metrics", "ablate_policies"):
            run.record("metrics", p.name, p)
        run.write_json("selections.json", {"glyph_overlap_rate": overlaps})
        return {"records": recs, "overlap": overlaps}
    if kind == "rewards":
        names = ["ablate_rewards.csv", "ablate_rewards.json"]
        run.check_writable([run.metrics(n) for n in names], overwrite)
        base = run.load_stage("stage1", "ablate")
        train = run.load_data("train")
        recs = []
        for reward in REWARD_VARIANTS:
            b = base.clone()
            tc = dataclasses.replace(run.cfg.train_config(), reward=reward)
            stage2_policy_learning(b, train, tc, run.cfg.ppo, seed)
            stage3_finetune(b, train, tc, seed)
            recs.append(evaluate(b, test, "offline", "learned", seed=seed, config_hash=h, label=f"reward:{reward}"))
        for p in write_records(recs, run.path / "metrics", "ablate_rewards"):
            run.record("metrics", p.name, p)
        return {"records": recs}
    if kind == "reuse":
        names = ["ablate_reuse.csv", "ablate_reuse.json"]
        run.check_writable([run.metrics(n) for n in names], overwrite)
        on = run.load_stage("stage3", "ablate")
        if not on.cfg.reuse_glance:
            raise ConfigError("ablate reuse expects the run's model to reuse glance features")
        off = train_full(run, reuse_glance=False, skip_gate=False)
        recs = ablate_feature_reuse(on, off, test, seed, h)
        for p in write_records(recs, run.path / "metrics", "ablate_reuse"):
            run.record("metrics", p.name, p)
        return {"records": recs}
    raise ConfigError(f"ablate kind must be policies, rewards or reuse, got {kind!r}")


def train_full(run: RunDir, **model_overrides) -> ModelBundle:
    """All four stages in memory on the run's training split (used by sweeps and ablations)."""
    train = run.load_data("train")
    tc, seed = run.cfg.train_config(), run.cfg.seed
    bundle = _fresh_bundle(run, **model_overrides)
    pretrain(bundle, train, tc, seed)
    stage1_warmup(bundle, train, tc, seed)
    stage2_policy_learning(bundle, train, tc, run.cfg.ppo, seed)
    stage3_finetune(bundle, train, tc, seed)
    return bundle.eval()


def cmd_sweep(run: RunDir, overwrite: bool = False) -> list[dict]:
    """Accuracy vs multiply-adds over eval.patch_sizes (and skip.etas when the gate is enabled)."""
    test = run.load_data("test")
    run.check_writable([run.metrics("sweep.json")], overwrite)
    h, seed = run.cfg.config_hash(), run.cfg.seed
    points = []
    for P in run.cfg.eval.patch_sizes:
        bundle = train_full(run, patch_size=P)
        settings = [(1.0, None)]
        if bundle.pi_skip is not None:
            scores = skip_scores(bundle, run.load_data(run.cfg.skip.calibrate_on))
            settings += [(eta, calibrate_threshold(scores, eta).rho) for eta in run.cfg.skip.etas]
        for eta, rho in settings:
            rec = evaluate(bundle, test, "offline", "learned", rho=rho, seed=seed, config_hash=h,
                           label=f"P={P}")
            points.append({"label": f"eta={eta}", "patch_size": P, "eta": eta, "mean_flops": rec.mean_flops,
                           "flops_f_L": rec.flops["f_L"], "top1": rec.top1, "keep_rate": rec.keep_rate})
    run.write_json("sweep.json", {"points": points})
    return points


def cmd_plot(run: RunDir, overwrite: bool = False) -> list[Path]:
    """Trade-off plot from sweep.json and online accuracy curve from eval.json, whichever exist."""
    plots = run.path / "plots"
    sources = {"sweep.json": "tradeoff", "eval.json": "online_curve"}
    present = {k: v for k, v in sources.items() if run.metrics(k).exists()}
    if not present:
        raise ConfigError("nothing to plot; run sweep or eval first")
    targets = [plots / f"{name}{ext}" for name in present.values() for ext in (".csv", ".png")]
    run.check_writable(targets, overwrite)
    written = []
    if "sweep.json" in present:
        points = json.loads(run.metrics("sweep.json").read_text())["points"]
        written += emit_plots(points, plots, "tradeoff")
    if "eval.json" in present:
        recs = json.loads(run.metrics("eval.json").read_text())
        points = [{"label": r["label"], "frames": t + 1, "accuracy": a}
                  for r in recs if r["mode"] == "online" for t, a in enumerate(r["per_frame_accuracy"])]
        written += emit_plots(points, plots, "online_curve", x="frames", y="accuracy")
    for p in written:
        run.record("metrics", f"plots/{p.name}", p)
    return written


def latest_stage(run: RunDir) -> str | None:
    for stage in reversed(STAGES):
        if run.checkpoint(stage).exists():
            return stage
    return None


def cmd_verify(cfg: config_mod.RunConfig, run_path=None, n_samples: int = 100):
    """Property checks on the newest checkpoint in ``run_path`` (or a fresh model); returns the checks."""
    from .verify import run_checks
    synth = cfg.synth_config()
    bundle, split, rho = None, None, None
    if run_path is not None and Path(run_path).exists():
        has_config = (Path(run_path) / "config.ini").exists()
        run = RunDir.open(run_path) if has_config else RunDir(run_path, cfg)
        stage = latest_stage(run)
        if stage is not None:
            bundle = run.load_stage(stage, "verify")
        if run.data_path("test").exists():
            split = run.load_data("test").subset(n_samples)
        if bundle is not None and bundle.pi_skip is not None and run.metrics("calibration.json").exists():
            rho = float(np.median(list(_load_calibration(run).values())))
        cfg = run.cfg
    if bundle is None:
        bundle = ModelBundle(cfg.model_config(), derive_seed(cfg.seed, "model")).eval()
    if split is None:
        split = generate_split(synth, max(n_samples, synth.num_classes), "test", derive_seed(cfg.seed, "verify.data"))
    return run_checks(bundle, split, cfg.seed, rho)


def run_all(run: RunDir, overwrite: bool = False) -> list[MetricsRecord]:
    """gen-data through eval (plus calibrate when the skip gate is on)."""
    gen_data(run, overwrite)
    cmd_pretrain(run, overwrite)
    cmd_stage1(run, overwrite)
    cmd_stage2(run, overwrite)
    cmd_stage3(run, overwrite)
    if run.cfg.skip.enabled:
        cmd_calibrate(run, overwrite)
    return cmd_eval(run, overwrite)
