"""Metrics, fixed-policy baselines, ablations, trade-off sweeps and plots."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import atomic_write_bytes
from .errors import ConfigError, ContractError
from .model import ModelBundle
from .rltrain import REWARD_VARIANTS, reward_signal  # noqa: F401  (re-exported)
from .pipeline import POLICY_VARIANTS, _batches, _to_torch, run_offline, run_online
from .seeding import torch_gen
from .synthdata import DatasetSplit

log = logging.getLogger(__name__)



@dataclass
class MetricsRecord:
    top1: float
    mean_flops: float
    flops: dict
    per_frame_accuracy: list[float]
    keep_rate: float
    n: int
    mode: str
    variant: str
    seed: int
    config_hash: str
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise ContractError(f"accuracy {self.top1} outside [0, 1]")

    def as_row(self) -> dict:
        row = {"label": self.label, "variant": self.variant, "mode": self.mode, "n": self.n,
               "top1": f"{self.top1:.6f}", "mean_flops": f"{self.mean_flops:.1f}",
               "keep_rate": f"{self.keep_rate:.6f}", "seed": self.seed, "config_hash": self.config_hash}
        row.update({f"flops_{k}": f"{v:.1f}" for k, v in self.flops.items()})
        return row


def score_predictions(probs: torch.Tensor, labels) -> float:
    """Top-1 accuracy of probs [N, nc] against labels [N]."""
    labels = torch.as_tensor(np.asarray(labels)).long()
    if probs.shape[0] != labels.shape[0]:
        raise ContractError("prediction and label counts differ")
    return float((probs.argmax(-1) == labels).double().mean())


def _check_compat(bundle: ModelBundle, split: DatasetSplit) -> None:
    d, m = split.config, bundle.cfg
    if (d.frame_size, d.channels, d.num_classes) != (m.frame_size, m.channels, m.num_classes):
        raise ContractError(f"split (H={d.frame_size}, C={d.channels}, classes={d.num_classes}) does not match "
                            f"model (H={m.frame_size}, C={m.channels}, classes={m.num_classes})")


def evaluate(bundle: ModelBundle, split: DatasetSplit, mode: str = "online", variant: str = "learned",
             rho: float | None = None, seed: int = 0, config_hash: str = "", batch: int = 64,
             label: str = "") -> MetricsRecord:
    """Top-1 accuracy and mean multiply-adds per video.

    Online mode also records accuracy after each frame count 1..T; offline
    mode scores p_T only.  Randomised variants draw from a generator seeded by
    ``seed`` so results are reproducible.
    """
    _check_compat(bundle, split)
    if mode not in ("online", "offline"):
        raise ContractError(f"mode must be 'online' or 'offline', got {mode!r}")
    if variant not in POLICY_VARIANTS:
        raise ContractError(f"unknown policy variant {variant!r}")
    gen = torch_gen(seed, f"eval.{variant}")
    run = run_online if mode == "online" else run_offline
    finals, curves, keeps, ledger_tot = [], [], [], None
    for idx in _batches(len(split), batch, None):
        res = run(bundle, _to_torch(split.pixels[idx]), variant, rho, gen)
        labels = torch.from_numpy(split.labels[idx])
        finals.append(res.final)
        if mode == "online":
            curves.append((res.probs.argmax(-1) == labels[:, None]).double().sum(0))
        keeps.append(res.keep.double().mean(1))
        for led in res.ledgers:
            ledger_tot = led if ledger_tot is None else ledger_tot + led
    n = len(split)
    top1 = score_predictions(torch.cat(finals), split.labels)
    curve = (torch.stack(curves).sum(0) / n).tolist() if curves else []
    flops = {k: v / n for k, v in ledger_tot.as_dict().items()}
    return MetricsRecord(top1, flops["total"], flops, curve, float(torch.cat(keeps).mean()), n, mode, variant,
                         seed, config_hash, label)


def ablate_policies(bundle: ModelBundle, split: DatasetSplit, fixed_bundle: ModelBundle | None = None,
                    seed: int = 0, config_hash: str = "", variants=POLICY_VARIANTS) -> dict[str, MetricsRecord]:
    """One record per patch-selection variant.

    The learned policy runs on ``bundle``; fixed variants run on
    ``fixed_bundle`` (the Stage I model) when given, else on ``bundle`` too.
    """
    out = {}
    for v in variants:
        b = bundle if (v == "learned" or fixed_bundle is None) else fixed_bundle
        out[v] = evaluate(b, split, "offline", v, seed=seed, config_hash=config_hash, label=f"policy:{v}")
    return out


def ablate_feature_reuse(bundle_on: ModelBundle, bundle_off: ModelBundle, split: DatasetSplit, seed: int = 0,
                         config_hash: str = "") -> dict[str, MetricsRecord]:
    if not bundle_on.cfg.reuse_glance or bundle_off.cfg.reuse_glance:
        raise ConfigError("expected one bundle with glance reuse on and one with it off")
    return {"reuse_on": evaluate(bundle_on, split, "offline", seed=seed, config_hash=config_hash, label="reuse:on"),
            "reuse_off": evaluate(bundle_off, split, "offline", seed=seed, config_hash=config_hash,
                                  label="reuse:off")}


def tradeoff_sweep(entries: list[dict], split: DatasetSplit, seed: int = 0, config_hash: str = "") -> list[dict]:
    """Entries are dicts {label, bundle, rho (optional), eta (optional)}; returns one curve point each."""
    points = []
    for e in entries:
        rec = evaluate(e["bundle"], split, "offline", rho=e.get("rho"), seed=seed, config_hash=config_hash,
                       label=e["label"])
        points.append({"label": e["label"], "patch_size": e["bundle"].cfg.patch_size, "eta": e.get("eta", 1.0),
                       "mean_flops": rec.mean_flops, "flops_f_L": rec.flops["f_L"], "top1": rec.top1,
                       "keep_rate": rec.keep_rate})
    return points


def glyph_overlap(offset_rc, patch_size: int, glyph_rc, glyph_size: int) -> float:
    """Fraction of the glyph's area covered by the patch."""
    dr = min(offset_rc[0] + patch_size, glyph_rc[0] + glyph_size) - max(offset_rc[0], glyph_rc[0])
    dc = min(offset_rc[1] + patch_size, glyph_rc[1] + glyph_size) - max(offset_rc[1], glyph_rc[1])
    return max(dr, 0) * max(dc, 0) / float(glyph_size * glyph_size)


def export_selections(bundle: ModelBundle, split: DatasetSplit, variant: str = "learned", seed: int = 0,
                      batch: int = 64) -> list[dict]:
    """One record per (sample, frame): selected grid offset, true glyph position, covered glyph fraction."""
    _check_compat(bundle, split)
    gen = torch_gen(seed, f"export.{variant}")
    P, g = bundle.cfg.patch_size, split.config.glyph_size
    records = []
    for idx in _batches(len(split), batch, None):
        res = run_offline(bundle, _to_torch(split.pixels[idx]), variant, gen=gen)
        for row, i in enumerate(idx):
            for t in range(res.actions.shape[1]):
                a = int(res.actions[row, t])
                off = bundle.grid.offsets[a]
                glyph = split.glyph_track[i, t]
                records.append({"sample": int(i), "t": t, "action": a, "row": int(off[0]), "col": int(off[1]),
                                "glyph_row": int(glyph[0]), "glyph_col": int(glyph[1]),
                                "overlap": glyph_overlap(off, P, glyph, g)})
    return records


def overlap_rate(records: list[dict], min_fraction: float = 0.5) -> float:
    """Share of frames whose selected patch covers at least ``min_fraction`` of the glyph."""
    if not records:
        raise ContractError("no selection records")
    return float(np.mean([r["overlap"] >= min_fraction for r in records]))


# --- output ------------------------------------------------------------------

def _csv_bytes(rows: list[dict]) -> bytes:
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue().encode()


def write_records(records: list[MetricsRecord] | dict[str, MetricsRecord], out_dir, name: str) -> list[Path]:
    """Write ``name``.csv and ``name``.json; returns the paths."""
    recs = list(records.values()) if isinstance(records, dict) else list(records)
    if not recs:
        raise ContractError("no metrics records to write")
    out = Path(out_dir)
    csv_path, json_path = out / f"{name}.csv", out / f"{name}.json"
    atomic_write_bytes(csv_path, _csv_bytes([r.as_row() for r in recs]))
    atomic_write_bytes(json_path, (json.dumps([dataclasses.asdict(r) for r in recs], indent=2,
                                              sort_keys=True) + "\n").encode())
    return [csv_path, json_path]


def emit_plots(points: list[dict], out_dir, name: str = "tradeoff", x: str = "mean_flops", y: str = "top1",
               group: str = "label", render: bool = True) -> list[Path]:
    """Write the backing data file, then (if matplotlib is importable) the plot.

    Default axes: x = mean multiply-adds per video, y = top-1 accuracy.
    """
    if not points:
        raise ContractError("no records to plot")
    out = Path(out_dir)
    data_path = out / f"{name}.csv"
    atomic_write_bytes(data_path, _csv_bytes(points))
    written = [data_path]
    if not render:
        return written
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; wrote data only")
        return written
    fig, ax = plt.subplots(figsize=(5, 4))
    groups: dict[str, list[dict]] = {}
    for p in points:
        groups.setdefault(str(p.get(group, "")), []).append(p)
    for gname, pts in groups.items():
        pts = sorted(pts, key=lambda p: float(p[x]))
        ax.plot([float(p[x]) for p in pts], [float(p[y]) for p in pts], "o-", label=gname)
    ax.set_xlabel("multiply-adds per video" if x == "mean_flops" else x)
    ax.set_ylabel("top-1 accuracy" if y == "top1" else y)
    if len(groups) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    png = out / f"{name}.png"
    out.mkdir(parents=True, exist_ok=True)
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(png)
    return written
