"""Three-stage training and online/offline inference.

Stage I trains f_L and f_C on random crops with f_G frozen; Stage II learns
the patch policy (and optionally the skip policy) with PPO on frozen
backbones and classifier; Stage III fine-tunes f_C (optionally f_L) under the
learned policy.  A short pretraining step gives both backbones task features
first, standing in for ImageNet initialisation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import costmodel
from .errors import ConfigError, ContractError, TrainingError
from .focuspolicy import crop_batch, decide_skip, policy_step, select_patch, skip_step
from .model import ModelBundle
from .nets import adam_step, make_adam, make_sgd, pool, sgd_step
from .rltrain import REWARD_VARIANTS, PPOConfig, SkipRewardConfig, calibrate_threshold, ppo_update, rollout_stage2
from .seeding import derive_seed, torch_gen
from .synthdata import DatasetSplit, VideoSample

log = logging.getLogger(__name__)

POLICY_VARIANTS = ("learned", "random", "central", "gaussian")


PRETRAIN_CROPS = ("glyph", "center", "random")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pretrain_epochs: int = 8
    pretrain_lr: float = 0.2
    pretrain_focus_crop: str = "glyph"
    skip_pretrain: bool = False
    stage1_epochs: int = 10
    stage1_lr_focus: float = 0.05
    stage1_lr_classifier: float = 0.05
    stage2_epochs: int = 15
    skip_lr: float = 3e-4
    stage3_epochs: int = 5
    stage3_lr: float = 0.01
    stage3_train_focus: bool = False
    stage3_sample: bool = True
    stage3_skip_rule: str = "threshold"
    stage3_keep_fractions: tuple[float, ...] = (1.0, 0.9, 0.7, 0.5)
    lam: float = 1e-6
    reward: str = "patch"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("pretrain_epochs", "stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.pretrain_focus_crop not in PRETRAIN_CROPS:
            raise ConfigError(f"pretrain_focus_crop must be one of {PRETRAIN_CROPS}, got {self.pretrain_focus_crop!r}")
        if self.stage3_skip_rule not in ("threshold", "sample"):
            raise ConfigError(f"stage3_skip_rule must be 'threshold' or 'sample', got {self.stage3_skip_rule!r}")
        if not self.stage3_keep_fractions or not all(0.0 < f <= 1.0 for f in self.stage3_keep_fractions):
            raise ConfigError("stage3_keep_fractions must be non-empty with every value in (0, 1]")
        if self.reward not in REWARD_VARIANTS:
            raise ConfigError(f"reward must be one of {REWARD_VARIANTS}, got {self.reward!r}")
        return self


def _to_torch(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).float() / 255.0


def _batches(n: int, batch_size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size].numpy()


def _check_loss(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{stage}: non-finite loss at step {step}")


def _freeze(*modules: nn.Module) -> None:
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


def _unfreeze(*modules: nn.Module) -> None:
    for m in modules:
        m.train()
        for p in m.parameters():
            p.requires_grad_(True)


def _mark(bundle: ModelBundle, stage: str) -> None:
    bundle.meta["stage"] = stage
    bundle.meta.setdefault("lineage", []).append(stage)


def random_offsets(n: int, frame_size: int, patch_size: int, gen: torch.Generator) -> torch.Tensor:
    """Uniform over every in-bounds pixel offset (not restricted to the grid)."""
    return torch.randint(0, frame_size - patch_size + 1, (n, 2), generator=gen)


def glyph_offsets(track: torch.Tensor, frame_size: int, patch_size: int, glyph_size: int,
                  gen: torch.Generator) -> torch.Tensor:
    """Offsets of patches that fully contain the glyph at ``track`` [n, 2], jittered uniformly."""
    slack = max(patch_size - glyph_size, 0)
    jitter = torch.randint(0, slack + 1, track.shape, generator=gen)
    return (track - jitter).clamp(0, frame_size - patch_size)


def pretrain_offsets(kind: str, track: torch.Tensor, frame_size: int, patch_size: int, glyph_size: int,
                     gen: torch.Generator) -> torch.Tensor:
    if kind == "glyph":
        return glyph_offsets(track, frame_size, patch_size, glyph_size, gen)
    if kind == "center":
        return torch.full(track.shape, (frame_size - patch_size) // 2, dtype=torch.long)
    return random_offsets(track.shape[0], frame_size, patch_size, gen)


def sequence_loss(bundle: ModelBundle, g_pooled: torch.Tensor, l_pooled: torch.Tensor, labels: torch.Tensor,
                  keep: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over t of cross-entropy of p_t against the video label."""
    B, T = g_pooled.shape[:2]
    h = bundle.f_C.init_state(B)
    total = 0.0
    for t in range(T):
        x = bundle.classifier_input(g_pooled[:, t], l_pooled[:, t], None if keep is None else keep[:, t])
        logp, h = bundle.f_C.step_log_probs(x, h)
        total = total + F.nll_loss(logp, labels)
    return total / T


# --- pretraining -------------------------------------------------------------

@dataclass
class PretrainResult:
    bundle: ModelBundle
    glance_head: nn.Linear
    focus_head: nn.Linear
    history: list[dict] = field(default_factory=list)


def pretrain(bundle: ModelBundle, split: DatasetSplit, cfg: TrainConfig, seed: int) -> PretrainResult:
    """Train f_G on full frames and f_L on patches, each with a throwaway linear head.

    Patches follow ``cfg.pretrain_focus_crop``: "glyph" crops around the ground-truth glyph (the
    synthetic stand-in for object-centric pretraining data), "center" takes the middle patch,
    "random" any in-bounds offset.
    """
    cfg.validate()
    nc = bundle.cfg.num_classes
    torch.manual_seed(derive_seed(seed, "init.pretrain_heads"))
    g_head, l_head = nn.Linear(bundle.glance_dim, nc), nn.Linear(bundle.local_dim, nc)
    history: list[dict] = []
    if cfg.skip_pretrain or cfg.pretrain_epochs == 0:
        _mark(bundle, "pretrain-skipped")
        return PretrainResult(bundle, g_head, l_head, history)
    _unfreeze(bundle.f_G, bundle.f_L, g_head, l_head)
    steps = cfg.pretrain_epochs * -(-len(split) // cfg.batch_size)
    opt, sched = make_sgd([*bundle.f_G.parameters(), *bundle.f_L.parameters(), *g_head.parameters(),
                           *l_head.parameters()], cfg.pretrain_lr, steps, cfg.momentum, cfg.weight_decay)
    shuffle, crops = torch_gen(seed, "pretrain.shuffle"), torch_gen(seed, "pretrain.crop")
    labels_all = torch.from_numpy(split.labels)
    P, H = bundle.cfg.patch_size, bundle.cfg.frame_size
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        g_loss_sum = l_loss_sum = 0.0
        nb = 0
        for idx in _batches(len(split), cfg.batch_size, shuffle):
            frames = _to_torch(split.pixels[idx])
            B, T = frames.shape[:2]
            flat = frames.reshape(B * T, *frames.shape[2:])
            y = labels_all[idx].repeat_interleave(T)
            g_loss = F.cross_entropy(g_head(pool(bundle.f_G(flat))), y)
            track = torch.from_numpy(split.glyph_track[idx].reshape(B * T, 2)).long()
            offs = pretrain_offsets(cfg.pretrain_focus_crop, track, H, P, split.config.glyph_size, crops)
            patches = crop_batch(flat, offs, P)
            l_loss = F.cross_entropy(l_head(pool(bundle.f_L(patches))), y)
            loss = g_loss + l_loss
            _check_loss(loss, "pretrain", step)
            opt.zero_grad()
            loss.backward()
            sgd_step(opt, sched, step)
            step += 1
            g_loss_sum += g_loss.item()
            l_loss_sum += l_loss.item()
            nb += 1
        history.append({"epoch": epoch, "glance_loss": g_loss_sum / nb, "focus_loss": l_loss_sum / nb})
        log.info("pretrain epoch %d: %s", epoch, history[-1])
    _freeze(g_head, l_head)
    bundle.eval()
    _mark(bundle, "pretrain")
    return PretrainResult(bundle, g_head, l_head, history)


@torch.no_grad()
def glance_head_accuracy(bundle: ModelBundle, head: nn.Linear, split: DatasetSplit, batch: int = 64) -> float:
    """Per-frame accuracy of f_G + linear head."""
    correct = total = 0
    for idx in _batches(len(split), batch, None):
        frames = _to_torch(split.pixels[idx])
        B, T = frames.shape[:2]
        logits = head(pool(bundle.f_G(frames.reshape(B * T, *frames.shape[2:]))))
        y = torch.from_numpy(split.labels[idx]).repeat_interleave(T)
        correct += int((logits.argmax(1) == y).sum())
        total += B * T
    return correct / total


# --- stage I -------------------------------------------------------------------

def stage1_warmup(bundle: ModelBundle, split: DatasetSplit, cfg: TrainConfig, seed: int) -> list[dict]:
    """Train f_L and f_C on uniformly random crops; f_G stays frozen."""
    cfg.validate()
    _freeze(bundle.f_G, bundle.pi)
    if bundle.pi_skip is not None:
        _freeze(bundle.pi_skip)
    _unfreeze(bundle.f_L, bundle.f_C)
    steps = max(1, cfg.stage1_epochs * -(-len(split) // cfg.batch_size))
    opt, sched = make_sgd([{"params": bundle.f_L.parameters(), "lr": cfg.stage1_lr_focus},
                           {"params": bundle.f_C.parameters(), "lr": cfg.stage1_lr_classifier}],
                          cfg.stage1_lr_classifier, steps, cfg.momentum, cfg.weight_decay)
    shuffle, crops = torch_gen(seed, "stage1.shuffle"), torch_gen(seed, "stage1.crop")
    labels_all = torch.from_numpy(split.labels)
    P, H = bundle.cfg.patch_size, bundle.cfg.frame_size
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.stage1_epochs):
        loss_sum, nb, first = 0.0, 0, None
        for idx in _batches(len(split), cfg.batch_size, shuffle):
            frames = _to_torch(split.pixels[idx])
            B, T = frames.shape[:2]
            flat = frames.reshape(B * T, *frames.shape[2:])
            with torch.no_grad():
                g_pooled = pool(bundle.f_G(flat)).reshape(B, T, -1)
            track = torch.from_numpy(split.glyph_track[idx].reshape(B * T, 2)).long()
            offs = pretrain_offsets(cfg.pretrain_focus_crop, track, H, P, split.config.glyph_size, crops)
            patches = crop_batch(flat, offs, P)
            l_pooled = pool(bundle.f_L(patches)).reshape(B, T, -1)
            loss = sequence_loss(bundle, g_pooled, l_pooled, labels_all[idx])
            _check_loss(loss, "stage1", step)
            opt.zero_grad()
            loss.backward()
            sgd_step(opt, sched, step)
            step += 1
            first = loss.item() if first is None else first
            loss_sum += loss.item()
            nb += 1
        history.append({"epoch": epoch, "loss": loss_sum / nb, "first_batch_loss": first})
        log.info("stage1 epoch %d: %s", epoch, history[-1])
    bundle.eval()
    _mark(bundle, "stage1")
    return history


# --- stage II ------------------------------------------------------------------

def stage2_policy_learning(bundle: ModelBundle, split: DatasetSplit, cfg: TrainConfig, ppo: PPOConfig,
                           seed: int) -> list[dict]:
    """PPO on the patch policy (and the skip policy, when present) with everything else frozen."""
    cfg.validate()
    ppo.validate()
    frozen = [bundle.f_G, bundle.f_L, bundle.f_C]
    _freeze(*frozen)
    before = [{k: v.clone() for k, v in m.state_dict().items()} for m in frozen]
    use_skip = bundle.pi_skip is not None
    _unfreeze(bundle.pi)
    pi_opt = make_adam(bundle.pi.parameters(), ppo.learning_rate)
    skip_opt = None
    if use_skip:
        _unfreeze(bundle.pi_skip)
        skip_opt = make_adam(bundle.pi_skip.parameters(), cfg.skip_lr)
    gens = {k: torch_gen(seed, f"stage2.{k}") for k in ("patch", "baseline", "skip")}
    shuffle = torch_gen(seed, "stage2.shuffle")
    skip_cfg = SkipRewardConfig(cfg.lam, bundle.cfg.patch_size)
    labels_all = torch.from_numpy(split.labels)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.stage2_epochs):
        acc = {"return": 0.0, "reward": 0.0, "accuracy": 0.0, "keep_rate": 0.0, "skip_return": 0.0, "n": 0}
        for idx in _batches(len(split), ppo.batch_size, shuffle):
            frames, labels = _to_torch(split.pixels[idx]), labels_all[idx]
            trace = rollout_stage2(bundle, frames, labels, gens, use_skip, skip_cfg, ppo.gamma,
                                   reward_kind=cfg.reward)
            bundle.pi.train()
            ppo_update(bundle.pi, [trace.patch_batch()], ppo, pi_opt, step)
            if use_skip:
                ppo_update(bundle.pi_skip, [trace.skip_batch()], ppo, skip_opt, step)
            step += 1
            B = len(idx)
            acc["return"] += float(trace.returns[:, 0].sum())
            acc["reward"] += float(trace.rewards.mean(1).sum())
            acc["accuracy"] += float((trace.probs[:, -1].argmax(1) == labels).sum())
            if use_skip:
                acc["keep_rate"] += float(trace.keep.mean(1).sum())
                acc["skip_return"] += float(trace.skip_returns[:, 0].sum())
            acc["n"] += B
        n = acc.pop("n")
        row = {"epoch": epoch, **{k: v / n for k, v in acc.items()}}
        if not use_skip:
            row.pop("keep_rate")
            row.pop("skip_return")
        history.append(row)
        log.info("stage2 epoch %d: %s", epoch, row)
    for m, state in zip(frozen, before):
        for k, v in m.state_dict().items():
            if not torch.equal(v, state[k]):
                raise TrainingError(f"stage2 modified frozen parameter {k}")
    bundle.eval()
    _freeze(bundle.pi)
    if use_skip:
        _freeze(bundle.pi_skip)
    _mark(bundle, "stage2")
    return history


# --- stage III -----------------------------------------------------------------

@torch.no_grad()
def _policy_actions(bundle: ModelBundle, maps: torch.Tensor, sample: bool, gen: torch.Generator | None):
    B, T = maps.shape[:2]
    h = bundle.pi.init_state(B)
    actions = []
    for t in range(T):
        dist, _, h = policy_step(bundle.pi, maps[:, t], h)
        a, _ = select_patch(dist, "sample" if sample else "argmax", gen)
        actions.append(a)
    return torch.stack(actions, 1)


@torch.no_grad()
def _skip_scores(bundle: ModelBundle, maps: torch.Tensor) -> torch.Tensor:
    B, T = maps.shape[:2]
    h = bundle.pi_skip.init_state(B)
    scores = []
    for t in range(T):
        p, _, h = skip_step(bundle.pi_skip, maps[:, t], h)
        scores.append(p)
    return torch.stack(scores, 1)


def stage3_keep(scores: torch.Tensor, rule: str, fraction: float, gen: torch.Generator | None) -> torch.Tensor:
    """Keep mask [B, T] for Stage III from skip-gate scores.

    "threshold" keeps frames at or above the batch's ``fraction`` quantile, the
    same rule calibration applies at test time; "sample" draws b ~ Bernoulli(p).
    """
    if rule == "sample":
        return decide_skip(scores, "sample", generator=gen)[0]
    if fraction >= 1.0:
        return torch.ones_like(scores)
    rho = calibrate_threshold(scores.reshape(-1).numpy(), fraction).rho
    return (scores >= rho).to(scores.dtype)


def stage3_finetune(bundle: ModelBundle, split: DatasetSplit, cfg: TrainConfig, seed: int) -> list[dict]:
    """Fine-tune f_C (and f_L if configured) on patches chosen by the learned policy.

    With a skip gate, minibatches cycle through ``cfg.stage3_keep_fractions`` so
    f_C sees the zero-filled inputs of every deployed keep fraction.
    """
    cfg.validate()
    _freeze(bundle.f_G, bundle.pi, bundle.f_L)
    if bundle.pi_skip is not None:
        _freeze(bundle.pi_skip)
    trainable = [bundle.f_C] + ([bundle.f_L] if cfg.stage3_train_focus else [])
    _unfreeze(*trainable)
    steps = max(1, cfg.stage3_epochs * -(-len(split) // cfg.batch_size))
    opt, sched = make_sgd([p for m in trainable for p in m.parameters()], cfg.stage3_lr, steps,
                          cfg.momentum, cfg.weight_decay)
    shuffle, act_gen = torch_gen(seed, "stage3.shuffle"), torch_gen(seed, "stage3.actions")
    skip_gen = torch_gen(seed, "stage3.skip")
    labels_all = torch.from_numpy(split.labels)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.stage3_epochs):
        loss_sum, nb = 0.0, 0
        for idx in _batches(len(split), cfg.batch_size, shuffle):
            frames = _to_torch(split.pixels[idx])
            B, T = frames.shape[:2]
            with torch.no_grad():
                maps = bundle.glance_maps(frames)
                actions = _policy_actions(bundle, maps, cfg.stage3_sample, act_gen)
                keep = None
                if bundle.pi_skip is not None:
                    fraction = cfg.stage3_keep_fractions[step % len(cfg.stage3_keep_fractions)]
                    keep = stage3_keep(_skip_scores(bundle, maps), cfg.stage3_skip_rule, fraction, skip_gen)
            offsets = bundle.grid.offsets_tensor()[actions.reshape(-1)]
            patches = crop_batch(frames.reshape(B * T, *frames.shape[2:]), offsets, bundle.cfg.patch_size)
            if cfg.stage3_train_focus:
                l_pooled = pool(bundle.f_L(patches)).reshape(B, T, -1)
            else:
                with torch.no_grad():
                    l_pooled = pool(bundle.f_L(patches)).reshape(B, T, -1)
            loss = sequence_loss(bundle, pool(maps), l_pooled, labels_all[idx], keep)
            _check_loss(loss, "stage3", step)
            opt.zero_grad()
            loss.backward()
            sgd_step(opt, sched, step)
            step += 1
            loss_sum += loss.item()
            nb += 1
        history.append({"epoch": epoch, "loss": loss_sum / nb})
        log.info("stage3 epoch %d: %s", epoch, history[-1])
    bundle.eval()
    _freeze(*trainable)
    _mark(bundle, "stage3")
    return history


# --- inference -----------------------------------------------------------------

@dataclass
class InferenceResult:
    probs: torch.Tensor          # online: [B, T, nc]; offline: [B, 1, nc] (p_T only)
    actions: torch.Tensor        # [B, T]
    keep: torch.Tensor           # [B, T] bool
    p_keep: torch.Tensor | None  # [B, T]
    ledgers: list[costmodel.CostLedger]

    @property
    def final(self) -> torch.Tensor:
        return self.probs[:, -1]


def fixed_actions(bundle: ModelBundle, variant: str, B: int, T: int, gen: torch.Generator | None) -> torch.Tensor:
    """Actions of a non-learned policy variant, [B, T]."""
    grid = bundle.grid
    if variant == "random":
        return torch.randint(grid.K, (B, T), generator=gen)
    if variant == "central":
        return torch.full((B, T), grid.center_index(), dtype=torch.long)
    if variant == "gaussian":
        H = bundle.cfg.frame_size
        pts = H / 2.0 + (H / 4.0) * torch.randn(B * T, 2, generator=gen, dtype=torch.float64)
        return torch.from_numpy(grid.nearest_index(pts.numpy())).reshape(B, T)
    raise ContractError(f"unknown policy variant {variant!r}")


def _check_inference_args(bundle: ModelBundle, frames: torch.Tensor, variant: str, rho: float | None):
    if variant not in POLICY_VARIANTS:
        raise ContractError(f"policy variant must be one of {POLICY_VARIANTS}, got {variant!r}")
    c = bundle.cfg
    if frames.dim() != 5 or tuple(frames.shape[2:]) != (c.channels, c.frame_size, c.frame_size):
        raise ContractError(f"frames must be [B, T, {c.channels}, {c.frame_size}, {c.frame_size}], "
                            f"got {tuple(frames.shape)}")
    if rho is not None and bundle.pi_skip is None:
        raise ConfigError("a skip threshold was given but the bundle has no skip policy")


def _ledgers(bundle, keep: torch.Tensor, variant: str, use_skip: bool) -> list[costmodel.CostLedger]:
    costs = bundle.component_costs()
    return [costmodel.episode_cost(k.tolist(), costs, use_policy=variant == "learned", use_skip=use_skip)
            for k in keep]


@torch.no_grad()
def run_online(bundle: ModelBundle, frames: torch.Tensor, variant: str = "learned", rho: float | None = None,
               gen: torch.Generator | None = None) -> InferenceResult:
    """Process frames strictly in order, emitting p_t after each frame.

    The skip gate is active iff ``rho`` is given; skipped frames never reach
    f_L and feed zeros in place of its features.
    """
    _check_inference_args(bundle, frames, variant, rho)
    B, T = frames.shape[:2]
    use_skip = rho is not None
    fixed = None if variant == "learned" else fixed_actions(bundle, variant, B, T, gen)
    h_pi, h_c = bundle.pi.init_state(B), bundle.f_C.init_state(B)
    h_s = bundle.pi_skip.init_state(B) if use_skip else None
    probs, actions, keeps, p_keeps = [], [], [], []
    for t in range(T):
        e_g = bundle.f_G(frames[:, t])
        g_pooled = pool(e_g)
        if fixed is None:
            dist, _, h_pi = policy_step(bundle.pi, e_g, h_pi)
            a, _ = select_patch(dist, "argmax")
        else:
            a = fixed[:, t]
        if use_skip:
            p_keep, _, h_s = skip_step(bundle.pi_skip, e_g, h_s)
            b, _ = decide_skip(p_keep, "threshold", rho)
            keep = b.bool()
            p_keeps.append(p_keep)
        else:
            keep = torch.ones(B, dtype=torch.bool)
        l_pooled = torch.zeros(B, bundle.local_dim)
        if keep.any():
            l_pooled[keep] = bundle.focus_at(frames[keep, t], a[keep])
        p, h_c = bundle.f_C.step(bundle.classifier_input(g_pooled, l_pooled, keep), h_c)
        probs.append(p)
        actions.append(a)
        keeps.append(keep)
    keep = torch.stack(keeps, 1)
    return InferenceResult(torch.stack(probs, 1), torch.stack(actions, 1), keep,
                           torch.stack(p_keeps, 1) if use_skip else None,
                           _ledgers(bundle, keep, variant, use_skip))


@torch.no_grad()
def run_offline(bundle: ModelBundle, frames: torch.Tensor, variant: str = "learned", rho: float | None = None,
                gen: torch.Generator | None = None) -> InferenceResult:
    """Whole-video inference returning only p_T.

    All glance passes run as one batch, then the policy recurrences, then
    every kept patch goes through f_L in one batch, then the classifier.
    """
    _check_inference_args(bundle, frames, variant, rho)
    B, T = frames.shape[:2]
    use_skip = rho is not None
    maps = bundle.glance_maps(frames)
    g_pooled = pool(maps)
    if variant == "learned":
        actions = _policy_actions(bundle, maps, sample=False, gen=None)
    else:
        actions = fixed_actions(bundle, variant, B, T, gen)
    p_keep = None
    if use_skip:
        p_keep = _skip_scores(bundle, maps)
        keep = decide_skip(p_keep, "threshold", rho)[0].bool()
    else:
        keep = torch.ones(B, T, dtype=torch.bool)
    l_pooled = torch.zeros(B, T, bundle.local_dim)
    if keep.any():
        bi, ti = keep.nonzero(as_tuple=True)
        offsets = bundle.grid.offsets_tensor()[actions[bi, ti]]
        patches = crop_batch(frames[bi, ti], offsets, bundle.cfg.patch_size)
        l_pooled[bi, ti] = pool(bundle.f_L(patches))
    h = bundle.f_C.init_state(B)
    for t in range(T):
        p, h = bundle.f_C.step(bundle.classifier_input(g_pooled[:, t], l_pooled[:, t], keep[:, t]), h)
    return InferenceResult(p.unsqueeze(1), actions, keep, p_keep, _ledgers(bundle, keep, variant, use_skip))


def _check_skip_flags(bundle: ModelBundle, skip_gate: bool, rho: float | None) -> float | None:
    if not skip_gate:
        return None
    if bundle.pi_skip is None:
        raise ConfigError("skip gate requested but the bundle has no skip policy")
    if rho is None:
        raise ConfigError("skip gate requested but no calibrated threshold rho was supplied")
    return rho


def infer_online(bundle: ModelBundle, sample: VideoSample, skip_gate: bool = False, rho: float | None = None):
    """Per-frame predictions [T, nc] and the cost ledger for one video."""
    rho = _check_skip_flags(bundle, skip_gate, rho)
    res = run_online(bundle, torch.from_numpy(sample.frames).unsqueeze(0), rho=rho)
    return res.probs[0], res.ledgers[0]


def infer_offline(bundle: ModelBundle, sample: VideoSample, skip_gate: bool = False, rho: float | None = None):
    """Final prediction p_T [nc] and the cost ledger for one video."""
    rho = _check_skip_flags(bundle, skip_gate, rho)
    res = run_offline(bundle, torch.from_numpy(sample.frames).unsqueeze(0), rho=rho)
    return res.final[0], res.ledgers[0]


@torch.no_grad()
def skip_scores(bundle: ModelBundle, split: DatasetSplit, batch: int = 64) -> np.ndarray:
    """Keep-probabilities of every frame of ``split`` (independent of any skip decision)."""
    if bundle.pi_skip is None:
        raise ConfigError("bundle has no skip policy")
    out = []
    for idx in _batches(len(split), batch, None):
        out.append(_skip_scores(bundle, bundle.glance_maps(_to_torch(split.pixels[idx]))).numpy())
    return np.concatenate(out).ravel()
