"""Rewards, discounted returns, PPO, Stage II rollouts and threshold calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError, TrainingError
from .focuspolicy import decide_skip, policy_step, select_patch, skip_step
from .nets import adam_step, pool


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.7
    clip_epsilon: float = 0.2
    epochs_per_batch: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    batch_size: int = 32

    def validate(self) -> "PPOConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.clip_epsilon <= 0:
            raise ConfigError("clip_epsilon must be > 0")
        if self.epochs_per_batch < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs_per_batch, batch_size and learning_rate must be positive")
        return self


@dataclass(frozen=True)
class SkipRewardConfig:
    lam: float = 1e-6
    patch_size: int = 16

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def patch_reward(p_ty_selected, p_ty_baseline):
    """Confidence on the true label minus the random-crop baseline confidence."""
    return p_ty_selected - p_ty_baseline


def skip_reward(b, p_ty_keep, p_ty_drop, cfg: SkipRewardConfig):
    """Confidence gain of running f_L minus lambda*P^2 when kept; zero when skipped."""
    penalty = cfg.lam * cfg.patch_size ** 2
    if isinstance(b, torch.Tensor):
        return torch.where(b > 0, p_ty_keep - p_ty_drop - penalty, torch.zeros_like(p_ty_keep))
    return (p_ty_keep - p_ty_drop - penalty) if b else 0.0


REWARD_VARIANTS = ("patch", "confidence", "increments")


def reward_signal(kind: str, p_ty: torch.Tensor, p_ty_baseline: torch.Tensor | None = None) -> torch.Tensor:
    """Per-frame rewards [B, T] for the reward ablation.

    'patch' subtracts the random-candidate baseline; 'confidence' uses p_ty
    itself; 'increments' uses p_ty(t) - p_ty(t-1) with p_ty(0) = 0.
    """
    if kind == "patch":
        if p_ty_baseline is None:
            raise ContractError("patch reward needs baseline confidences")
        return patch_reward(p_ty, p_ty_baseline)
    if kind == "confidence":
        return p_ty.clone()
    if kind == "increments":
        prev = torch.cat([torch.zeros_like(p_ty[:, :1]), p_ty[:, :-1]], dim=1)
        return p_ty - prev
    raise ContractError(f"reward variant must be one of {REWARD_VARIANTS}, got {kind!r}")


def discounted_returns(rewards, gamma: float):
    """R_t = r_t + gamma * R_{t+1} along the last axis, by backward recursion."""
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    as_numpy = not isinstance(rewards, torch.Tensor)
    r = torch.as_tensor(np.asarray(rewards, dtype=np.float64)) if as_numpy else rewards
    out = torch.empty_like(r)
    running = torch.zeros_like(r[..., 0])
    for t in range(r.shape[-1] - 1, -1, -1):
        running = r[..., t] + gamma * running
        out[..., t] = running
    return out.numpy() if as_numpy else out


@dataclass
class PolicyBatch:
    """What PPO needs from a batch of episodes for one policy; all fields [B, T] except obs."""
    obs: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    returns: torch.Tensor
    values: torch.Tensor


@dataclass
class EpisodeTrace:
    """Per-frame records of a batch of Stage II episodes; every field is [B, T, ...]."""
    labels: torch.Tensor
    glance: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    p_ty_selected: torch.Tensor
    p_ty_baseline: torch.Tensor
    rewards: torch.Tensor
    returns: torch.Tensor
    probs: torch.Tensor
    keep: torch.Tensor | None = None
    p_keep: torch.Tensor | None = None
    skip_log_probs: torch.Tensor | None = None
    skip_values: torch.Tensor | None = None
    p_ty_keep: torch.Tensor | None = None
    p_ty_drop: torch.Tensor | None = None
    skip_rewards: torch.Tensor | None = None
    skip_returns: torch.Tensor | None = None

    @property
    def has_skip(self) -> bool:
        return self.keep is not None

    def patch_batch(self) -> PolicyBatch:
        return PolicyBatch(self.glance, self.actions, self.log_probs, self.returns, self.values)

    def skip_batch(self) -> PolicyBatch:
        if not self.has_skip:
            raise ContractError("trace has no skip records")
        return PolicyBatch(self.glance, self.keep, self.skip_log_probs, self.skip_returns, self.skip_values)

    def to_records(self, episode: int = 0) -> list[str]:
        """One text line per frame: t, action, b, r_t, R_t (plus the skip reward/return when present)."""
        lines = []
        for t in range(self.actions.shape[1]):
            b = int(self.keep[episode, t]) if self.has_skip else 1
            line = (f"t={t} action={int(self.actions[episode, t])} b={b} "
                    f"r={float(self.rewards[episode, t]):.6f} R={float(self.returns[episode, t]):.6f}")
            if self.has_skip:
                line += (f" r_skip={float(self.skip_rewards[episode, t]):.6f}"
                         f" R_skip={float(self.skip_returns[episode, t]):.6f}")
            lines.append(line)
        return lines


def ppo_update(policy, batches: list[PolicyBatch], cfg: PPOConfig, optimizer: torch.optim.Optimizer,
               step: int = 0) -> dict:
    """Clipped-surrogate PPO over ``cfg.epochs_per_batch`` full-batch passes.

    Advantages are return minus rollout-time value, normalised over the batch.
    """
    obs = torch.cat([b.obs for b in batches])
    actions = torch.cat([b.actions for b in batches])
    old_logp = torch.cat([b.log_probs for b in batches]).detach()
    returns = torch.cat([b.returns for b in batches]).detach()
    adv = returns - torch.cat([b.values for b in batches]).detach()
    if adv.numel() > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    eps = cfg.clip_epsilon
    stats = {"surrogate": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    for epoch in range(cfg.epochs_per_batch):
        logp, entropy, values = policy.evaluate(obs, actions)
        ratio = torch.exp(logp - old_logp)
        surrogate = torch.min(ratio * adv, ratio.clamp(1 - eps, 1 + eps) * adv).mean()
        value_loss = ((values - returns) ** 2).mean()
        ent = entropy.mean()
        loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * ent
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite PPO loss at update {step}, epoch {epoch}: "
                                f"surrogate={float(surrogate)}, value_loss={float(value_loss)}")
        optimizer.zero_grad()
        loss.backward()
        adam_step(optimizer, step)
        with torch.no_grad():
            stats["surrogate"].append(surrogate.item())
            stats["value_loss"].append(value_loss.item())
            stats["entropy"].append(ent.item())
            stats["clip_fraction"].append(((ratio - 1).abs() > eps).float().mean().item())
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out["first_clip_fraction"] = stats["clip_fraction"][0]
    return out


class BanditPolicy(torch.nn.Module):
    """Stateless categorical policy over ``arms`` with a scalar value estimate (PPO sanity oracle)."""

    def __init__(self, arms: int = 2):
        super().__init__()
        self.logits = torch.nn.Parameter(torch.zeros(arms))
        self.value = torch.nn.Parameter(torch.zeros(()))

    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, -1)

    def evaluate(self, obs, actions):
        logp_all = torch.log_softmax(self.logits, -1)
        logp = logp_all[actions]
        entropy = -(logp_all.exp() * logp_all).sum().expand_as(logp)
        return logp, entropy, self.value.expand_as(logp)


def run_bandit(rewards=(1.0, -1.0), updates: int = 200, cfg: PPOConfig | None = None, lr: float = 1e-2,
               seed: int = 0) -> list[float]:
    """Train a :class:`BanditPolicy` with :func:`ppo_update`; returns P(best arm) after each update."""
    cfg = (cfg or PPOConfig()).validate()
    gen = torch.Generator().manual_seed(seed)
    policy = BanditPolicy(len(rewards))
    opt = torch.optim.Adam(policy.parameters(), lr=lr)
    table = torch.tensor(rewards, dtype=torch.float32)
    best = int(table.argmax())
    history = []
    for step in range(updates):
        with torch.no_grad():
            probs = policy.probs()
            actions = torch.multinomial(probs, cfg.batch_size, replacement=True, generator=gen)
            logp = probs.log()[actions]
            values = policy.value.expand(cfg.batch_size).clone()
        batch = PolicyBatch(torch.zeros(cfg.batch_size, 1), actions, logp, table[actions], values)
        ppo_update(policy, [batch], cfg, opt, step)
        history.append(policy.probs()[best].item())
    return history


def candidate_confidences(bundle, frames_t: torch.Tensor, g_pooled_t: torch.Tensor, state: torch.Tensor,
                          labels: torch.Tensor) -> torch.Tensor:
    """p_ty for every grid candidate at one frame given the classifier state: [B, K]."""
    B, K = frames_t.shape[0], bundle.grid.K
    cand = torch.arange(K).repeat(B)
    rep = lambda x: x.repeat_interleave(K, dim=0)
    e_l = bundle.focus_at(rep(frames_t), cand)
    probs, _ = bundle.f_C.step(bundle.classifier_input(rep(g_pooled_t), e_l), rep(state))
    return probs.gather(1, rep(labels).unsqueeze(1)).reshape(B, K)


@torch.no_grad()
def rollout_stage2(bundle, frames: torch.Tensor, labels: torch.Tensor, gens: dict[str, torch.Generator],
                   use_skip: bool = False, skip_cfg: SkipRewardConfig | None = None, gamma: float = 0.7,
                   force_keep: bool = False, reward_kind: str = "patch") -> EpisodeTrace:
    """Sample one episode per video with frozen backbones and classifier.

    ``gens`` holds independent generators for the 'patch', 'baseline' and
    'skip' streams.  Counterfactual branches (random-candidate baseline,
    keep/drop) never touch the classifier state carried forward, which always
    follows the realised branch.
    """
    if use_skip and bundle.pi_skip is None:
        raise ContractError("skip rollout requested but the bundle has no skip policy")
    B, T = frames.shape[:2]
    K = bundle.grid.K
    maps = bundle.glance_maps(frames)
    g_pooled = pool(maps)
    h_pi = bundle.pi.init_state(B)
    h_c = bundle.f_C.init_state(B)
    h_s = bundle.pi_skip.init_state(B) if use_skip else None
    lab = labels.long().unsqueeze(1)
    rec = {k: [] for k in ("actions", "log_probs", "values", "p_sel", "p_base", "probs",
                           "keep", "p_keep", "skip_logp", "skip_values", "p_keep_branch", "p_drop_branch")}
    for t in range(T):
        dist, value, h_pi = policy_step(bundle.pi, maps[:, t], h_pi)
        a, logp = select_patch(dist, "sample", gens["patch"])
        a_base = torch.randint(K, (B,), generator=gens["baseline"])
        x_sel = bundle.classifier_input(g_pooled[:, t], bundle.focus_at(frames[:, t], a))
        x_base = bundle.classifier_input(g_pooled[:, t], bundle.focus_at(frames[:, t], a_base))
        probs_sel, h_sel = bundle.f_C.step(x_sel, h_c)
        probs_base, _ = bundle.f_C.step(x_base, h_c)
        rec["actions"].append(a)
        rec["log_probs"].append(logp)
        rec["values"].append(value)
        rec["p_sel"].append(probs_sel.gather(1, lab).squeeze(1))
        rec["p_base"].append(probs_base.gather(1, lab).squeeze(1))
        if use_skip:
            p_keep, s_value, h_s = skip_step(bundle.pi_skip, maps[:, t], h_s)
            if force_keep:
                b = torch.ones_like(p_keep)
                b_logp = torch.log(p_keep)
            else:
                b, b_logp = decide_skip(p_keep, "sample", generator=gens["skip"])
            x_drop = bundle.classifier_input(g_pooled[:, t], torch.zeros_like(x_sel[:, -bundle.local_dim:]))
            probs_drop, h_drop = bundle.f_C.step(x_drop, h_c)
            kept = b.bool().unsqueeze(1)
            h_c = torch.where(kept, h_sel, h_drop)
            probs_t = torch.where(kept, probs_sel, probs_drop)
            rec["keep"].append(b)
            rec["p_keep"].append(p_keep)
            rec["skip_logp"].append(b_logp)
            rec["skip_values"].append(s_value)
            rec["p_keep_branch"].append(rec["p_sel"][-1])
            rec["p_drop_branch"].append(probs_drop.gather(1, lab).squeeze(1))
        else:
            h_c, probs_t = h_sel, probs_sel
        rec["probs"].append(probs_t)
    st = lambda k: torch.stack(rec[k], 1)
    p_sel, p_base = st("p_sel"), st("p_base")
    rewards = reward_signal(reward_kind, p_sel, p_base)
    trace = EpisodeTrace(labels=labels, glance=maps, actions=st("actions"), log_probs=st("log_probs"),
                         values=st("values"), p_ty_selected=p_sel, p_ty_baseline=p_base, rewards=rewards,
                         returns=discounted_returns(rewards, gamma), probs=st("probs"))
    if use_skip:
        skip_cfg = skip_cfg or SkipRewardConfig(patch_size=bundle.cfg.patch_size)
        keep = st("keep")
        skip_rewards = skip_reward(keep, st("p_keep_branch"), st("p_drop_branch"), skip_cfg)
        trace.keep, trace.p_keep = keep, st("p_keep")
        trace.skip_log_probs, trace.skip_values = st("skip_logp"), st("skip_values")
        trace.p_ty_keep, trace.p_ty_drop = st("p_keep_branch"), st("p_drop_branch")
        trace.skip_rewards = skip_rewards
        trace.skip_returns = discounted_returns(skip_rewards, gamma)
    return trace


@dataclass(frozen=True)
class Calibration:
    rho: float
    eta: float
    kept_fraction: float
    n: int
    degenerate: bool


def calibrate_threshold(scores, eta: float) -> Calibration:
    """Smallest-coverage threshold: keep every score >= rho, with at least ``eta`` of scores kept."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("cannot calibrate a threshold on an empty score set")
    if not 0.0 < eta < 1.0:
        raise ContractError(f"eta must lie in (0, 1), got {eta}")
    n = s.size
    n_keep = min(n, max(1, math.ceil(eta * n - 1e-9)))
    rho = float(np.sort(s)[::-1][n_keep - 1])
    kept = float((s >= rho).mean())
    return Calibration(rho, eta, kept, n, degenerate=kept > eta + 1.0 / n + 1e-12)
