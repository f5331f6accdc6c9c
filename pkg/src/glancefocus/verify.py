"""Property checks shared by the ``verify`` command and the test suite."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .focuspolicy import PatchPolicy, SkipPolicy
from .model import ModelBundle
from .nets import pool, projected_gradcheck
from .pipeline import run_offline, run_online
from .rltrain import candidate_confidences, patch_reward
from .seeding import derive_seed, torch_gen
from .synthdata import DatasetSplit

GRAD_TOL = 1e-3
REWARD_TOL = 1e-6
CONSISTENCY_TOL = 1e-6


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:g})"


def _f64(module):
    return copy.deepcopy(module).double().eval()


def gradient_errors(bundle: ModelBundle, seed: int = 0, n_proj: int = 20, batch: int = 2) -> dict[str, float]:
    """Max relative error of autograd vs central differences for every trainable component (float64)."""
    gen = torch_gen(seed, "verify.grad")
    cfg = bundle.cfg
    C, H, P, T = cfg.channels, cfg.frame_size, cfg.patch_size, 3
    rand = lambda *shape: torch.rand(*shape, generator=gen, dtype=torch.float64)
    out = {}

    for name, net, side in (("f_G", bundle.f_G, H), ("f_L", bundle.f_L, P)):
        f = _f64(net)
        x = rand(batch, C, side, side).requires_grad_()
        w = torch.randn(f.spec.out_channels, generator=gen, dtype=torch.float64)
        out[name] = projected_gradcheck(lambda: (pool(f(x)) * w).sum(), [x, *f.parameters()], n_proj,
                                        seed=derive_seed(seed, f"verify.{name}"))

    f_c = _f64(bundle.f_C)
    xs = [rand(batch, bundle.f_C.input_dim).requires_grad_() for _ in range(T)]
    y = torch.randint(cfg.num_classes, (batch,), generator=gen)

    def classifier_loss():
        h = f_c.init_state(batch, torch.float64)
        total = 0
        for x in xs:
            logp, h = f_c.step_log_probs(x, h)
            total = total - logp.gather(1, y[:, None]).sum()
        return total

    out["f_C"] = projected_gradcheck(classifier_loss, [*xs, *f_c.parameters()], n_proj,
                                     seed=derive_seed(seed, "verify.f_C"))

    side, ch = bundle.glance_side, bundle.f_G.spec.out_channels
    pi_skip = bundle.pi_skip
    if pi_skip is None:
        torch.manual_seed(derive_seed(seed, "verify.pi_skip_init"))
        pi_skip = SkipPolicy(ch, side, cfg.compress_channels, cfg.hidden)
    for name, policy in (("pi", bundle.pi), ("pi_skip", pi_skip)):
        pol = _f64(policy)
        obs = torch.randn(batch, T, ch, side, side, generator=gen, dtype=torch.float64).requires_grad_()
        n_act = pol.num_outputs if isinstance(pol, PatchPolicy) else 2
        actions = torch.randint(n_act, (batch, T), generator=gen)

        def policy_loss(pol=pol, obs=obs, actions=actions):
            logp, ent, v = pol.evaluate(obs, actions)
            return logp.sum() + 0.1 * ent.sum() + 0.5 * (v ** 2).sum()

        out[name] = projected_gradcheck(policy_loss, [obs, *pol.parameters()], n_proj,
                                        seed=derive_seed(seed, f"verify.{name}"))
    return out


@torch.no_grad()
def reward_zero_mean(bundle: ModelBundle, split: DatasetSplit, n_triples: int = 50, seed: int = 0) -> float:
    """Largest |mean over all candidates| of the patch reward against the exact-expectation baseline.

    Each triple is (sample, frame t, random grid prefix for frames < t); the
    classifier state is advanced along the prefix before scoring all K candidates.
    """
    gen = torch_gen(seed, "verify.reward")
    K, T = bundle.grid.K, split.config.frames
    worst = 0.0
    for _ in range(n_triples):
        i = int(torch.randint(len(split), (1,), generator=gen))
        t = int(torch.randint(T, (1,), generator=gen))
        frames = torch.from_numpy(split.frames[i:i + 1])
        label = torch.tensor([int(split.labels[i])])
        g = pool(bundle.glance_maps(frames))
        h = bundle.f_C.init_state(1)
        for s in range(t):
            a = torch.randint(K, (1,), generator=gen)
            _, h = bundle.f_C.step(bundle.classifier_input(g[:, s], bundle.focus_at(frames[:, s], a)), h)
        conf = candidate_confidences(bundle, frames[:, t], g[:, t], h, label).double()
        rewards = patch_reward(conf, conf.mean(1, keepdim=True))
        worst = max(worst, float(rewards.mean().abs()))
    return worst


@torch.no_grad()
def online_offline_gap(bundle: ModelBundle, split: DatasetSplit, n: int = 100, rho: float | None = None) -> float:
    """Max |online p_T - offline p_T| over the first ``n`` samples."""
    frames = torch.from_numpy(split.frames[:n])
    on = run_online(bundle, frames, "learned", rho)
    off = run_offline(bundle, frames, "learned", rho)
    return float((on.final - off.final).abs().max())


def run_checks(bundle: ModelBundle, split: DatasetSplit, seed: int = 0, rho: float | None = None) -> list[Check]:
    checks = [Check(f"gradient {name}", err, GRAD_TOL) for name, err in gradient_errors(bundle, seed).items()]
    checks.append(Check("reward zero-mean", reward_zero_mean(bundle, split, seed=seed), REWARD_TOL))
    checks.append(Check("online/offline consistency", online_offline_gap(bundle, split), CONSISTENCY_TOL))
    if bundle.pi_skip is not None and rho is not None:
        checks.append(Check("online/offline consistency (skip gate)", online_offline_gap(bundle, split, rho=rho),
                            CONSISTENCY_TOL))
    return checks
