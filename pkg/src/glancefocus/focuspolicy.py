"""Patch candidate grid, cropping, and the two recurrent policies.

The patch policy emits a categorical distribution over grid candidates; the
skip policy emits a keep-probability.  Both read the unpooled glance map
through a 1x1 channel compressor and a GRU cell, and both carry a value head
for PPO.  Hidden state lives with the caller, never inside the module.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError

P_KEEP_EPS = 1e-6


@dataclass(frozen=True)
class PatchGrid:
    grid_k: int
    patch_size: int
    frame_size: int
    offsets: np.ndarray  # [K, 2] (row, col), row-major over the grid

    @property
    def K(self) -> int:
        return len(self.offsets)

    def offsets_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.offsets, dtype=torch.long)

    def center_index(self) -> int:
        centers = self.offsets + self.patch_size / 2.0
        d = ((centers - self.frame_size / 2.0) ** 2).sum(axis=1)
        return int(np.argmin(d))

    def nearest_index(self, point_rc: np.ndarray) -> np.ndarray:
        """Candidate whose patch centre is closest to each point [N, 2]; ties go to the lowest index."""
        centers = self.offsets + self.patch_size / 2.0
        d = ((point_rc[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)


def build_grid(frame_size: int, patch_size: int, grid_k: int) -> PatchGrid:
    if patch_size > frame_size or patch_size < 1:
        raise ConfigError(f"patch_size {patch_size} must lie in [1, frame_size={frame_size}]")
    if grid_k < 1:
        raise ConfigError(f"grid_k must be >= 1, got {grid_k}")
    span = frame_size - patch_size
    if grid_k == 1:
        axis = np.array([span // 2])
    else:
        axis = np.rint(np.linspace(0, span, grid_k)).astype(np.int64)
    if span == 0 and grid_k > 1:
        warnings.warn("patch covers the whole frame: every grid candidate is offset (0, 0)", stacklevel=2)
    rr, cc = np.meshgrid(axis, axis, indexing="ij")
    offsets = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)
    return PatchGrid(grid_k, patch_size, frame_size, offsets)


def crop(frame: torch.Tensor, offset, patch_size: int) -> torch.Tensor:
    """Exact pixel copy of the P x P window at ``offset`` (row, col) of a [C, H, W] frame."""
    r, c = int(offset[0]), int(offset[1])
    H, W = frame.shape[-2:]
    if not (0 <= r <= H - patch_size and 0 <= c <= W - patch_size):
        raise ContractError(f"offset ({r}, {c}) puts a {patch_size}px patch outside a {H}x{W} frame")
    return frame[..., r:r + patch_size, c:c + patch_size]


def crop_batch(frames: torch.Tensor, offsets: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Crop one patch per row: frames [B, C, H, W], offsets [B, 2] -> [B, C, P, P]."""
    H, W = frames.shape[-2:]
    offsets = offsets.long()
    if offsets.numel() and (offsets.min() < 0 or offsets[:, 0].max() > H - patch_size
                            or offsets[:, 1].max() > W - patch_size):
        raise ContractError("crop offset outside the valid range")
    ar = torch.arange(patch_size)
    rows = (offsets[:, 0:1] + ar)[:, :, None]   # [B, P, 1]
    cols = (offsets[:, 1:2] + ar)[:, None, :]   # [B, 1, P]
    b = torch.arange(frames.shape[0])[:, None, None]
    out = frames.permute(0, 2, 3, 1)[b, rows, cols]  # [B, P, P, C]
    return out.permute(0, 3, 1, 2).contiguous()


class PolicyNet(nn.Module):
    """1x1 compressor -> flatten -> GRU cell -> (action head, value head)."""

    def __init__(self, in_channels: int, spatial: int, num_outputs: int, compress_channels: int = 8,
                 hidden: int = 64):
        super().__init__()
        self.in_channels, self.spatial, self.hidden = in_channels, spatial, hidden
        self.compress_channels, self.num_outputs = compress_channels, num_outputs
        self.compressor = nn.Conv2d(in_channels, compress_channels, 1)
        self.cell = nn.GRUCell(compress_channels * spatial * spatial, hidden)
        self.head = nn.Linear(hidden, num_outputs)
        self.value_head = nn.Linear(hidden, 1)

    def init_state(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.hidden, dtype=dtype)

    def forward_step(self, e_g: torch.Tensor, state: torch.Tensor):
        if e_g.dim() != 4 or tuple(e_g.shape[1:]) != (self.in_channels, self.spatial, self.spatial):
            raise ContractError(f"policy expects [B, {self.in_channels}, {self.spatial}, {self.spatial}] "
                                f"glance features, got {tuple(e_g.shape)}")
        z = F.relu(self.compressor(e_g)).flatten(1)
        h = self.cell(z, state)
        return self.head(h), self.value_head(h).squeeze(-1), h

    def _unroll(self, obs: torch.Tensor):
        B, T = obs.shape[:2]
        h = self.init_state(B, obs.dtype)
        logits, values = [], []
        for t in range(T):
            lg, v, h = self.forward_step(obs[:, t], h)
            logits.append(lg)
            values.append(v)
        return torch.stack(logits, 1), torch.stack(values, 1)


class PatchPolicy(PolicyNet):
    def __init__(self, in_channels: int, spatial: int, num_candidates: int, compress_channels: int = 8,
                 hidden: int = 64):
        super().__init__(in_channels, spatial, num_candidates, compress_channels, hidden)

    def evaluate(self, obs: torch.Tensor, actions: torch.Tensor):
        """Re-run the recurrence over obs [B, T, c, h, w]; returns (log_prob, entropy, value), each [B, T]."""
        logits, values = self._unroll(obs)
        logp_all = F.log_softmax(logits, dim=-1)
        logp = logp_all.gather(-1, actions.long().unsqueeze(-1)).squeeze(-1)
        entropy = -(logp_all.exp() * logp_all).sum(-1)
        return logp, entropy, values


class SkipPolicy(PolicyNet):
    def __init__(self, in_channels: int, spatial: int, compress_channels: int = 8, hidden: int = 64):
        super().__init__(in_channels, spatial, 1, compress_channels, hidden)

    @staticmethod
    def keep_prob(logit: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(logit).clamp(P_KEEP_EPS, 1 - P_KEEP_EPS)

    def evaluate(self, obs: torch.Tensor, actions: torch.Tensor):
        logits, values = self._unroll(obs)
        p = self.keep_prob(logits.squeeze(-1))
        b = actions.to(p.dtype)
        logp = b * torch.log(p) + (1 - b) * torch.log1p(-p)
        entropy = -(p * torch.log(p) + (1 - p) * torch.log1p(-p))
        return logp, entropy, values


def policy_step(pi: PatchPolicy, e_g: torch.Tensor, state: torch.Tensor):
    """Returns (dist [B, K], value [B], new_state)."""
    logits, value, h = pi.forward_step(e_g, state)
    return F.softmax(logits, dim=-1), value, h


def skip_step(pi_skip: SkipPolicy, e_g: torch.Tensor, state: torch.Tensor):
    """Returns (p_keep [B], value [B], new_state); the state advances whatever is later decided."""
    logit, value, h = pi_skip.forward_step(e_g, state)
    return SkipPolicy.keep_prob(logit.squeeze(-1)), value, h


def select_patch(dist: torch.Tensor, mode: str = "argmax", generator: torch.Generator | None = None):
    """Pick one candidate per row of dist [B, K]; returns (index [B], log_prob [B])."""
    if mode == "sample":
        idx = torch.multinomial(dist, 1, generator=generator).squeeze(-1)
    elif mode == "argmax":
        idx = torch.argmax(dist, dim=-1)  # first maximal index on ties
    else:
        raise ContractError(f"unknown selection mode {mode!r}")
    logp = torch.log(dist.gather(-1, idx.unsqueeze(-1)).squeeze(-1).clamp_min(1e-30))
    return idx, logp


def decide_skip(p_keep: torch.Tensor, mode: str = "sample", rho: float | None = None,
                generator: torch.Generator | None = None):
    """Returns (b [B] in {0, 1} as float, log_prob [B]).  Threshold mode keeps iff p_keep >= rho."""
    if mode == "sample":
        b = torch.bernoulli(p_keep, generator=generator)
    elif mode == "threshold":
        if rho is None or not 0.0 <= rho <= 1.0:
            raise ContractError(f"threshold mode needs rho in [0, 1], got {rho!r}")
        b = (p_keep >= rho).to(p_keep.dtype)
    else:
        raise ContractError(f"unknown skip mode {mode!r}")
    logp = torch.where(b > 0, torch.log(p_keep), torch.log1p(-p_keep))
    return b, logp
