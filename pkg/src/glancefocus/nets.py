"""Small differentiable networks: conv backbones, classifier heads, optimisers.

The glance backbone runs on every full frame, the focus backbone only on the
selected patch.  Both stop at a spatial feature map; ``pool`` turns a map into
a vector.  Classifier heads are driven one frame at a time through ``step``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import ContractError, FormatError, TrainingError

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1

_NONLIN = {"relu": nn.ReLU, "tanh": nn.Tanh, "identity": nn.Identity}


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    nonlinearity: str = "relu"


@dataclass(frozen=True)
class BackboneSpec:
    """Conv stack description; ``batch_norm`` inserts BN after every conv (folded away at inference)."""
    layers: tuple[LayerSpec, ...]
    input_channels: int = 1
    batch_norm: bool = True

    @classmethod
    def from_channels(cls, channels: Sequence[int], strides: Sequence[int], input_channels: int = 1,
                      kernel: int = 3, nonlinearity: str = "relu", batch_norm: bool = True) -> "BackboneSpec":
        if len(channels) != len(strides):
            raise ContractError("channels and strides must have equal length")
        return cls(tuple(LayerSpec(c, kernel, s, nonlinearity) for c, s in zip(channels, strides)),
                   input_channels, batch_norm)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def output_side(self, side: int) -> int:
        for layer in self.layers:
            side = (side + 2 * (layer.kernel // 2) - layer.kernel) // layer.stride + 1
        return side

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels, "batch_norm": self.batch_norm,
                "layers": [[l.out_channels, l.kernel, l.stride, l.nonlinearity] for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(tuple(LayerSpec(*l) for l in d["layers"]), d["input_channels"], d.get("batch_norm", True))


def glance_spec(channels: int = 1) -> BackboneSpec:
    return BackboneSpec.from_channels((8, 16, 16), (2, 2, 2), channels)


def focus_spec(channels: int = 1) -> BackboneSpec:
    return BackboneSpec.from_channels((16, 32, 32, 64), (1, 2, 2, 2), channels)


class ConvBackbone(nn.Module):
    """Stack of same-padded convolutions ending in a spatial feature map.

    ``input_size`` pins the accepted spatial side; ``None`` accepts any.
    """

    def __init__(self, spec: BackboneSpec, input_size: int | None = None):
        super().__init__()
        for layer in spec.layers:
            if layer.nonlinearity not in _NONLIN:
                raise ContractError(f"unknown nonlinearity {layer.nonlinearity!r}")
            if layer.stride < 1 or layer.kernel < 1 or layer.kernel % 2 == 0:
                raise ContractError("kernels must be odd and strides >= 1 so extent never grows")
        self.spec = spec
        self.input_size = input_size
        mods: list[nn.Module] = []
        c = spec.input_channels
        for layer in spec.layers:
            mods.append(nn.Conv2d(c, layer.out_channels, layer.kernel, layer.stride, layer.kernel // 2))
            if spec.batch_norm:
                mods.append(nn.BatchNorm2d(layer.out_channels))
            mods.append(_NONLIN[layer.nonlinearity]())
            c = layer.out_channels
        self.body = nn.Sequential(*mods)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ContractError(f"expected [B, {self.spec.input_channels}, H, W], got {tuple(x.shape)}")
        if self.input_size is not None and (x.shape[2] != self.input_size or x.shape[3] != self.input_size):
            raise ContractError(f"expected spatial size {self.input_size}x{self.input_size}, "
                                f"got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.body(x)


def glance(f_g: ConvBackbone, frame: torch.Tensor) -> torch.Tensor:
    """Coarse feature map [c, h, w] of one full frame [C, H, W]."""
    if frame.dim() != 3:
        raise ContractError(f"frame must be [C, H, W], got {tuple(frame.shape)}")
    return f_g(frame.unsqueeze(0))[0]


def focus(f_l: ConvBackbone, patch: torch.Tensor) -> torch.Tensor:
    """Fine feature map [c, h, w] of one patch [C, P, P]."""
    if patch.dim() != 3 or patch.shape[1] != patch.shape[2]:
        raise ContractError(f"patch must be [C, P, P], got {tuple(patch.shape)}")
    return f_l(patch.unsqueeze(0))[0]


def pool(fm: torch.Tensor) -> torch.Tensor:
    """Global average over the two trailing (spatial) dims."""
    return fm.mean(dim=(-2, -1))


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_hash(module: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class RecurrentClassifier(nn.Module):
    """GRU cell over per-frame features followed by a linear softmax head."""

    kind = "recurrent"

    def __init__(self, input_dim: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.input_dim, self.num_classes, self.hidden = input_dim, num_classes, hidden
        self.cell = nn.GRUCell(input_dim, hidden)
        self.head = nn.Linear(hidden, num_classes)

    def init_state(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.hidden, dtype=dtype)

    def step_logits(self, x: torch.Tensor, state: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.input_dim:
            raise ContractError(f"classifier expects input dim {self.input_dim}, got {x.shape[-1]}")
        h = self.cell(x, state)
        return self.head(h), h

    def step(self, x, state):
        logits, h = self.step_logits(x, state)
        return F.softmax(logits, dim=-1), h

    def step_log_probs(self, x, state):
        logits, h = self.step_logits(x, state)
        return F.log_softmax(logits, dim=-1), h


class AveragingClassifier(nn.Module):
    """Per-frame linear softmax; the sequence prediction is the running mean.

    The state carries the running sum of per-frame probabilities and the
    frame count in its last column.
    """

    kind = "averaging"

    def __init__(self, input_dim: int, num_classes: int, hidden: int = 0):
        super().__init__()
        self.input_dim, self.num_classes = input_dim, num_classes
        self.head = nn.Linear(input_dim, num_classes)

    def init_state(self, batch: int, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.num_classes + 1, dtype=dtype)

    def step(self, x, state):
        if x.shape[-1] != self.input_dim:
            raise ContractError(f"classifier expects input dim {self.input_dim}, got {x.shape[-1]}")
        frame_probs = F.softmax(self.head(x), dim=-1)
        total = state[:, :-1] + frame_probs
        count = state[:, -1:] + 1
        return total / count, torch.cat([total, count], dim=1)

    def step_log_probs(self, x, state):
        probs, state = self.step(x, state)
        return torch.log(probs.clamp_min(1e-12)), state


def classify_step(f_c, features: torch.Tensor, state: torch.Tensor):
    """One frame of the recurrent head: returns (probs, new_state)."""
    return f_c.step(features, state)


def classify_step_averaging(f_c_avg: AveragingClassifier, features: torch.Tensor, state: torch.Tensor):
    return f_c_avg.step(features, state)


def make_classifier(kind: str, input_dim: int, num_classes: int, hidden: int = 64) -> nn.Module:
    if kind == "recurrent":
        return RecurrentClassifier(input_dim, num_classes, hidden)
    if kind == "averaging":
        return AveragingClassifier(input_dim, num_classes)
    raise ContractError(f"unknown classifier kind {kind!r}")


# --- optimisation ----------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def make_sgd(params: Iterable[torch.nn.Parameter], lr: float, total_steps: int, momentum: float = 0.9,
             weight_decay: float = 1e-4):
    """Nesterov SGD with L2 and a cosine-annealed rate reaching 0 at ``total_steps``."""
    opt = torch.optim.SGD(list(params), lr=lr, momentum=momentum, nesterov=momentum > 0,
                          weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: cosine_lr(1.0, s, total_steps))
    return opt, sched


def make_adam(params, lr: float = 3e-4) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr)


def _check_grads(opt: torch.optim.Optimizer, step: int) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient at step {step}")


def sgd_step(opt: torch.optim.SGD, sched, step: int) -> None:
    _check_grads(opt, step)
    opt.step()
    if sched is not None:
        sched.step()


def adam_step(opt: torch.optim.Adam, step: int) -> None:
    _check_grads(opt, step)
    opt.step()


# --- gradient checking -----------------------------------------------------

def projected_gradcheck(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                        n_proj: int = 20, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central differences along random directions.

    ``tensors`` must be float64 leaves with ``requires_grad``; ``loss_fn`` is a
    closure returning a scalar that reads them.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    worst = 0.0
    for _ in range(n_proj):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for t, d in zip(tensors, dirs):
                t.add_(eps * d)
            up = float(loss_fn())
            for t, d in zip(tensors, dirs):
                t.sub_(2 * eps * d)
            down = float(loss_fn())
            for t, d in zip(tensors, dirs):
                t.add_(eps * d)
        numeric = (up - down) / (2 * eps)
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, err)
    return worst


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, modules: dict[str, nn.Module], meta: dict) -> str:
    arrays = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    return container.write(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, meta, arrays)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return container.read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)


def load_state(modules: dict[str, nn.Module], arrays: dict[str, np.ndarray]) -> None:
    for prefix, mod in modules.items():
        own = mod.state_dict()
        state = {}
        for name, ref in own.items():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise FormatError(f"{key}: missing from checkpoint")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise FormatError(f"{key}: shape {arr.shape} does not match model {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        mod.load_state_dict(state)
