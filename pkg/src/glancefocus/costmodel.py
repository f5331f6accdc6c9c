"""Multiply-add accounting.

Convention: one multiply-add per weight use.  Conv = out_h*out_w*out_c*in_c*k^2,
linear = in*out, GRU cell = three gates' input and recurrent products.  Bias
adds, nonlinearities and pooling are free.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

from .errors import ContractError
from .nets import AveragingClassifier, BackboneSpec, RecurrentClassifier

COMPONENTS = ("f_G", "f_L", "pi", "pi_skip", "f_C")


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class GRU:
    in_features: int
    hidden: int


Layer = Union[Conv, Linear, GRU]


def _conv_out(side: int, kernel: int, stride: int) -> int:
    return (side + 2 * (kernel // 2) - kernel) // stride + 1


def count_flops(spec: BackboneSpec | Sequence[Layer], input_shape: Sequence[int]) -> int:
    """Multiply-adds of one forward pass.

    ``input_shape`` is (C, H, W) for conv stacks and (features,) for purely
    dense stacks.
    """
    if isinstance(spec, BackboneSpec):
        layers: list[Layer] = []
        c = spec.input_channels
        for l in spec.layers:
            layers.append(Conv(c, l.out_channels, l.kernel, l.stride))
            c = l.out_channels
    else:
        layers = list(spec)
    shape = tuple(input_shape)
    total = 0
    for layer in layers:
        if isinstance(layer, Conv):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ContractError(f"conv expects ({layer.in_channels}, H, W) input, got {shape}")
            oh, ow = _conv_out(shape[1], layer.kernel, layer.stride), _conv_out(shape[2], layer.kernel, layer.stride)
            total += oh * ow * layer.out_channels * layer.in_channels * layer.kernel ** 2
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, Linear):
            n = 1
            for s in shape:
                n *= s
            if n != layer.in_features:
                raise ContractError(f"linear expects {layer.in_features} inputs, got shape {shape}")
            total += layer.in_features * layer.out_features
            shape = (layer.out_features,)
        elif isinstance(layer, GRU):
            if shape != (layer.in_features,):
                raise ContractError(f"GRU expects ({layer.in_features},) input, got {shape}")
            total += 3 * (layer.in_features * layer.hidden + layer.hidden * layer.hidden)
            shape = (layer.hidden,)
        else:
            raise ContractError(f"unknown layer type {type(layer).__name__}")
    return total


def patch_cost_ratio(patch_size: int, frame_size: int, spec: BackboneSpec) -> float:
    if patch_size > frame_size:
        raise ContractError("patch_size must not exceed frame_size")
    c = spec.input_channels
    return count_flops(spec, (c, patch_size, patch_size)) / count_flops(spec, (c, frame_size, frame_size))


def policy_flops(policy) -> int:
    """Inference cost of one policy step (the value head is training-only and not charged)."""
    s = policy.spatial
    return count_flops([Conv(policy.in_channels, policy.compress_channels, 1)], (policy.in_channels, s, s)) \
        + count_flops([GRU(policy.compress_channels * s * s, policy.hidden), Linear(policy.hidden, policy.num_outputs)],
                      (policy.compress_channels * s * s,))


def classifier_flops(f_c) -> int:
    if isinstance(f_c, RecurrentClassifier):
        return count_flops([GRU(f_c.input_dim, f_c.hidden), Linear(f_c.hidden, f_c.num_classes)], (f_c.input_dim,))
    if isinstance(f_c, AveragingClassifier):
        return count_flops([Linear(f_c.input_dim, f_c.num_classes)], (f_c.input_dim,))
    raise ContractError(f"unknown classifier {type(f_c).__name__}")


@dataclass(frozen=True)
class ComponentCosts:
    """Per-invocation multiply-adds of each component."""
    f_G: int
    f_L: int
    pi: int
    pi_skip: int
    f_C: int


@dataclass
class CostLedger:
    f_G: int = 0
    f_L: int = 0
    pi: int = 0
    pi_skip: int = 0
    f_C: int = 0
    per_frame: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.f_G + self.f_L + self.pi + self.pi_skip + self.f_C

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in COMPONENTS}
        d["total"] = self.total
        return d

    def __add__(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(*(getattr(self, k) + getattr(other, k) for k in COMPONENTS),
                          per_frame=self.per_frame + other.per_frame)


def episode_cost(keep: Sequence[bool], costs: ComponentCosts, use_policy: bool = True,
                 use_skip: bool = False) -> CostLedger:
    """f_G, the policies and f_C are charged every frame; f_L only on kept frames."""
    ledger = CostLedger()
    for t, k in enumerate(keep):
        row = {"t": t, "f_G": costs.f_G, "f_L": costs.f_L if k else 0,
               "pi": costs.pi if use_policy else 0, "pi_skip": costs.pi_skip if use_skip else 0,
               "f_C": costs.f_C}
        for name in COMPONENTS:
            setattr(ledger, name, getattr(ledger, name) + row[name])
        ledger.per_frame.append(row)
    return ledger
