"""The bundle of networks that make up one recognition model."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import costmodel, nets
from .errors import ConfigError, FormatError
from .focuspolicy import PatchGrid, PatchPolicy, SkipPolicy, build_grid, crop_batch
from .seeding import derive_seed


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    channels: int = 1
    frame_size: int = 64
    patch_size: int = 16
    grid_k: int = 5
    glance_channels: tuple[int, ...] = (8, 16, 16)
    glance_strides: tuple[int, ...] = (2, 2, 2)
    focus_channels: tuple[int, ...] = (16, 32, 32, 64)
    focus_strides: tuple[int, ...] = (1, 2, 2, 2)
    batch_norm: bool = True
    hidden: int = 64
    compress_channels: int = 8
    classifier: str = "recurrent"
    reuse_glance: bool = True
    skip_gate: bool = False

    def glance_spec(self) -> nets.BackboneSpec:
        return nets.BackboneSpec.from_channels(self.glance_channels, self.glance_strides, self.channels,
                                             batch_norm=self.batch_norm)

    def focus_spec(self) -> nets.BackboneSpec:
        return nets.BackboneSpec.from_channels(self.focus_channels, self.focus_strides, self.channels,
                                             batch_norm=self.batch_norm)

    def validate(self) -> "ModelConfig":
        if self.classifier not in ("recurrent", "averaging"):
            raise ConfigError(f"classifier must be 'recurrent' or 'averaging', got {self.classifier!r}")
        if not 1 <= self.patch_size <= self.frame_size:
            raise ConfigError(f"patch_size must lie in [1, {self.frame_size}]")
        if self.skip_gate and not self.reuse_glance:
            raise ConfigError("skip gate requires glance-feature reuse: a skipped frame would give the "
                              "classifier no input at all")
        side = self.glance_spec().output_side(self.frame_size)
        if side < self.grid_k:
            raise ConfigError(f"glance map side {side} is smaller than the {self.grid_k}x{self.grid_k} grid")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class ModelBundle:
    """f_G, f_L, f_C, the patch policy and (optionally) the skip policy, plus the grid."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        self.seed = seed
        g_spec, l_spec = cfg.glance_spec(), cfg.focus_spec()
        torch.manual_seed(derive_seed(seed, "init.f_G"))
        self.f_G = nets.ConvBackbone(g_spec, cfg.frame_size)
        torch.manual_seed(derive_seed(seed, "init.f_L"))
        self.f_L = nets.ConvBackbone(l_spec, cfg.patch_size)
        self.grid: PatchGrid = build_grid(cfg.frame_size, cfg.patch_size, cfg.grid_k)
        self.glance_side = g_spec.output_side(cfg.frame_size)
        in_dim = (g_spec.out_channels if cfg.reuse_glance else 0) + l_spec.out_channels
        torch.manual_seed(derive_seed(seed, "init.f_C"))
        self.f_C = nets.make_classifier(cfg.classifier, in_dim, cfg.num_classes, cfg.hidden)
        torch.manual_seed(derive_seed(seed, "init.pi"))
        self.pi = PatchPolicy(g_spec.out_channels, self.glance_side, self.grid.K, cfg.compress_channels, cfg.hidden)
        self.pi_skip: SkipPolicy | None = None
        if cfg.skip_gate:
            torch.manual_seed(derive_seed(seed, "init.pi_skip"))
            self.pi_skip = SkipPolicy(g_spec.out_channels, self.glance_side, cfg.compress_channels, cfg.hidden)
        self.meta: dict = {"stage": "init", "lineage": []}

    def modules(self) -> dict[str, nn.Module]:
        mods = {"f_G": self.f_G, "f_L": self.f_L, "f_C": self.f_C, "pi": self.pi}
        if self.pi_skip is not None:
            mods["pi_skip"] = self.pi_skip
        return mods

    def hashes(self) -> dict[str, str]:
        return {k: nets.param_hash(m) for k, m in self.modules().items()}

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self

    @property
    def local_dim(self) -> int:
        return self.f_L.out_channels

    @property
    def glance_dim(self) -> int:
        return self.f_G.out_channels

    # -- forward helpers -----------------------------------------------------

    def glance_maps(self, frames: torch.Tensor) -> torch.Tensor:
        """frames [B, T, C, H, W] -> glance maps [B, T, c, h, w] in one batched pass."""
        B, T = frames.shape[:2]
        maps = self.f_G(frames.reshape(B * T, *frames.shape[2:]))
        return maps.reshape(B, T, *maps.shape[1:])

    def focus_at(self, frames_t: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Pooled local features [B, c_L] of the grid candidates ``actions`` in frames_t [B, C, H, W]."""
        offsets = self.grid.offsets_tensor()[actions]
        return nets.pool(self.f_L(crop_batch(frames_t, offsets, self.cfg.patch_size)))

    def classifier_input(self, g_pooled: torch.Tensor, l_pooled: torch.Tensor,
                         keep: torch.Tensor | None = None) -> torch.Tensor:
        if keep is not None:
            l_pooled = l_pooled * keep.to(l_pooled.dtype).unsqueeze(-1)
        if not self.cfg.reuse_glance:
            return l_pooled
        return torch.cat([g_pooled, l_pooled], dim=-1)

    def component_costs(self) -> costmodel.ComponentCosts:
        c, H, P = self.cfg.channels, self.cfg.frame_size, self.cfg.patch_size
        return costmodel.ComponentCosts(
            f_G=costmodel.count_flops(self.f_G.spec, (c, H, H)),
            f_L=costmodel.count_flops(self.f_L.spec, (c, P, P)),
            pi=costmodel.policy_flops(self.pi),
            pi_skip=costmodel.policy_flops(self.pi_skip) if self.pi_skip is not None else 0,
            f_C=costmodel.classifier_flops(self.f_C),
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path, **extra_meta) -> str:
        meta = {"model": self.cfg.to_dict(), "seed": self.seed, **self.meta, **extra_meta}
        return nets.save_checkpoint(path, self.modules(), meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        meta, arrays = nets.read_checkpoint(path)
        try:
            cfg = ModelConfig.from_dict(meta["model"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"model: malformed checkpoint metadata ({exc})") from None
        bundle = cls(cfg, int(meta.get("seed", 0)))
        nets.load_state(bundle.modules(), arrays)
        bundle.meta = {k: v for k, v in meta.items() if k not in ("model", "seed")}
        return bundle

    def clone(self) -> "ModelBundle":
        other = ModelBundle(self.cfg, self.seed)
        for name, mod in self.modules().items():
            other.modules()[name].load_state_dict(mod.state_dict())
        other.meta = {**self.meta, "lineage": list(self.meta.get("lineage", []))}
        return other

    def with_skip_gate(self) -> "ModelBundle":
        """Copy with a freshly initialised skip policy attached."""
        cfg = dataclasses.replace(self.cfg, skip_gate=True)
        other = ModelBundle(cfg, self.seed)
        for name, mod in self.modules().items():
            other.modules()[name].load_state_dict(mod.state_dict())
        other.meta = {**self.meta, "lineage": list(self.meta.get("lineage", []))}
        return other
