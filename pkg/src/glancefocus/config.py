"""Run configuration: INI text with sections, parsed into typed dataclasses.

Every key is declared below; unknown sections or keys are rejected.  Values
are literals only (ints, floats, booleans, strings, comma-separated lists).
Command-line overrides use ``section.key=value``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .pipeline import POLICY_VARIANTS, TrainConfig
from .rltrain import PPOConfig
from .synthdata import SynthConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    frames: int = 8
    frame_size: int = 64
    glyph_size: int = 8
    num_distractors: int = 4
    max_step: int = 3
    noise_std: float = 0.1
    channels: int = 1
    background: float = 0.5
    n_train: int = 2000
    n_calibration: int = 200
    n_test: int = 500


@dataclass(frozen=True)
class ModelSection:
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


@dataclass(frozen=True)
class SkipSection:
    enabled: bool = False
    lam: float = 1e-6
    etas: tuple[float, ...] = (0.9, 0.7, 0.5)
    calibrate_on: str = "calibration"


@dataclass(frozen=True)
class EvalSection:
    policies: tuple[str, ...] = POLICY_VARIANTS
    patch_sizes: tuple[int, ...] = (16, 24, 32)
    hold_model_constant: bool = False
    batch: int = 64


SECTIONS: dict[str, type] = {"run": RunSection, "data": DataSection, "model": ModelSection,
                             "train": TrainConfig, "ppo": PPOConfig, "skip": SkipSection, "eval": EvalSection}
# INI spelling of keys that are Python keywords
_ALIASES = {("skip", "lambda"): "lam", ("train", "lambda"): "lam"}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    skip: SkipSection = field(default_factory=SkipSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def synth_config(self) -> SynthConfig:
        d = dataclasses.asdict(self.data)
        for k in ("n_train", "n_calibration", "n_test"):
            d.pop(k)
        return SynthConfig(seed=self.seed, **d)

    def model_config(self, **overrides) -> ModelConfig:
        m = dataclasses.asdict(self.model)
        m = {k: tuple(v) if isinstance(v, list) else v for k, v in m.items()}
        m.update(num_classes=self.data.num_classes, channels=self.data.channels, frame_size=self.data.frame_size,
                 skip_gate=self.skip.enabled)
        m.update(overrides)
        return ModelConfig(**m)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, lam=self.skip.lam)

    def validate(self) -> "RunConfig":
        self.synth_config().validate()
        self.model_config().validate()
        self.train.validate()
        self.ppo.validate()
        for n in (self.data.n_train, self.data.n_calibration, self.data.n_test):
            if n < self.data.num_classes:
                raise ConfigError(f"split sizes must be >= num_classes ({self.data.num_classes})")
        if self.skip.calibrate_on not in ("calibration", "train"):
            raise ConfigError("skip.calibrate_on must be 'calibration' or 'train'")
        if not all(0.0 < e < 1.0 for e in self.skip.etas):
            raise ConfigError("every skip.etas value must lie in (0, 1)")
        bad = [p for p in self.eval.policies if p not in POLICY_VARIANTS]
        if bad:
            raise ConfigError(f"unknown eval.policies {bad}")
        for p in self.eval.patch_sizes:
            if not 1 <= p <= self.data.frame_size:
                raise ConfigError(f"eval.patch_sizes entry {p} outside [1, frame_size]")
        return self

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                key = next((a[1] for a, v in _ALIASES.items() if a[0] == name and v == f.name), f.name)
                lines.append(f"{key} = {_format(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, typ, where: str):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {typ.__name__}") from None
    raise ConfigError(f"{where}: unsupported type {typ}")


def _parse_value(text: str, typ, where: str):
    if typing.get_origin(typ) is tuple:
        inner = typing.get_args(typ)[0]
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, inner, where) for p in parts)
    return _parse_scalar(text, typ, where)


def _section_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    """Build a RunConfig from {section: {key: text}}, rejecting anything undeclared."""
    kwargs = {}
    for section, items in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        types = _section_types(cls)
        parsed = {}
        for key, text in items.items():
            attr = _ALIASES.get((section, key), key)
            if attr not in types:
                raise ConfigError(f"unknown config key {section}.{key}")
            parsed[attr] = _parse_value(text, types[attr], f"{section}.{key}")
        kwargs[section] = cls(**parsed)
    return RunConfig(**kwargs).validate()


def parse_overrides(overrides: list[str] | None) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def loads(text: str, overrides: list[str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, items in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(items)
    return build(values)


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text, overrides)
