"""Synthetic moving-glyph videos.

Each video contains one class glyph (a bordered binary pattern, unique per
class) doing a reflecting random walk among class-independent distractor
patterns.  The label is readable from any single frame, but only by looking
closely at the glyph, so the task is spatially rather than temporally hard.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, FormatError

SPLIT_KIND = "split"
SPLIT_VERSION = 1
ROLES = ("train", "calibration", "test")


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    frames: int = 8
    frame_size: int = 64
    glyph_size: int = 8
    num_distractors: int = 4
    max_step: int = 3
    noise_std: float = 0.1
    channels: int = 1
    seed: int = 0
    background: float = 0.5

    def validate(self) -> "SynthConfig":
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if not 1 <= self.glyph_size <= self.frame_size:
            raise ConfigError(f"glyph_size must lie in [1, frame_size={self.frame_size}], got {self.glyph_size}")
        if self.max_step < 0:
            raise ConfigError(f"max_step must be >= 0, got {self.max_step}")
        if self.num_distractors < 0 or self.channels < 1:
            raise ConfigError("num_distractors must be >= 0 and channels >= 1")
        if self.noise_std < 0 or not 0.0 <= self.background <= 1.0:
            raise ConfigError("noise_std must be >= 0 and background in [0, 1]")
        free_bits = _interior(self.glyph_size) ** 2
        if free_bits < 62 and self.num_classes > 2 ** free_bits:
            raise ConfigError(f"glyph_size {self.glyph_size} cannot encode {self.num_classes} distinct classes")
        return self


@dataclass
class VideoSample:
    frames: np.ndarray       # [T, C, H, W] float32 multiples of 1/255 in [0, 1]
    label: int
    glyph_track: np.ndarray  # [T, 2] (row, col) of the glyph's top-left pixel


def dequantize(pixels: np.ndarray) -> np.ndarray:
    """uint8 levels -> float32 intensities k/255 (the only place this conversion happens)."""
    return pixels.astype(np.float32) / np.float32(255.0)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class DatasetSplit:
    """A split held as 8-bit levels; ``frames`` gives the float32 view."""
    pixels: np.ndarray       # [N, T, C, H, W] uint8
    labels: np.ndarray       # [N]
    glyph_track: np.ndarray  # [N, T, 2]
    role: str
    config: SynthConfig
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def frames(self) -> np.ndarray:
        return dequantize(self.pixels)

    def __getitem__(self, i: int) -> VideoSample:
        return VideoSample(dequantize(self.pixels[i]), int(self.labels[i]), self.glyph_track[i])

    @property
    def samples(self) -> list[VideoSample]:
        return [self[i] for i in range(len(self))]

    def subset(self, n: int) -> "DatasetSplit":
        return dataclasses.replace(self, pixels=self.pixels[:n], labels=self.labels[:n],
                                   glyph_track=self.glyph_track[:n])


def _interior(g: int) -> int:
    # glyphs of side >= 4 carry a solid one-pixel border; smaller ones are all payload
    return g - 2 if g >= 4 else g


def glyph_bank(cfg: SynthConfig) -> np.ndarray:
    """Class patterns [num_classes, g, g] in {0, 1}, fixed by ``cfg.seed``."""
    g, inner = cfg.glyph_size, _interior(cfg.glyph_size)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x61,)))
    min_dist = max(1, inner * inner // 4)
    payloads: list[np.ndarray] = []
    attempts = 0
    while len(payloads) < cfg.num_classes:
        attempts += 1
        if attempts > 10000:
            min_dist = max(1, min_dist - 1)
            attempts = 0
        cand = rng.integers(0, 2, size=(inner, inner), dtype=np.uint8)
        if all(int((cand != p).sum()) >= min_dist for p in payloads):
            payloads.append(cand)
    bank = np.ones((cfg.num_classes, g, g), dtype=np.uint8)
    off = (g - inner) // 2
    for k, p in enumerate(payloads):
        bank[k, off:off + inner, off:off + inner] = p
    return bank


def _random_walk(rng: np.random.Generator, lo: int, hi: int, steps: int, max_step: int) -> np.ndarray:
    """Integer walk in [lo, hi]^2 with per-axis steps in [-max_step, max_step], reflecting at the bounds."""
    pos = np.empty((steps, 2), dtype=np.int64)
    pos[0] = rng.integers(lo, hi + 1, size=2)
    for t in range(1, steps):
        nxt = pos[t - 1] + rng.integers(-max_step, max_step + 1, size=2)
        nxt = np.where(nxt < lo, 2 * lo - nxt, nxt)
        nxt = np.where(nxt > hi, 2 * hi - nxt, nxt)
        pos[t] = np.clip(nxt, lo, hi)
    return pos


def _distractor(rng: np.random.Generator, g: int) -> np.ndarray:
    while True:
        pat = rng.integers(0, 2, size=(g, g), dtype=np.uint8)
        ring = np.concatenate([pat[0], pat[-1], pat[:, 0], pat[:, -1]])
        if g < 4 or not ring.all():
            return pat


def generate_video(cfg: SynthConfig, rng: np.random.Generator, label: int | None = None,
                   bank: np.ndarray | None = None) -> VideoSample:
    cfg.validate()
    if bank is None:
        bank = glyph_bank(cfg)
    if label is None:
        label = int(rng.integers(cfg.num_classes))
    if not 0 <= label < cfg.num_classes:
        raise ConfigError(f"label {label} outside [0, {cfg.num_classes})")
    T, C, H, g = cfg.frames, cfg.channels, cfg.frame_size, cfg.glyph_size
    hi = H - g
    frames = np.full((T, C, H, H), cfg.background, dtype=np.float32)
    for _ in range(cfg.num_distractors):
        pat = _distractor(rng, g).astype(np.float32)
        track = _random_walk(rng, 0, hi, T, cfg.max_step)
        for t, (r, c) in enumerate(track):
            frames[t, :, r:r + g, c:c + g] = pat
    glyph = bank[label].astype(np.float32)
    track = _random_walk(rng, 0, hi, T, cfg.max_step)
    for t, (r, c) in enumerate(track):
        frames[t, :, r:r + g, c:c + g] = glyph
    if cfg.noise_std > 0:
        frames += rng.normal(0.0, cfg.noise_std, size=frames.shape).astype(np.float32)
    return VideoSample(dequantize(quantize(frames)), label, track)


def sample_rng(split_seed: int, role: str, index: int) -> np.random.Generator:
    """Generator for one sample of a split; depends only on (seed, role, index)."""
    if role not in ROLES:
        raise ConfigError(f"role must be one of {ROLES}, got {role!r}")
    return np.random.default_rng(np.random.SeedSequence(split_seed, spawn_key=(ROLES.index(role), index)))


def generate_split(cfg: SynthConfig, n: int, role: str, seed: int) -> DatasetSplit:
    cfg.validate()
    if n < cfg.num_classes:
        raise ConfigError(f"split size {n} is smaller than num_classes {cfg.num_classes}")
    bank = glyph_bank(cfg)
    T, C, H = cfg.frames, cfg.channels, cfg.frame_size
    pixels = np.empty((n, T, C, H, H), dtype=np.uint8)
    labels = np.arange(n, dtype=np.int64) % cfg.num_classes
    tracks = np.empty((n, T, 2), dtype=np.int64)
    for i in range(n):
        s = generate_video(cfg, sample_rng(seed, role, i), int(labels[i]), bank)
        pixels[i], tracks[i] = quantize(s.frames), s.glyph_track
    return DatasetSplit(pixels, labels, tracks, role, cfg, seed)


def save_split(split: DatasetSplit, path) -> str:
    """Write ``split`` atomically plus a ``.manifest.txt`` sidecar; returns the file sha256."""
    meta = {"config": dataclasses.asdict(split.config), "role": split.role, "seed": split.seed,
            "n": len(split), "extra": split.meta}
    digest = container.write(path, SPLIT_KIND, SPLIT_VERSION, meta, {
        "frames": split.pixels,
        "labels": split.labels.astype("<i8"),
        "glyph_track": split.glyph_track.astype("<i8"),
    })
    cfg = split.config
    lines = [f"format: {SPLIT_KIND} v{SPLIT_VERSION}", f"role: {split.role}", f"seed: {split.seed}",
             f"samples: {len(split)}", f"sha256: {digest}",
             f"frames: uint8 intensity levels (value/255) [{len(split)}, {cfg.frames}, {cfg.channels}, {cfg.frame_size}, {cfg.frame_size}]",
             f"labels: int64 little-endian [{len(split)}]",
             f"glyph_track: int64 little-endian [{len(split)}, {cfg.frames}, 2] (row, col)"]
    lines += [f"config.{k}: {v}" for k, v in dataclasses.asdict(cfg).items()]
    container.atomic_write_bytes(str(path) + ".manifest.txt", ("\n".join(lines) + "\n").encode())
    return digest


def load_split(path) -> DatasetSplit:
    meta, arrays = container.read(path, SPLIT_KIND, SPLIT_VERSION)
    try:
        cfg = SynthConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"config: malformed header ({exc})") from None
    for name in ("frames", "labels", "glyph_track"):
        if name not in arrays:
            raise FormatError(f"{name}: missing array")
    n = meta.get("n")
    frames, labels, track = arrays["frames"], arrays["labels"], arrays["glyph_track"]
    if frames.dtype != np.uint8:
        raise FormatError(f"frames: expected uint8 levels, found {frames.dtype}")
    if frames.ndim != 5:
        raise FormatError(f"frames: expected 5 dims, found shape {frames.shape}")
    checks = [("n", frames.shape[0], n), ("frames", frames.shape[1], cfg.frames),
              ("channels", frames.shape[2], cfg.channels),
              ("frame_size", frames.shape[3], cfg.frame_size), ("frame_size", frames.shape[4], cfg.frame_size),
              ("labels", labels.shape, (n,)), ("glyph_track", track.shape, (n, cfg.frames, 2))]
    for fld, found, want in checks:
        if found != want:
            raise FormatError(f"{fld}: header declares {want} but arrays have {found}")
    if meta.get("role") not in ROLES:
        raise FormatError(f"role: unknown role {meta.get('role')!r}")
    return DatasetSplit(frames, labels, track, meta["role"], cfg, int(meta.get("seed", 0)), meta.get("extra", {}))
