import hashlib

import numpy as np
import pytest

from glancefocus.errors import ConfigError, FormatError
from glancefocus import container
from glancefocus.synthdata import (SynthConfig, generate_split, generate_video, glyph_bank, load_split,
                                   sample_rng, save_split)


def test_degenerate_video_is_glyph_on_uniform_background():
    cfg = SynthConfig(num_classes=3, frames=1, frame_size=20, glyph_size=6, num_distractors=0, noise_std=0.0)
    s = generate_video(cfg, np.random.default_rng(0), label=2)
    frame = s.frames[0, 0]
    r, c = s.glyph_track[0]
    glyph = glyph_bank(cfg)[2]
    np.testing.assert_array_equal(frame[r:r + 6, c:c + 6], glyph.astype(np.float32))
    mask = np.ones_like(frame, dtype=bool)
    mask[r:r + 6, c:c + 6] = False
    assert np.unique(frame[mask]).size == 1


def test_same_seed_is_bit_identical():
    cfg = SynthConfig(frames=4)
    a = generate_video(cfg, np.random.default_rng(42), label=1)
    b = generate_video(cfg, np.random.default_rng(42), label=1)
    assert a.frames.tobytes() == b.frames.tobytes()
    np.testing.assert_array_equal(a.glyph_track, b.glyph_track)


def test_motion_is_bounded_by_max_step():
    # exhaustive scan of emitted tracks
    cfg = SynthConfig(frames=16, max_step=3, num_distractors=0, noise_std=0.0, frame_size=32, glyph_size=6)
    bank = glyph_bank(cfg)
    worst = 0
    for i in range(1000):
        s = generate_video(cfg, np.random.default_rng(i), bank=bank)
        worst = max(worst, int(np.abs(np.diff(s.glyph_track, axis=0)).max()))
        assert s.glyph_track.min() >= 0 and s.glyph_track.max() <= 32 - 6
    assert worst == 3


def test_invariants_hold_for_emitted_samples(small_split):
    cfg = small_split.config
    f = small_split.frames
    assert f.min() >= 0.0 and f.max() <= 1.0
    assert ((small_split.labels >= 0) & (small_split.labels < cfg.num_classes)).all()
    assert small_split.glyph_track.max() <= cfg.frame_size - cfg.glyph_size


@pytest.mark.parametrize("kw", [{"glyph_size": 65}, {"num_classes": 1}, {"frames": 0}, {"max_step": -1}])
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        generate_video(SynthConfig(**kw), np.random.default_rng(0))


def test_class_patterns_unique():
    bank = glyph_bank(SynthConfig(num_classes=10))
    flat = {b.tobytes() for b in bank}
    assert len(flat) == 10


def test_label_identifiable_by_template_matching():
    cfg = SynthConfig(noise_std=0.0, num_distractors=4)
    split = generate_split(cfg, 200, "test", 9)
    bank = glyph_bank(cfg).astype(np.float32)
    g = cfg.glyph_size
    correct = 0
    for i in range(len(split)):
        s = split[i]
        r, c = s.glyph_track[3]
        crop = s.frames[3, 0, r:r + g, c:c + g]
        correct += int(np.argmin(((bank - crop) ** 2).sum(axis=(1, 2))) == s.label)
    assert correct / len(split) >= 0.99


def test_split_is_balanced():
    split = generate_split(SynthConfig(frames=2), 100, "train", 0)
    assert np.bincount(split.labels).tolist() == [10] * 10


def test_unbalanced_size_still_within_one():
    split = generate_split(SynthConfig(frames=1, num_classes=4), 10, "train", 0)
    counts = np.bincount(split.labels)
    assert counts.max() - counts.min() <= 1


def test_split_too_small():
    with pytest.raises(ConfigError):
        generate_split(SynthConfig(), 5, "train", 0)


def test_split_repeatable_and_samples_reproducible_in_isolation(small_cfg):
    a = generate_split(small_cfg, 8, "train", 4)
    b = generate_split(small_cfg, 8, "train", 4)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    lone = generate_video(small_cfg, sample_rng(4, "train", 5), label=int(a.labels[5]))
    np.testing.assert_array_equal(lone.frames, a[5].frames)


def test_train_and_test_splits_share_no_frames(small_cfg):
    tr = generate_split(small_cfg, 40, "train", 1)
    te = generate_split(small_cfg, 40, "test", 2)
    h = lambda x: hashlib.sha256(x.tobytes()).hexdigest()
    train_hashes = {h(f) for v in tr.pixels for f in v}
    assert not any(h(f) in train_hashes for v in te.pixels for f in v)


def test_round_trip_is_bit_exact(tmp_path, small_cfg):
    split = generate_split(small_cfg, 10, "calibration", 7)
    path = tmp_path / "cal.split"
    save_split(split, path)
    back = load_split(path)
    assert back.pixels.tobytes() == split.pixels.tobytes()
    assert back.frames.tobytes() == split.frames.tobytes()
    np.testing.assert_array_equal(back.glyph_track, split.glyph_track)
    np.testing.assert_array_equal(back.labels, split.labels)
    assert back.config == split.config and back.role == "calibration" and back.seed == 7
    assert (tmp_path / "cal.split.manifest.txt").read_text().startswith("format: split v1")


def test_truncated_frame_block_rejected(tmp_path, small_cfg):
    split = generate_split(small_cfg, 10, "test", 7)
    path = tmp_path / "x.split"
    save_split(split, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 100])
    with pytest.raises(FormatError, match="truncated|glyph_track|frames"):
        load_split(path)


def test_frame_block_truncated_mid_frames(tmp_path, small_cfg):
    split = generate_split(small_cfg, 10, "test", 7)
    meta = {"config": split.config.__dict__, "role": "test", "seed": 7, "n": 10, "extra": {}}
    blob = container.encode("split", 1, meta, {"frames": split.pixels})
    path = tmp_path / "y.split"
    path.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="frames"):
        load_split(path)


def test_header_shape_mismatch_rejected(tmp_path, small_cfg):
    split = generate_split(small_cfg, 10, "test", 7)
    cfg = dict(split.config.__dict__, frame_size=64)
    meta = {"config": cfg, "role": "test", "seed": 7, "n": 10, "extra": {}}
    path = tmp_path / "z.split"
    container.write(path, "split", 1, meta, {"frames": split.pixels, "labels": split.labels,
                                             "glyph_track": split.glyph_track})
    with pytest.raises(FormatError, match="frame_size"):
        load_split(path)


def test_version_mismatch_rejected(tmp_path, small_cfg):
    split = generate_split(small_cfg, 10, "test", 7)
    path = tmp_path / "v.split"
    container.write(path, "split", 99, {}, {"frames": split.pixels})
    with pytest.raises(FormatError, match="version"):
        load_split(path)
