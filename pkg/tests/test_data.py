import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clp.data import (AugmentationPolicy, VideoManifest, augment, binarize_intensity, load_au_labels,
                      load_manifests, sample_cir_frames, sample_sequence, valid_starts, write_image)
from clp.errors import ConfigError, ManifestFormatError, NotEnoughFramesError


def manifest(n, gaps=()):
    return VideoManifest("v", "s", [f"{i}.png" for i in range(n)], gaps=gaps)


def write_video(root, vid, n):
    (root / vid).mkdir()
    for i in range(n):
        write_image(root / vid / f"{i:03d}.png", np.full((8, 8, 3), i / n))
    return [f"{vid}/{i:03d}.png" for i in range(n)]


def test_load_three_videos(tmp_path):
    with open(tmp_path / "manifest.jsonl", "w") as fh:
        for v in range(3):
            fh.write(json.dumps({"video_id": f"v{v}", "subject_id": "s", "frames": write_video(tmp_path, f"v{v}", 4)}) + "\n")
    assert len(load_manifests(tmp_path)) == 3


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert load_manifests(tmp_path) == []


def test_missing_frame_recorded_as_gap(tmp_path):
    frames = write_video(tmp_path, "v", 100)
    (tmp_path / frames[40]).unlink()
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"video_id": "v", "subject_id": "s", "frames": frames}) + "\n")
    (m,) = load_manifests(tmp_path)
    assert len(m) == 99 and m.gaps == (40,)
    # no sampled sequence may straddle the gap
    rng = np.random.default_rng(0)
    for _ in range(300):
        idx = sample_sequence(m, 9, 2, rng, load=False).frame_indices
        assert idx[-1] < 40 or idx[0] >= 40


def test_declared_gaps_and_dropped_videos(tmp_path, caplog):
    frames = write_video(tmp_path, "v", 10)
    recs = [{"video_id": "v", "subject_id": "s", "frames": frames, "gaps": [5]},
            {"video_id": "w", "subject_id": "s", "frames": ["nope/0.png"]}]
    (tmp_path / "manifest.jsonl").write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    ms = load_manifests(tmp_path)
    assert len(ms) == 1 and ms[0].gaps == (5,)
    assert "dropped 1 video" in caplog.text


def test_bad_manifest_line(tmp_path):
    (tmp_path / "manifest.jsonl").write_text('{"video_id": "v", "subject_id": "s", "frames": []}\n{oops\n')
    with pytest.raises(ManifestFormatError) as err:
        load_manifests(tmp_path)
    assert err.value.line == 2


def test_sequence_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        idx = sample_sequence(manifest(100), 9, 2, rng, load=False).frame_indices
        assert 0 <= idx[0] <= 83 and idx == list(range(idx[0], idx[0] + 17, 2))


def test_sequence_boundary_cases():
    rng = np.random.default_rng(0)
    assert sample_sequence(manifest(17), 9, 2, rng, load=False).frame_indices[0] == 0
    with pytest.raises(NotEnoughFramesError) as err:
        sample_sequence(manifest(16), 9, 2, rng, load=False)
    assert (err.value.required, err.value.available) == (17, 16)


def test_sequence_covers_all_starts():
    rng = np.random.default_rng(0)
    seen = {sample_sequence(manifest(20), 9, 2, rng, load=False).frame_indices[0] for _ in range(10000)}
    assert seen == set(range(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 4),
       st.lists(st.integers(1, 39), max_size=4), st.integers(0, 1000))
def test_sequence_property(n, J, s, gaps, seed):
    m = manifest(n, tuple(g for g in gaps if g < n))
    starts = valid_starts(n, J, s, m.gaps)
    # brute force: a start is valid iff the span fits and contains no gap
    brute = [k for k in range(n) if k + (J - 1) * s < n and not any(k < g <= k + (J - 1) * s for g in m.gaps)]
    assert list(starts) == brute
    if brute:
        idx = sample_sequence(m, J, s, np.random.default_rng(seed), load=False).frame_indices
        assert all(0 <= i < n for i in idx) and all(b - a == s for a, b in zip(idx, idx[1:]))


def test_cir_frames():
    rng = np.random.default_rng(0)
    a = sample_cir_frames(manifest(100), 2, rng)
    assert len(set(a)) == 2
    assert sorted(sample_cir_frames(manifest(2), 2, rng)) == [0, 1]
    assert sample_cir_frames(manifest(50), 2, np.random.default_rng(5)) == \
        sample_cir_frames(manifest(50), 2, np.random.default_rng(5))
    with pytest.raises(NotEnoughFramesError):
        sample_cir_frames(manifest(1), 2, rng)


def test_in_memory_frames_are_loaded():
    imgs = np.random.default_rng(0).random((20, 8, 8, 3)).astype(np.float32)
    m = VideoManifest("v", "s", [str(i) for i in range(20)], images=imgs)
    seq = sample_sequence(m, 3, 2, np.random.default_rng(0))
    assert np.array_equal(seq.frames, imgs[seq.frame_indices])


# augmentation -----------------------------------------------------------------

@pytest.fixture
def image():
    return np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)


def test_identity_policy(image):
    out = augment(image, AugmentationPolicy.identity(32), np.random.default_rng(0))
    assert torch.equal(out, torch.from_numpy(image).permute(2, 0, 1))
    small = augment(image, AugmentationPolicy.identity(16), np.random.default_rng(0))
    assert small.shape == (3, 16, 16)


def test_photometric_keeps_marker_in_place():
    img = np.full((32, 32, 3), 0.5, dtype=np.float32)
    img[5, 20] = 1.0
    pol = AugmentationPolicy(crop_size=32).photometric()
    for seed in range(10):
        out = augment(img, pol, np.random.default_rng(seed))
        gray = out.mean(0)
        assert tuple(np.unravel_index(gray.argmax().item(), gray.shape)) == (5, 20)


def test_flip_only_mirrors(image):
    pol = AugmentationPolicy.identity(32)
    pol.horizontal_flip_prob = 1.0
    once = augment(image, pol, np.random.default_rng(0))
    assert torch.equal(once, torch.from_numpy(image).permute(2, 0, 1).flip(-1))
    assert torch.equal(augment(once, pol, np.random.default_rng(1)), torch.from_numpy(image).permute(2, 0, 1))


def test_augment_deterministic_and_clipped(image):
    pol = AugmentationPolicy(crop_size=24)
    a = augment(image, pol, np.random.default_rng(3))
    b = augment(image, pol, np.random.default_rng(3))
    assert torch.equal(a, b) and a.shape == (3, 24, 24)
    assert a.min() >= 0 and a.max() <= 1


def test_degenerate_crop(image):
    with pytest.raises(ConfigError):
        augment(image, AugmentationPolicy(crop_size=64), np.random.default_rng(0))


def test_au_labels(tmp_path):
    p = tmp_path / "labels.jsonl"
    p.write_text(json.dumps({"image": "a.png", "subject_id": "s1", "labels": {"AU1": 1, "AU2": "unknown", "AU4": 0}}) + "\n")
    (rec,) = load_au_labels(p)
    assert rec["labels"] == {"AU1": 1, "AU2": None, "AU4": 0} and rec["subject_id"] == "s1"
    assert [binarize_intensity(i) for i in range(6)] == [0, 0, 1, 1, 1, 1]
