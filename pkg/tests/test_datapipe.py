import logging
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from deformsfs.datapipe import formats
from deformsfs.datapipe.dataset import (DatasetManifest, Sample, holdout_split, load_dataset,
                                        read_manifest, save_sample, validate_sample,
                                        write_manifest, ManifestSamples)
from deformsfs.datapipe.preprocess import (FrameRejected, clean_depth, make_gt_normals,
                                           preprocess_frame, segment_foreground)
from deformsfs.datapipe.synth import HeightField, SynthParams, render, synth_generate
from deformsfs.geometry import CameraIntrinsics, depth_to_normals

K32 = CameraIntrinsics(525.0, 525.0, 15.5, 15.5, 32, 32)


def angles(a, b):
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.degrees(np.arccos(np.clip(np.sum(a * b, -1), -1, 1)))


@pytest.fixture(scope="module")
def synth64():
    return synth_generate(SynthParams(count=6, size=64, sequences=2, seed=5))


# --- file formats ------------------------------------------------------------


def test_format_round_trips(tmp_path, synth64):
    s = synth64[0]
    formats.write_rgb(tmp_path / "a.png", s.image)
    assert np.abs(formats.read_rgb(tmp_path / "a.png") - s.image).max() <= 0.5 / 255 + 1e-12
    formats.write_mask(tmp_path / "m.png", s.mask)
    assert np.array_equal(formats.read_mask(tmp_path / "m.png"), s.mask)
    formats.write_depth(tmp_path / "d.png", s.depth)
    assert np.abs(formats.read_depth(tmp_path / "d.png") - s.depth).max() <= 0.05 + 1e-9
    formats.write_normals(tmp_path / "n.png", s.normals)
    n = formats.read_normals(tmp_path / "n.png", s.mask)
    assert angles(n[s.mask], s.normals[s.mask]).max() < 0.01
    formats.write_vertices(tmp_path / "v.txt", s.vertices)
    assert np.abs(formats.read_vertices(tmp_path / "v.txt") - s.vertices).max() <= 5e-7
    # a second write of what was read is bit-identical
    formats.write_depth(tmp_path / "d2.png", formats.read_depth(tmp_path / "d.png"))
    assert (tmp_path / "d.png").read_bytes() == (tmp_path / "d2.png").read_bytes()


# --- segmentation ------------------------------------------------------------


def flood_components(mask):
    """4-connected components by breadth-first search."""
    seen = np.zeros_like(mask)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, q = [], deque([start])
        seen[start] = True
        while q:
            y, x = q.popleft()
            comp.append((y, x))
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    q.append((ny, nx))
        comps.append(comp)
    return comps


def test_segment_square_and_hole():
    img = np.zeros((40, 40, 3))
    img[10:30, 8:25] = 0.8
    expect = np.zeros((40, 40), bool)
    expect[10:30, 8:25] = True
    assert np.array_equal(segment_foreground(img), expect)
    img[15:20, 12:18] = 0.0
    assert np.array_equal(segment_foreground(img), expect)


def test_segment_keeps_largest_component():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 0.05, (50, 50, 3))
    img[5:20, 5:20] = 0.9
    img[30:45, 25:48] = 0.7
    img[2, 40] = 0.9
    got = segment_foreground(img)
    comps = flood_components(ndimage.binary_fill_holes(img.mean(-1) > 0.3))
    big = max(comps, key=len)
    oracle = np.zeros((50, 50), bool)
    oracle[tuple(np.array(big).T)] = True
    assert np.array_equal(got, oracle)


def test_segment_rejects_tiny_foreground():
    img = np.zeros((100, 100, 3))
    img[50:52, 50:52] = 1.0
    with pytest.raises(FrameRejected):
        segment_foreground(img)


# --- depth cleaning ----------------------------------------------------------


def test_clean_depth_examples():
    mask = np.zeros((30, 30), bool)
    mask[3:27, 4:26] = True
    flat = np.where(mask, 1000.0, 0.0)
    assert np.array_equal(clean_depth(flat, mask), flat)
    hole = flat.copy()
    hole[12, 12] = 0.0
    assert abs(clean_depth(hole, mask)[12, 12] - 1000.0) <= 0.1
    y, x = np.mgrid[0:30, 0:30]
    ramp = np.where(mask, 1000.0 + 2.0 * x + 1.0 * y, 0.0)
    spike = ramp.copy()
    spike[10, 15] = 5000.0
    out = clean_depth(spike, mask)
    # harmonic fill of a linear field reproduces it exactly
    assert abs(out[10, 15] - ramp[10, 15]) < 1e-6
    bad = flat.copy()
    bad[mask & (x < 18)] = 0.0
    with pytest.raises(FrameRejected):
        clean_depth(bad, mask)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clean_depth_idempotent(seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros((24, 24), bool)
    mask[2:22, 3:21] = True
    y, x = np.mgrid[0:24, 0:24]
    d = 900 + 3 * np.sin(x / 4.0) * 10 + rng.normal(0, 2, (24, 24))
    holes = rng.uniform(size=(24, 24)) < 0.1
    d[holes] = 0.0
    d[rng.uniform(size=(24, 24)) < 0.02] = 4000.0
    d = np.where(mask, d, 0.0)
    once = clean_depth(d, mask)
    np.testing.assert_allclose(clean_depth(once, mask), once, rtol=0, atol=1e-9)


# --- ground-truth normals ----------------------------------------------------


def test_gt_normals_flat():
    mask = np.ones((20, 20), bool)
    n, valid = make_gt_normals(np.full((20, 20), 800.0), mask, CameraIntrinsics(500, 500, 9.5, 9.5, 20, 20))
    assert valid.all()
    np.testing.assert_allclose(n, np.broadcast_to([0, 0, -1.0], n.shape), atol=1e-12)


def test_gt_normals_bump_within_two_degrees_of_smoothed_analytic():
    p = SynthParams(count=1, size=64, seed=0)
    hf = HeightField(1000.0, bumps=[(25.0, 30.0, 34.0, 16.0)])
    mask = np.ones((64, 64), bool)
    s = render(hf, mask, p)
    n, _ = make_gt_normals(s.depth, mask, s.K)
    # oracle: smooth with an explicitly normalised kernel, then the same differentiation
    k = np.exp(-(np.arange(-4, 5)[:, None] ** 2 + np.arange(-4, 5)[None, :] ** 2) / 18.0)
    k /= k.sum()
    smooth = ndimage.convolve(s.depth, k, mode="constant") / ndimage.convolve(np.ones((64, 64)), k, mode="constant")
    ref, _ = depth_to_normals(smooth, mask, s.K)
    inner = (slice(6, -6), slice(6, -6))
    assert np.abs(n[inner] - ref[inner]).max() < 1e-9
    assert angles(n[inner], s.normals[inner]).max() < 2.0


def test_gt_normals_smoothing_reduces_noise():
    rng = np.random.default_rng(1)
    K = CameraIntrinsics(525, 525, 31.5, 31.5, 64, 64)
    mask = np.ones((64, 64), bool)
    d = 1000 + rng.normal(0, 2.0, (64, 64))
    flat = np.array([0, 0, -1.0])
    raw, _ = depth_to_normals(d, mask, K)
    sm, _ = make_gt_normals(d, mask, K)
    assert angles(sm, flat).mean() < angles(raw, flat).mean()


# --- synthetic generator -----------------------------------------------------


def test_synth_flat_examples():
    p = SynthParams(count=1, size=32, seed=0)
    mask = np.zeros((32, 32), bool)
    mask[4:28, 4:28] = True
    s = render(HeightField(1000.0), mask, p)
    np.testing.assert_allclose(s.normals[mask], np.broadcast_to([0, 0, -1.0], (mask.sum(), 3)), atol=1e-12)
    assert np.all(s.image[mask] == s.image[mask][0])
    axis = SynthParams(count=1, size=32, lights=(((0.0, 0.0, -1.0), (1.0, 1.0, 1.0)),),
                       albedo=(0.7, 0.7, 0.7), ambient=0.1)
    s = render(HeightField(1000.0), mask, axis)
    np.testing.assert_allclose(s.image[mask], 0.8, atol=1e-12)


def test_synth_deterministic_and_valid(synth64):
    again = synth_generate(SynthParams(count=6, size=64, sequences=2, seed=5))
    for a, b in zip(synth64, again):
        for f in ("image", "mask", "depth", "normals", "vertices"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
    for s in synth64:
        validate_sample(s, (64, 64))
        assert s.vertices.shape == (81, 3)
    assert {s.sequence for s in synth64} == {"synth000", "synth001"}


def test_synth_ground_truth_self_consistent():
    for s in synth_generate(SynthParams(count=4, size=96, seed=2)):
        n, valid = depth_to_normals(s.depth, s.mask, s.K)
        inner = ndimage.binary_erosion(valid, iterations=2)
        assert angles(n[inner], s.normals[inner]).mean() < 1.0


def test_synth_rejects_grazing_params():
    p = SynthParams(count=1, size=32)
    with pytest.raises(ValueError):
        render(HeightField(1000.0, bumps=[(4000.0, 16.0, 16.0, 3.0)]), np.ones((32, 32), bool), p)


# --- validation and manifests -------------------------------------------------


def test_validate_sample_catches_violations(synth64):
    s = synth64[0]
    bad = Sample(s.image, s.mask, s.depth, s.normals * 1.01, s.K)
    with pytest.raises(ValueError):
        validate_sample(bad)
    bad = Sample(s.image, s.mask, np.where(s.mask, -1.0, 0.0), s.normals, s.K)
    with pytest.raises(ValueError):
        validate_sample(bad)
    bad = Sample(s.image[:-1], s.mask, s.depth, s.normals, s.K)
    with pytest.raises(ValueError):
        validate_sample(bad)
    with pytest.raises(ValueError):
        validate_sample(Sample(s.image, s.mask, s.depth, s.normals, s.K, lighting="sunny"))


def _write_dataset(root, samples, test_seq=("synth001",)):
    recs = [save_sample(root, s, "test" if s.sequence in test_seq else "train") for s in samples]
    return write_manifest(root / "manifest.txt", DatasetManifest("synthetic", samples[0].K, recs, root))


def test_manifest_round_trip_and_loading(tmp_path):
    samples = synth_generate(SynthParams(count=20, size=32, sequences=2, seed=1))
    path = _write_dataset(tmp_path, samples)
    man = read_manifest(path)
    assert man.problems() == [] and man.sample_count == 20
    loaded = list(load_dataset(man))
    assert len(loaded) == 20
    for a, b in zip(samples, loaded):
        validate_sample(b, (32, 32))
        assert a.sequence == b.sequence and a.frame == b.frame
        assert angles(a.normals[b.mask], b.normals[b.mask]).max() < 0.01
    shuffled = [(s.sequence, s.frame) for s in load_dataset(man, shuffle_seed=3)]
    assert shuffled == [(s.sequence, s.frame) for s in load_dataset(man, shuffle_seed=3)]
    assert sorted(shuffled) == sorted((s.sequence, s.frame) for s in loaded)


def test_missing_file_skipped_with_warning(tmp_path, caplog):
    samples = synth_generate(SynthParams(count=20, size=32, seed=1))
    man = read_manifest(_write_dataset(tmp_path, samples))
    (tmp_path / man.records[4].depth).unlink()
    with caplog.at_level(logging.WARNING):
        loaded = list(load_dataset(man))
    assert len(loaded) == 19
    assert sum("skipping" in r.getMessage() for r in caplog.records) == 1
    assert len(ManifestSamples(man)) == 19


def test_manifest_count_mismatch_and_split_overlap(tmp_path):
    samples = synth_generate(SynthParams(count=4, size=32, seed=1))
    man = read_manifest(_write_dataset(tmp_path, samples))
    man.sample_count = 5
    with pytest.raises(ValueError):
        list(load_dataset(man))
    man.records[0].split = "test"
    assert any("several splits" in p for p in man.problems())


def test_published_inventory_check():
    K = CameraIntrinsics(525, 525, 111.5, 111.5, 224, 224)
    man = DatasetManifest("cloth", K, [])
    assert "15799" in man.published_count_problems()[0]
    assert DatasetManifest("synthetic", K, []).published_count_problems() == []


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcde"), st.integers(0, 50)), min_size=1, max_size=60, unique=True))
def test_holdout_split_per_sequence(items):
    class R:
        def __init__(self, seq, frame):
            self.sequence, self.frame = seq, frame

    recs = [R(s, f) for s, f in items]
    train, val = holdout_split(recs, 0.1)
    assert len(train) + len(val) == len(recs)
    assert not set(map(id, train)) & set(map(id, val))
    for seq in {r.sequence for r in recs}:
        tr = [r.frame for r in train if r.sequence == seq]
        va = [r.frame for r in val if r.sequence == seq]
        assert tr, "every sequence keeps training frames"
        if va:
            assert max(tr) < min(va)


# --- end-to-end preprocessing ------------------------------------------------


def test_preprocess_frame_recovers_surface():
    p = SynthParams(count=1, size=224, seed=4, margin=(30, 40))
    s = synth_generate(p)[0]
    rng = np.random.default_rng(0)
    # embed into a larger dark frame with sensor defects
    H, W, y0, x0 = 260, 300, 20, 50
    image = rng.uniform(0, 0.02, (H, W, 3))
    image[y0:y0 + 224, x0:x0 + 224][s.mask] = np.maximum(s.image[s.mask], 0.2)
    raw = np.zeros((H, W))
    raw[y0:y0 + 224, x0:x0 + 224] = np.where(s.mask, s.depth, 0.0)
    raw[y0:y0 + 224, x0:x0 + 224] += np.where(s.mask, rng.normal(0, 0.5, (224, 224)), 0.0)
    ys, xs = np.nonzero(s.mask)
    pick = rng.choice(len(ys), 40, replace=False)
    raw[ys[pick[:20]] + y0, xs[pick[:20]] + x0] = 0.0
    raw[ys[pick[20:]] + y0, xs[pick[20:]] + x0] = 4000.0
    K = CameraIntrinsics(525.0, 525.0, x0 + s.K.cx, y0 + s.K.cy, W, H)
    img, mask, depth, normals, Kc = preprocess_frame(image, raw, K)
    assert img.shape == (224, 224, 3) and mask.shape == depth.shape == (224, 224)
    validate_sample(Sample(img, mask, depth, normals, Kc), (224, 224))
    # map the crop back onto the synthetic frame and compare
    dx, dy = int(round(K.cx - Kc.cx)) - x0, int(round(K.cy - Kc.cy)) - y0
    ref = np.zeros((224, 224, 3))
    ys, xs = np.nonzero(mask)
    ref[ys, xs] = s.normals[ys + dy, xs + dx]
    inner = ndimage.binary_erosion(mask, iterations=6)
    assert angles(normals[inner], ref[inner]).mean() < 2.0
    assert np.abs(depth[inner] - s.depth[np.nonzero(inner)[0] + dy, np.nonzero(inner)[1] + dx]).mean() < 1.0
