import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from deformsfs.geometry import (CameraIntrinsics, PointCloud, apply_mask, backproject,
                                depth_to_normals, depth_to_pointcloud, gaussian_kernel,
                                gaussian_smooth, gradient_field, integrate_normals,
                                procrustes_align, similarity_fit)

K64 = CameraIntrinsics(525.0, 525.0, 31.5, 31.5, 64, 64)


def angle_deg(a, b):
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))


def bump_field(n, amp=30.0, base=1000.0, seed=0):
    """Gaussian bumps on a pixel grid with analytic orthographic gradients."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n].astype(float)
    z = np.full((n, n), base)
    zx = np.zeros((n, n))
    zy = np.zeros((n, n))
    for _ in range(4):
        a = rng.uniform(-amp, amp)
        cx, cy = rng.uniform(0.25 * n, 0.75 * n, 2)
        s = rng.uniform(0.1 * n, 0.2 * n)
        g = a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        z += g
        zx += -g * (x - cx) / (s * s)
        zy += -g * (y - cy) / (s * s)
    return z, zx, zy


def random_rotation(rng):
    return Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()


# --- camera and masking ----------------------------------------------------


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    K = CameraIntrinsics(500, 510, 100, 90, 224, 224).crop(60, 50, 64, 64)
    assert (K.cx, K.cy, K.width) == (40, 40, 64)


def test_apply_mask_examples():
    img = np.random.default_rng(0).uniform(0.1, 1, (8, 8, 3))
    assert np.array_equal(apply_mask(img, np.ones((8, 8), bool)), img)
    one = np.zeros((8, 8), bool)
    one[3, 4] = True
    out = apply_mask(img, one)
    assert np.count_nonzero(out.any(axis=-1)) == 1 and np.array_equal(out[3, 4], img[3, 4])
    const = np.full((8, 8, 3), 0.7)
    checker = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(bool)
    out = apply_mask(const, checker)
    for i in range(8):
        for j in range(8):
            expect = 0.7 if (i + j) % 2 else 0.0
            assert np.all(out[i, j] == expect)
    with pytest.raises(ValueError):
        apply_mask(img, np.ones((7, 8), bool))


# --- smoothing -------------------------------------------------------------


def test_gaussian_smooth_constant_and_identity():
    mask = np.ones((20, 20), bool)
    d = np.full((20, 20), 1000.0)
    np.testing.assert_allclose(gaussian_smooth(d, mask), 1000.0, rtol=0, atol=1e-9)
    rnd = np.random.default_rng(1).uniform(900, 1100, (20, 20))
    np.testing.assert_array_equal(gaussian_smooth(rnd, mask, kernel=1, sigma=2.0), rnd)
    with pytest.raises(ValueError):
        gaussian_smooth(d, mask, kernel=4)
    with pytest.raises(ValueError):
        gaussian_smooth(d, mask, sigma=0.0)


def test_gaussian_smooth_spike_matches_brute_force():
    d = np.full((21, 21), 1000.0)
    d[10, 10] += 10.0
    out = gaussian_smooth(d, np.ones_like(d, bool), kernel=9, sigma=3.0)
    # brute force: unnormalised weights summed explicitly
    total = sum(math.exp(-(i * i + j * j) / 18.0) for i in range(-4, 5) for j in range(-4, 5))
    centre = 1.0 / total
    assert out[10, 10] - 1000.0 == pytest.approx(10.0 * centre, rel=1e-12)
    assert gaussian_kernel(9, 3.0)[4, 4] == pytest.approx(centre, rel=1e-12)


def test_gaussian_smooth_background_does_not_bleed():
    mask = np.zeros((20, 20), bool)
    mask[5:15, 5:15] = True
    d = np.where(mask, 1000.0, 0.0)
    out = gaussian_smooth(d, mask)
    np.testing.assert_allclose(out[mask], 1000.0, atol=1e-9)
    garbage = np.where(mask, 1000.0, 1e6)
    np.testing.assert_array_equal(gaussian_smooth(garbage, mask)[mask], out[mask])


# --- backprojection --------------------------------------------------------


def test_backproject_examples():
    K = CameraIntrinsics(500.0, 500.0, 2.0, 2.0, 1000, 8)
    d = np.full((8, 1000), 1000.0)
    P = backproject(d, K)
    np.testing.assert_allclose(P[2, 2], (0, 0, 1000))
    d[2, 502] = 500.0
    np.testing.assert_allclose(backproject(d, K)[2, 502], (500, 0, 500))


def test_pointcloud_matches_per_pixel_oracle():
    rng = np.random.default_rng(2)
    K = CameraIntrinsics(300.0, 320.0, 7.3, 8.1, 16, 16)
    d = rng.uniform(500, 1500, (16, 16))
    mask = rng.uniform(size=(16, 16)) > 0.3
    pc = depth_to_pointcloud(d, mask, K)
    assert len(np.unique(pc.pixels)) == len(pc) == mask.sum()
    for (idx, p) in zip(pc.pixels, pc.points):
        v, u = divmod(int(idx), 16)
        assert mask[v, u]
        expect = ((u - K.cx) * d[v, u] / K.fx, (v - K.cy) * d[v, u] / K.fy, d[v, u])
        np.testing.assert_allclose(p, expect, rtol=1e-9)


def test_pointcloud_rejects_nonpositive_depth():
    d = np.full((8, 8), 1000.0)
    d[3, 3] = 0.0
    with pytest.raises(ValueError):
        depth_to_pointcloud(d, np.ones((8, 8), bool), CameraIntrinsics(10, 10, 3.5, 3.5, 8, 8))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pointcloud_projection_inverts(seed):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(*rng.uniform(100, 900, 2), *rng.uniform(0, 11.9, 2), 12, 12)
    d = rng.uniform(100, 5000, (12, 12))
    mask = rng.uniform(size=(12, 12)) > 0.2
    mask[0, 0] = True
    pc = depth_to_pointcloud(d, mask, K)
    uv = K.project(pc.points)
    v, u = np.divmod(pc.pixels, 12)
    np.testing.assert_allclose(uv[:, 0], u, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(uv[:, 1], v, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(pc.points[:, 2], d[mask], rtol=1e-9)


# --- normals from depth ----------------------------------------------------


def test_frontoparallel_plane_normals():
    n, valid = depth_to_normals(np.full((16, 16), 800.0), np.ones((16, 16), bool), K64.crop(24, 24, 16, 16))
    assert valid.all()
    np.testing.assert_allclose(n, np.broadcast_to([0, 0, -1.0], n.shape), atol=1e-12)


@pytest.mark.parametrize("theta", [10.0, 25.0, -35.0])
def test_tilted_plane_normals(theta):
    t = math.tan(math.radians(theta))
    u = np.arange(64)[None, :].repeat(64, 0).astype(float)
    # plane Z = z0 + X tan(theta) intersected with the pixel rays
    z = 1000.0 / (1.0 - (u - K64.cx) * t / K64.fx)
    mask = np.zeros((64, 64), bool)
    mask[4:60, 4:60] = True
    n, valid = depth_to_normals(z, mask, K64)
    expect = np.array([math.sin(math.radians(theta)), 0.0, -math.cos(math.radians(theta))])
    assert angle_deg(n[valid], expect).max() < 0.5


def test_sinusoid_normals_match_analytic_gradient():
    A, lam, z0 = 20.0, 40.0, 900.0
    K = CameraIntrinsics(400.0, 420.0, 30.0, 33.0, 64, 64)
    v, u = np.mgrid[0:64, 0:64].astype(float)
    Z = z0 + A * np.sin(2 * np.pi * u / lam)
    Zu = A * 2 * np.pi / lam * np.cos(2 * np.pi * u / lam)
    # analytic tangents of P(u, v) = ((u-cx)Z/fx, (v-cy)Z/fy, Z)
    Pu = np.stack([Z / K.fx + (u - K.cx) * Zu / K.fx, (v - K.cy) * Zu / K.fy, Zu], -1)
    Pv = np.stack([np.zeros_like(Z), Z / K.fy, np.zeros_like(Z)], -1)
    expect = np.cross(Pv, Pu)
    expect *= -np.sign(expect[..., 2:3])
    mask = np.ones((64, 64), bool)
    n, valid = depth_to_normals(Z, mask, K)
    inner = np.zeros_like(mask)
    inner[1:-1, 1:-1] = True
    assert angle_deg(n[inner], expect[inner]).max() < 1.0
    assert np.all(n[valid][:, 2] < 0)


def test_isolated_pixel_dropped():
    mask = np.zeros((10, 10), bool)
    mask[2:7, 2:7] = True
    mask[9, 9] = True
    n, valid = depth_to_normals(np.full((10, 10), 700.0), mask, CameraIntrinsics(100, 100, 4.5, 4.5, 10, 10))
    assert not valid[9, 9] and valid[2:7, 2:7].all()
    assert np.all(n[9, 9] == 0)


# --- integration -----------------------------------------------------------


def test_integrate_flat():
    n = np.broadcast_to([0.0, 0.0, -1.0], (16, 16, 3))
    z = integrate_normals(n, np.ones((16, 16), bool), 1000.0)
    np.testing.assert_allclose(z, 1000.0, atol=1e-9)


def test_integrate_tilted_plane():
    a, b = 0.3, -0.15
    y, x = np.mgrid[0:64, 0:64].astype(float)
    plane = 500 + a * x + b * y
    n = np.array([a, b, -1.0]) / math.sqrt(a * a + b * b + 1)
    normals = np.broadcast_to(n, (64, 64, 3))
    z = integrate_normals(normals, np.ones((64, 64), bool), 0.0)
    diff = z - plane
    assert np.abs(diff - diff.mean()).max() < 0.1


def test_integrate_gaussian_bumps():
    z, zx, zy = bump_field(128)
    n = np.stack([zx, zy, -np.ones_like(z)], -1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    rec = integrate_normals(n, np.ones((128, 128), bool), z.mean())
    assert np.sqrt(np.mean((rec - z) ** 2)) < 1.0


def test_integrate_ignores_exterior_and_is_deterministic():
    z, zx, zy = bump_field(48, seed=3)
    n = np.stack([zx, zy, -np.ones_like(z)], -1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    mask = np.zeros((48, 48), bool)
    mask[6:40, 8:44] = True
    junk = n.copy()
    junk[~mask] = np.random.default_rng(0).normal(size=((~mask).sum(), 3))
    a = integrate_normals(n, mask, 1000.0)
    b = integrate_normals(junk, mask, 1000.0)
    assert np.array_equal(a, b)
    assert np.array_equal(a, integrate_normals(n, mask, 1000.0))


def test_integrate_components_share_gauge_and_grazing_is_flagged():
    mask = np.zeros((20, 20), bool)
    mask[2:8, 2:8] = True
    mask[12:18, 10:19] = True
    n = np.zeros((20, 20, 3))
    n[..., 0] = 0.2
    n[..., 2] = -1.0
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    z = integrate_normals(n, mask, 750.0)
    assert z[2:8, 2:8].mean() == pytest.approx(750.0)
    assert z[12:18, 10:19].mean() == pytest.approx(750.0)
    n[4, 4] = (1.0, 0.0, 0.0)
    p, q, grazing = gradient_field(n, mask)
    assert grazing[4, 4] and grazing.sum() == 1
    assert abs(p[4, 4]) == 1e3
    assert np.isfinite(integrate_normals(n, mask, 750.0)).all()


# --- Procrustes ------------------------------------------------------------


def _cloud(rng, m=1000):
    pts = rng.normal(size=(m, 3)) * (200, 150, 50) + (0, 0, 1000)
    return PointCloud(pts, np.arange(m))


def test_procrustes_identity():
    gt = _cloud(np.random.default_rng(0))
    s, R, t = similarity_fit(gt.points, gt.points)
    assert s == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(procrustes_align(gt, gt).points, gt.points, atol=1e-9)


def test_procrustes_recovers_known_similarity():
    rng = np.random.default_rng(1)
    gt = _cloud(rng)
    R = random_rotation(rng)
    pred = gt.with_points(1.7 * gt.points @ R.T + (10, -5, 30))
    out = procrustes_align(pred, gt)
    scale = np.abs(gt.points).max()
    assert np.abs(out.points - gt.points).max() < 1e-6 * scale


def test_procrustes_noise_matches_independent_fit():
    rng = np.random.default_rng(2)
    gt = _cloud(rng)
    pred = gt.with_points(gt.points + rng.normal(scale=1.0, size=gt.points.shape))
    s, R, t = similarity_fit(pred.points, gt.points)
    # independent oracle: Kabsch rotation from scipy, then least-squares scale
    a = pred.points - pred.points.mean(0)
    b = gt.points - gt.points.mean(0)
    rot, _ = Rotation.align_vectors(b, a)
    Ro = rot.as_matrix()
    so = np.sum(b * (a @ Ro.T)) / np.sum(a * a)
    np.testing.assert_allclose(R, Ro, atol=1e-9)
    assert s == pytest.approx(so, rel=1e-9)
    assert abs(s - 1) < 0.01 and np.degrees(np.arccos((np.trace(R) - 1) / 2)) < 0.5
    res = np.linalg.norm(procrustes_align(pred, gt).points - gt.points, axis=1)
    assert res.mean() <= math.sqrt(3.0)


def test_procrustes_rejects_degenerate():
    line = np.outer(np.arange(10.0), [1, 2, 3])
    with pytest.raises(ValueError):
        similarity_fit(line, line)
    with pytest.raises(ValueError):
        similarity_fit(np.eye(3)[:2], np.eye(3)[:2])
    a = PointCloud(np.eye(3), np.array([0, 1, 2]))
    b = PointCloud(np.eye(3), np.array([0, 1, 3]))
    with pytest.raises(ValueError):
        procrustes_align(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 2.0))
def test_procrustes_residual_similarity_invariant(seed, s):
    rng = np.random.default_rng(seed)
    gt = _cloud(rng, 200)
    pred = gt.with_points(gt.points + rng.normal(scale=5.0, size=gt.points.shape))
    base = np.linalg.norm(procrustes_align(pred, gt).points - gt.points, axis=1).mean()
    moved = pred.with_points(s * pred.points @ random_rotation(rng).T + rng.uniform(-100, 100, 3))
    again = np.linalg.norm(procrustes_align(moved, gt).points - gt.points, axis=1).mean()
    assert again == pytest.approx(base, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_procrustes_idempotent(seed):
    rng = np.random.default_rng(seed)
    gt = _cloud(rng, 100)
    pred = gt.with_points(rng.normal(size=gt.points.shape) * 100 + 500)
    once = procrustes_align(pred, gt)
    twice = procrustes_align(once, gt)
    assert np.abs(twice.points - once.points).max() < 1e-9 * np.abs(once.points).max()
