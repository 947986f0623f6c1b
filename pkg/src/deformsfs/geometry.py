"""Depth maps, normal maps, point clouds and the conversions between them.

Conventions used throughout the package:

* images are ``(H, W, C)`` float arrays, masks ``(H, W)`` bool arrays;
* depths are camera-frame ``z`` values in millimetres;
* the camera looks along ``+z`` with ``x`` to the right and ``y`` down, so a
  visible surface has normals with a negative ``z`` component.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

log = logging.getLogger(__name__)

GRAZING_NZ = 1e-3
MAX_GRADIENT = 1e3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def crop(self, x0: int, y0: int, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the ``width x height`` window whose top-left pixel is ``(x0, y0)``."""
        return CameraIntrinsics(self.fx, self.fy, self.cx - x0, self.cy - y0, width, height)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates ``(u, v)`` of camera-frame points, shape ``(M, 2)``."""
        points = np.asarray(points, dtype=np.float64)
        z = points[:, 2]
        return np.stack([points[:, 0] * self.fx / z + self.cx,
                         points[:, 1] * self.fy / z + self.cy], axis=1)


@dataclass(frozen=True)
class PointCloud:
    """Points backprojected from the masked pixels of a depth map.

    ``pixels`` holds the flat (row-major) index of the pixel each point came
    from, which is what gives two clouds of the same mask a pixelwise
    correspondence.
    """
    points: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (M, 3), got {self.points.shape}")
        if self.pixels.shape != (self.points.shape[0],):
            raise ValueError("one pixel index per point required")

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(np.asarray(points, dtype=np.float64), self.pixels)


def _as_mask(mask, shape=None) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {mask.shape} does not match {tuple(shape[:2])}")
    return mask


def check_mask(mask) -> np.ndarray:
    mask = _as_mask(mask)
    if not mask.any():
        raise ValueError("mask is empty")
    return mask


def check_depth(depth, mask) -> None:
    mask = _as_mask(mask, np.shape(depth))
    values = np.asarray(depth)[mask]
    if not np.all(np.isfinite(values)) or not np.all(values > 0):
        raise ValueError("masked depth values must be finite and positive")


def check_normals(normals, mask, tol: float = 1e-6) -> None:
    """Raise unless every masked normal is unit length and camera-facing."""
    normals = np.asarray(normals)
    mask = _as_mask(mask, normals.shape)
    n = normals[mask]
    if not np.all(np.isfinite(n)):
        raise ValueError("non-finite normals under the mask")
    length = np.linalg.norm(n, axis=1)
    if np.any(np.abs(length - 1.0) > tol):
        raise ValueError(f"normals not unit length (max deviation {np.max(np.abs(length - 1)):.3g})")
    if np.any(n[:, 2] >= 0):
        raise ValueError("normals must point towards the camera (z < 0)")


def apply_mask(image, mask) -> np.ndarray:
    """Zero the background of ``image``; foreground values are left untouched."""
    image = np.asarray(image)
    mask = _as_mask(mask, image.shape)
    if image.ndim == 3:
        mask = mask[..., None]
    return np.where(mask, image, np.zeros((), dtype=image.dtype))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.arange(size) - size // 2
    g = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_smooth(depth, mask, kernel: int = 9, sigma: float = 3.0) -> np.ndarray:
    """Mask-normalised Gaussian blur: only foreground depths contribute.

    Background pixels are returned unchanged.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = _as_mask(mask, depth.shape)
    k = gaussian_kernel(kernel, sigma)
    if kernel == 1:
        return depth.copy()
    fg = mask.astype(np.float64)
    num = ndimage.correlate(np.where(mask, depth, 0.0), k, mode="constant", cval=0.0)
    den = ndimage.correlate(fg, k, mode="constant", cval=0.0)
    out = depth.copy()
    out[mask] = num[mask] / den[mask]
    return out


def backproject(depth, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame coordinates of every pixel, shape ``(H, W, 3)``."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if (w, h) != (K.width, K.height):
        raise ValueError(f"depth is {w}x{h} but intrinsics describe {K.width}x{K.height}")
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x = (u - K.cx) * depth / K.fx
    y = (v - K.cy) * depth / K.fy
    return np.stack([x, y, depth], axis=-1)


def depth_to_pointcloud(depth, mask, K: CameraIntrinsics, check: bool = True) -> PointCloud:
    """Backproject the masked pixels of ``depth``.

    With ``check=False`` nonpositive depths are accepted, which is needed when
    scoring raw network predictions.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = check_mask(_as_mask(mask, depth.shape))
    if check:
        check_depth(depth, mask)
    pixels = np.flatnonzero(mask)
    v, u = np.divmod(pixels, depth.shape[1])
    d = depth.ravel()[pixels]
    pts = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=1)
    return PointCloud(pts, pixels)


def _neighbours(mask):
    """Masks of pixels whose right/left/down/up neighbour is also foreground."""
    right = np.zeros_like(mask)
    right[:, :-1] = mask[:, :-1] & mask[:, 1:]
    left = np.zeros_like(mask)
    left[:, 1:] = mask[:, 1:] & mask[:, :-1]
    down = np.zeros_like(mask)
    down[:-1, :] = mask[:-1, :] & mask[1:, :]
    up = np.zeros_like(mask)
    up[1:, :] = mask[1:, :] & mask[:-1, :]
    return right, left, down, up


def _tangent(P, fwd, bwd, axis):
    nxt = np.roll(P, -1, axis=axis)
    prv = np.roll(P, 1, axis=axis)
    central = 0.5 * (nxt - prv)
    forward = nxt - P
    backward = P - prv
    out = np.where((fwd & bwd)[..., None], central,
                   np.where(fwd[..., None], forward, backward))
    return out


def depth_to_normals(depth, mask, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference normals of the backprojected surface.

    Central differences are used where both neighbours along an axis are in
    the mask, one-sided differences otherwise.  Pixels with no foreground
    neighbour along some axis have no defined normal; they are removed from
    the returned mask and their normal is set to zero.

    Returns ``(normals, valid_mask)``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = _as_mask(mask, depth.shape)
    P = backproject(np.where(mask, depth, 0.0), K)
    right, left, down, up = _neighbours(mask)
    du = _tangent(P, right, left, axis=1)
    dv = _tangent(P, down, up, axis=0)
    n = np.cross(dv, du)
    n = np.where((n[..., 2] > 0)[..., None], -n, n)
    length = np.linalg.norm(n, axis=-1)
    valid = mask & (right | left) & (down | up) & (length > 0)
    out = np.zeros_like(n)
    out[valid] = n[valid] / length[valid][:, None]
    dropped = int(mask.sum() - valid.sum())
    if dropped:
        log.debug("depth_to_normals: %d masked pixels without a defined normal", dropped)
    return out, valid


def gradient_field(normals, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthographic depth gradients ``(dz/dx, dz/dy)`` implied by a normal map.

    Near-grazing normals (``|n_z| < 1e-3``) get clamped gradients; the third
    return value flags them.  Background gradients are zero.
    """
    normals = np.asarray(normals, dtype=np.float64)
    mask = _as_mask(mask, normals.shape)
    n = np.where(mask[..., None], normals, np.array([0.0, 0.0, -1.0]))
    nz = n[..., 2]
    grazing = mask & (np.abs(nz) < GRAZING_NZ)
    nz = np.where(grazing, np.where(nz > 0, GRAZING_NZ, -GRAZING_NZ), nz)
    p = np.clip(-n[..., 0] / nz, -MAX_GRADIENT, MAX_GRADIENT)
    q = np.clip(-n[..., 1] / nz, -MAX_GRADIENT, MAX_GRADIENT)
    p[~mask] = 0.0
    q[~mask] = 0.0
    return p, q, grazing


def integrate_normals(normals, mask, mean_depth: float, pixel_size: float = 1.0,
                      rtol: float = 1e-8) -> np.ndarray:
    """Least-squares depth whose gradients best match ``normals`` on the mask.

    The orthographic gradient field is integrated by solving the masked
    Poisson normal equations with (Jacobi-preconditioned) conjugate gradient.
    ``pixel_size`` is the lateral size of a pixel in mm.  Each connected
    component of the mask is shifted so that its mean depth is
    ``mean_depth``; the background is zero.
    """
    normals = np.asarray(normals, dtype=np.float64)
    mask = check_mask(_as_mask(mask, normals.shape))
    p, q, grazing = gradient_field(normals, mask)
    if grazing.any():
        log.info("integrate_normals: clamped %d near-grazing normals", int(grazing.sum()))

    h, w = mask.shape
    index = -np.ones((h, w), dtype=np.int64)
    index[mask] = np.arange(mask.sum())
    right, _, down, _ = _neighbours(mask)

    ry, rx = np.nonzero(right)
    dy, dx = np.nonzero(down)
    a = np.concatenate([index[ry, rx], index[dy, dx]])
    b = np.concatenate([index[ry, rx + 1], index[dy + 1, dx]])
    rhs = pixel_size * np.concatenate([0.5 * (p[ry, rx] + p[ry, rx + 1]),
                                       0.5 * (q[dy, dx] + q[dy + 1, dx])])
    m = int(mask.sum())
    z = np.zeros(m)
    if a.size:
        e = a.size
        rows = np.concatenate([np.arange(e), np.arange(e)])
        cols = np.concatenate([b, a])
        vals = np.concatenate([np.ones(e), -np.ones(e)])
        D = sparse.csr_matrix((vals, (rows, cols)), shape=(e, m))
        A = (D.T @ D).tocsr()
        rhs_n = D.T @ rhs
        diag = A.diagonal()
        inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
        M = sparse.diags(inv)
        z, info = cg(A, rhs_n, rtol=rtol, atol=0.0, maxiter=20 * m, M=M)
        if info > 0:
            log.warning("integrate_normals: CG stopped after %d iterations before rtol=%g", info, rtol)

    labels, count = ndimage.label(mask)
    comp = labels[mask]
    sums = np.bincount(comp, weights=z, minlength=count + 1)
    sizes = np.bincount(comp, minlength=count + 1)
    z = z - (sums / np.maximum(sizes, 1))[comp] + mean_depth
    out = np.zeros((h, w))
    out[mask] = z
    return out


def similarity_fit(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form ``(s, R, t)`` minimising ``sum ||s R src_i + t - dst_i||^2``.

    ``R`` is a proper rotation and ``s > 0``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"point sets must both be (M, 3), got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise ValueError("at least 3 points are needed for a similarity fit")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError("points are collinear; similarity alignment is undefined")
    n = src.shape[0]
    cov = xd.T @ xs / n
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    var_s = np.sum(xs ** 2) / n
    s = float(np.sum(S * d) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def procrustes_align(pred: PointCloud, gt: PointCloud) -> PointCloud:
    """Similarity-align ``pred`` onto ``gt`` (pixelwise correspondence)."""
    if not np.array_equal(pred.pixels, gt.pixels):
        raise ValueError("point clouds must come from the same set of pixels")
    s, R, t = similarity_fit(pred.points, gt.points)
    return pred.with_points(s * pred.points @ R.T + t)
