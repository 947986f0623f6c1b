"""Raw RGB-D frame to training sample: segmentation, depth cleaning, cropping, normals."""
from __future__ import annotations

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve
from skimage.filters import threshold_otsu

from ..geometry import CameraIntrinsics, depth_to_normals, gaussian_smooth

MIN_AREA_FRACTION = 0.01
MAX_INVALID_FRACTION = 0.5
CLUSTER_GAP = 50.0  # mm
MAD_FACTOR = 3.0
MAD_TO_SIGMA = 1.4826
MIN_TOLERANCE = 5.0  # mm, sensor noise floor when the cluster is nearly flat


class FrameRejected(ValueError):
    """The frame cannot be turned into a usable sample."""


def luminance(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def largest_component(mask) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (np.argmax(sizes) + 1)


def segment_foreground(image) -> np.ndarray:
    """Otsu threshold on luminance, largest connected component, holes filled."""
    lum = luminance(image)
    if lum.max() == lum.min():
        raise FrameRejected("image has no contrast to segment")
    fg = lum > threshold_otsu(lum)
    fg = ndimage.binary_fill_holes(largest_component(fg))
    if fg.sum() < MIN_AREA_FRACTION * fg.size:
        raise FrameRejected(f"largest component covers {fg.sum()} px, below 1% of the frame")
    return fg


def _dominant_cluster(values: np.ndarray) -> tuple[float, float]:
    """Depth range of the largest gap-separated cluster of ``values``."""
    v = np.sort(values)
    breaks = np.flatnonzero(np.diff(v) > CLUSTER_GAP)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [v.size]])
    k = int(np.argmax(ends - starts))
    return float(v[starts[k]]), float(v[ends[k] - 1])


def depth_inliers(depth, mask) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    valid = mask & np.isfinite(depth) & (depth > 0)
    if not valid.any():
        return valid
    lo, hi = _dominant_cluster(depth[valid])
    inside = valid & (depth >= lo) & (depth <= hi)
    vals = depth[inside]
    med = np.median(vals)
    mad = MAD_TO_SIGMA * np.median(np.abs(vals - med))
    return inside & (np.abs(depth - med) <= max(MAD_FACTOR * mad, MIN_TOLERANCE))


def harmonic_fill(depth, mask, known) -> np.ndarray:
    """Replace masked unknown pixels by the discrete harmonic interpolant of the known ones."""
    depth = np.asarray(depth, dtype=np.float64).copy()
    unknown = mask & ~known
    if not unknown.any():
        return depth
    h, w = mask.shape
    idx = -np.ones((h, w), dtype=np.int64)
    idx[unknown] = np.arange(unknown.sum())
    n = int(unknown.sum())
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    deg = np.zeros(n)
    uy, ux = np.nonzero(unknown)
    me = idx[uy, ux]
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        ny, nx = uy + dy, ux + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        ny, nx, src = ny[ok], nx[ok], me[ok]
        inm = mask[ny, nx]
        ny, nx, src = ny[inm], nx[inm], src[inm]
        np.add.at(deg, src, 1.0)
        kn = known[ny, nx]
        np.add.at(rhs, src[kn], depth[ny[kn], nx[kn]])
        un = ~kn
        rows.append(src[un])
        cols.append(idx[ny[un], nx[un]])
        vals.append(-np.ones(un.sum()))
    # components with no known neighbour: pin to the median of the known depths
    lab, count = ndimage.label(unknown)
    touching = ndimage.binary_dilation(known) & unknown
    fallback = float(np.median(depth[known])) if known.any() else 0.0
    isolated = np.setdiff1d(np.arange(1, count + 1), np.unique(lab[touching]))
    pinned = np.isin(lab[uy, ux], isolated)
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    A = A + sparse.diags(deg)
    if pinned.any():
        P = sparse.diags(np.where(pinned, 0.0, 1.0))
        A = P @ A + sparse.diags(pinned.astype(np.float64))
        rhs = np.where(pinned, fallback, rhs)
    sol = spsolve(A.tocsc(), rhs)
    depth[unknown] = sol
    return depth


def clean_depth(depth, mask) -> np.ndarray:
    """Drop outliers of the dominant depth cluster and refill every hole harmonically.

    Background pixels are set to zero.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    known = depth_inliers(depth, mask)
    bad = int(mask.sum() - known.sum())
    if bad > MAX_INVALID_FRACTION * mask.sum():
        raise FrameRejected(f"{bad} of {int(mask.sum())} masked depths are invalid")
    out = harmonic_fill(np.where(known, depth, 0.0), mask, known)
    out[~mask] = 0.0
    return out


def make_gt_normals(depth, mask, K: CameraIntrinsics, kernel: int = 9, sigma: float = 3.0):
    """Smooth the depth (9x9, sigma 3 by default) and differentiate it.

    Returns ``(normals, valid_mask)`` as :func:`depth_to_normals` does.
    """
    smoothed = gaussian_smooth(depth, mask, kernel, sigma)
    return depth_to_normals(smoothed, mask, K)


def crop_window(mask, size: int = 224) -> tuple[int, int]:
    """Top-left corner of the ``size x size`` window centred on the mask's bounding box."""
    h, w = mask.shape
    if h < size or w < size:
        raise FrameRejected(f"frame {w}x{h} smaller than the {size}px crop")
    ys, xs = np.nonzero(mask)
    cy = (ys.min() + ys.max()) // 2
    cx = (xs.min() + xs.max()) // 2
    y0 = int(np.clip(cy - size // 2, 0, h - size))
    x0 = int(np.clip(cx - size // 2, 0, w - size))
    return x0, y0


def preprocess_frame(image, raw_depth, K: CameraIntrinsics, size: int = 224):
    """Full preprocessing of one RGB-D frame.

    Returns ``(image, mask, depth, normals, K_cropped)`` at ``size x size``;
    the mask excludes pixels that ended up without a normal.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = segment_foreground(image)
    x0, y0 = crop_window(mask, size)
    win = (slice(y0, y0 + size), slice(x0, x0 + size))
    image, mask = image[win], mask[win]
    Kc = K.crop(x0, y0, size, size)
    depth = clean_depth(np.asarray(raw_depth, dtype=np.float64)[win], mask)
    normals, valid = make_gt_normals(depth, mask, Kc)
    if not valid.any():
        raise FrameRejected("no pixel has a defined normal")
    depth = np.where(valid, depth, 0.0)
    return image, valid, depth, normals, Kc
