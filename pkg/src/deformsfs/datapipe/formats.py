"""On-disk encodings.  Every format assumption about the dataset lives here.

* RGB, masks: 8-bit PNG (masks store 0/255).
* depth: single-channel 16-bit PNG in tenths of a millimetre; 0 = no data.
* normals: three-channel 16-bit PNG, ``[-1, 1]`` mapped linearly to ``[0, 65535]``.
* vertices: plain text, one ``x y z`` row per vertex (mm).
"""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

DEPTH_SCALE = 10.0  # PNG units per mm
U16 = 65535


def _write(path, array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), array):
        raise OSError(f"could not write {path}")
    return path


def _read(path, flags) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    arr = cv2.imread(str(path), flags)
    if arr is None:
        raise ValueError(f"could not decode {path}")
    return arr


def write_rgb(path, image) -> Path:
    """``image`` is float in [0, 1] (or uint8), ``(H, W, 3)``."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _write(path, image[..., ::-1])


def read_rgb(path) -> np.ndarray:
    arr = _read(path, cv2.IMREAD_COLOR)
    return arr[..., ::-1].astype(np.float64) / 255.0


def write_mask(path, mask) -> Path:
    return _write(path, np.asarray(mask, dtype=bool).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    return _read(path, cv2.IMREAD_GRAYSCALE) > 127


def encode_depth(depth) -> np.ndarray:
    depth = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
    return np.round(np.clip(depth * DEPTH_SCALE, 0, U16)).astype(np.uint16)


def write_depth(path, depth) -> Path:
    return _write(path, encode_depth(depth))


def read_depth(path) -> np.ndarray:
    arr = _read(path, cv2.IMREAD_UNCHANGED)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel 16-bit depth PNG")
    return arr.astype(np.float64) / DEPTH_SCALE


def encode_normals(normals) -> np.ndarray:
    n = np.nan_to_num(np.asarray(normals, dtype=np.float64))
    return np.round((np.clip(n, -1.0, 1.0) + 1.0) * 0.5 * U16).astype(np.uint16)


def write_normals(path, normals) -> Path:
    return _write(path, encode_normals(normals)[..., ::-1])


def read_normals(path, mask=None) -> np.ndarray:
    """Decode a normal PNG; with ``mask`` the foreground is renormalised to unit length."""
    arr = _read(path, cv2.IMREAD_UNCHANGED)
    if arr.dtype != np.uint16 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{path}: expected a three-channel 16-bit normal PNG")
    n = arr[..., ::-1].astype(np.float64) / U16 * 2.0 - 1.0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        length = np.linalg.norm(n[mask], axis=1, keepdims=True)
        n[mask] = n[mask] / np.where(length > 0, length, 1.0)
        n[~mask] = 0.0
    return n


def write_vertices(path, vertices) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(vertices, dtype=np.float64).reshape(-1, 3), fmt="%.6f")
    return path


def read_vertices(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    v = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if v.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns")
    return v


def colorize_normals(normals, mask=None) -> np.ndarray:
    """Normals as ``(n + 1) / 2`` RGB; background black."""
    img = (np.clip(np.asarray(normals, dtype=np.float64), -1, 1) + 1.0) * 0.5
    if mask is not None:
        img[~np.asarray(mask, dtype=bool)] = 0.0
    return img
