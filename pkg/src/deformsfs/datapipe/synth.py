"""Synthetic deformed surfaces with analytic depth, normals and vertices.

Depth is defined over the pixel grid as ``base + sum of deformations``
(Gaussian bumps and sinusoidal folds, amplitudes in mm, extents in pixels).
Normals are the exact normals of the backprojected surface, and the image
is Lambertian shading under a few directional lights.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics
from .dataset import Sample

MIN_ABS_NZ = 0.05


def _default_lights():
    # direction towards the light (camera frame, camera looks along +z), RGB intensity
    return (
        ((-0.5, -0.3, -0.81), (0.55, 0.40, 0.30)),
        ((0.5, -0.2, -0.84), (0.30, 0.45, 0.35)),
        ((0.0, 0.55, -0.83), (0.25, 0.30, 0.50)),
    )


@dataclass(frozen=True)
class SynthParams:
    count: int = 20
    size: int = 224
    base_depth: float = 1000.0
    bumps: tuple[int, int] = (2, 5)
    bump_amplitude: tuple[float, float] = (10.0, 40.0)
    bump_sigma: tuple[float, float] = (12.0, 40.0)
    folds: tuple[int, int] = (0, 2)
    fold_amplitude: tuple[float, float] = (2.0, 8.0)
    fold_wavelength: tuple[float, float] = (30.0, 120.0)
    lights: tuple = field(default_factory=_default_lights)
    albedo: tuple[float, float, float] = (0.9, 0.9, 0.9)
    ambient: float = 0.05
    margin: tuple[int, int] = (8, 24)
    vertex_grid: int = 9
    fx: float = 525.0
    fy: float = 525.0
    cx: float | None = None
    cy: float | None = None
    sequences: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.size < 8:
            raise ValueError("need count >= 1 and size >= 8")
        if self.base_depth <= 0:
            raise ValueError("base_depth must be positive")
        if not self.lights:
            raise ValueError("at least one light is required")
        if self.vertex_grid < 2:
            raise ValueError("vertex_grid must be >= 2")
        if not 1 <= self.sequences <= self.count:
            raise ValueError("sequences must lie in [1, count]")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        c = (self.size - 1) / 2.0
        return CameraIntrinsics(self.fx, self.fy, c if self.cx is None else self.cx,
                                c if self.cy is None else self.cy, self.size, self.size)


@dataclass
class HeightField:
    """Analytic depth over pixel coordinates with its first derivatives."""
    base: float
    bumps: list = field(default_factory=list)   # (amplitude, u0, v0, sigma)
    folds: list = field(default_factory=list)   # (amplitude, wavelength, angle, phase)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.full(np.broadcast(u, v).shape, self.base)
        du = np.zeros_like(d)
        dv = np.zeros_like(d)
        for a, u0, v0, s in self.bumps:
            g = a * np.exp(-((u - u0) ** 2 + (v - v0) ** 2) / (2 * s * s))
            d += g
            du += -g * (u - u0) / (s * s)
            dv += -g * (v - v0) / (s * s)
        for a, lam, ang, ph in self.folds:
            k = 2 * np.pi / lam
            ca, sa = np.cos(ang), np.sin(ang)
            arg = k * (ca * u + sa * v) + ph
            d += a * np.sin(arg)
            c = a * k * np.cos(arg)
            du += c * ca
            dv += c * sa
        return d, du, dv


def analytic_normals(depth, du, dv, u, v, K: CameraIntrinsics) -> np.ndarray:
    """Unit normals of the backprojected surface given depth and its pixel derivatives."""
    xu = (depth + (u - K.cx) * du) / K.fx
    yu = (v - K.cy) * du / K.fy
    xv = (u - K.cx) * dv / K.fx
    yv = (depth + (v - K.cy) * dv) / K.fy
    Pu = np.stack(np.broadcast_arrays(xu, yu, du), axis=-1)
    Pv = np.stack(np.broadcast_arrays(xv, yv, dv), axis=-1)
    n = np.cross(Pv, Pu)
    n = np.where((n[..., 2] > 0)[..., None], -n, n)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def shade(normals, mask, lights, albedo, ambient) -> np.ndarray:
    """``albedo * sum_j max(0, n . l_j) * w_j + ambient``, clipped to [0, 1]; background 0."""
    h, w = mask.shape
    img = np.zeros((h, w, 3))
    for direction, intensity in lights:
        l = np.asarray(direction, dtype=np.float64)
        l = l / np.linalg.norm(l)
        cos = np.clip(normals @ l, 0.0, None)
        img += cos[..., None] * np.asarray(intensity, dtype=np.float64)
    img = np.clip(np.asarray(albedo, dtype=np.float64) * img + ambient, 0.0, 1.0)
    img[~mask] = 0.0
    return img


def random_field(rng: np.random.Generator, p: SynthParams) -> HeightField:
    hf = HeightField(p.base_depth)
    n = p.size
    for _ in range(rng.integers(p.bumps[0], p.bumps[1] + 1)):
        a = rng.uniform(*p.bump_amplitude) * rng.choice([-1.0, 1.0])
        hf.bumps.append((a, rng.uniform(0, n - 1), rng.uniform(0, n - 1), rng.uniform(*p.bump_sigma)))
    for _ in range(rng.integers(p.folds[0], p.folds[1] + 1)):
        hf.folds.append((rng.uniform(*p.fold_amplitude), rng.uniform(*p.fold_wavelength),
                         rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)))
    return hf


def render(hf: HeightField, mask: np.ndarray, p: SynthParams, sequence="synth000", frame=0) -> Sample:
    K = p.intrinsics
    n = p.size
    u, v = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64))
    d, du, dv = hf(u, v)
    normals = analytic_normals(d, du, dv, u, v, K)
    if np.any(np.abs(normals[mask][:, 2]) < MIN_ABS_NZ):
        raise ValueError("deformation too steep: surface normals become grazing (|n_z| < 0.05)")
    if np.any(d[mask] <= 0):
        raise ValueError("deformation pushes the surface behind the camera")
    image = shade(normals, mask, p.lights, p.albedo, p.ambient)
    ys, xs = np.nonzero(mask)
    gu = np.linspace(xs.min(), xs.max(), p.vertex_grid)
    gv = np.linspace(ys.min(), ys.max(), p.vertex_grid)
    GU, GV = np.meshgrid(gu, gv)
    gd = hf(GU, GV)[0]
    vertices = np.stack([(GU - K.cx) * gd / K.fx, (GV - K.cy) * gd / K.fy, gd], axis=-1).reshape(-1, 3)
    return Sample(image, mask, np.where(mask, d, 0.0), np.where(mask[..., None], normals, 0.0),
                  K, vertices, sequence, frame, "synthetic")


def synth_generate(params: SynthParams) -> list[Sample]:
    """Deterministic (per ``params.seed``) list of ``params.count`` samples."""
    rng = np.random.default_rng(params.seed)
    per_seq = int(np.ceil(params.count / params.sequences))
    out = []
    n = params.size
    for i in range(params.count):
        hf = random_field(rng, params)
        # margins shrink with small frames so the surface keeps most of the image
        hi = min(params.margin[1], n // 5)
        m = rng.integers(min(params.margin[0], hi), hi + 1, size=4)
        mask = np.zeros((n, n), dtype=bool)
        mask[m[0]:n - m[1], m[2]:n - m[3]] = True
        seq, frame = divmod(i, per_seq)
        out.append(render(hf, mask, params, f"synth{seq:03d}", frame))
    return out
