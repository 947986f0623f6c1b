"""Evaluation measures: vertex error, aligned depth error and angular statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import (CameraIntrinsics, _as_mask, check_mask, depth_to_pointcloud,
                       procrustes_align)

THRESHOLDS = (10.0, 20.0, 30.0)
CSV_COLUMNS = ("experiment", "method", "mAE_mean", "mAE_std", "dAE",
               "frac10", "frac20", "frac30", "mD_mean", "mD_std")


def metric_vertices(gt, pred) -> float:
    """Mean Euclidean distance between corresponding vertices (mm)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    if gt.shape != pred.shape:
        raise ValueError(f"vertex counts differ: {gt.shape[0]} vs {pred.shape[0]}")
    return float(np.mean(np.linalg.norm(gt - pred, axis=1)))


def depth_errors(gt, pred, mask, K: CameraIntrinsics) -> np.ndarray:
    """Per-pixel 3D distances after similarity-aligning ``pred`` to ``gt``."""
    mask = check_mask(_as_mask(mask, np.shape(gt)))
    gt_cloud = depth_to_pointcloud(gt, mask, K)
    pred_cloud = depth_to_pointcloud(pred, mask, K, check=False)
    aligned = procrustes_align(pred_cloud, gt_cloud)
    return np.linalg.norm(gt_cloud.points - aligned.points, axis=1)


def metric_depth(gt, pred, mask, K: CameraIntrinsics) -> float:
    return float(np.mean(depth_errors(gt, pred, mask, K)))


def angular_errors(gt, pred, mask) -> np.ndarray:
    """Per-pixel angles in degrees between ``gt`` and ``pred`` on the mask.

    Zero-length predictions score 90 degrees.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    mask = check_mask(_as_mask(mask, gt.shape))
    if pred.shape != gt.shape:
        raise ValueError(f"normal maps differ in shape: {gt.shape} vs {pred.shape}")
    g = gt[mask]
    p = pred[mask]
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    plen = np.linalg.norm(p, axis=1)
    degenerate = plen == 0
    p = p / np.where(degenerate, 1.0, plen)[:, None]
    cos = np.clip(np.sum(g * p, axis=1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    ang[degenerate] = 90.0
    return ang


def angle_summary(angles: np.ndarray) -> dict:
    angles = np.asarray(angles, dtype=np.float64)
    out = {"mAE": float(np.mean(angles)), "mAE_std": float(np.std(angles)),
           "dAE": float(np.median(angles))}
    for t in THRESHOLDS:
        out[f"frac{int(t)}"] = 100.0 * float(np.mean(angles < t))
    return out


def angular_error_stats(gt, pred, mask) -> dict:
    """``{mAE, mAE_std, dAE, frac10, frac20, frac30}`` for one sample."""
    return angle_summary(angular_errors(gt, pred, mask))


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class SampleMetrics:
    """Per-sample measures; any of them may be missing."""
    angles: dict | None = None
    depth_mean: float | None = None
    depth_std: float | None = None
    vertices: float | None = None


@dataclass
class MetricsReport:
    """Test-set averages of per-sample statistics.

    ``*_std`` fields are the within-sample (per-pixel) standard deviations,
    averaged over samples.
    """
    sample_count: int = 0
    mAE: float | None = None
    mAE_std: float | None = None
    dAE: float | None = None
    frac10: float | None = None
    frac20: float | None = None
    frac30: float | None = None
    m_D: float | None = None
    m_D_std: float | None = None
    m_C: float | None = None
    experiment: str = ""
    method: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, samples: list[SampleMetrics], **kw) -> "MetricsReport":
        rep = cls(sample_count=len(samples), **kw)
        ang = [s.angles for s in samples if s.angles is not None]
        if ang:
            for key in ("mAE", "mAE_std", "dAE", "frac10", "frac20", "frac30"):
                setattr(rep, key, _mean(a[key] for a in ang))
        dep = [s for s in samples if s.depth_mean is not None]
        if dep:
            rep.m_D = _mean(s.depth_mean for s in dep)
            rep.m_D_std = _mean(s.depth_std for s in dep)
        ver = [s.vertices for s in samples if s.vertices is not None]
        if ver:
            rep.m_C = _mean(ver)
        return rep

    def check(self) -> None:
        fr = [self.frac10, self.frac20, self.frac30]
        if None not in fr and not (0 <= fr[0] <= fr[1] <= fr[2] <= 100):
            raise ValueError(f"threshold fractions not monotone: {fr}")
        for name in ("mAE", "dAE"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 180:
                raise ValueError(f"{name}={v} outside [0, 180]")
        for name in ("m_D", "m_C", "mAE_std", "m_D_std"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} is negative")

    def to_text(self) -> str:
        """Flat ``key = value`` record."""
        lines = []
        for f in fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        for k, v in self.extra.items():
            lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def csv_row(self) -> list[str]:
        vals = [self.experiment, self.method, self.mAE, self.mAE_std, self.dAE,
                self.frac10, self.frac20, self.frac30, self.m_D, self.m_D_std]
        return [_fmt(v) for v in vals]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def reports_to_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
