"""Figures and tables written next to the CSV/text reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datapipe.formats import colorize_normals  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

ERROR_RAMP_MAX = 60.0  # degrees
ERROR_COLORMAP = "jet"


def error_image(angles_map: np.ndarray, mask: np.ndarray, max_deg: float = ERROR_RAMP_MAX) -> np.ndarray:
    """Angular error in degrees as RGB: 0..max_deg on the jet ramp, clipped; background black."""
    t = np.clip(np.nan_to_num(angles_map) / max_deg, 0.0, 1.0)
    rgb = matplotlib.colormaps[ERROR_COLORMAP](t)[..., :3]
    rgb[~np.asarray(mask, dtype=bool)] = 0.0
    return rgb


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(log_lines, path) -> Path:
    """Per-stage training/validation loss from the run log."""
    from .training import parse_log

    stages = {}
    for rec in parse_log(log_lines):
        if "epoch" in rec:
            stages.setdefault(int(rec["stage"]), []).append(
                (int(rec["epoch"]), float(rec["train_loss"]), float(rec["val_loss"])))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    offset = 0
    for st in sorted(stages):
        h = np.array(stages[st])
        x = h[:, 0] + offset
        ax.plot(x, h[:, 1], label=f"stage {st} train")
        ax.plot(x, h[:, 2], "--", label=f"stage {st} val")
        if offset:
            ax.axvline(offset - 0.5, color="0.6", lw=0.8)
        offset += len(h)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if stages and all(np.all(np.array(v)[:, 1:] > 0) for v in stages.values()):
        ax.set_yscale("log")
    if stages:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_angle_histogram(angles, path, title="") -> Path:
    angles = np.concatenate([np.ravel(a) for a in angles]) if len(angles) else np.zeros(0)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(angles, bins=np.arange(0, 91, 2.5), density=True, color="C0")
    for t in (10, 20, 30):
        ax.axvline(t, color="0.4", ls=":", lw=0.8)
    ax.set_xlabel("angular error [deg]")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_prediction(image, mask, gt_normals, pred_normals, angles_map, path) -> Path:
    panels = [("input", np.where(mask[..., None], image, 0.0)),
              ("ground truth", colorize_normals(gt_normals, mask)),
              ("prediction", colorize_normals(pred_normals, mask)),
              (f"error (0-{ERROR_RAMP_MAX:.0f} deg)", error_image(angles_map, mask))]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(np.clip(img, 0, 1))
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def comparison_table(reports: list[MetricsReport]) -> str:
    """Plain-text table of reports sorted by mAE (missing values last)."""
    rows = sorted(reports, key=lambda r: (r.mAE is None, r.mAE if r.mAE is not None else 0.0))
    head = ["experiment", "method", "mAE", "dAE", "<10", "<20", "<30", "m_D"]

    def pm(a, b):
        if a is None:
            return "-"
        return f"{a:.2f}" if b is None else f"{a:.2f}+-{b:.2f}"

    def f(v):
        return "-" if v is None else f"{v:.2f}"

    body = [[r.experiment, r.method, pm(r.mAE, r.mAE_std), f(r.dAE), f(r.frac10), f(r.frac20),
             f(r.frac30), pm(r.m_D, r.m_D_std)] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"
