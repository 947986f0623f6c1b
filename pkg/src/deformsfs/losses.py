"""Training objectives for the vertex, depth and normal decoders.

All losses take batched torch tensors and return a scalar tensor; gradients
come from autograd.  Dense maps are channel-first: depth ``(N, H, W)`` or
``(N, 1, H, W)``, normals ``(N, 3, H, W)``, masks ``(N, H, W)``.

Background predictions never reach the arithmetic (they are replaced before
any operation), so mutating them leaves a loss and its gradient bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 10.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.epsilon <= 1e-6:
            raise ValueError("epsilon must lie in (0, 1e-6]")


def _masks(masks, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(masks, device=like.device)
    if m.dim() == 4:
        m = m[:, 0]
    m = m.bool()
    counts = m.flatten(1).sum(1)
    if (counts == 0).any():
        raise ValueError("every sample needs a non-empty mask")
    return m


def loss_vertices(gt: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-vertex squared distance; shapes ``(N, V, 3)`` or ``(N, 3V)``."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    n = gt.shape[0]
    diff = (pred - gt).reshape(n, -1, 3)
    return diff.pow(2).sum(-1).mean(-1).mean()


def loss_depth(gt: torch.Tensor, pred: torch.Tensor, masks) -> torch.Tensor:
    """Masked mean absolute depth error, averaged over the batch."""
    if gt.dim() == 4:
        gt = gt[:, 0]
    if pred.dim() == 4:
        pred = pred[:, 0]
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    m = _masks(masks, pred)
    pred = torch.where(m, pred, gt.detach())
    err = torch.where(m, (gt - pred).abs(), torch.zeros((), dtype=pred.dtype))
    per_sample = err.flatten(1).sum(1) / m.flatten(1).sum(1).to(pred.dtype)
    return per_sample.mean()


def normal_terms(gt: torch.Tensor, pred: torch.Tensor, config: LossConfig = LossConfig()):
    """Per-pixel angular and unit-length terms, each ``(N, H, W)``.

    Evaluated in double precision: near alignment arccos needs the ``epsilon``
    margin, which float32 cannot represent.  Results are cast back.
    """
    dtype = pred.dtype
    gt, pred = gt.double(), pred.double()
    gnorm = torch.linalg.vector_norm(gt, dim=1)
    pnorm = torch.linalg.vector_norm(pred, dim=1)
    cos = (gt * pred).sum(1) / (gnorm * pnorm + config.epsilon)
    # guards against rounding only; inactive for well-formed inputs
    hi = math.nextafter(1.0, 0.0)
    cos = cos.clamp(-hi, hi)
    angular = torch.arccos(cos) / math.pi
    length = (pnorm - 1.0).pow(2)
    return angular.to(dtype), length.to(dtype)


def loss_normals(gt: torch.Tensor, pred: torch.Tensor, masks,
                 config: LossConfig = LossConfig()) -> torch.Tensor:
    """Masked ``kappa * angular + length`` loss, mask-normalised per sample."""
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(gt.shape)} vs {tuple(pred.shape)}")
    m = _masks(masks, pred)
    mc = m[:, None]
    pred = torch.where(mc, pred, gt.detach())
    angular, length = normal_terms(gt, pred, config)
    per_pixel = torch.where(m, config.kappa * angular + length, torch.zeros((), dtype=pred.dtype))
    per_sample = per_pixel.flatten(1).sum(1) / m.flatten(1).sum(1).to(pred.dtype)
    return per_sample.mean()


def loss_joint(components: Sequence[torch.Tensor], weights: Sequence[float]) -> torch.Tensor:
    """Weighted sum of component losses."""
    if len(components) < 2:
        raise ValueError("a joint loss needs at least two components")
    if len(components) != len(weights):
        raise ValueError(f"{len(components)} components but {len(weights)} weights")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError(f"weights must be non-negative and not all zero: {tuple(weights)}")
    total = weights[0] * components[0]
    for w, c in zip(weights[1:], components[1:]):
        total = total + w * c
    return total
