"""Staged training with early stopping, and test-set evaluation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datapipe.dataset import Sample
from .geometry import integrate_normals
from .losses import LossConfig, loss_depth, loss_joint, loss_normals, loss_vertices
from .metrics import (MetricsReport, SampleMetrics, angle_summary, angular_errors,
                      depth_errors, metric_vertices)
from .model import ShapeNet, save_checkpoint, weight_hash

log = logging.getLogger(__name__)

HEAD_LETTERS = {"N": "normals", "D": "depth", "C": "vertices"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    heads: tuple[str, ...]
    weights: tuple[float, ...]
    # None: continue from the weights currently in the model (the previous stage's best)
    init_checkpoint: str | None = None

    def __post_init__(self):
        if len(self.heads) != len(self.weights):
            raise ValueError("one weight per active head required")


def staged_plan(model_name: str) -> list[Stage]:
    """Training stages for a model named like ``N``, ``D``, ``N+D`` or ``N+D+C``.

    Joint models first train the first-listed decoder alone, then add the
    second with mixing weights (1, 3), then the third with (1, 1, 3).
    """
    letters = model_name.upper().split("+")
    if not letters or any(l not in HEAD_LETTERS for l in letters) or len(set(letters)) != len(letters):
        raise ValueError(f"bad model name {model_name!r}; use e.g. N, D, C, N+D, N+D+C")
    heads = [HEAD_LETTERS[l] for l in letters]
    plan = [Stage((heads[0],), (1.0,))]
    if len(heads) >= 2:
        plan.append(Stage(tuple(heads[:2]), (1.0, 3.0)))
    if len(heads) == 3:
        plan.append(Stage(tuple(heads), (1.0, 1.0, 3.0)))
    return plan


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 1000
    patience: int = 30
    kappa: float = 10.0
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0
    stages: list[Stage] = field(default_factory=lambda: staged_plan("N"))

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.kappa, self.epsilon)


@dataclass
class TrainState:
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    since_improvement: int = 0
    best_weights: dict | None = None

    def update(self, val: float, model: torch.nn.Module) -> bool:
        """Record one validation result; returns True if it is a new best."""
        self.epoch += 1
        if val < self.best_val:
            self.best_val = val
            self.best_epoch = self.epoch - 1
            self.since_improvement = 0
            self.best_weights = copy.deepcopy(model.state_dict())
            return True
        self.since_improvement += 1
        return False

    def exhausted(self, patience: int) -> bool:
        return self.since_improvement >= patience


@dataclass
class StageResult:
    best_val: float
    best_epoch: int
    epochs: int
    stop_reason: str
    weight_hash: str
    checkpoint: Path | None = None
    history: list = field(default_factory=list)


class Batch:
    """Stacked tensors for a few samples."""

    def __init__(self, samples: Sequence[Sample]):
        self.images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
        self.masks = torch.from_numpy(np.stack([s.mask for s in samples]))
        self.depth = torch.from_numpy(np.stack([s.depth for s in samples]).astype(np.float32))
        self.normals = torch.from_numpy(np.stack([s.normals for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
        if all(s.vertices is not None for s in samples):
            self.vertices = torch.from_numpy(np.stack([s.vertices for s in samples]).astype(np.float32))
        else:
            self.vertices = None

    def __len__(self):
        return self.images.shape[0]


def batches(samples: Sequence[Sample], batch_size: int, order=None):
    """Yield :class:`Batch` objects; samples are only touched batch by batch."""
    idx = range(len(samples)) if order is None else [int(i) for i in order]
    idx = list(idx)
    for start in range(0, len(idx), batch_size):
        yield Batch([samples[i] for i in idx[start:start + batch_size]])


def head_losses(out: dict, batch: Batch, heads, loss_config: LossConfig) -> list[torch.Tensor]:
    losses = []
    for head in heads:
        if head == "normals":
            losses.append(loss_normals(batch.normals, out["normals"], batch.masks, loss_config))
        elif head == "depth":
            losses.append(loss_depth(batch.depth, out["depth"], batch.masks))
        else:
            if batch.vertices is None:
                raise ValueError("vertex head active but samples carry no vertices")
            losses.append(loss_vertices(batch.vertices, out["vertices"]))
    return losses


def combine(losses, weights) -> torch.Tensor:
    if len(losses) == 1:
        return weights[0] * losses[0]
    return loss_joint(losses, weights)


@torch.no_grad()
def dataset_loss(model: ShapeNet, data: Sequence[Sample], heads, weights, loss_config,
                 batch_size=8) -> float:
    """Weighted loss over ``data`` in inference mode, averaged per sample."""
    was = model.training
    model.eval()
    total = 0.0
    for b in batches(data, batch_size):
        out = model(b.images, b.masks, heads)
        total += float(combine(head_losses(out, b, heads, loss_config), weights)) * len(b)
    model.train(was)
    return total / len(data)


class RunLog:
    """Plain-text ``key=value`` event log, one line per event."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.lines: list[str] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, **fields):
        line = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
        self.lines.append(line)
        log.info(line)
        if self.path:
            with self.path.open("a") as f:
                f.write(line + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def parse_log(lines) -> list[dict]:
    out = []
    for line in lines:
        out.append(dict(tok.split("=", 1) for tok in line.split() if "=" in tok))
    return out


def train_stage(model: ShapeNet, train_set: Sequence[Sample], val_set: Sequence[Sample] | None, config: TrainConfig,
                heads: Sequence[str], weights: Sequence[float], *, stage: int = 1,
                run_log: RunLog | None = None, run_dir=None,
                validate: Callable[[ShapeNet, int], float] | None = None) -> StageResult:
    """Mini-batch Adam on the weighted loss of ``heads`` with early stopping.

    After every epoch the validation loss is computed (``validate`` overrides
    it); training stops after ``config.patience`` epochs without improvement
    or at ``config.max_epochs``.  The model is left holding the best
    validation weights, which are also checkpointed when ``run_dir`` is set.
    """
    missing = set(heads) - set(model.heads)
    if missing:
        raise ValueError(f"stage heads {sorted(missing)} not in model heads {model.heads}")
    run_log = run_log or RunLog()
    loss_config = config.loss_config
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed + 1000 * stage)
    state = TrainState()
    history = []
    reason = "max_epochs"
    run_log(stage=stage, event="start", heads=tuple(heads), weights=tuple(weights),
            patience=config.patience, init_hash=weight_hash(model))
    for epoch in range(config.max_epochs):
        model.train()
        order = torch.randperm(len(train_set), generator=gen).tolist()
        running = 0.0
        for start, b in zip(range(0, len(order), config.batch_size),
                            batches(train_set, config.batch_size, order)):
            out = model(b.images, b.masks, heads)
            comps = head_losses(out, b, heads, loss_config)
            loss = combine(comps, weights)
            if not torch.isfinite(loss):
                _dump_diverged(run_dir, model, stage, epoch, start, comps)
                raise TrainingDiverged(
                    f"non-finite loss at stage {stage}, epoch {epoch}, batch offset {start}: "
                    f"{[float(c.detach()) for c in comps]}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(b)
        train_loss = running / len(train_set)
        if validate is not None:
            val = float(validate(model, epoch))
        elif val_set is not None and len(val_set):
            val = dataset_loss(model, val_set, heads, weights, loss_config, config.batch_size)
        else:
            val = dataset_loss(model, train_set, heads, weights, loss_config, config.batch_size)
        improved = state.update(val, model)
        history.append((epoch, train_loss, val))
        run_log(stage=stage, epoch=epoch, train_loss=train_loss, val_loss=val,
                best=int(improved))
        if state.exhausted(config.patience):
            reason = "patience"
            break
    model.load_state_dict(state.best_weights)
    whash = weight_hash(model)
    ckpt = None
    if run_dir is not None:
        ckpt = save_checkpoint(Path(run_dir) / "checkpoints" / f"stage{stage}.pt", model,
                               epoch=state.best_epoch, optimizer_state=optimizer.state_dict(),
                               extra={"stage": stage, "heads": list(heads), "weights": list(weights)})
    run_log(stage=stage, event="end", best_epoch=state.best_epoch, best_val=state.best_val,
            epochs=state.epoch, stop=reason, hash=whash)
    return StageResult(state.best_val, state.best_epoch, state.epoch, reason, whash, ckpt, history)


def _dump_diverged(run_dir, model, stage, epoch, offset, comps):
    if run_dir is None:
        return
    path = Path(run_dir) / "diverged.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"stage": stage, "epoch": epoch, "batch_offset": offset,
                "losses": [float(c.detach()) for c in comps], "weights": model.state_dict()}, path)
    log.error("training diverged; state dumped to %s", path)


def train(model: ShapeNet, train_samples: Sequence[Sample], val_samples: Sequence[Sample] | None,
          config: TrainConfig, run_dir=None, run_log: RunLog | None = None) -> list[StageResult]:
    """Run every stage of ``config.stages`` in order."""
    for st in config.stages:
        if set(st.heads) - set(model.heads):
            raise ValueError(f"stage heads {st.heads} not all in model heads {model.heads}")
    if run_log is None:
        run_log = RunLog(Path(run_dir) / "train.log" if run_dir else None)
    results = []
    for i, st in enumerate(config.stages, 1):
        if st.init_checkpoint:
            ckpt = torch.load(st.init_checkpoint, map_location="cpu", weights_only=False)
            model.load_state_dict(ckpt["weights"])
        results.append(train_stage(model, train_samples, val_samples or None, config, st.heads, st.weights,
                                   stage=i, run_log=run_log, run_dir=run_dir))
    return results


# --- evaluation -----------------------------------------------------------


class OracleModel:
    """Returns the ground truth of the sample it is asked about."""

    def __init__(self, heads=("normals", "depth", "vertices")):
        self.heads = tuple(heads)
        self.mean_depth = None

    def predict_sample(self, s: Sample) -> dict:
        out = {"normals": s.normals.copy(), "depth": s.depth.copy()}
        if s.vertices is not None:
            out["vertices"] = s.vertices.copy()
        return {k: v for k, v in out.items() if k in self.heads}


def predict_sample(model, s: Sample) -> dict:
    if hasattr(model, "predict_sample"):
        return model.predict_sample(s)
    return model.predict(s.image, s.mask)


def model_mean_depth(model, samples: Sequence[Sample]) -> float:
    md = getattr(model, "mean_depth", None)
    if md:
        return float(md)
    return float(np.mean([s.depth[s.mask].mean() for s in samples]))


def sample_metrics(pred: dict, s: Sample, mean_depth: float, with_vertices: bool = False) -> SampleMetrics:
    sm = SampleMetrics()
    if "normals" in pred:
        sm.angles = angle_summary(angular_errors(s.normals, pred["normals"], s.mask))
        z = integrate_normals(pred["normals"], s.mask, mean_depth, pixel_size=mean_depth / s.K.fx)
        err = depth_errors(s.depth, z, s.mask, s.K)
        sm.depth_mean, sm.depth_std = float(err.mean()), float(err.std())
    elif "depth" in pred:
        err = depth_errors(s.depth, pred["depth"], s.mask, s.K)
        sm.depth_mean, sm.depth_std = float(err.mean()), float(err.std())
    if with_vertices:
        sm.vertices = metric_vertices(s.vertices, pred["vertices"])
    return sm


def evaluate(model, test_set: Sequence[Sample], sample_count: int | None = 100, seed: int = 0,
             metrics: Sequence[str] = (), experiment: str = "", method: str = "OURS",
             mean_depth: float | None = None) -> MetricsReport:
    """Score ``model`` on a seeded random subset of ``test_set``.

    Normal-predicting models are scored on their integrated normals for the
    depth error; depth-only models on their direct depth prediction.
    ``metrics`` may request ``"m_C"``, which needs a vertex head.
    """
    heads = tuple(model.heads)
    if "m_C" in metrics and "vertices" not in heads:
        raise ValueError("m_C requested but the model has no vertex head")
    if not {"normals", "depth"} & set(heads) and "vertices" not in heads:
        raise ValueError("model has no head to evaluate")
    n = len(test_set)
    if sample_count is None:
        sample_count = n
    if sample_count > n:
        raise ValueError(f"test set has {n} samples, {sample_count} requested")
    pick = np.random.default_rng(seed).choice(n, size=sample_count, replace=False)
    chosen = [test_set[i] for i in pick]
    md = mean_depth if mean_depth is not None else model_mean_depth(model, chosen)
    with_vertices = "vertices" in heads
    per_sample = []
    direct = []
    for s in chosen:
        pred = predict_sample(model, s)
        per_sample.append(sample_metrics(pred, s, md, with_vertices))
        if "normals" in pred and "depth" in pred:
            direct.append(float(depth_errors(s.depth, pred["depth"], s.mask, s.K).mean()))
    report = MetricsReport.aggregate(per_sample, experiment=experiment, method=method)
    if direct:
        report.extra["mD_direct"] = math.fsum(direct) / len(direct)
    report.extra["sample_indices"] = " ".join(str(int(i)) for i in pick)
    report.check()
    return report
