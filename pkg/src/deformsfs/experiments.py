"""Experiment definitions and the end-to-end train/evaluate driver."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datapipe.dataset import (DATA_ROOT_ENV, ManifestSamples, Sample, holdout_split,
                               read_manifest, resolve_manifest_path)
from .datapipe.synth import SynthParams, synth_generate
from .metrics import MetricsReport, reports_to_csv
from .model import ModelConfig, ShapeNet, save_checkpoint
from .training import RunLog, TrainConfig, evaluate, staged_plan, train

log = logging.getLogger(__name__)

TRAIN_KEYS = {"lr": float, "batch_size": int, "max_epochs": int, "patience": int,
              "kappa": float, "epsilon": float, "val_fraction": float, "seed": int}
SYNTH_KEYS = {"count": int, "test_count": int, "size": int, "base_depth": float,
              "sequences": int, "test_sequences": int, "seed": int, "vertex_grid": int}
SPEC_KEYS = {"name", "train_object", "train_lighting", "test_object", "test_lighting", "model",
             "eval_samples", "eval_seed", "stage_widths", "convs_per_stage"}


def allowed_key(key: str) -> bool:
    if key in SPEC_KEYS or key in TRAIN_KEYS:
        return True
    if key.startswith("manifest."):
        return True
    if key.startswith("synth."):
        return key[len("synth."):] in SYNTH_KEYS
    return False


class DatasetMissing(FileNotFoundError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    train_object: str
    train_lighting: tuple[str, ...]
    test_object: str
    test_lighting: tuple[str, ...]
    model: str = "N"
    eval_samples: int = 100
    eval_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    model_overrides: dict = field(default_factory=dict)
    manifests: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ExperimentSpec":
        values = cfgmod.apply_overrides(values, (), allowed_key)
        try:
            name = values["name"]
            tr_obj, te_obj = values["train_object"], values["test_object"]
        except KeyError as e:
            raise ValueError(f"experiment spec is missing {e.args[0]!r}") from None
        model = values.get("model", "N")
        tc = TrainConfig(**{k: TRAIN_KEYS[k](values[k]) for k in TRAIN_KEYS if k in values},
                         stages=staged_plan(model))
        mo = {}
        if "stage_widths" in values:
            mo["stage_widths"] = cfgmod.as_tuple(values["stage_widths"], int)
        if "convs_per_stage" in values:
            mo["convs_per_stage"] = cfgmod.as_tuple(values["convs_per_stage"], int)
        return cls(
            name=name, train_object=tr_obj, test_object=te_obj,
            train_lighting=cfgmod.as_tuple(values.get("train_lighting", "")),
            test_lighting=cfgmod.as_tuple(values.get("test_lighting", "")),
            model=model,
            eval_samples=int(values.get("eval_samples", 100)),
            eval_seed=int(values.get("eval_seed", tc.seed)),
            train=tc, model_overrides=mo,
            manifests={k[len("manifest."):]: v for k, v in values.items() if k.startswith("manifest.")},
            synth={k[len("synth."):]: SYNTH_KEYS[k[len("synth."):]](v)
                   for k, v in values.items() if k.startswith("synth.")},
            raw=dict(values))

    @property
    def synthetic(self) -> bool:
        return self.train_object == "synthetic"


def builtin_experiments() -> list[str]:
    files = resources.files("deformsfs").joinpath("specs")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def load_spec_values(name_or_path) -> dict[str, str]:
    """Key-values of an experiment file, or of a built-in experiment by name."""
    p = Path(name_or_path)
    if p.is_file():
        return cfgmod.read_kv(p)
    res = resources.files("deformsfs").joinpath("specs", f"{name_or_path}.cfg")
    if res.is_file():
        return cfgmod.parse_kv(res.read_text(), str(name_or_path))
    raise FileNotFoundError(f"no experiment file or built-in experiment named {name_or_path!r} "
                            f"(built-ins: {', '.join(builtin_experiments())})")


def _manifest_for(spec: ExperimentSpec, obj: str):
    path = spec.manifests.get(obj, f"{obj}/manifest.txt")
    resolved = resolve_manifest_path(path)
    if not resolved.is_file():
        raise DatasetMissing(
            f"dataset for {obj!r} not found: manifest {path} (resolved to {resolved}); "
            f"set manifest.{obj}=PATH or ${DATA_ROOT_ENV} to the dataset root")
    return read_manifest(resolved)


def _synth_params(spec: ExperimentSpec, test: bool) -> SynthParams:
    s = spec.synth
    seed = s.get("seed", spec.train.seed)
    kw = {k: s[k] for k in ("size", "base_depth", "vertex_grid") if k in s}
    if test:
        return SynthParams(count=s.get("test_count", 10), sequences=s.get("test_sequences", 1),
                           seed=seed + 7919, **kw)
    return SynthParams(count=s.get("count", 20), sequences=s.get("sequences", 1), seed=seed, **kw)


def load_experiment_data(spec: ExperimentSpec):
    """``(train, val, test)`` sample sequences for an experiment."""
    if spec.synthetic:
        train_all = synth_generate(_synth_params(spec, test=False))
        test = synth_generate(_synth_params(spec, test=True))
        for s in test:
            s.sequence = "test_" + s.sequence
        tr, va = holdout_split(train_all, spec.train.val_fraction)
        return tr, va, test
    man = _manifest_for(spec, spec.train_object)
    tr_lights = spec.train_lighting or None
    train_recs = man.select("train", tr_lights).records
    val_recs = man.select("val", tr_lights).records
    if val_recs:
        tr, va = ManifestSamples(man, train_recs), ManifestSamples(man, val_recs)
    else:
        tr_recs, va_recs = holdout_split(train_recs, spec.train.val_fraction)
        tr, va = ManifestSamples(man, tr_recs), ManifestSamples(man, va_recs)
    test_man = man if spec.test_object == spec.train_object else _manifest_for(spec, spec.test_object)
    test = ManifestSamples(test_man, test_man.select("test", spec.test_lighting or None).records)
    return tr, va, test


def build_model(spec: ExperimentSpec, train_set) -> ShapeNet:
    first: Sample = train_set[0]
    heads = tuple(st for st in spec.train.stages[-1].heads)
    # decoder order follows the model name; keep it for checkpoint stability
    vcount = first.vertices.shape[0] if "vertices" in heads and first.vertices is not None else None
    if "vertices" in heads and vcount is None:
        raise ValueError("vertex head requested but the training samples have no vertices")
    probe = [train_set[i] for i in range(min(len(train_set), 32))]
    mean_depth = float(np.mean([s.depth[s.mask].mean() for s in probe]))
    mc = ModelConfig(input_size=first.mask.shape, heads=heads, vertex_count=vcount,
                     depth_bias=mean_depth, seed=spec.train.seed, **spec.model_overrides)
    model = ShapeNet(mc)
    model.mean_depth = mean_depth
    return model


def run_experiment(spec: ExperimentSpec, run_dir) -> tuple[MetricsReport, dict]:
    """Train per the staged plan, evaluate, and persist everything under ``run_dir``.

    Layout: ``config.txt``, ``train.log``, ``checkpoints/``, ``final.pt``,
    ``metrics.csv``, ``report.txt`` and ``figures/``.
    """
    from . import report as figs

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_kv(run_dir / "config.txt", spec.raw)
    tr, va, test = load_experiment_data(spec)
    if len(tr) == 0:
        raise ValueError(f"experiment {spec.name}: no training samples after filtering")
    model = build_model(spec, tr)
    run_log = RunLog(run_dir / "train.log")
    results = train(model, tr, va, spec.train, run_dir=run_dir, run_log=run_log)
    final = save_checkpoint(run_dir / "final.pt", model, epoch=results[-1].best_epoch,
                            extra={"mean_depth": model.mean_depth, "experiment": spec.name,
                                   "model": spec.model})
    metrics = ("m_C",) if "vertices" in model.heads else ()
    report = evaluate(model, test, spec.eval_samples, spec.eval_seed, metrics,
                      experiment=spec.name, method=f"OURS_{spec.model}")
    (run_dir / "metrics.csv").write_text(reports_to_csv([report]))
    (run_dir / "report.txt").write_text(report.to_text())
    fig_dir = run_dir / "figures"
    artifacts = {"checkpoint": final, "log": run_log.path, "metrics": run_dir / "metrics.csv",
                 "figures": [figs.plot_loss_curves(run_log.lines, fig_dir / "loss.png")]}
    return report, artifacts
