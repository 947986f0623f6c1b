"""Command-line entry point: ``deformsfs <subcommand> ...``.

Every subcommand exits 0 on success.  On failure it prints a single line
``error: <Kind>: <message>`` to stderr and exits 1 (2 for bad usage).
"""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod

log = logging.getLogger("deformsfs")

VIS_HELP = ("Visualisations: normals are drawn as (n+1)/2 RGB; angular error is drawn "
            "on the matplotlib 'jet' ramp from 0 deg (blue) to 60 deg (red), clipped above 60.")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _intrinsics(text: str | None, size):
    from .geometry import CameraIntrinsics

    h, w = size
    if not text:
        from .datapipe.synth import SynthParams
        p = SynthParams(size=w)
        K = p.intrinsics
        if (K.width, K.height) != (w, h):
            K = CameraIntrinsics(K.fx, K.fy, (w - 1) / 2, (h - 1) / 2, w, h)
        return K
    fx, fy, cx, cy = cfgmod.as_tuple(text, float)
    return CameraIntrinsics(fx, fy, cx, cy, w, h)


def _experiment(args):
    from .experiments import ExperimentSpec, allowed_key, load_spec_values

    values = load_spec_values(args.config)
    values = cfgmod.apply_overrides(values, args.overrides, allowed_key)
    if args.seed is not None:
        values["seed"] = str(args.seed)
        values.setdefault("eval_seed", str(args.seed))
    return ExperimentSpec.from_kv(values)


# --- subcommands ----------------------------------------------------------


def cmd_synth(args):
    from .datapipe.dataset import DatasetManifest, save_sample, write_manifest
    from .datapipe.synth import SynthParams, synth_generate

    keys = {"count": int, "sequences": int, "test_sequences": int, "size": int,
            "base_depth": float, "vertex_grid": int, "seed": int}
    vals = cfgmod.apply_overrides({}, args.overrides, keys)
    kw = {k: keys[k](v) for k, v in vals.items()}
    test_seq = kw.pop("test_sequences", 1)
    kw.setdefault("sequences", 2)
    kw.setdefault("seed", args.seed or 0)
    params = SynthParams(**kw)
    if not 0 <= test_seq < params.sequences:
        raise ValueError("test_sequences must be smaller than sequences")
    samples = synth_generate(params)
    out = Path(args.out)
    test_names = {f"synth{i:03d}" for i in range(params.sequences - test_seq, params.sequences)}
    recs = [save_sample(out, s, "test" if s.sequence in test_names else "train") for s in samples]
    path = write_manifest(out / "manifest.txt", DatasetManifest("synthetic", params.intrinsics, recs, out))
    print(f"wrote {len(recs)} samples to {path}")


def cmd_preprocess(args):
    from .datapipe import formats
    from .datapipe.dataset import DatasetManifest, Sample, save_sample, write_manifest
    from .datapipe.preprocess import FrameRejected, preprocess_frame
    from .geometry import CameraIntrinsics

    listing = Path(args.frames)
    out = Path(args.out)
    fx, fy, cx, cy = cfgmod.as_tuple(args.intrinsics, float)
    recs, rejected, K_out = [], 0, None
    for line in listing.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        rgb_p, depth_p, seq, frame, lighting, split = line.split()
        rgb = formats.read_rgb(listing.parent / rgb_p)
        raw = formats._read(listing.parent / depth_p, -1).astype(np.float64) / args.depth_scale
        h, w = raw.shape
        K = CameraIntrinsics(fx, fy, cx, cy, w, h)
        try:
            image, mask, depth, normals, Kc = preprocess_frame(rgb, raw, K, args.size)
        except FrameRejected as e:
            log.warning("rejected %s/%s: %s", seq, frame, e)
            rejected += 1
            continue
        if K_out is not None and Kc != K_out:
            log.warning("%s/%s: crop shifted the principal point; manifest keeps the first frame's", seq, frame)
        K_out = K_out or Kc
        s = Sample(image, mask, depth, normals, Kc, None, seq, int(frame), lighting)
        recs.append(save_sample(out, s, split))
    if not recs:
        raise ValueError("every frame was rejected")
    path = write_manifest(out / "manifest.txt", DatasetManifest(args.object, K_out, recs, out))
    print(f"wrote {len(recs)} samples ({rejected} rejected) to {path}")


def cmd_train(args):
    from .experiments import run_experiment
    from .report import comparison_table

    spec = _experiment(args)
    report, artifacts = run_experiment(spec, args.out)
    print(report.to_text(), end="")
    print(comparison_table([report]), end="")
    print(f"checkpoint: {artifacts['checkpoint']}")


def _load_predictor(ckpt):
    from .model import load_checkpoint
    from .training import OracleModel

    if ckpt == "oracle":
        return OracleModel(), "oracle"
    model, _ = load_checkpoint(ckpt)
    return model, Path(ckpt).stem


def cmd_eval(args):
    from .experiments import load_experiment_data
    from .metrics import angular_errors, reports_to_csv
    from .report import comparison_table, plot_angle_histogram, plot_prediction
    from .training import evaluate, predict_sample

    spec = _experiment(args)
    _, _, test = load_experiment_data(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = min(spec.eval_samples, len(test)) if args.clip_samples else spec.eval_samples
    reports = []
    for ckpt in args.checkpoint:
        model, label = _load_predictor(ckpt)
        metrics = ("m_C",) if "vertices" in model.heads else ()
        rep = evaluate(model, test, count, spec.eval_seed, metrics,
                       experiment=spec.name, method=label)
        reports.append(rep)
        if "normals" in model.heads:
            idx = [int(i) for i in rep.extra["sample_indices"].split()]
            angles = []
            for i in idx:
                s = test[i]
                angles.append(angular_errors(s.normals, predict_sample(model, s)["normals"], s.mask))
            plot_angle_histogram(angles, out / "figures" / f"{label}_angles.png", f"{spec.name} / {label}")
            s = test[idx[0]]
            pred = predict_sample(model, s)["normals"]
            amap = np.zeros(s.mask.shape)
            amap[s.mask] = angular_errors(s.normals, pred, s.mask)
            plot_prediction(s.image, s.mask, s.normals, pred, amap, out / "figures" / f"{label}_sample.png")
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    table = comparison_table(reports)
    (out / "table.txt").write_text(table)
    print(table, end="")


def cmd_infer(args):
    from .datapipe import formats
    from .geometry import integrate_normals
    from .metrics import angular_errors
    from .report import error_image

    image = formats.read_rgb(args.image)
    if not args.mask:
        raise ValueError("a foreground mask is required (--mask)")
    mask = formats.read_mask(args.mask)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask and image sizes differ")
    gt = formats.read_normals(args.gt_normals, mask) if args.gt_normals else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint == "oracle":
        if gt is None:
            raise ValueError("the oracle checkpoint needs --gt-normals")
        pred = {"normals": gt}
        mean_depth = args.mean_depth or 1000.0
    else:
        from .model import load_checkpoint
        model, _ = load_checkpoint(args.checkpoint)
        pred = model.predict(image, mask)
        mean_depth = args.mean_depth or model.mean_depth or 1000.0
    written = []
    if "normals" in pred:
        n = np.where(mask[..., None], pred["normals"], 0.0)
        written.append(formats.write_normals(out / "normals.png", n))
        written.append(formats.write_rgb(out / "normals_vis.png", formats.colorize_normals(n, mask)))
        if args.integrate:
            K = _intrinsics(args.intrinsics, mask.shape)
            z = integrate_normals(n, mask, mean_depth, pixel_size=mean_depth / K.fx)
            written.append(formats.write_depth(out / "depth_integrated.png", z))
    if "depth" in pred:
        written.append(formats.write_depth(out / "depth.png", np.where(mask, pred["depth"], 0.0)))
    if "vertices" in pred:
        written.append(formats.write_vertices(out / "vertices.txt", pred["vertices"]))
    if gt is not None and "normals" in pred:
        ang = angular_errors(gt, pred["normals"], mask)
        amap = np.zeros(mask.shape)
        amap[mask] = ang
        written.append(formats.write_rgb(out / "error.png", error_image(amap, mask)))
        print(f"mAE = {float(np.mean(ang)):.4f}")
    for p in written:
        print(f"wrote {p}")


def cmd_integrate(args):
    from .datapipe import formats
    from .geometry import integrate_normals

    mask = formats.read_mask(args.mask)
    normals = formats.read_normals(args.normals, mask)
    if np.mean(normals[mask][:, 2]) > 0:
        normals = -normals
    if args.pixel_size:
        px = args.pixel_size
    else:
        px = args.mean_depth / _intrinsics(args.intrinsics, mask.shape).fx
    z = integrate_normals(normals, mask, args.mean_depth, pixel_size=px)
    print(f"wrote {formats.write_depth(args.out, z)}")


def bench_model(model, image, mask, repetitions: int, warmup: int = 3):
    """Per-image forward-pass wall-clock times (seconds) after ``warmup`` untimed runs."""
    import torch

    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    model.eval()
    img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    msk = torch.from_numpy(np.asarray(mask, dtype=bool))[None]
    times = []
    with torch.inference_mode():
        for _ in range(warmup):
            model(img, msk)
        for _ in range(repetitions):
            t0 = time.perf_counter()
            model(img, msk)
            times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args):
    from .datapipe import formats
    from .model import ModelConfig, ShapeNet, load_checkpoint
    from .training import HEAD_LETTERS

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        heads = tuple(HEAD_LETTERS[h] for h in args.model.upper().split("+"))
        vc = 81 if "vertices" in heads else None
        model = ShapeNet(ModelConfig(heads=heads, vertex_count=vc, seed=args.seed or 0))
    h, w = model.config.input_size
    if args.image:
        image = formats.read_rgb(args.image)
    else:
        image = np.random.default_rng(args.seed or 0).uniform(0, 1, (h, w, 3))
    mask = np.ones((h, w), dtype=bool)
    times = bench_model(model, image, mask, args.repetitions, args.warmup)
    mean = statistics.fmean(times)
    std = statistics.stdev(times)
    print(f"heads={','.join(model.heads)} size={w}x{h} warmup={args.warmup} "
          f"repetitions={len(times)} mean_s={mean:.5f} std_s={std:.5f}")


# --- wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deformsfs", description=__doc__.splitlines()[0], epilog=VIS_HELP)
    p.add_argument("--seed", type=int, default=None, help="single source of randomness for the run")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("overrides", nargs="*", metavar="key=value",
                   help="count, sequences, test_sequences, size, base_depth, vertex_grid, seed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="segment, clean and crop raw RGB-D frames")
    s.add_argument("--frames", required=True,
                   help="text file: rgb depth sequence frame lighting split per line")
    s.add_argument("--intrinsics", required=True, help="fx,fy,cx,cy of the raw frames")
    s.add_argument("--object", default="cloth")
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--depth-scale", type=float, default=1.0, help="raw depth PNG units per mm")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    for name, func, hlp in (("train", cmd_train, "train and evaluate an experiment"),
                            ("eval", cmd_eval, "evaluate checkpoints on an experiment's test set")):
        s = sub.add_parser(name, help=hlp, epilog=VIS_HELP)
        s.add_argument("--config", required=True,
                       help="experiment file or built-in name (e.g. cloth-cloth, synthetic-synthetic)")
        s.add_argument("--out", required=True)
        s.add_argument("overrides", nargs="*", metavar="key=value")
        if name == "eval":
            s.add_argument("--checkpoint", action="append", required=True,
                           help="checkpoint file, repeatable; 'oracle' scores the ground truth itself")
            s.add_argument("--clip-samples", action="store_true",
                           help="evaluate on min(eval_samples, test set size) samples")
        s.set_defaults(func=func)

    s = sub.add_parser("infer", help="predict on one masked image", epilog=VIS_HELP)
    s.add_argument("--image", required=True)
    s.add_argument("--mask")
    s.add_argument("--checkpoint", required=True, help="checkpoint file or 'oracle'")
    s.add_argument("--gt-normals")
    s.add_argument("--integrate", action="store_true", help="also integrate predicted normals to depth")
    s.add_argument("--mean-depth", type=float)
    s.add_argument("--intrinsics", help="fx,fy,cx,cy (default: synthetic camera)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("integrate", help="integrate a normal map to depth")
    s.add_argument("--normals", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--mean-depth", type=float, required=True)
    s.add_argument("--pixel-size", type=float, help="mm per pixel (default mean_depth / fx)")
    s.add_argument("--intrinsics")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_integrate)

    s = sub.add_parser("bench", help="time single-image forward passes")
    s.add_argument("--checkpoint")
    s.add_argument("--model", default="N", help="heads of a freshly initialised model, e.g. N or N+D")
    s.add_argument("--image")
    s.add_argument("--repetitions", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI contract is one line per failure
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
