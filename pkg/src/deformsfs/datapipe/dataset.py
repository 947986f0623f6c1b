"""Samples, dataset manifests and loading."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..geometry import CameraIntrinsics, check_depth, check_mask, check_normals
from . import formats

log = logging.getLogger(__name__)

LIGHTINGS = ("Lr", "Ll", "Lc", "Ld", "synthetic")
OBJECTS = ("cloth", "tshirt", "sweater", "hoody", "paper", "synthetic")
SPLITS = ("train", "val", "test")
DATA_ROOT_ENV = "DEFORMSFS_DATA"
MANIFEST_COLUMNS = ("sequence", "frame", "lighting", "split",
                    "image", "mask", "depth", "normals", "vertices")

# (sequences, samples) per object in the published real-world dataset
PUBLISHED_COUNTS = {
    "cloth": (18, 15799),
    "tshirt": (12, 6739),
    "sweater": (4, 2203),
    "hoody": (1, 517),
    "paper": (3, 1187),
}


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    K: CameraIntrinsics
    vertices: np.ndarray | None = None
    sequence: str = ""
    frame: int = 0
    lighting: str = "synthetic"

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


def validate_sample(s: Sample, size: tuple[int, int] | None = None) -> None:
    """Raise ``ValueError`` on the first violated sample invariant."""
    check_mask(s.mask)
    shape = s.mask.shape
    if size is not None and shape != tuple(size):
        raise ValueError(f"sample is {shape}, expected {tuple(size)}")
    if s.image.shape != shape + (3,):
        raise ValueError(f"image shape {s.image.shape} does not match mask {shape}")
    if s.depth.shape != shape or s.normals.shape != shape + (3,):
        raise ValueError("depth/normal maps do not match the mask size")
    if (s.K.height, s.K.width) != shape:
        raise ValueError("intrinsics describe a different image size")
    check_depth(s.depth, s.mask)
    check_normals(s.normals, s.mask)
    if s.vertices is not None:
        v = np.asarray(s.vertices)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise ValueError("vertices must be a finite (V, 3) array")
    if s.lighting not in LIGHTINGS:
        raise ValueError(f"unknown lighting tag {s.lighting!r}")


@dataclass
class ManifestRecord:
    sequence: str
    frame: int
    lighting: str
    split: str
    image: str
    mask: str
    depth: str
    normals: str
    vertices: str | None = None


@dataclass
class DatasetManifest:
    """Key-value header plus one table row per sample; paths relative to ``root``."""
    object: str
    K: CameraIntrinsics
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")
    sample_count: int | None = None

    def select(self, split=None, lightings=None) -> "DatasetManifest":
        recs = [r for r in self.records
                if (split is None or r.split == split)
                and (lightings is None or r.lighting in lightings)]
        return DatasetManifest(self.object, self.K, recs, self.root, len(recs))

    @property
    def sequences(self) -> list[str]:
        return sorted({r.sequence for r in self.records})

    def problems(self) -> list[str]:
        """Invariant violations; an empty list means the manifest is consistent."""
        out = []
        if self.object not in OBJECTS:
            out.append(f"unknown object {self.object!r}")
        by_seq = {}
        for r in self.records:
            if r.lighting not in LIGHTINGS:
                out.append(f"{r.sequence}/{r.frame}: unknown lighting {r.lighting!r}")
            if r.split not in SPLITS:
                out.append(f"{r.sequence}/{r.frame}: unknown split {r.split!r}")
            by_seq.setdefault(r.sequence, set()).add(r.split)
        for seq, splits in sorted(by_seq.items()):
            if len(splits) > 1:
                out.append(f"sequence {seq} appears in several splits: {sorted(splits)}")
        for r in self.records:
            for p in (r.image, r.mask, r.depth, r.normals, r.vertices):
                if p and not (self.root / p).is_file():
                    out.append(f"missing file {p}")
        return out

    def published_count_problems(self) -> list[str]:
        """Compare with the published sequence/sample inventory (real objects only)."""
        if self.object not in PUBLISHED_COUNTS:
            return []
        n_seq, n_smp = PUBLISHED_COUNTS[self.object]
        got = (len(self.sequences), len(self.records))
        if got != (n_seq, n_smp):
            return [f"{self.object}: {got[0]} sequences / {got[1]} samples, "
                    f"published dataset has {n_seq} / {n_smp}"]
        return []


def resolve_manifest_path(path) -> Path:
    """Manifest path as given, or relative to ``$DEFORMSFS_DATA``."""
    p = Path(path)
    if p.is_file() or p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and (Path(root) / p).is_file():
        return Path(root) / p
    return p


def read_manifest(path) -> DatasetManifest:
    path = resolve_manifest_path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} not found (set ${DATA_ROOT_ENV} for relative paths)")
    header = {}
    records = []
    columns = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if columns is None:
            if "=" in line:
                key, value = (t.strip() for t in line.split("=", 1))
                header[key] = value
                continue
            columns = line.split()
            if tuple(columns) != MANIFEST_COLUMNS:
                raise ValueError(f"{path}:{lineno}: table header must be {' '.join(MANIFEST_COLUMNS)}")
            continue
        cells = line.split()
        if len(cells) != len(columns):
            raise ValueError(f"{path}:{lineno}: expected {len(columns)} columns, got {len(cells)}")
        row = dict(zip(columns, cells))
        row["frame"] = int(row["frame"])
        row["vertices"] = None if row["vertices"] == "-" else row["vertices"]
        records.append(ManifestRecord(**row))
    try:
        K = CameraIntrinsics(float(header["fx"]), float(header["fy"]), float(header["cx"]),
                             float(header["cy"]), int(header["width"]), int(header["height"]))
        obj = header["object"]
    except KeyError as e:
        raise ValueError(f"{path}: header is missing {e.args[0]!r}") from None
    count = int(header["sample_count"]) if "sample_count" in header else None
    return DatasetManifest(obj, K, records, path.parent, count)


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    K = manifest.K
    lines = ["# deformsfs dataset manifest",
             f"object = {manifest.object}",
             f"fx = {K.fx!r}", f"fy = {K.fy!r}", f"cx = {K.cx!r}", f"cy = {K.cy!r}",
             f"width = {K.width}", f"height = {K.height}",
             f"sample_count = {len(manifest.records)}",
             "\t".join(MANIFEST_COLUMNS)]
    for r in manifest.records:
        lines.append("\t".join([r.sequence, str(r.frame), r.lighting, r.split, r.image,
                                r.mask, r.depth, r.normals, r.vertices or "-"]))
    path.write_text("\n".join(lines) + "\n")
    return path


def save_sample(root, sample: Sample, split: str = "train") -> ManifestRecord:
    """Write a sample's files under ``root`` and return its manifest row."""
    root = Path(root)
    stem = f"{sample.sequence}/{sample.frame:06d}"
    rec = ManifestRecord(sample.sequence, sample.frame, sample.lighting, split,
                         f"{stem}_rgb.png", f"{stem}_mask.png", f"{stem}_depth.png",
                         f"{stem}_normals.png",
                         f"{stem}_vertices.txt" if sample.vertices is not None else None)
    formats.write_rgb(root / rec.image, sample.image)
    formats.write_mask(root / rec.mask, sample.mask)
    formats.write_depth(root / rec.depth, np.where(sample.mask, sample.depth, 0.0))
    formats.write_normals(root / rec.normals, np.where(sample.mask[..., None], sample.normals, 0.0))
    if rec.vertices:
        formats.write_vertices(root / rec.vertices, sample.vertices)
    return rec


def load_sample(manifest: DatasetManifest, rec: ManifestRecord) -> Sample:
    root = manifest.root
    mask = formats.read_mask(root / rec.mask)
    depth = formats.read_depth(root / rec.depth)
    # quantisation can zero a few depths at the rim; those pixels leave the mask
    mask &= depth > 0
    normals = formats.read_normals(root / rec.normals, mask)
    if np.mean(normals[mask][:, 2]) > 0:
        normals = -normals
    vertices = formats.read_vertices(root / rec.vertices) if rec.vertices else None
    return Sample(formats.read_rgb(root / rec.image), mask, np.where(mask, depth, 0.0),
                  normals, manifest.K, vertices, rec.sequence, rec.frame, rec.lighting)


def load_dataset(manifest: DatasetManifest, shuffle_seed: int | None = None) -> Iterator[Sample]:
    """Yield the manifest's samples, skipping unreadable ones with a warning.

    Order is manifest order, or a permutation fixed by ``shuffle_seed``.
    """
    if manifest.sample_count is not None and manifest.sample_count != len(manifest.records):
        raise ValueError(f"manifest declares {manifest.sample_count} samples "
                         f"but lists {len(manifest.records)}")
    order = np.arange(len(manifest.records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    size = (manifest.K.height, manifest.K.width)
    for i in order:
        rec = manifest.records[i]
        try:
            s = load_sample(manifest, rec)
            validate_sample(s, size)
        except (OSError, ValueError) as e:
            log.warning("skipping %s/%s: %s", rec.sequence, rec.frame, e)
            continue
        yield s


def holdout_split(samples: list, fraction: float = 0.1) -> tuple[list, list]:
    """Hold out the last ``fraction`` of each sequence's frames for validation.

    Works on anything with ``sequence`` and ``frame`` attributes (samples or
    manifest rows).  Sequences with a single frame stay entirely in training.
    """
    by_seq = {}
    for s in samples:
        by_seq.setdefault(s.sequence, []).append(s)
    train, val = [], []
    for seq in sorted(by_seq):
        frames = sorted(by_seq[seq], key=lambda s: s.frame)
        k = int(round(fraction * len(frames)))
        if len(frames) > 1:
            k = max(k, 1)
        k = min(k, len(frames) - 1)
        train += frames[:len(frames) - k]
        val += frames[len(frames) - k:]
    return train, val


class ManifestSamples(Sequence):
    """Indexable, lazily loaded view of a manifest's samples.

    Rows whose files are missing are dropped (with a warning) up front;
    decoding happens on access, so memory use stays at one batch.
    """

    def __init__(self, manifest: DatasetManifest, records: list[ManifestRecord] | None = None):
        self.manifest = manifest
        keep = []
        for rec in manifest.records if records is None else records:
            paths = [p for p in (rec.image, rec.mask, rec.depth, rec.normals, rec.vertices) if p]
            missing = [p for p in paths if not (manifest.root / p).is_file()]
            if missing:
                log.warning("skipping %s/%s: missing %s", rec.sequence, rec.frame, ", ".join(missing))
                continue
            keep.append(rec)
        self.records = keep

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return load_sample(self.manifest, self.records[i])
