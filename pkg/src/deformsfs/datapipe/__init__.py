from .dataset import (DATA_ROOT_ENV, DatasetManifest, ManifestRecord, Sample, holdout_split,
                      load_dataset, load_sample, read_manifest, save_sample, validate_sample,
                      write_manifest)
from .preprocess import (FrameRejected, clean_depth, make_gt_normals, preprocess_frame,
                         segment_foreground)
from .synth import SynthParams, synth_generate

__all__ = [
    "DATA_ROOT_ENV", "DatasetManifest", "FrameRejected", "ManifestRecord", "Sample",
    "SynthParams", "clean_depth", "holdout_split", "load_dataset", "load_sample",
    "make_gt_normals", "preprocess_frame", "read_manifest", "save_sample",
    "segment_foreground", "synth_generate", "validate_sample", "write_manifest",
]
