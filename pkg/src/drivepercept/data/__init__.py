from .bdd import SchemaError, ingest_bdd
from .io import read_sample, read_split, write_sample
from .lanes import center_lines, rasterize_lanes, resample
from .synth import SceneParams, synth_dataset, synth_scene
from .transforms import AugmentParams, apply_augment, augment, draw_params, resize_sample, sample_rng
from .types import Box, Sample

__all__ = [
    "AugmentParams", "Box", "Sample", "SceneParams", "SchemaError", "apply_augment", "augment",
    "center_lines", "draw_params", "ingest_bdd", "rasterize_lanes", "read_sample", "read_split",
    "resample", "resize_sample", "sample_rng", "synth_dataset", "synth_scene", "write_sample",
]
