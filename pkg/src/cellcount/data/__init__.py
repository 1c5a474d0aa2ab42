from cellcount.data.augment import OPS as AUGMENT_OPS, augment
from cellcount.data.density import DEFAULT_SIGMA, peak_value, rasterize_density
from cellcount.data.io import (DatasetLayout, dataset_hash, load_dataset, parse_annotation,
                               read_image, write_dataset)
from cellcount.data.preprocess import (PREPROCESSORS, TILE, nearest_multiple, pad_and_tile,
                                       quadrants_to_tile, resize_to_tile)
from cellcount.data.splits import assign_splits
from cellcount.data.synth import SynthConfig, generate_synthetic
from cellcount.data.types import DensityMap, DotAnnotation, ImageSample

__all__ = [
    "AUGMENT_OPS", "DEFAULT_SIGMA", "PREPROCESSORS", "TILE", "DatasetLayout", "DensityMap",
    "DotAnnotation", "ImageSample", "SynthConfig", "assign_splits", "augment",
    "dataset_hash", "generate_synthetic", "load_dataset", "nearest_multiple", "pad_and_tile",
    "parse_annotation", "peak_value", "quadrants_to_tile", "rasterize_density", "read_image",
    "resize_to_tile", "write_dataset",
]
