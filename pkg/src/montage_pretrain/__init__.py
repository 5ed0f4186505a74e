"""Montage pre-training for detection backbones, in plain numpy.

Positive/negative samples are cut out of a detection dataset, four of them
are stitched into one canvas, and a small convolutional backbone is trained
with per-position soft labels derived from its own effective receptive field.
"""
__version__ = "0.1.0"

from .dataset_io import BBox, DatasetIndex, load_annotations, parse_annotations  # noqa: E402
from .montage import MontageTemplate, assemble, batch_stream, make_template  # noqa: E402
from .network import Architecture, init_params, load_checkpoint, save_checkpoint  # noqa: E402
from .sampling import SampleSet, build_sample_set  # noqa: E402
from .trainer import TrainConfig, evaluate, train  # noqa: E402

__all__ = [
    "BBox", "DatasetIndex", "load_annotations", "parse_annotations",
    "MontageTemplate", "assemble", "batch_stream", "make_template",
    "Architecture", "init_params", "load_checkpoint", "save_checkpoint",
    "SampleSet", "build_sample_set", "TrainConfig", "evaluate", "train",
]
