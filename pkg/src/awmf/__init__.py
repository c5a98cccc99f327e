"""Multi-magnification image segmentation with adaptively weighted experts.

Everything runs on numpy: a small reverse-mode autodiff engine
(:mod:`awmf.tensor`), the expert / weighting / aggregating networks
(:mod:`awmf.networks`), losses, the alternating training procedure and
evaluation tooling.
"""

from .checkpoint import load_bundle, save_bundle
from .estimator import AWMFSegmenter
from .exceptions import (
    AWMFError,
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    NonFiniteError,
    ShapeError,
)
from .inference import evaluate, predict_all, segment_slide
from .metrics import agreement, confusion, miou, op_accuracy, pc_accuracy
from .networks import ModelBundle, integrated_forward
from .pyramid import (
    DatasetSplit,
    PatchTriplet,
    Slide,
    SynthConfig,
    extract_triplets,
    prepare_dataset,
    synth_generate,
)
from .trainer import TrainConfig, TrainLog, run_training

__version__ = "0.1.0"

__all__ = [
    "AWMFError", "AWMFSegmenter", "CheckpointError", "ConfigError", "DataError", "DatasetSplit",
    "DivergenceError", "ModelBundle", "NonFiniteError", "PatchTriplet", "ShapeError", "Slide",
    "SynthConfig", "TrainConfig", "TrainLog", "agreement", "confusion", "evaluate", "extract_triplets",
    "integrated_forward", "load_bundle", "miou", "op_accuracy", "pc_accuracy", "predict_all",
    "prepare_dataset", "run_training", "save_bundle", "segment_slide", "synth_generate",
]
