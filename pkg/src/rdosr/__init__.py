"""Open-set land-cover pixel classification via representative-discriminative
learning: a two-stage model whose reconstruction error in the embedding space
flags pixels from classes unseen at training time."""

from .data import HsiDataset, Normalizer, SplitSpec, split, synth_generate
from .models import RdosrModel, TrainConfig, load_checkpoint, save_checkpoint, train_pipeline
from .openset import RocCurve, SweepReport, histogram, openness, roc, sweep

__version__ = "0.1.0"

__all__ = [
    "HsiDataset",
    "Normalizer",
    "SplitSpec",
    "split",
    "synth_generate",
    "RdosrModel",
    "TrainConfig",
    "train_pipeline",
    "save_checkpoint",
    "load_checkpoint",
    "RocCurve",
    "SweepReport",
    "openness",
    "roc",
    "histogram",
    "sweep",
    "__version__",
]
