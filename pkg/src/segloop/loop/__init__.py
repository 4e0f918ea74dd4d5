"""Annotate-train-predict loop: patch extraction, autoencoder pretraining,
edge-weighted fine-tuning, tile prediction, suggestion import, and the
background-job machinery that keeps annotation responsive while training."""
from .core import (
    LabelMap, Patch, Tile, TrainConfig, count_structures, edge_weight_map,
    finetune, import_prediction, make_patch_pairs, make_patches,
    predict_probabilities, predict_tile, pretrain, stitch,
)
from .jobs import JobManager, TrainingJob

__all__ = [
    "Tile", "Patch", "LabelMap", "TrainConfig", "make_patches", "stitch",
    "make_patch_pairs", "pretrain", "edge_weight_map", "finetune",
    "predict_tile", "predict_probabilities", "import_prediction",
    "count_structures", "TrainingJob", "JobManager",
]
