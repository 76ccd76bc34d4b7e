"""Multimodal intent recognition with prototype-aware contrastive alignment
and coarse-to-fine attention fusion, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .data import PRESETS, DatasetSpec, MultimodalBatch, generate, load_dataset, save_dataset
from .metrics import classification_report, silhouette
from .model import IntentModel, ModelConfig
from .trainer import ABLATION_MASKS, TrainConfig, run_ablation_grid, run_cell, train

__all__ = [
    "ABLATION_MASKS", "DatasetSpec", "IntentModel", "ModelConfig", "MultimodalBatch", "PRESETS",
    "TrainConfig", "classification_report", "generate", "load_dataset", "run_ablation_grid",
    "run_cell", "save_dataset", "silhouette", "train",
]
