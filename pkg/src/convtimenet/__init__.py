"""Fully convolutional time-series networks with deformable patch embedding."""
from .datakit import DataError, LabeledDataset, ForecastDataset
from .depatch import PatchEmbedder, PatchGrid, uniform_grid
from .fcblock import Block, MergedBlock, StagePlan, build_backbone, merge_branches
from .kernels import available_backends, backend, set_backend
from .model import (ConfigError, Model, ModelConfig, export_merged, init_model,
                    load_checkpoint, save_checkpoint)
from .harness import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Block", "ConfigError", "DataError", "ForecastDataset", "LabeledDataset", "MergedBlock",
    "Model", "ModelConfig", "PatchEmbedder", "PatchGrid", "StagePlan", "TrainConfig",
    "available_backends", "backend", "build_backbone", "evaluate", "export_merged",
    "init_model", "load_checkpoint", "merge_branches", "save_checkpoint", "set_backend",
    "train", "uniform_grid",
]
