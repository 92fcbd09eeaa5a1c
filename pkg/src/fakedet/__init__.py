"""fakedet: a fine-tuning toolkit for fake-image detection.

Builds a binary classifier from a frozen backbone, a self-attention tower
over the raw image, and inverted-residual fine-tuning blocks, trained with
SGD momentum under a cosine learning-rate schedule with Cutout augmentation.
"""

from .attention import AttentionTowerConfig, SelfAttention, self_attention_param_count, tower_param_table
from .augment import AugmentConfig, CutoutConfig, train_pipeline
from .autograd import Parameter, Tape, backward, finite_diff_check
from .data import LabeledDataset, SyntheticTaskConfig, generate_synthetic, load_dataset_dir, split_dataset
from .mobile_block import InvertedResidual, SqueezeExcite, mbblock_param_table
from .model import BackboneConfig, FakeImageDetector, assemble, freeze_backbone, param_checksum
from .train import Metrics, TrainConfig, auroc, cosine_lr, evaluate, fine_tune, train_loop
from .weights import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AttentionTowerConfig",
    "AugmentConfig",
    "BackboneConfig",
    "CutoutConfig",
    "FakeImageDetector",
    "InvertedResidual",
    "LabeledDataset",
    "Metrics",
    "Parameter",
    "SelfAttention",
    "SqueezeExcite",
    "SyntheticTaskConfig",
    "Tape",
    "TrainConfig",
    "assemble",
    "auroc",
    "backward",
    "cosine_lr",
    "evaluate",
    "fine_tune",
    "finite_diff_check",
    "freeze_backbone",
    "generate_synthetic",
    "load_dataset_dir",
    "load_model",
    "mbblock_param_table",
    "param_checksum",
    "save_model",
    "self_attention_param_count",
    "split_dataset",
    "tower_param_table",
    "train_loop",
    "train_pipeline",
]
