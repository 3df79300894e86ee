"""Segmentation with a dual continuous / vector-quantized latent bottleneck.

The package is self-contained: a float64 autograd engine with
finite-difference verification, a vector quantizer with straight-through
gradients, soft cross-attention plus hard refinement in the bottleneck, a
convolutional encoder-decoder, exact segmentation metrics, deterministic
synthetic data, and a CLI for training, evaluation, and ablations.
"""

from .attention import (
    AttentionHeadParams,
    TokenMap,
    attend_discrete_to_continuous,
    bottleneck_forward,
    cross_attention,
    fuse,
    hard_self_attention,
)
from .autograd import Tensor, backward
from .data import Sample, SynthSpec, augment, generate, load_dataset, save_dataset
from .estimator import VQSegmenter
from .gradcheck import fd_check, run_composed_checks, run_op_checks
from .losses import seg_loss
from .metrics import confusion_metrics, dice_score, evaluate_pairs, hausdorff95
from .network import ModelConfig, SegModel, parameter_count
from .optim import SgdMomentum
from .quantize import Codebook, codebook_stats, quantize, straight_through
from .rng import CounterRng
from .train import evaluate, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AttentionHeadParams",
    "Codebook",
    "CounterRng",
    "ModelConfig",
    "Sample",
    "SegModel",
    "SgdMomentum",
    "SynthSpec",
    "Tensor",
    "TokenMap",
    "VQSegmenter",
    "attend_discrete_to_continuous",
    "augment",
    "backward",
    "bottleneck_forward",
    "codebook_stats",
    "confusion_metrics",
    "cross_attention",
    "dice_score",
    "evaluate",
    "evaluate_pairs",
    "fd_check",
    "fuse",
    "generate",
    "hard_self_attention",
    "hausdorff95",
    "load_checkpoint",
    "load_dataset",
    "parameter_count",
    "quantize",
    "run_composed_checks",
    "run_op_checks",
    "save_checkpoint",
    "save_dataset",
    "seg_loss",
    "straight_through",
    "train",
    "train_step",
]
