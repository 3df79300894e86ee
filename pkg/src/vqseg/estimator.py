"""Scikit-learn style estimator wrapping the segmentation network.

Follows the sklearn conventions so the model composes with the wider
ecosystem: constructor stores hyperparameters verbatim, ``get_params`` /
``set_params`` come from ``BaseEstimator``, fitted state lives in
trailing-underscore attributes, and ``fit`` returns ``self``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autograd as ag
from .autograd import Tensor
from .data import Sample
from .network import ModelConfig, SegModel
from .train import evaluate, train
from .validation import check_image_batch, check_mask_batch


class VQSegmenter(BaseEstimator):
    """Image segmenter with a dual continuous / vector-quantized bottleneck.

    Parameters
    ----------
    num_classes : int or None
        Number of classes including background; inferred from ``y`` when None.
    encoder_channels : tuple of int
        Channels per encoder stage; depth sets the downsampling factor.
    dim : int
        Bottleneck token width.
    codebook_size : int
        Number of discrete latent embeddings.
    cross_heads, refine_heads : int
        Attention head counts for the cross-attention and refinement stages
        (``refine_heads=0`` disables refinement).
    use_skips, use_cross_attention : bool
        Architecture toggles; disabling cross-attention gives the
        plain-fusion variant.
    commitment_beta, quant_loss_weight : float
        Quantization loss shaping.
    lr, momentum, weight_decay, batch_size, epochs : optimizer settings.
    augment : bool
        Random flips/rotations during fit.
    seed : int
        Single source of randomness for init, batching, and augmentation.

    Attributes
    ----------
    model_ : SegModel
    config_ : ModelConfig
    history_ : list of per-epoch loss reports
    n_classes_ : int
    """

    def __init__(self, num_classes=None, encoder_channels=(16, 32, 64), dim=32,
                 codebook_size=64, cross_heads=2, refine_heads=2, use_skips=True,
                 use_cross_attention=True, commitment_beta=0.25, quant_loss_weight=1.0,
                 lr=0.01, momentum=0.9, weight_decay=1e-4, batch_size=8, epochs=10,
                 augment=False, seed=0):
        self.num_classes = num_classes
        self.encoder_channels = encoder_channels
        self.dim = dim
        self.codebook_size = codebook_size
        self.cross_heads = cross_heads
        self.refine_heads = refine_heads
        self.use_skips = use_skips
        self.use_cross_attention = use_cross_attention
        self.commitment_beta = commitment_beta
        self.quant_loss_weight = quant_loss_weight
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment = augment
        self.seed = seed

    def fit(self, X, y):
        """Train on images X (N, H, W) or (N, C, H, W) and label maps y (N, H, W)."""
        X = check_image_batch(X)
        y = check_mask_batch(y, X.shape, self.num_classes)
        n_classes = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        n_classes = max(n_classes, 2)
        self.config_ = ModelConfig(
            in_channels=X.shape[1],
            num_classes=n_classes,
            encoder_channels=tuple(self.encoder_channels),
            dim=self.dim,
            codebook_size=self.codebook_size,
            cross_heads=self.cross_heads,
            refine_heads=self.refine_heads,
            use_skips=self.use_skips,
            use_cross_attention=self.use_cross_attention,
            commitment_beta=self.commitment_beta,
            quant_loss_weight=self.quant_loss_weight,
            seed=self.seed,
        )
        self.model_ = SegModel(self.config_)
        samples = [Sample(image=xi, mask=yi) for xi, yi in zip(X, y)]
        self.history_ = train(
            self.model_, samples,
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, weight_decay=self.weight_decay,
            use_augment=self.augment,
        )
        self.n_classes_ = n_classes
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called before prediction")

    def predict(self, X) -> np.ndarray:
        """Hard label maps (N, H, W)."""
        self._require_fitted()
        X = check_image_batch(X, self.config_.in_channels)
        out = []
        for start in range(0, len(X), self.batch_size):
            out.append(self.model_.predict(X[start:start + self.batch_size]))
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        """Per-class sigmoid probabilities (N, C, H, W), one-vs-rest."""
        self._require_fitted()
        X = check_image_batch(X, self.config_.in_channels)
        out = []
        for start in range(0, len(X), self.batch_size):
            logits, _, _ = self.model_.forward(Tensor(X[start:start + self.batch_size]))
            out.append(ag.sigmoid(Tensor(logits.data)).data)
        return np.concatenate(out)

    def score(self, X, y) -> float:
        """Mean foreground Dice over the batch (0.0 when undefined)."""
        self._require_fitted()
        X = check_image_batch(X, self.config_.in_channels)
        y = check_mask_batch(y, X.shape, self.n_classes_)
        samples = [Sample(image=xi, mask=yi) for xi, yi in zip(X, y)]
        report = evaluate(self.model_, samples, batch_size=self.batch_size)
        return report["mean_dsc"] if report["mean_dsc"] is not None else 0.0
