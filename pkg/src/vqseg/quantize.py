"""Vector quantization of continuous latent tokens against a learned codebook.

Each token is replaced by the codebook row minimizing Euclidean distance
(ties broken toward the lowest index).  Gradients cross the quantization
boundary via the straight-through rule; the codebook itself learns only
through the codebook term of the split quantization loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .rng import CounterRng


@dataclass
class Codebook:
    """K x dim matrix of discrete latent embeddings."""

    entries: Tensor
    beta: float = 0.25  # commitment weight; 0 recovers the codebook-only reading

    def __post_init__(self):
        if self.entries.ndim != 2:
            raise ConfigError(f"codebook entries must be 2-d, got {self.entries.shape}")
        if self.k < 2:
            raise ConfigError(f"codebook needs K >= 2, got K={self.k}")
        if self.dim < 1:
            raise ConfigError("codebook needs dim >= 1")

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initialize(cls, k: int, dim: int, rng: CounterRng, beta: float = 0.25) -> "Codebook":
        # small uniform init keeps early token-to-code distances comparable
        scale = 1.0 / k
        entries = Tensor(rng.uniform(-scale, scale, (k, dim)), requires_grad=True)
        return cls(entries=entries, beta=beta)


@dataclass
class QuantizeResult:
    """Nearest-code substitution plus the indices and loss that produced it."""

    z_q: Tensor
    indices: np.ndarray
    quant_loss: Tensor


def nearest_code_indices(tokens: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Argmin over squared Euclidean distance; first index wins ties."""
    diff = tokens[:, None, :] - entries[None, :, :]
    dist = np.square(diff).sum(axis=-1)
    return dist.argmin(axis=1)


def quantize(tokens: Tensor, book: Codebook) -> QuantizeResult:
    """Replace each token (last axis = dim) with its nearest codebook row.

    ``z_q`` carries a gradient path into the codebook (scatter over the
    selected rows); the loss applies the stop-gradients so that the encoder
    side learns only through the commitment term.
    """
    if tokens.shape[-1] != book.dim:
        raise DimensionError(
            f"token width {tokens.shape[-1]} != codebook dim {book.dim}"
        )
    flat = tokens.data.reshape(-1, book.dim)
    indices = nearest_code_indices(flat, book.entries.data)
    z_q = ag.reshape(ag.take_rows(book.entries, indices), tokens.shape)
    loss = quantization_loss(tokens, z_q, book.beta)
    return QuantizeResult(z_q=z_q, indices=indices.reshape(tokens.shape[:-1]), quant_loss=loss)


def quantization_loss(z_con: Tensor, z_q: Tensor, beta: float) -> Tensor:
    """||sg(z_con) - z_q||^2 + beta * ||z_con - sg(z_q)||^2, mean over tokens.

    Per-token distance is summed over the feature axis, then averaged over
    tokens, so the forward value is (1 + beta) * mean squared distance.
    """
    if z_con.shape != z_q.shape:
        raise DimensionError(f"loss shapes differ: {z_con.shape} vs {z_q.shape}")
    codebook_term = ag.square(ag.sub(ag.detach(z_con), z_q)).sum(axis=-1).mean()
    commit_term = ag.square(ag.sub(z_con, ag.detach(z_q))).sum(axis=-1).mean()
    return ag.add(codebook_term, ag.mul(Tensor(float(beta)), commit_term))


def straight_through(z_con: Tensor, z_q: Tensor) -> Tensor:
    """Identity-Jacobian pass-through: value of z_q, gradient to z_con."""
    return ag.straight_through(z_con, z_q)


def codebook_stats(indices: np.ndarray, k: int) -> dict:
    """Utilization report over an index stream: hits, dead fraction, perplexity."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=k)
    total = counts.sum()
    if total == 0:
        return {"hits": counts.tolist(), "utilization": 0.0, "dead_fraction": 1.0,
                "perplexity": 0.0, "total": 0}
    p = counts / total
    nz = p[p > 0]
    perplexity = float(np.exp(-(nz * np.log(nz)).sum()))
    used = int((counts > 0).sum())
    return {
        "hits": counts.tolist(),
        "utilization": used / k,
        "dead_fraction": (k - used) / k,
        "perplexity": perplexity,
        "total": int(total),
    }
