"""Dual-latent bottleneck: soft cross-attention, additive fusion, hard refinement.

The bottleneck runs in token space: a spatial latent map (B, dim, H, W) is
viewed as B sequences of H*W tokens of width dim.  The discrete (quantized)
tokens attend over the continuous tokens with standard scaled-dot-product
multi-head cross-attention; the three representations are fused by addition;
a hardness-aware self-attention pass then picks, per query and head, the
single most similar token and re-projects it, and its output is added back
onto the fused map before decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .quantize import Codebook, quantize, straight_through
from .rng import CounterRng


@dataclass
class TokenMap:
    """A latent feature map viewed as B sequences of height*width tokens."""

    tokens: Tensor  # (B, T, dim)
    height: int
    width: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise DimensionError(f"token map must be (B, T, dim), got {self.tokens.shape}")
        if self.tokens.shape[1] != self.height * self.width:
            raise DimensionError(
                f"T={self.tokens.shape[1]} != height*width={self.height * self.width}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @classmethod
    def from_spatial(cls, x: Tensor) -> "TokenMap":
        """(B, dim, H, W) -> tokens (B, H*W, dim); lossless, differentiable."""
        b, d, h, w = x.shape
        tokens = ag.transpose(ag.reshape(x, (b, d, h * w)), (0, 2, 1))
        return cls(tokens=tokens, height=h, width=w)

    def to_spatial(self) -> Tensor:
        b, t, d = self.tokens.shape
        return ag.reshape(ag.transpose(self.tokens, (0, 2, 1)), (b, d, self.height, self.width))

    def like(self, tokens: Tensor) -> "TokenMap":
        return TokenMap(tokens=tokens, height=self.height, width=self.width)


@dataclass
class AttentionHeadParams:
    """Per-head query/key/value projections plus the shared output matrix."""

    wq: list[Tensor]  # each dim x head_dim
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor  # dim x dim

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def dim(self) -> int:
        return self.wo.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def initialize(cls, dim: int, heads: int, rng: CounterRng) -> "AttentionHeadParams":
        if heads < 1 or dim % heads:
            raise ConfigError(f"heads={heads} must divide dim={dim}")
        hd = dim // heads
        scale = 1.0 / math.sqrt(dim)

        def draw(cols):
            return Tensor(rng.uniform(-scale, scale, (dim, cols)), requires_grad=True)

        wq, wk, wv = [], [], []
        for _ in range(heads):  # draw order per head: q, k, v
            wq.append(draw(hd))
            wk.append(draw(hd))
            wv.append(draw(hd))
        return cls(wq=wq, wk=wk, wv=wv, wo=draw(dim))

    def tensors(self) -> list[tuple[str, Tensor]]:
        named = []
        for h in range(self.heads):
            named += [(f"h{h}.wq", self.wq[h]), (f"h{h}.wk", self.wk[h]), (f"h{h}.wv", self.wv[h])]
        named.append(("wo", self.wo))
        return named


def cross_attention(
    queries: TokenMap,
    keys_values: TokenMap,
    params: AttentionHeadParams,
    return_weights: bool = False,
):
    """Multi-head scaled-dot-product attention of queries over keys/values.

    Per head: scores = Q K^T / sqrt(head_dim), weights = softmax over keys,
    output = weights V; head outputs are concatenated and passed through wo.
    """
    if queries.dim != keys_values.dim:
        raise DimensionError(
            f"query dim {queries.dim} != key/value dim {keys_values.dim}"
        )
    if queries.dim != params.dim:
        raise ConfigError(f"params built for dim {params.dim}, tokens have dim {queries.dim}")
    scale = Tensor(1.0 / math.sqrt(params.head_dim))
    head_outputs, all_weights = [], []
    for h in range(params.heads):
        q = ag.matmul(queries.tokens, params.wq[h])
        k = ag.matmul(keys_values.tokens, params.wk[h])
        v = ag.matmul(keys_values.tokens, params.wv[h])
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), scale)
        weights = ag.softmax(scores, axis=-1)
        head_outputs.append(ag.matmul(weights, v))
        all_weights.append(weights)
    out = ag.matmul(ag.concat(head_outputs, axis=-1), params.wo)
    result = queries.like(out)
    return (result, all_weights) if return_weights else result


def attend_discrete_to_continuous(
    z_dis: TokenMap, z_con: TokenMap, params: AttentionHeadParams
) -> TokenMap:
    """Cross-attention with discrete tokens as queries, continuous as keys/values."""
    return cross_attention(z_dis, z_con, params)


def fuse(z_dis: TokenMap, z_con: TokenMap, z_attn: TokenMap) -> TokenMap:
    """Elementwise additive fusion of the three bottleneck representations."""
    if not (z_dis.tokens.shape == z_con.tokens.shape == z_attn.tokens.shape):
        raise DimensionError(
            f"fuse shapes differ: {z_dis.tokens.shape}, {z_con.tokens.shape}, "
            f"{z_attn.tokens.shape}"
        )
    return z_con.like(ag.add(ag.add(z_dis.tokens, z_con.tokens), z_attn.tokens))


def hard_attention_selection(
    z_f: TokenMap, params: AttentionHeadParams
) -> list[np.ndarray]:
    """Per-head argmax token index for each query (ties -> lowest index)."""
    selections = []
    scale = 1.0 / math.sqrt(params.head_dim)
    for h in range(params.heads):
        q = z_f.tokens.data @ params.wq[h].data
        k = z_f.tokens.data @ params.wk[h].data
        sim = (q @ k.swapaxes(-1, -2)) * scale
        selections.append(sim.argmax(axis=-1))
    return selections


def hard_self_attention(
    z_f: TokenMap,
    params: AttentionHeadParams,
    surrogate_temperature: float | None = None,
) -> TokenMap:
    """One-hot self-attention: each query copies its most similar token's value.

    The argmax index is a constant in backward; gradient flows only through
    the selected value path (and wo).  With ``surrogate_temperature`` set,
    the indicator is replaced by softmax(sim / temperature), which restores
    gradient flow through the similarity path and converges to the hard
    output as the temperature goes to zero on strict-margin instances.
    """
    scale = Tensor(1.0 / math.sqrt(params.head_dim))
    head_outputs = []
    for h in range(params.heads):
        v = ag.matmul(z_f.tokens, params.wv[h])
        if surrogate_temperature is None:
            q = z_f.tokens.data @ params.wq[h].data
            k = z_f.tokens.data @ params.wk[h].data
            sim = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.head_dim))
            head_outputs.append(ag.gather_tokens(v, sim.argmax(axis=-1)))
        else:
            q = ag.matmul(z_f.tokens, params.wq[h])
            k = ag.matmul(z_f.tokens, params.wk[h])
            sim = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), scale)
            weights = ag.softmax(ag.mul(sim, Tensor(1.0 / surrogate_temperature)), axis=-1)
            head_outputs.append(ag.matmul(weights, v))
    out = ag.matmul(ag.concat(head_outputs, axis=-1), params.wo)
    return z_f.like(out)


@dataclass
class BottleneckResult:
    output: TokenMap
    quant_loss: Tensor
    indices: np.ndarray
    fused: TokenMap


def bottleneck_forward(
    z_con: TokenMap,
    book: Codebook,
    cross_params: AttentionHeadParams,
    refine_params: AttentionHeadParams | None,
    use_cross_attention: bool = True,
    surrogate_temperature: float | None = None,
) -> BottleneckResult:
    """Quantize, cross-attend, fuse, refine; returns tokens ready for decoding.

    ``refine_params=None`` disables refinement (the fused map passes through
    unchanged).  ``use_cross_attention=False`` is the plain-fusion variant:
    the attended term is dropped and fusion is just z_dis + z_con.
    """
    q = quantize(z_con.tokens, book)
    z_dis = z_con.like(straight_through(z_con.tokens, q.z_q))
    if use_cross_attention:
        z_attn = attend_discrete_to_continuous(z_dis, z_con, cross_params)
        z_f = fuse(z_dis, z_con, z_attn)
    else:
        z_f = z_con.like(ag.add(z_dis.tokens, z_con.tokens))
    if refine_params is None:
        out = z_f
    else:
        z_ref = hard_self_attention(z_f, refine_params, surrogate_temperature)
        out = z_f.like(ag.add(z_f.tokens, z_ref.tokens))
    return BottleneckResult(output=out, quant_loss=q.quant_loss, indices=q.indices, fused=z_f)


def hard_similarity_margin(tokens_data: np.ndarray, params: AttentionHeadParams) -> float:
    """Min over queries and heads of (best minus second-best similarity).

    A token sequence of length one has no competitor, so the margin is inf.
    """
    if tokens_data.shape[1] < 2:
        return math.inf
    margin = math.inf
    scale = 1.0 / math.sqrt(params.head_dim)
    for h in range(params.heads):
        q = tokens_data @ params.wq[h].data
        k = tokens_data @ params.wk[h].data
        sim = (q @ k.swapaxes(-1, -2)) * scale
        sim_sorted = np.sort(sim, axis=-1)
        margin = min(margin, float((sim_sorted[..., -1] - sim_sorted[..., -2]).min()))
    return margin


def decision_margins(
    z_con: TokenMap,
    book: Codebook,
    cross_params: AttentionHeadParams,
    refine_params: AttentionHeadParams | None,
    use_cross_attention: bool = True,
) -> tuple[float, float]:
    """Smallest quantizer and hard-attention decision margins at this input.

    Returns (min over tokens of second-best minus best squared code distance,
    min over queries of best minus second-best similarity).  Perturbations
    below these margins cannot flip any argmin/argmax, which is the
    precondition for finite-difference checks through the hard stages.
    """
    flat = z_con.tokens.data.reshape(-1, book.dim)
    dist = np.square(flat[:, None, :] - book.entries.data[None, :, :]).sum(axis=-1)
    dist_sorted = np.sort(dist, axis=1)
    quant_margin = float((dist_sorted[:, 1] - dist_sorted[:, 0]).min())

    if refine_params is None:
        return quant_margin, math.inf
    result = bottleneck_forward(
        z_con, book, cross_params, None, use_cross_attention=use_cross_attention
    )
    return quant_margin, hard_similarity_margin(result.fused.tokens.data, refine_params)
