"""Finite-difference verification of every backward rule.

``fd_check`` is the oracle: central differences against the analytic
gradient, reported as max over coordinates of
``|analytic - numeric| / max(1, |analytic|)``.  ``OP_CHECKS`` registers one
entry per differentiable operation with a generator of random instances;
non-smooth ops draw inputs bounded away from their kinks so the central
difference stays on one branch.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward
from .errors import ContractError
from .rng import CounterRng


def fd_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and scalar-valued.  Relative error uses
    ``max(1, |analytic|)`` in the denominator, coordinate-wise.
    """
    if eps <= 0:
        raise ContractError("fd_check eps must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"fd_check target must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += eps
        xm = base.copy()
        xm.reshape(-1)[i] -= eps
        flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


@dataclass
class OpCheck:
    """A named gradient check: builds (f, x) instances from a generator."""

    name: str
    build: Callable[[CounterRng], tuple[Callable[[Tensor], Tensor], Tensor]]


def _rand(rng: CounterRng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape))


def _away_from_zero(rng: CounterRng, shape, margin=0.05) -> Tensor:
    # keeps |x| >= margin so kinked ops (relu, clip) stay on one branch
    x = rng.uniform(margin, 1.0, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(x * sign)


def _weighted_sum(weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    # fixed random scalarization keeps every output coordinate in play
    wt = Tensor(weights)

    def f(y: Tensor) -> Tensor:
        return (y * wt).sum()

    return f


def _build_add(rng):
    b = _rand(rng, (3, 4))
    w = rng.uniform(-1, 1, (2, 3, 4))
    return (lambda x: (ag.add(x, b) * Tensor(w)).sum()), _rand(rng, (2, 3, 4))


def _build_mul_broadcast(rng):
    b = _rand(rng, (4,))
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda x: (ag.mul(x, b) * Tensor(w)).sum()), _rand(rng, (3, 4))


def _build_div(rng):
    b = Tensor(rng.uniform(0.5, 1.5, (3, 4)))
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda x: (ag.div(x, b) * Tensor(w)).sum()), _rand(rng, (3, 4))


def _build_div_denominator(rng):
    a = _rand(rng, (3, 4))
    w = rng.uniform(-1, 1, (3, 4))
    return (lambda x: (ag.div(a, x) * Tensor(w)).sum()), Tensor(rng.uniform(0.5, 1.5, (3, 4)))


def _build_relu(rng):
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda x: (ag.relu(x) * Tensor(w)).sum()), _away_from_zero(rng, (4, 5))


def _build_sigmoid(rng):
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda x: (ag.sigmoid(x) * Tensor(w)).sum()), _rand(rng, (4, 5), -3, 3)


def _build_log(rng):
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda x: (ag.log(x) * Tensor(w)).sum()), Tensor(rng.uniform(0.5, 2.0, (4, 5)))


def _build_square(rng):
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda x: (ag.square(x) * Tensor(w)).sum()), _rand(rng, (4, 5))


def _build_sqrt(rng):
    w = rng.uniform(-1, 1, (4, 5))
    return (lambda x: (ag.sqrt(x) * Tensor(w)).sum()), Tensor(rng.uniform(0.5, 2.0, (4, 5)))


def _build_clip(rng):
    w = rng.uniform(-1, 1, (4, 5))
    # inputs at least 0.05 away from the clip boundaries
    x = rng.uniform(-0.6, 0.6, (4, 5))
    x = np.where(np.abs(np.abs(x) - 0.7) < 0.05, 0.5 * x, x)
    return (lambda t: (ag.clip(t, -0.7, 0.7) * Tensor(w)).sum()), Tensor(x)


def _build_mean(rng):
    w = rng.uniform(-1, 1, (2, 4))
    return (lambda x: (ag.mean_(x, axis=1) * Tensor(w)).sum()), _rand(rng, (2, 3, 4))


def _build_sum_keepdims(rng):
    w = rng.uniform(-1, 1, (2, 1, 4))
    return (lambda x: (ag.sum_(x, axis=1, keepdims=True) * Tensor(w)).sum()), _rand(rng, (2, 3, 4))


def _build_matmul(rng):
    b = _rand(rng, (4, 2))
    w = rng.uniform(-1, 1, (3, 2))
    return (lambda x: (ag.matmul(x, b) * Tensor(w)).sum()), _rand(rng, (3, 4))


def _build_matmul_rhs(rng):
    a = _rand(rng, (3, 4))
    w = rng.uniform(-1, 1, (3, 2))
    return (lambda x: (ag.matmul(a, x) * Tensor(w)).sum()), _rand(rng, (4, 2))


def _build_matmul_batched(rng):
    b = _rand(rng, (2, 4, 3))
    w = rng.uniform(-1, 1, (2, 2, 3))
    return (lambda x: (ag.matmul(x, b) * Tensor(w)).sum()), _rand(rng, (2, 2, 4))


def _build_softmax(rng):
    w = rng.uniform(-1, 1, (3, 5))
    return (lambda x: (ag.softmax(x, axis=-1) * Tensor(w)).sum()), _rand(rng, (3, 5), -2, 2)


def _build_conv2d(rng):
    k = _rand(rng, (3, 2, 3, 3))
    w = rng.uniform(-1, 1, (1, 3, 3, 3))
    return (
        lambda x: (ag.conv2d(x, k, stride=1, padding=1) * Tensor(w)).sum()
    ), _rand(rng, (1, 2, 3, 3))


def _build_conv2d_kernel(rng):
    x = _rand(rng, (1, 2, 4, 4))
    w = rng.uniform(-1, 1, (1, 3, 2, 2))
    return (
        lambda k: (ag.conv2d(x, k, stride=2, padding=1) * Tensor(w)).sum()
    ), _rand(rng, (3, 2, 3, 3))


def _build_avg_pool(rng):
    w = rng.uniform(-1, 1, (1, 2, 2, 2))
    return (lambda x: (ag.avg_pool2x2(x) * Tensor(w)).sum()), _rand(rng, (1, 2, 4, 4))


def _build_upsample(rng):
    w = rng.uniform(-1, 1, (1, 2, 4, 4))
    return (lambda x: (ag.upsample_nearest2x(x) * Tensor(w)).sum()), _rand(rng, (1, 2, 2, 2))


def _build_concat(rng):
    b = _rand(rng, (2, 3))
    w = rng.uniform(-1, 1, (2, 7))
    return (lambda x: (ag.concat([x, b], axis=1) * Tensor(w)).sum()), _rand(rng, (2, 4))


def _build_transpose(rng):
    w = rng.uniform(-1, 1, (4, 2, 3))
    return (lambda x: (ag.transpose(x, (2, 0, 1)) * Tensor(w)).sum()), _rand(rng, (2, 3, 4))


def _build_take_rows(rng):
    idx = rng.integers(0, 5, (7,))
    w = rng.uniform(-1, 1, (7, 3))
    return (lambda t: (ag.take_rows(t, idx) * Tensor(w)).sum()), _rand(rng, (5, 3))


def _build_gather_tokens(rng):
    idx = rng.integers(0, 4, (2, 3))
    w = rng.uniform(-1, 1, (2, 3, 3))
    return (lambda v: (ag.gather_tokens(v, idx) * Tensor(w)).sum()), _rand(rng, (2, 4, 3))


# straight_through is deliberately absent: its backward is the estimator
# convention (identity to the continuous input), not the value derivative,
# so finite differences cannot apply.  Its Jacobian contract is verified
# exactly by unit-vector propagation in the quantizer tests.
OP_CHECKS: list[OpCheck] = [
    OpCheck("add", _build_add),
    OpCheck("mul", _build_mul_broadcast),
    OpCheck("div", _build_div),
    OpCheck("div_denominator", _build_div_denominator),
    OpCheck("relu", _build_relu),
    OpCheck("sigmoid", _build_sigmoid),
    OpCheck("log", _build_log),
    OpCheck("square", _build_square),
    OpCheck("sqrt", _build_sqrt),
    OpCheck("clip", _build_clip),
    OpCheck("mean", _build_mean),
    OpCheck("sum_keepdims", _build_sum_keepdims),
    OpCheck("matmul", _build_matmul),
    OpCheck("matmul_rhs", _build_matmul_rhs),
    OpCheck("matmul_batched", _build_matmul_batched),
    OpCheck("softmax", _build_softmax),
    OpCheck("conv2d", _build_conv2d),
    OpCheck("conv2d_kernel", _build_conv2d_kernel),
    OpCheck("avg_pool2x2", _build_avg_pool),
    OpCheck("upsample_nearest2x", _build_upsample),
    OpCheck("concat", _build_concat),
    OpCheck("transpose", _build_transpose),
    OpCheck("take_rows", _build_take_rows),
    OpCheck("gather_tokens", _build_gather_tokens),
]


def run_op_checks(eps: float = 1e-4, instances: int = 16, seed: int = 0) -> dict[str, float]:
    """Max fd_check error per registered op over random instances."""
    report: dict[str, float] = {}
    for check in OP_CHECKS:
        worst = 0.0
        for i in range(instances):
            rng = CounterRng(seed ^ zlib.crc32(check.name.encode()), counter=i * 104729)
            f, x = check.build(rng)
            worst = max(worst, fd_check(f, x, eps=eps))
        report[check.name] = worst
    return report


# -- composed bottleneck checks ------------------------------------------------
#
# The quantizer's straight-through backward and the codebook's scatter path
# are estimator conventions, not value derivatives, so they are excluded by
# construction: the token-side check wires the quantizer as the identity
# ("soft paths only"), and the parameter-side check differentiates a
# projection matrix, whose gradient path never crosses a stop-gradient.
# Hard attention stays in both; its selection is locked by requiring the
# decision margin (computed first) to dwarf anything an eps-perturbation
# can shift.


def _bottleneck_instance(seed: int, dim: int = 4, tokens: int = 4, heads: int = 2, k: int = 8):
    from .attention import AttentionHeadParams
    from .quantize import Codebook

    rng = CounterRng(seed)
    cross = AttentionHeadParams.initialize(dim, heads, rng)
    refine = AttentionHeadParams.initialize(dim, heads, rng)
    book = Codebook.initialize(k, dim, rng)
    x = rng.uniform(-1, 1, (1, tokens, dim))
    weights = rng.uniform(-1, 1, (1, tokens, dim))
    return cross, refine, book, x, weights


def soft_path_bottleneck_check(
    seed: int = 0, min_margin: float = 0.02, max_attempts: int = 500
):
    """Margin-checked fd instance for the composed soft-path bottleneck.

    Returns (f, x, margin): f runs cross-attention, additive fusion, and hard
    refinement with the quantizer replaced by identity wiring, scalarized by
    a fixed random functional; differentiation is with respect to the input
    tokens.  Seeds advance deterministically until the hard-attention margin
    at the base point exceeds ``min_margin``.
    """
    from .attention import TokenMap, cross_attention, hard_self_attention, hard_similarity_margin

    for attempt in range(max_attempts):
        cross, refine, _, x, weights = _bottleneck_instance(seed + 7919 * attempt + 1)
        tokens = x.shape[1]
        z = TokenMap(Tensor(x), 1, tokens)
        z_attn = cross_attention(z, z, cross)
        z_f_data = x + x + z_attn.tokens.data
        margin = hard_similarity_margin(z_f_data, refine)
        if margin < min_margin:
            continue
        wt = Tensor(weights)

        def f(t: Tensor) -> Tensor:
            zt = TokenMap(t, 1, tokens)
            attn = cross_attention(zt, zt, cross)
            fused = ag.add(ag.add(zt.tokens, zt.tokens), attn.tokens)
            refined = hard_self_attention(TokenMap(fused, 1, tokens), refine)
            return (ag.add(fused, refined.tokens) * wt).sum()

        return f, Tensor(x), margin
    raise RuntimeError(f"no instance reached hard margin {min_margin} in {max_attempts} tries")


def parameter_path_bottleneck_check(
    seed: int = 0, min_margin: float = 0.02, max_attempts: int = 500
):
    """Margin-checked fd instance through the full bottleneck, wrt a projection.

    The real quantizer runs (its indices depend only on the fixed input and
    codebook, so they cannot flip); differentiation is with respect to the
    cross-attention output matrix, whose gradient path is stop-gradient-free.
    """
    from .attention import (
        AttentionHeadParams,
        TokenMap,
        bottleneck_forward,
        decision_margins,
    )

    for attempt in range(max_attempts):
        cross, refine, book, x, weights = _bottleneck_instance(seed + 104729 * attempt + 2)
        tokens = x.shape[1]
        z = TokenMap(Tensor(x), 1, tokens)
        _, hard_margin = decision_margins(z, book, cross, refine)
        if hard_margin < min_margin:
            continue
        wt = Tensor(weights)

        def f(wo: Tensor) -> Tensor:
            params = AttentionHeadParams(wq=cross.wq, wk=cross.wk, wv=cross.wv, wo=wo)
            res = bottleneck_forward(z, book, params, refine)
            return ag.add((res.output.tokens * wt).sum(), res.quant_loss)

        return f, Tensor(cross.wo.data.copy()), hard_margin
    raise RuntimeError(f"no instance reached hard margin {min_margin} in {max_attempts} tries")


def run_composed_checks(eps: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """fd errors for the composed bottleneck paths (tolerance 1e-4)."""
    f_soft, x_soft, _ = soft_path_bottleneck_check(seed)
    f_param, x_param, _ = parameter_path_bottleneck_check(seed)
    return {
        "bottleneck_soft_path": fd_check(f_soft, x_soft, eps=eps),
        "bottleneck_parameter_path": fd_check(f_param, x_param, eps=eps),
    }
