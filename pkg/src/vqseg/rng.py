"""Deterministic counter-based random number generation.

Every random draw in the package flows through :class:`CounterRng`, a
SplitMix64-style generator whose state is just ``(seed, counter)``.  The
n-th raw value is a pure function of the seed and n, so streams are
bit-reproducible across platforms and can be checkpointed by storing two
integers.

Draw-order documentation (who consumes the stream, in order):

* model initialization: encoder stages (first to last, conv weights in
  layer order), pre-quantization block, codebook, cross-attention
  projections (per head: q, k, v, then the output matrix), refinement
  projections (same order), post-bottleneck block, decoder stages,
  classifier head;
* training: one permutation per epoch for batch order, then one uniform
  draw per sample for augmentation choice (when augmentation is on);
* dataset synthesis: each sample uses an independent generator derived as
  ``seed XOR sample_index`` and draws, per shape: class id, shape kind,
  center x, center y, radius x, radius y, then the noise field.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class CounterRng:
    """Counter-based generator: value(i) = mix(seed + (counter+i+1) * golden)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    # -- raw stream ---------------------------------------------------------

    def _next_uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    # -- distributions ------------------------------------------------------

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1), 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = self._next_uint64(n) >> np.uint64(11)
        out = u.astype(np.float64) * (2.0 ** -53)
        return out.reshape(shape) if shape else out[0]

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard Gaussian via Box-Muller; consumes two uniforms per pair."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = (self._next_uint64(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (2.0 ** -53)  # (0, 1]: keeps log() finite
        u2 = (self._next_uint64(pairs) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] * std
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high). Modulo reduction; bias < span/2**64."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        out = (self._next_uint64(n) % span).astype(np.int64) + low
        return out.reshape(shape) if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n); consumes n-1 integer draws."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    # -- bookkeeping --------------------------------------------------------

    def derive(self, index: int) -> "CounterRng":
        """Independent per-item stream: seed XOR index, counter 0."""
        return CounterRng(self.seed ^ int(index))

    @property
    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "CounterRng":
        return cls(state["seed"], state["counter"])

    def __repr__(self):
        return f"CounterRng(seed={self.seed}, counter={self.counter})"
