"""Encoder / dual-latent bottleneck / decoder segmentation network.

The backbone is a plain convolutional stack (depth set by ``encoder_channels``)
standing in for a pretrained encoder: per stage, two 3x3 conv + group-norm +
relu blocks, then 2x average-pool downsampling.  A two-convolution block maps
into the bottleneck width before quantization and another follows the
bottleneck; the decoder mirrors the encoder depth with nearest-neighbour 2x
upsampling and optional skip concatenation, ending in a 1x1 classifier.

Parameter initialization draws from one seeded generator in a fixed,
documented order (see rng module).  Convolutions carry no bias (group-norm
beta provides the shift); the classifier head has one.

Closed-form parameter count (see ``parameter_count``): with channels
c_0=in_channels, stages c_1..c_s, bottleneck width d, codebook size K,
classes n, skips on:

    encoder:   sum_i (9 c_{i-1} c_i + 9 c_i^2 + 4 c_i)
    pre block:  9 c_s d + 9 d^2 + 4 d
    codebook:   K d
    attention:  4 d^2 per enabled attention block (cross, refinement)
    post block: 18 d^2 + 4 d
    decoder:    9 (d + c_s) c_s + 9 c_s^2 + 4 c_s   for the first stage, then
                9 (c_{i+1} + c_i) c_i + 9 c_i^2 + 4 c_i  mirroring down
                (without skips the parenthesized sums drop the skip term)
    head:       c_1 n + n
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .attention import AttentionHeadParams, TokenMap, bottleneck_forward
from .autograd import Tensor
from .errors import ConfigError, DimensionError
from .quantize import Codebook, codebook_stats
from .rng import CounterRng

GN_EPS = 1e-5


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    encoder_channels: tuple = (16, 32, 64)
    dim: int = 32
    codebook_size: int = 64  # K
    cross_heads: int = 2  # attention heads, discrete queries over continuous keys
    refine_heads: int = 2  # hard self-attention heads; 0 disables refinement
    use_skips: bool = True
    use_cross_attention: bool = True  # False = plain-fusion variant
    commitment_beta: float = 0.25
    quant_loss_weight: float = 1.0
    refine_surrogate_temperature: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)

    def validate(self):
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must be non-empty")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook size must be >= 2, got {self.codebook_size}")
        head_req = max(self.cross_heads, self.refine_heads, 1)
        if self.dim % head_req:
            raise ConfigError(f"dim={self.dim} not divisible by max head count {head_req}")
        for heads, label in ((self.cross_heads, "cross_heads"), (self.refine_heads, "refine_heads")):
            if heads and self.dim % heads:
                raise ConfigError(f"dim={self.dim} not divisible by {label}={heads}")
        if self.cross_heads < 1 and self.use_cross_attention:
            raise ConfigError("cross_heads must be >= 1 when cross-attention is enabled")
        if self.refine_heads < 0:
            raise ConfigError("refine_heads must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**payload)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count (see module docstring)."""
    c = config
    chans = list(c.encoder_channels)
    d = c.dim
    total = 0
    prev = c.in_channels
    for ch in chans:
        total += 9 * prev * ch + 9 * ch * ch + 4 * ch
        prev = ch
    total += 9 * chans[-1] * d + 9 * d * d + 4 * d  # pre-quant block
    total += c.codebook_size * d
    if c.use_cross_attention:
        total += 4 * d * d
    if c.refine_heads > 0:
        total += 4 * d * d
    total += 18 * d * d + 4 * d  # post block
    prev = d
    for ch in reversed(chans):
        inc = prev + (ch if c.use_skips else 0)
        total += 9 * inc * ch + 9 * ch * ch + 4 * ch
        prev = ch
    total += chans[0] * c.num_classes + c.num_classes  # 1x1 head with bias
    return total


class SegModel:
    """Holds every learnable tensor and runs the full forward pass."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self._params: dict[str, Tensor] = {}
        rng = CounterRng(config.seed)

        prev = config.in_channels
        for i, ch in enumerate(config.encoder_channels):
            self._add_block(f"enc{i}", prev, ch, rng)
            prev = ch
        self._add_block("pre", prev, config.dim, rng)

        self.codebook = Codebook.initialize(
            config.codebook_size, config.dim, rng, beta=config.commitment_beta
        )
        self._register("codebook", self.codebook.entries)

        self.cross_params = None
        if config.use_cross_attention:
            self.cross_params = AttentionHeadParams.initialize(
                config.dim, config.cross_heads, rng
            )
            for name, t in self.cross_params.tensors():
                self._register(f"cross.{name}", t)
        self.refine_params = None
        if config.refine_heads > 0:
            self.refine_params = AttentionHeadParams.initialize(
                config.dim, config.refine_heads, rng
            )
            for name, t in self.refine_params.tensors():
                self._register(f"refine.{name}", t)

        self._add_block("post", config.dim, config.dim, rng)

        prev = config.dim
        for i, ch in reversed(list(enumerate(config.encoder_channels))):
            inc = prev + (ch if config.use_skips else 0)
            self._add_block(f"dec{i}", inc, ch, rng)
            prev = ch
        c0 = config.encoder_channels[0]
        bound = 1.0 / math.sqrt(c0)
        self._register(
            "head.w", Tensor(rng.uniform(-bound, bound, (config.num_classes, c0, 1, 1)),
                             requires_grad=True)
        )
        self._register("head.b", Tensor(np.zeros(config.num_classes), requires_grad=True))

    # -- construction helpers ------------------------------------------------

    def _register(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self._params[name] = tensor

    def _add_block(self, name: str, cin: int, cout: int, rng: CounterRng):
        """Two conv(3x3, no bias) + group-norm(1 group) + relu layers."""
        for j, (ci, co) in enumerate(((cin, cout), (cout, cout))):
            bound = 1.0 / math.sqrt(ci * 9)
            self._register(f"{name}.conv{j}.w", Tensor(rng.uniform(-bound, bound, (co, ci, 3, 3))))
            self._register(f"{name}.gn{j}.gamma", Tensor(np.ones((co, 1, 1))))
            self._register(f"{name}.gn{j}.beta", Tensor(np.zeros((co, 1, 1))))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    # -- forward --------------------------------------------------------------

    def _norm(self, x: Tensor, name: str) -> Tensor:
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        centered = ag.sub(x, mu)
        var = ag.square(centered).mean(axis=(1, 2, 3), keepdims=True)
        xhat = ag.div(centered, ag.sqrt(ag.add(var, Tensor(GN_EPS))))
        return ag.add(ag.mul(xhat, self.param(f"{name}.gamma")), self.param(f"{name}.beta"))

    def _block(self, x: Tensor, name: str) -> Tensor:
        for j in (0, 1):
            x = ag.conv2d(x, self.param(f"{name}.conv{j}.w"), stride=1, padding=1)
            x = ag.relu(self._norm(x, f"{name}.gn{j}"))
        return x

    def forward(self, images: Tensor):
        """Returns (logits, quant_loss, codebook indices for the batch)."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise DimensionError(
                f"expected (B, {cfg.in_channels}, H, W) images, got {images.shape}"
            )
        h, w = images.shape[2], images.shape[3]
        div = 2 ** cfg.stages
        if h % div or w % div:
            raise ConfigError(
                f"spatial size {h}x{w} not divisible by 2^{cfg.stages} stages"
            )
        x = images
        skips = []
        for i in range(cfg.stages):
            x = self._block(x, f"enc{i}")
            skips.append(x)
            x = ag.avg_pool2x2(x)
        x = self._block(x, "pre")

        tokens = TokenMap.from_spatial(x)
        bres = bottleneck_forward(
            tokens,
            self.codebook,
            self.cross_params,
            self.refine_params,
            use_cross_attention=cfg.use_cross_attention,
            surrogate_temperature=cfg.refine_surrogate_temperature,
        )
        x = bres.output.to_spatial()
        x = self._block(x, "post")

        for i in reversed(range(cfg.stages)):
            x = ag.upsample_nearest2x(x)
            if cfg.use_skips:
                x = ag.concat([x, skips[i]], axis=1)
            x = self._block(x, f"dec{i}")
        logits = ag.add(
            ag.conv2d(x, self.param("head.w")),
            ag.reshape(self.param("head.b"), (1, cfg.num_classes, 1, 1)),
        )
        return logits, bres.quant_loss, bres.indices

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Hard label maps: argmax over class logits."""
        logits, _, _ = self.forward(Tensor(images))
        return logits.data.argmax(axis=1)

    def usage_stats(self, indices: np.ndarray) -> dict:
        return codebook_stats(indices, self.config.codebook_size)
