"""Training loop, evaluation, and checkpointing for the segmentation model.

One train step: forward, per-class sigmoid probabilities (clamped to
[1e-12, 1 - 1e-12] so the loss's open-interval domain holds at extreme
logits), BCE+Dice segmentation loss plus weighted quantization loss, one
reverse sweep, one optimizer step.  Everything is a deterministic function
of (config, seed, data): batch order comes from one permutation draw per
epoch and augmentation from one draw per sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, backward, first_nonfinite
from .data import Sample, augment
from .errors import IntegrityError, NumericError
from .losses import one_hot, seg_loss
from .metrics import evaluate_pairs
from .network import ModelConfig, SegModel
from .optim import SgdMomentum
from .quantize import codebook_stats
from .rng import CounterRng
from .tensorio import read_tensor, write_tensor

PROB_CLAMP = 1e-12


@dataclass
class StepReport:
    total: float
    seg: float
    quant: float
    indices: np.ndarray


def train_step(model: SegModel, optimizer: SgdMomentum,
               images: np.ndarray, masks: np.ndarray) -> StepReport:
    logits, quant_loss, indices = model.forward(Tensor(images))
    probs = ag.clip(ag.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    truth = one_hot(masks, model.config.num_classes)
    seg = seg_loss(probs, truth)
    total = ag.add(seg, ag.mul(Tensor(model.config.quant_loss_weight), quant_loss))
    if not np.isfinite(total.data):
        offender = first_nonfinite(total) or "total"
        raise NumericError(f"non-finite loss; first non-finite tensor: {offender}")
    optimizer.zero_grad()
    backward(total)
    optimizer.step()
    return StepReport(
        total=total.item(), seg=seg.item(), quant=quant_loss.item(), indices=indices
    )


@dataclass
class EpochReport:
    epoch: int
    total: float
    seg: float
    quant: float
    codebook_perplexity: float
    val_dsc: float | None = None
    codebook_stats: dict = field(default_factory=dict)


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(
    model: SegModel,
    samples: list[Sample],
    epochs: int,
    batch_size: int,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    use_augment: bool = True,
    val_samples: list[Sample] | None = None,
    rng: CounterRng | None = None,
    on_epoch=None,
) -> list[EpochReport]:
    """Full training run; returns one report per epoch."""
    optimizer = SgdMomentum(model.parameters(), lr, momentum, weight_decay)
    rng = rng if rng is not None else CounterRng(model.config.seed ^ 0x5EED)
    reports = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(samples))
        sums = np.zeros(3)
        steps = 0
        epoch_indices = []
        for batch_idx in _batches(len(samples), batch_size, order):
            batch = [samples[i] for i in batch_idx]
            if use_augment:
                batch = [augment(s, rng) for s in batch]
            images = np.stack([s.image for s in batch])
            masks = np.stack([s.mask for s in batch])
            report = train_step(model, optimizer, images, masks)
            sums += (report.total, report.seg, report.quant)
            epoch_indices.append(report.indices.reshape(-1))
            steps += 1
        stats = codebook_stats(np.concatenate(epoch_indices), model.config.codebook_size)
        val_dsc = None
        if val_samples:
            val_dsc = evaluate(model, val_samples)["mean_dsc"]
        report = EpochReport(
            epoch=epoch,
            total=sums[0] / steps,
            seg=sums[1] / steps,
            quant=sums[2] / steps,
            codebook_perplexity=stats["perplexity"],
            val_dsc=val_dsc,
            codebook_stats=stats,
        )
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report, model, rng)
    return reports


def evaluate(model: SegModel, samples: list[Sample], batch_size: int = 8) -> dict:
    """Metric report over a sample list (no augmentation, hard argmax)."""
    preds, truths = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        pred = model.predict(images)
        preds.extend(pred)
        truths.extend(s.mask for s in chunk)
    return evaluate_pairs(preds, truths, model.config.num_classes)


# -- checkpointing -------------------------------------------------------------

CKPT_MANIFEST = "manifest.json"


def save_checkpoint(path, model: SegModel, step: int, rng: CounterRng):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in model.parameters():
        write_tensor(path / f"{name}.syt", tensor.data)
        names.append(name)
    manifest = {
        "format": "vqseg-checkpoint-v1",
        "config": model.config.to_dict(),
        "step": step,
        "rng_state": rng.state,
        "params": names,
    }
    (path / CKPT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[SegModel, int, CounterRng]:
    path = Path(path)
    manifest_file = path / CKPT_MANIFEST
    if not manifest_file.exists():
        raise IntegrityError(f"missing {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    config = ModelConfig.from_dict(manifest["config"])
    model = SegModel(config)
    stored = set(manifest["params"])
    have = {name for name, _ in model.parameters()}
    if stored != have:
        raise IntegrityError(
            f"checkpoint parameters disagree with config: missing {sorted(have - stored)}, "
            f"unexpected {sorted(stored - have)}"
        )
    for name, tensor in model.parameters():
        data = read_tensor(path / f"{name}.syt")
        if data.shape != tensor.shape:
            raise IntegrityError(f"{name}: stored shape {data.shape} != model {tensor.shape}")
        tensor.data = data
    return model, manifest["step"], CounterRng.from_state(manifest["rng_state"])
