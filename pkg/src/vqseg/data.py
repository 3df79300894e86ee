"""Deterministic synthetic multi-class segmentation data.

Images are grayscale in [0, 1]: filled ellipses and axis-aligned rectangles
whose intensity encodes their class (bands spaced 0.15 apart), plus Gaussian
noise, so classes are separable but not trivially thresholdable.  Masks are
the exact rasterization, with later shapes overwriting earlier ones.  The
whole dataset is a pure function of the spec: sample i draws from an
independent generator seeded ``seed XOR i``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError
from .rng import CounterRng
from .tensorio import read_tensor, write_tensor

BACKGROUND_BASE = 0.10
CLASS_BAND_STEP = 0.15
MANIFEST_NAME = "manifest.json"


@dataclass
class SynthSpec:
    image_size: int = 32
    num_classes: int = 4
    shapes_min: int = 1
    shapes_max: int = 3
    noise_std: float = 0.05
    min_shape_radius: float = 3.0
    max_shape_radius: float = 8.0
    overlap_allowed: bool = True
    count: int = 100
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("need at least background plus one foreground class")
        if not 0 < self.min_shape_radius <= self.max_shape_radius:
            raise ConfigError("shape radii must satisfy 0 < min <= max")
        if 2 * self.max_shape_radius >= self.image_size:
            raise ConfigError(
                f"max radius {self.max_shape_radius} does not fit image size {self.image_size}"
            )
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError("shape count range must satisfy 1 <= min <= max")
        if self.count < 0 or self.image_size < 4:
            raise ConfigError("count must be >= 0 and image_size >= 4")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) int64 labels


def class_intensity(cls: int) -> float:
    return BACKGROUND_BASE + CLASS_BAND_STEP * cls


def _rasterize(kind: int, cx, cy, rx, ry, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:  # ellipse
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)  # rectangle


def _generate_one(spec: SynthSpec, rng: CounterRng) -> Sample:
    size = spec.image_size
    mask = np.zeros((size, size), dtype=np.int64)
    base = np.full((size, size), BACKGROUND_BASE)
    n_shapes = rng.integers(spec.shapes_min, spec.shapes_max + 1)
    for _ in range(n_shapes):
        placed = False
        for _attempt in range(20):
            cls = rng.integers(1, spec.num_classes)
            kind = rng.integers(0, 2)
            lo, hi = spec.max_shape_radius, size - 1 - spec.max_shape_radius
            cx = rng.uniform(lo, hi)
            cy = rng.uniform(lo, hi)
            rx = rng.uniform(spec.min_shape_radius, spec.max_shape_radius)
            ry = rng.uniform(spec.min_shape_radius, spec.max_shape_radius)
            footprint = _rasterize(kind, cx, cy, rx, ry, size)
            if spec.overlap_allowed or not (footprint & (mask > 0)).any():
                placed = True
                break
        if not placed:
            continue  # crowded image under no-overlap: drop the shape
        mask[footprint] = cls
        base[footprint] = class_intensity(cls)
    noise = rng.normal((size, size), std=spec.noise_std) if spec.noise_std > 0 else 0.0
    image = np.clip(base + noise, 0.0, 1.0)
    return Sample(image=image[None], mask=mask)


def generate(spec: SynthSpec) -> list[Sample]:
    spec.validate()
    return [_generate_one(spec, CounterRng(spec.seed ^ i)) for i in range(spec.count)]


AUGMENT_NAMES = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


def augment(sample: Sample, rng: CounterRng) -> Sample:
    """One of six dihedral transforms, applied identically to image and mask."""
    choice = rng.integers(0, len(AUGMENT_NAMES))
    return apply_augment(sample, choice)


def apply_augment(sample: Sample, choice: int) -> Sample:
    img, msk = sample.image, sample.mask
    if choice == 1:
        img, msk = img[:, :, ::-1], msk[:, ::-1]
    elif choice == 2:
        img, msk = img[:, ::-1, :], msk[::-1, :]
    elif choice >= 3:
        k = choice - 2
        img, msk = np.rot90(img, k, axes=(1, 2)), np.rot90(msk, k)
    return Sample(image=np.ascontiguousarray(img), mask=np.ascontiguousarray(msk))


def save_dataset(samples: list[Sample], path, spec: SynthSpec):
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        write_tensor(path / "samples" / f"{i:04d}.img", sample.image)
        write_tensor(path / "samples" / f"{i:04d}.msk", sample.mask.astype(np.float64))
    manifest = {"format": "vqseg-dataset-v1", "spec": asdict(spec), "count": len(samples)}
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[list[Sample], SynthSpec]:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"missing {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = SynthSpec(**manifest["spec"])
    samples = []
    for i in range(manifest["count"]):
        img_path = path / "samples" / f"{i:04d}.img"
        msk_path = path / "samples" / f"{i:04d}.msk"
        for p in (img_path, msk_path):
            if not p.exists():
                raise IntegrityError(f"manifest promises {manifest['count']} samples; missing {p}")
        image = read_tensor(img_path)
        mask_f = read_tensor(msk_path)
        if image.shape != (1, spec.image_size, spec.image_size):
            raise IntegrityError(f"{img_path}: shape {image.shape} disagrees with spec")
        if mask_f.shape != (spec.image_size, spec.image_size):
            raise IntegrityError(f"{msk_path}: shape {mask_f.shape} disagrees with spec")
        mask = mask_f.astype(np.int64)
        if (mask != mask_f).any() or mask.min() < 0 or mask.max() >= spec.num_classes:
            raise IntegrityError(f"{msk_path}: labels outside [0, {spec.num_classes})")
        samples.append(Sample(image=image, mask=mask))
    return samples, spec


def class_pixel_stats(samples: list[Sample], num_classes: int) -> dict:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=num_classes)
    total = int(counts.sum())
    return {
        "pixels_per_class": counts.tolist(),
        "fraction_per_class": (counts / total).tolist() if total else [],
        "total_pixels": total,
    }
