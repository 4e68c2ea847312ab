"""Synthetic organ/microtumor segmentation data and flip/rotate augmentation.

Each image holds one large soft-edged ellipse (the organ, label 1) with up to
three small sharp ellipses inside it (tumors, label 2, only when there are
three classes) on a noisy background. Sample ``i`` of a dataset is drawn from
its own generator seeded with ``(seed, i)``, so a dataset of ``n`` samples is
a prefix of any larger one with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_SIZE = 16
ORGAN_AXIS = (0.20, 0.32)  # semi-axis range as a fraction of the image side
ORGAN_JITTER = 0.08  # center offset range as a fraction of the image side
TUMOR_AXIS = (2.0, 5.0)  # semi-axis range in pixels
MAX_TUMORS = 3
NOISE_STD = 0.04
EDGE_SOFTNESS = 0.04

# RGB intensities of background, organ and tumor
PALETTE = np.array(
    [[0.15, 0.20, 0.25], [0.55, 0.45, 0.40], [0.90, 0.75, 0.30]], dtype=np.float32
)


@dataclass
class SegmentationSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 labels
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} are not aligned")


def _ellipse_radius(h: int, w: int, cy, cx, ay, ax, angle) -> np.ndarray:
    """Normalized elliptical radius at every pixel center (<= 1 inside)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return np.sqrt((u / ay) ** 2 + (v / ax) ** 2)


def make_sample(size: int, rng: np.random.Generator, num_classes: int = 3,
                min_tumors: int = 0, max_tumors: int = MAX_TUMORS) -> SegmentationSample:
    if size < MIN_SIZE:
        raise ValueError(f"image size {size} is too small for the organ (minimum {MIN_SIZE})")
    jitter = ORGAN_JITTER * size
    cy = size / 2 + rng.uniform(-jitter, jitter)
    cx = size / 2 + rng.uniform(-jitter, jitter)
    ay, ax = rng.uniform(*ORGAN_AXIS, size=2) * size
    organ_r = _ellipse_radius(size, size, cy, cx, ay, ax, rng.uniform(0, math.pi))
    organ = organ_r <= 1
    mask = organ.astype(np.uint8)

    tumors = []
    count = int(rng.integers(min_tumors, max_tumors + 1)) if num_classes >= 3 else 0
    for _ in range(count):
        for _attempt in range(100):
            ty, tx = rng.uniform(*TUMOR_AXIS, size=2)
            py = rng.uniform(cy - ay, cy + ay)
            px = rng.uniform(cx - ax, cx + ax)
            blob = _ellipse_radius(size, size, py, px, ty, tx, rng.uniform(0, math.pi)) <= 1
            if blob.any() and not (blob & ~organ).any() and not (mask[blob] == 2).any():
                mask[blob] = 2
                tumors.append((float(py), float(px), float(ty), float(tx)))
                break

    # soft organ boundary in intensity, hard boundary in the label map
    organ_soft = 1 / (1 + np.exp((organ_r - 1) / EDGE_SOFTNESS))
    image = PALETTE[0][:, None, None] + (PALETTE[1] - PALETTE[0])[:, None, None] * organ_soft
    tumor = mask == 2
    image = np.where(tumor[None], PALETTE[2][:, None, None], image)
    image = image + rng.normal(0, NOISE_STD, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return SegmentationSample(image, mask, {"tumors": tumors})


def synth_dataset(n: int, size: int = 64, seed: int = 0, num_classes: int = 3,
                  min_tumors: int = 0, max_tumors: int = MAX_TUMORS) -> list[SegmentationSample]:
    """``n`` samples, fully determined by ``seed``."""
    if num_classes not in (2, 3):
        raise ValueError(f"the generator produces 2 or 3 classes, not {num_classes}")
    if not 0 <= min_tumors <= max_tumors:
        raise ValueError("need 0 <= min_tumors <= max_tumors")
    out = []
    for i in range(n):
        s = make_sample(size, np.random.default_rng([seed, i]), num_classes, min_tumors, max_tumors)
        s.meta["source"] = f"synth-{seed}-{i}"
        out.append(s)
    return out


def expected_class_fractions(size: int, num_classes: int = 3, min_tumors: int = 0,
                             max_tumors: int = MAX_TUMORS) -> np.ndarray:
    """Generator target share of pixels per class (background, organ, tumor)."""
    organ_area = math.pi * (np.mean(ORGAN_AXIS) * size) ** 2
    tumor_area = 0.0
    if num_classes >= 3:
        tumor_area = (min_tumors + max_tumors) / 2 * math.pi * np.mean(TUMOR_AXIS) ** 2
    total = size * size
    fr = [1 - organ_area / total, (organ_area - tumor_area) / total]
    if num_classes >= 3:
        fr.append(tumor_area / total)
    return np.array(fr)


def augment(sample: SegmentationSample, rng: np.random.Generator) -> SegmentationSample:
    """Horizontal flip with probability 0.5, then rotation by ``k * 90`` degrees, ``k`` uniform."""
    flip = bool(rng.random() < 0.5)
    k = int(rng.integers(4))
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    image = np.rot90(image, k, axes=(1, 2))
    mask = np.rot90(mask, k)
    meta = dict(sample.meta, augment={"flip": flip, "rot90": k})
    return SegmentationSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), meta)


def stack(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch images ``[B, 3, H, W]`` and masks ``[B, H, W]``."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
