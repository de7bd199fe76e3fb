"""Training-time augmentation in two phases: sample concrete parameters, then apply them.

Splitting the two lets a real image and its reconstruction receive exactly the
same crop, compression, blur and noise realization.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .errors import AugmentationError
from .imaging import (
    add_noise,
    crop_resize,
    gaussian_blur,
    gaussian_noise_field,
    jpeg_roundtrip,
    to_grayscale,
)

# Smallest source side the pipeline accepts.
MIN_SOURCE_SIDE = 8
RRC_MAX_ATTEMPTS = 10
RRC_LOG_RATIO = (math.log(3 / 4), math.log(4 / 3))

Box = tuple[int, int, int, int]  # (x, y, w, h)


@dataclass(frozen=True)
class AugmentationPolicy:
    jpeg_prob: float = 0.5
    jpeg_quality: tuple[int, int] = (30, 100)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 3.0)
    grayscale_prob: float = 0.1
    cutout_prob: float = 0.1
    cutout_fraction: tuple[float, float] = (0.1, 0.4)
    noise_prob: float = 0.1
    noise_sigma: tuple[float, float] = (1.0, 8.0)  # on the [0, 255] scale
    rrc_area: tuple[float, float] = (8.0, 100.0)  # percent of the source area
    rrc_side: int = 256
    train_crop_side: int = 96

    def __post_init__(self) -> None:
        for name in ("jpeg_prob", "blur_prob", "grayscale_prob", "cutout_prob", "noise_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("jpeg_quality", "blur_sigma", "cutout_fraction", "noise_sigma", "rrc_area"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentationError(f"{name} range is empty: {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        lo, hi = self.rrc_area
        if not (0 < lo and hi <= 100):
            raise AugmentationError(f"rrc_area must lie in (0, 100], got {self.rrc_area}")
        q_lo, q_hi = self.jpeg_quality
        if not (1 <= q_lo and q_hi <= 100):
            raise AugmentationError(f"jpeg_quality must lie in [1, 100], got {self.jpeg_quality}")
        if not (0 < self.cutout_fraction[0] and self.cutout_fraction[1] <= 1):
            raise AugmentationError(f"cutout_fraction must lie in (0, 1], got {self.cutout_fraction}")
        if self.train_crop_side < 1 or self.rrc_side < self.train_crop_side:
            raise AugmentationError("rrc_side must be at least train_crop_side")

    @classmethod
    def identity(cls, rrc_side: int = 256, train_crop_side: int = 96) -> "AugmentationPolicy":
        """No corruption and a full-image crop."""
        return cls(jpeg_prob=0, blur_prob=0, grayscale_prob=0, cutout_prob=0, noise_prob=0,
                   rrc_area=(100.0, 100.0), rrc_side=rrc_side, train_crop_side=train_crop_side)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "AugmentationPolicy":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class AugmentationParams:
    source_size: tuple[int, int]  # (w, h) the params were sampled for
    rrc_box: Box
    rrc_side: int
    crop_xy: tuple[int, int]  # top-left of the final crop inside the rrc output
    crop_side: int
    jpeg_quality: int | None = None
    blur_sigma: float | None = None
    grayscale: bool = False
    noise_sigma: float | None = None
    noise_seed: int | None = None
    cutout_box: Box | None = None  # in rrc-output coordinates

    @property
    def rrc_scale(self) -> float:
        """Linear resampling factor of the rrc step (>1 upsamples, <1 downsamples)."""
        _, _, w, h = self.rrc_box
        return self.rrc_side / math.sqrt(w * h)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def _sample_rrc_box(w: int, h: int, area_pct: tuple[float, float], rng: np.random.Generator) -> Box:
    area = w * h
    lo, hi = area_pct[0] / 100.0, area_pct[1] / 100.0
    for _ in range(RRC_MAX_ATTEMPTS):
        target = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*RRC_LOG_RATIO))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h and lo * area <= cw * ch <= hi * area:
            x = int(rng.integers(0, w - cw + 1))
            y = int(rng.integers(0, h - ch + 1))
            return (x, y, cw, ch)
    # fallback: centered crop with the aspect ratio clamped to the jitter range
    in_ratio = w / h
    if in_ratio < 3 / 4:
        cw, ch = w, int(round(w / (3 / 4)))
    elif in_ratio > 4 / 3:
        ch, cw = h, int(round(h * (4 / 3)))
    else:
        cw, ch = w, h
    cw, ch = min(cw, w), min(ch, h)
    return ((w - cw) // 2, (h - ch) // 2, cw, ch)


def sample_params(policy: AugmentationPolicy, dims: tuple[int, int], rng: np.random.Generator) -> AugmentationParams:
    """Draw one fully specified parameter set for a ``dims = (w, h)`` image."""
    w, h = dims
    if min(w, h) < MIN_SOURCE_SIDE:
        raise AugmentationError(f"image {w}x{h} is smaller than the minimal crop side {MIN_SOURCE_SIDE}")
    if policy.rrc_area == (100.0, 100.0):
        rrc_box: Box = (0, 0, w, h)
    else:
        rrc_box = _sample_rrc_box(w, h, policy.rrc_area, rng)

    side = policy.rrc_side
    jpeg_quality = blur_sigma = noise_sigma = noise_seed = cutout_box = None
    if rng.random() < policy.jpeg_prob:
        jpeg_quality = int(rng.integers(policy.jpeg_quality[0], policy.jpeg_quality[1] + 1))
    if rng.random() < policy.blur_prob:
        blur_sigma = float(rng.uniform(*policy.blur_sigma))
    grayscale = bool(rng.random() < policy.grayscale_prob)
    if rng.random() < policy.noise_prob:
        noise_sigma = float(rng.uniform(*policy.noise_sigma))
        noise_seed = int(rng.integers(0, 2**63 - 1))
    if rng.random() < policy.cutout_prob:
        hole = max(1, int(round(side * rng.uniform(*policy.cutout_fraction))))
        cx = int(rng.integers(0, side - hole + 1))
        cy = int(rng.integers(0, side - hole + 1))
        cutout_box = (cx, cy, hole, hole)
    c = policy.train_crop_side
    crop_xy = (int(rng.integers(0, side - c + 1)), int(rng.integers(0, side - c + 1)))
    return AugmentationParams(
        source_size=(w, h),
        rrc_box=rrc_box,
        rrc_side=side,
        crop_xy=crop_xy,
        crop_side=c,
        jpeg_quality=jpeg_quality,
        blur_sigma=blur_sigma,
        grayscale=grayscale,
        noise_sigma=noise_sigma,
        noise_seed=noise_seed,
        cutout_box=cutout_box,
    )


def apply(x: np.ndarray, p: AugmentationParams) -> np.ndarray:
    """rrc -> jpeg -> blur -> grayscale -> noise -> cutout -> final crop. Pure in (x, p)."""
    h, w = x.shape[:2]
    if (w, h) != tuple(p.source_size):
        raise AugmentationError(f"params were sampled for {tuple(p.source_size)}, image is {(w, h)}")
    out = crop_resize(x, p.rrc_box, p.rrc_side)
    if p.jpeg_quality is not None:
        out = jpeg_roundtrip(out, p.jpeg_quality)
    if p.blur_sigma is not None:
        out = gaussian_blur(out, p.blur_sigma)
    if p.grayscale:
        out = to_grayscale(out)
    if p.noise_sigma is not None:
        out = add_noise(out, gaussian_noise_field(out.shape, p.noise_sigma, p.noise_seed))
    if p.cutout_box is not None:
        cx, cy, cw, ch = p.cutout_box
        out = out.copy()
        out[cy:cy + ch, cx:cx + cw] = 0
    x0, y0 = p.crop_xy
    return np.ascontiguousarray(out[y0:y0 + p.crop_side, x0:x0 + p.crop_side])


def paired_apply(x_real: np.ndarray, x_fake: np.ndarray, p: AugmentationParams) -> tuple[np.ndarray, np.ndarray]:
    if x_real.shape != x_fake.shape:
        raise AugmentationError(f"pair dimension mismatch: {x_real.shape} vs {x_fake.shape}")
    return apply(x_real, p), apply(x_fake, p)
