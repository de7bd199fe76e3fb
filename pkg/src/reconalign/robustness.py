"""Randomly post-processed test sets and single-axis perturbation sweeps."""
from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torch import nn

from .errors import EvaluationError, UserError
from .evaluation import score_arrays
from .imaging import (
    FORMATS,
    add_noise,
    derive_seed,
    gaussian_blur,
    gaussian_noise_field,
    jpeg_roundtrip,
    load_rgb,
    resize,
    save_image,
    sha256_bytes,
    webp_roundtrip,
)
from .manifest import DatasetManifest, ImageRecord

logger = logging.getLogger(__name__)

SWEEP_KINDS = ("resize_scale", "blur_sigma", "noise_sigma", "jpeg_quality", "webp_quality", "downsample_to_fixed")
KIND_ALIASES = {"resize": "resize_scale", "blur": "blur_sigma", "noise": "noise_sigma",
                "jpeg": "jpeg_quality", "webp": "webp_quality", "fixed": "downsample_to_fixed"}
IDENTITY_LEVEL = {"resize_scale": 1.0, "blur_sigma": 0.0, "noise_sigma": 0.0,
                  "jpeg_quality": 100, "webp_quality": 100, "downsample_to_fixed": None}


# -- post-processed test sets ------------------------------------------------

@dataclass(frozen=True)
class PostProcessPolicy:
    """Each transform is armed independently; order is resize, blur, color jitter, JPEG."""

    resize_prob: float = 0.5
    resize_scale: tuple[float, float] = (0.5, 1.5)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter_prob: float = 0.5
    brightness: tuple[float, float] = (0.75, 1.25)
    contrast: tuple[float, float] = (0.75, 1.25)
    saturation: tuple[float, float] = (0.75, 1.25)
    hue: tuple[float, float] = (-0.05, 0.05)
    jpeg_prob: float = 0.5
    jpeg_quality: tuple[int, int] = (65, 100)
    seed: int = 0
    min_side: int = 96  # resized images never go below this side

    def __post_init__(self) -> None:
        for name in ("resize_prob", "blur_prob", "jitter_prob", "jpeg_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise UserError(f"{name} must lie in [0, 1]")
        for name in ("resize_scale", "blur_sigma", "brightness", "contrast", "saturation", "hue", "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise UserError(f"{name} range is empty: {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.resize_scale[0] <= 0 or self.blur_sigma[0] < 0:
            raise UserError("resize scales must be positive and blur sigmas nonnegative")
        if not (-0.5 <= self.hue[0] and self.hue[1] <= 0.5):
            raise UserError("hue shift must lie in [-0.5, 0.5]")
        if not (1 <= self.jpeg_quality[0] and self.jpeg_quality[1] <= 100):
            raise UserError("jpeg quality must lie in [1, 100]")

    @property
    def armed(self) -> bool:
        return any(getattr(self, p) > 0 for p in ("resize_prob", "blur_prob", "jitter_prob", "jpeg_prob"))

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "PostProcessPolicy":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def sample(self, rec: ImageRecord) -> dict[str, Any]:
        """Concrete parameters for one record, derived from (seed, record id)."""
        rng = np.random.default_rng(derive_seed(self.seed, "postprocess", rec.id))
        p: dict[str, Any] = {}
        if rng.random() < self.resize_prob:
            s = float(rng.uniform(*self.resize_scale))
            s = max(s, self.min_side / min(rec.dims)) if min(rec.dims) >= self.min_side else 1.0
            p["resize"] = (max(1, round(rec.width_px * s)), max(1, round(rec.height_px * s)))
        if rng.random() < self.blur_prob:
            p["blur_sigma"] = float(rng.uniform(*self.blur_sigma))
        if rng.random() < self.jitter_prob:
            p["jitter"] = {k: float(rng.uniform(*getattr(self, k)))
                           for k in ("brightness", "contrast", "saturation", "hue")}
        if rng.random() < self.jpeg_prob:
            p["jpeg_quality"] = int(rng.integers(self.jpeg_quality[0], self.jpeg_quality[1] + 1))
        return p


def color_jitter(x: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))
    t = TF.adjust_brightness(t, brightness)
    t = TF.adjust_contrast(t, contrast)
    t = TF.adjust_saturation(t, saturation)
    t = TF.adjust_hue(t, hue)
    return t.permute(1, 2, 0).numpy().copy()


def postprocess_image(x: np.ndarray, p: dict[str, Any]) -> np.ndarray:
    if "resize" in p:
        x = resize(x, *p["resize"])
    if "blur_sigma" in p:
        x = gaussian_blur(x, p["blur_sigma"])
    if "jitter" in p:
        x = color_jitter(x, **p["jitter"])
    if "jpeg_quality" in p:
        x = jpeg_roundtrip(x, p["jpeg_quality"])
    return x


def build_postprocessed_manifest(m: DatasetManifest, policy: PostProcessPolicy,
                                 out_root: str | Path) -> DatasetManifest:
    """One processed copy per record. Untouched records are copied byte for byte; JPEG-armed
    records are written as JPEG at the sampled quality, the rest as PNG. Pair links are dropped."""
    if len(m) == 0:
        raise UserError("cannot post-process an empty manifest")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    records, log = [], {}
    for rec in m.records:
        p = policy.sample(rec)
        try:
            if not p:
                dst = out_root / rec.path
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(m.path_of(rec), dst)
                new = ImageRecord(rec.id, rec.path, rec.width_px, rec.height_px, rec.container_format,
                                  rec.label, rec.source_tag, rec.content_hash)
            else:
                # every step but the JPEG encode runs in memory; the JPEG step is the file encode itself
                y = postprocess_image(load_rgb(m.path_of(rec)), {k: v for k, v in p.items() if k != "jpeg_quality"})
                fmt, q = ("jpeg", p["jpeg_quality"]) if "jpeg_quality" in p else ("png", None)
                data = save_image(y, out_root / Path(rec.path).with_suffix(FORMATS[fmt][1]), fmt, q)
                rel = Path(rec.path).with_suffix(FORMATS[fmt][1]).as_posix()
                new = ImageRecord(rec.id, rel, y.shape[1], y.shape[0], fmt, rec.label, rec.source_tag,
                                  sha256_bytes(data))
        except Exception as e:  # noqa: BLE001 - isolated per image
            logger.warning("post-processing failed for %s: %s", rec.id, e)
            continue
        records.append(new)
        log[rec.id] = p
    meta = {**m.meta, "postprocess": {"policy": policy.to_json(), "applied": log, "source_root": str(m.root)}}
    return DatasetManifest(out_root.resolve(), tuple(records), meta)


# -- sweeps ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    kind: str
    levels: tuple[float, ...]
    reencode_at_identity: bool = False  # when False, quality 100 leaves the image untouched
    seed: int = 0  # noise realizations

    def __post_init__(self) -> None:
        kind = KIND_ALIASES.get(self.kind, self.kind)
        if kind not in SWEEP_KINDS:
            raise UserError(f"unknown sweep kind {self.kind!r}; choose from {SWEEP_KINDS}")
        object.__setattr__(self, "kind", kind)
        levels = tuple(float(v) for v in self.levels)
        if not levels:
            raise UserError("a sweep needs at least one level")
        d = np.diff(levels)
        if len(levels) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise UserError(f"sweep levels must be strictly monotone, got {levels}")
        if kind in ("jpeg_quality", "webp_quality") and not all(1 <= v <= 100 for v in levels):
            raise UserError("quality levels must lie in [1, 100]")
        if kind in ("resize_scale", "downsample_to_fixed") and min(levels) <= 0:
            raise UserError(f"{kind} levels must be positive")
        if kind in ("blur_sigma", "noise_sigma") and min(levels) < 0:
            raise UserError(f"{kind} levels must be nonnegative")
        object.__setattr__(self, "levels", levels)

    def is_identity(self, level: float) -> bool:
        if self.kind in ("jpeg_quality", "webp_quality"):
            return level == 100 and not self.reencode_at_identity
        return level == IDENTITY_LEVEL[self.kind]

    def perturb(self, x: np.ndarray, level: float, key: str = "") -> np.ndarray:
        """Apply exactly one perturbation of this kind at ``level``."""
        h, w = x.shape[:2]
        if self.kind == "resize_scale":
            return resize(x, max(1, round(w * level)), max(1, round(h * level)))
        if self.kind == "downsample_to_fixed":
            return resize(x, int(level), int(level))
        if self.is_identity(level):
            return x.copy()
        if self.kind == "blur_sigma":
            return gaussian_blur(x, level)
        if self.kind == "noise_sigma":
            return add_noise(x, gaussian_noise_field(x.shape, level, derive_seed(self.seed, "sweep-noise", key, level)))
        if self.kind == "jpeg_quality":
            return jpeg_roundtrip(x, int(level))
        return webp_roundtrip(x, int(level))


@dataclass
class SweepCurve:
    kind: str
    levels: list[float]
    mean_scores: list[float]  # nan for skipped levels
    n: list[int]
    per_image: dict[str, list[float]] = field(default_factory=dict)  # level repr -> scores in id order
    ids: list[str] = field(default_factory=list)
    base_level: float | None = None
    base_resolution: str = ""
    skipped: list[float] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def score_at(self, level: float) -> float:
        return self.mean_scores[self.levels.index(float(level))]


def _resolution_note(images: Sequence[np.ndarray]) -> str:
    dims = sorted({(im.shape[1], im.shape[0]) for im in images})
    if len(dims) == 1:
        return f"{dims[0][0]}x{dims[0][1]}"
    return f"mixed ({len(dims)} sizes, {dims[0][0]}x{dims[0][1]} to {dims[-1][0]}x{dims[-1][1]})"


def sweep(detector: nn.Module, m: DatasetManifest, spec: SweepSpec, min_side: int = 96,
          batch_size: int = 32) -> SweepCurve:
    """Score every image under each level of one perturbation, applied at native resolution."""
    if len(m) == 0:
        raise EvaluationError("cannot sweep an empty manifest")
    images = [load_rgb(m.path_of(r)) for r in m.records]
    ids = [r.id for r in m.records]
    means, counts, per_image, skipped = [], [], {}, []
    for level in spec.levels:
        perturbed = [spec.perturb(x, level, rid) for x, rid in zip(images, ids)]
        small = [rid for rid, y in zip(ids, perturbed) if min(y.shape[:2]) < min_side]
        if small:
            logger.warning("skipping %s level %g: %d images fall below %d px", spec.kind, level, len(small), min_side)
            means.append(math.nan)
            counts.append(0)
            skipped.append(level)
            continue
        scores = score_arrays(detector, perturbed, batch_size)
        means.append(float(np.mean(scores)))
        counts.append(len(scores))
        per_image[repr(level)] = scores
    base = IDENTITY_LEVEL[spec.kind]
    return SweepCurve(spec.kind, list(spec.levels), means, counts, per_image, ids,
                      None if base is None else float(base), _resolution_note(images), skipped)


def downsample_to_fixed(m: DatasetManifest, side: int, out_root: str | Path, min_side: int = 96) -> DatasetManifest:
    """Resize every image to ``side x side`` (aspect ratio not preserved), saved as PNG.
    Images already at that size are copied unchanged, so the operation is idempotent."""
    if side < min_side:
        raise UserError(f"target side {side} is below the minimum side {min_side}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    records = []
    for rec in m.records:
        if rec.dims == (side, side):
            dst = out_root / rec.path
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(m.path_of(rec), dst)
            records.append(ImageRecord(rec.id, rec.path, side, side, rec.container_format, rec.label,
                                       rec.source_tag, rec.content_hash, rec.pair_id))
            continue
        y = resize(load_rgb(m.path_of(rec)), side, side)
        rel = Path(rec.path).with_suffix(".png").as_posix()
        data = save_image(y, out_root / rel, "png")
        records.append(ImageRecord(rec.id, rel, side, side, "png", rec.label, rec.source_tag,
                                   sha256_bytes(data), rec.pair_id))
    meta = {**m.meta, "downsample_to_fixed": {"side": side, "source_root": str(m.root)}}
    return DatasetManifest(out_root.resolve(), tuple(records), meta)


# -- outputs -----------------------------------------------------------------

def export_curve(c: SweepCurve, out: str | Path) -> Path:
    """CSV with header ``level,mean_score,n``; floats written with ``repr`` so they read back exactly."""
    if not c.levels:
        raise EvaluationError("empty curve")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "mean_score", "n"])
        for lv, ms, n in zip(c.levels, c.mean_scores, c.n):
            w.writerow([repr(float(lv)), repr(float(ms)), n])
    return out


def read_curve_csv(path: str | Path) -> list[tuple[float, float, int]]:
    with open(path, newline="") as fh:
        return [(float(r["level"]), float(r["mean_score"]), int(r["n"])) for r in csv.DictReader(fh)]


def render_plot(curves: SweepCurve | Sequence[SweepCurve], out: str | Path,
                labels: Sequence[str] | None = None, title: str | None = None) -> Path:
    """Mean score against level, one line per curve; the unperturbed level is marked with a dotted line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = [curves] if isinstance(curves, SweepCurve) else list(curves)
    if not curves or not curves[0].levels:
        raise EvaluationError("nothing to plot")
    labels = labels or [None] * len(curves)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c, lab in zip(curves, labels):
        ax.plot(c.levels, c.mean_scores, marker="o", label=lab)
    base = curves[0].base_level
    if base is not None:
        ax.axvline(base, linestyle=":", color="gray", label="unperturbed")
    ax.set_xlabel(curves[0].kind.replace("_", " "))
    ax.set_ylabel("mean score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title or f"{curves[0].kind} sweep ({curves[0].base_resolution})")
    if any(labels) or base is not None:
        ax.legend(fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
