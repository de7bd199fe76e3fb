"""Scoring, thresholded and threshold-free metrics, calibration and a reconstruction-distance baseline.

Fakes are the positive class throughout; an image is called fake iff its
score is at least the threshold.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import EvaluationError
from .imaging import load_rgb, to_tensor
from .manifest import DatasetManifest, Label, manifest_hash

logger = logging.getLogger(__name__)

DEFAULT_FPR = 0.05
SCORE_BATCH = 32
# Fixed threshold reported for an LPIPS-VGG distance; meaningless for other distances.
LPIPS_DISTANCE_THRESHOLD = 0.018


@dataclass(frozen=True)
class ScoreEntry:
    id: str
    score: float
    label: Label
    source_tag: str


@dataclass(frozen=True)
class ScoreSet:
    entries: tuple[ScoreEntry, ...]
    detector: str = ""
    manifest_hash: str = ""
    excluded: tuple[str, ...] = ()  # ids flagged as unscorable

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise EvaluationError(f"duplicate score entry {e.id!r}")
            seen.add(e.id)
            if not (np.isfinite(e.score) and 0.0 <= e.score <= 1.0):
                raise EvaluationError(f"score for {e.id!r} is outside [0, 1]: {e.score}")

    @classmethod
    def from_arrays(cls, scores: Sequence[float], labels: Sequence[int],
                    sources: Sequence[str] | None = None, **kw: Any) -> "ScoreSet":
        sources = sources if sources is not None else ["all"] * len(scores)
        return cls(tuple(ScoreEntry(f"e{i}", float(s), Label(int(y)), t)
                         for i, (s, y, t) in enumerate(zip(scores, labels, sources))), **kw)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(e.label) for e in self.entries], dtype=np.int64)

    def by_id(self) -> dict[str, ScoreEntry]:
        return {e.id: e for e in self.entries}

    def accuracy(self, t: float = 0.5) -> float:
        if not self.entries:
            raise EvaluationError("empty score set")
        return float(np.mean((self.scores >= t) == (self.labels == 1)))

    def to_json(self) -> dict[str, Any]:
        return {"detector": self.detector, "manifest_hash": self.manifest_hash, "excluded": list(self.excluded),
                "entries": [{**asdict(e), "label": int(e.label)} for e in self.entries]}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ScoreSet":
        return cls(tuple(ScoreEntry(e["id"], e["score"], Label(e["label"]), e["source_tag"]) for e in d["entries"]),
                   d.get("detector", ""), d.get("manifest_hash", ""), tuple(d.get("excluded", ())))


# -- scoring -----------------------------------------------------------------

def score_arrays(detector: nn.Module, images: Sequence[np.ndarray], batch_size: int = SCORE_BATCH) -> list[float]:
    """sigmoid(logit) for each full ``(H, W, 3) uint8`` image.

    Images are batched by shape in first-seen order, so a given list of
    images always passes through the network in the same batches.
    """
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(img.shape, []).append(i)
    out = [0.0] * len(images)
    was_training = detector.training
    detector.eval()
    try:
        with torch.no_grad():
            for idx in groups.values():
                for s in range(0, len(idx), batch_size):
                    chunk = idx[s:s + batch_size]
                    x = torch.stack([to_tensor(images[i]) for i in chunk])
                    logits = detector(x).reshape(-1).double()
                    for i, p in zip(chunk, torch.sigmoid(logits).tolist()):
                        out[i] = float(p)
    finally:
        detector.train(was_training)
    return out


def score(detector: nn.Module, m: DatasetManifest, min_side: int = 96, batch_size: int = SCORE_BATCH,
          name: str = "") -> ScoreSet:
    """Score every image at full resolution; images with a side below ``min_side`` are excluded."""
    images, recs, excluded = [], [], []
    for r in m.records:
        if min(r.width_px, r.height_px) < min_side:
            excluded.append(r.id)
            continue
        images.append(load_rgb(m.path_of(r)))
        recs.append(r)
    if excluded:
        logger.warning("%d images smaller than %d px excluded from scoring (first: %s)",
                       len(excluded), min_side, excluded[0])
    scores = score_arrays(detector, images, batch_size)
    entries = tuple(ScoreEntry(r.id, s, r.label, r.source_tag) for r, s in zip(recs, scores))
    return ScoreSet(entries, name or type(detector).__name__, manifest_hash(m), tuple(excluded))


# -- metrics -----------------------------------------------------------------

def _both_labels(s: ScoreSet, what: str) -> tuple[np.ndarray, np.ndarray]:
    y = s.labels
    if len(y) == 0 or y.min() == y.max():
        raise EvaluationError(f"{what} needs both real and fake entries")
    return s.scores, y


def accuracy_at_threshold(s: ScoreSet, t: float = 0.5) -> dict[str, Any]:
    """Overall, per-label and per-source accuracy, with counts."""
    if not 0.0 < t < 1.0:
        raise EvaluationError(f"threshold must lie in (0, 1), got {t}")
    if len(s) == 0:
        raise EvaluationError("empty score set")
    pred = s.scores >= t
    correct = pred == (s.labels == 1)
    out: dict[str, Any] = {"threshold": t, "overall": float(correct.mean()), "n": len(s),
                           "by_label": {}, "by_source": {}, "counts": {}}
    for lab in Label:
        mask = s.labels == int(lab)
        if mask.any():
            out["by_label"][lab.name.lower()] = float(correct[mask].mean())
        else:
            logger.warning("no %s entries; label accuracy omitted", lab.name.lower())
    tags = np.array([e.source_tag for e in s.entries])
    for tag in sorted(set(tags.tolist())):
        mask = tags == tag
        out["by_source"][tag] = float(correct[mask].mean())
        out["counts"][tag] = int(mask.sum())
    return out


def average_precision(s: ScoreSet) -> float:
    """Sum of (R_k - R_{k-1}) * P_k over distinct score levels, descending; tied scores enter together."""
    scores, y = _both_labels(s, "average precision")
    order = np.argsort(-scores, kind="mergesort")
    scores, y = scores[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = (ends + 1) - tp
    recall = tp / y.sum()
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def tpr_at_fpr(s: ScoreSet, target_fpr: float = DEFAULT_FPR) -> float:
    """TPR at the smallest candidate threshold (observed scores and +inf) whose FPR is within target."""
    if not 0.0 < target_fpr < 1.0:
        raise EvaluationError(f"target FPR must lie in (0, 1), got {target_fpr}")
    scores, y = _both_labels(s, "TPR at FPR")
    pos, neg = np.sort(scores[y == 1]), np.sort(scores[y == 0])
    cands = np.r_[np.unique(scores), np.inf]
    fpr = (len(neg) - np.searchsorted(neg, cands, side="left")) / len(neg)
    ok = np.nonzero(fpr <= target_fpr)[0]
    t = cands[ok[0]]  # +inf always qualifies
    if np.isinf(t):
        logger.warning("no observed score reaches FPR <= %g; reporting TPR at +inf", target_fpr)
    return float((len(pos) - np.searchsorted(pos, t, side="left")) / len(pos))


def threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """Lowest score, midpoints between adjacent distinct scores, and just above the highest."""
    u = np.unique(scores)
    return np.r_[u[0], (u[:-1] + u[1:]) / 2.0, np.nextafter(u[-1], np.inf)]


def calibrate_threshold(val: ScoreSet) -> float:
    """Accuracy-maximizing threshold over the candidate set, lowest on ties."""
    scores, y = _both_labels(val, "calibration")
    cands = threshold_candidates(scores)
    pos, neg = np.sort(scores[y == 1]), np.sort(scores[y == 0])
    correct = (len(pos) - np.searchsorted(pos, cands, side="left")) + np.searchsorted(neg, cands, side="left")
    return float(cands[int(np.argmax(correct))])


# -- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    threshold: float
    accuracy: dict[str, Any]
    ap: float | None
    tpr_at_fpr: dict[str, float | None]
    n: int
    excluded: list[str] = field(default_factory=list)
    detector: str = ""
    manifest_hash: str = ""

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: str | Path, scores: ScoreSet | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "n", "accuracy"])
            w.writerow(["overall", self.n, repr(self.accuracy["overall"])])
            for tag, acc in self.accuracy["by_source"].items():
                w.writerow([tag, self.accuracy["counts"][tag], repr(acc)])
            w.writerow(["ap", self.n, repr(self.ap) if self.ap is not None else ""])
            for k, v in self.tpr_at_fpr.items():
                w.writerow([f"tpr@fpr={k}", self.n, repr(v) if v is not None else ""])
        if scores is not None:
            with open(out / "scores.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["id", "score", "label", "source_tag"])
                for e in scores.entries:
                    w.writerow([e.id, repr(e.score), int(e.label), e.source_tag])
        return out


def evaluate(s: ScoreSet, threshold: float = 0.5, fprs: Sequence[float] = (DEFAULT_FPR,)) -> EvalReport:
    both = len(set(s.labels.tolist())) == 2
    if not both:
        logger.warning("score set has a single label; AP and TPR@FPR are undefined")
    return EvalReport(
        threshold=threshold,
        accuracy=accuracy_at_threshold(s, threshold),
        ap=average_precision(s) if both else None,
        tpr_at_fpr={str(f): (tpr_at_fpr(s, f) if both else None) for f in fprs},
        n=len(s),
        excluded=list(s.excluded),
        detector=s.detector,
        manifest_hash=s.manifest_hash,
    )


# -- reconstruction-distance baseline ----------------------------------------

def mse_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared error on the [0, 1] scale."""
    d = a.astype(np.float64) / 255.0 - b.astype(np.float64) / 255.0
    return float(np.mean(d * d))


def reconstruction_distance_score(ensemble: Sequence[Any], x: np.ndarray,
                                  dist: Callable[[np.ndarray, np.ndarray], float] = mse_distance) -> float:
    """min over autoencoders of dist(x, reconstruct(ae, x)); low values suggest a generated image."""
    from .reconstruction import reconstruct

    if not ensemble:
        raise EvaluationError("the autoencoder ensemble is empty")
    best = None
    errors = []
    for ae in ensemble:
        try:
            d = dist(x, reconstruct(ae, x))
        except Exception as e:  # noqa: BLE001 - one failing member is tolerated
            errors.append(f"{getattr(ae, 'identity', ae)}: {e}")
            continue
        best = d if best is None else min(best, d)
    if best is None:
        raise EvaluationError("reconstruction failed for every autoencoder: " + "; ".join(errors))
    return best


@dataclass
class DistanceDetector:
    """Calls an image fake iff its reconstruction distance is below ``threshold``."""

    ensemble: Sequence[Any]
    threshold: float
    dist: Callable[[np.ndarray, np.ndarray], float] = mse_distance

    def distance(self, x: np.ndarray) -> float:
        return reconstruction_distance_score(self.ensemble, x, self.dist)

    def is_fake(self, x: np.ndarray) -> bool:
        return self.distance(x) < self.threshold
