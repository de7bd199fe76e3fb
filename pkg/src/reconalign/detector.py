"""Single-logit detectors, Random/Sync batch composition and the patience-scheduled training loop."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torchvision
from torch import nn

from .augmentation import AugmentationParams, AugmentationPolicy, apply, paired_apply, sample_params
from .errors import DetectorError, TrainingError
from .imaging import derive_seed, load_rgb
from .manifest import DatasetManifest, ImageRecord, Label, manifest_hash

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FAMILIES = ("small-cnn", "resnet50-like")
COMPOSERS = ("random", "sync")


# -- architecture ------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    family: str = "small-cnn"
    stem_downsampling_removed: bool = True
    init: str = "random"  # random | pretrained-imagenet | external:<path>
    widths: tuple[int, ...] = (16, 32, 64, 64)  # small-cnn only

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise DetectorError(f"unknown backbone family {self.family!r}; choose from {FAMILIES}")
        if not (self.init in ("random", "pretrained-imagenet") or self.init.startswith("external:")):
            raise DetectorError(f"unknown init {self.init!r}")
        object.__setattr__(self, "widths", tuple(self.widths))

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "BackboneConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class SmallCNN(nn.Module):
    def __init__(self, widths: Sequence[int], stem_stride: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for i, w in enumerate(widths):
            stride = stem_stride if i == 0 else 2
            layers += [nn.Conv2d(cin, w, 3, stride, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pool(self.features(x)), 1))


def _resnet50(cfg: BackboneConfig) -> nn.Module:
    weights = None
    if cfg.init == "pretrained-imagenet":
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V2
    try:
        net = torchvision.models.resnet50(weights=weights)
    except Exception as e:  # noqa: BLE001 - download/cache failures
        raise DetectorError(f"cannot resolve ImageNet weights for resnet50: {e}") from e
    if cfg.stem_downsampling_removed:
        net.conv1.stride = (1, 1)
        net.maxpool = nn.Identity()
    net.fc = nn.Linear(net.fc.in_features, 1)
    return net


class Detector(nn.Module):
    """Maps ``(B, 3, H, W)`` images in [0, 1] to ``(B,)`` logits for any ``H, W``."""

    def __init__(self, cfg: BackboneConfig, backbone: nn.Module):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone((x - self.mean) / self.std).reshape(-1)


def build_detector(cfg: BackboneConfig, seed: int = 0) -> Detector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if cfg.family == "small-cnn":
            backbone: nn.Module = SmallCNN(cfg.widths, 1 if cfg.stem_downsampling_removed else 2)
        else:
            backbone = _resnet50(cfg)
        det = Detector(cfg, backbone)
    if cfg.init.startswith("external:"):
        path = Path(cfg.init.split(":", 1)[1])
        try:
            sd = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError) as e:
            raise DetectorError(f"cannot load external init weights {path}: {e}") from e
        sd = sd.get("state_dict", sd)
        # the classification head is always re-initialized for the single logit
        sd = {k: v for k, v in sd.items() if not k.startswith("fc.")}
        missing, unexpected = det.backbone.load_state_dict(sd, strict=False)
        if unexpected or any(not k.startswith("fc.") for k in missing):
            raise DetectorError(f"external weights {path} do not match {cfg.family}: "
                                f"missing {missing[:3]}, unexpected {unexpected[:3]}")
    return det


# -- batches -----------------------------------------------------------------

class ImageStore:
    """Decoded-image cache keyed by record id."""

    def __init__(self, m: DatasetManifest, cache: bool = True):
        self.m = m
        self.cache = cache
        self._data: dict[str, np.ndarray] = {}

    def get(self, rec: ImageRecord) -> np.ndarray:
        arr = self._data.get(rec.id)
        if arr is None:
            arr = load_rgb(self.m.path_of(rec))
            if self.cache:
                self._data[rec.id] = arr
        return arr


@dataclass
class Batch:
    x: torch.Tensor  # (B, 3, S, S) float in [0, 1], channels-last memory
    y: torch.Tensor  # (B,) float, real 0 / fake 1
    params: list[AugmentationParams]
    ids: list[str]


def _to_batch(images: list[np.ndarray], labels: list[int], params: list[AugmentationParams], ids: list[str]) -> Batch:
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().div_(255.0)
    return Batch(x, torch.tensor(labels, dtype=torch.float32), params, ids)


def _random_batch(recs: Sequence[ImageRecord], store: ImageStore, policy: AugmentationPolicy,
                  rng: np.random.Generator) -> Batch:
    imgs, labels, params, ids = [], [], [], []
    for r in recs:
        x = store.get(r)
        p = sample_params(policy, (x.shape[1], x.shape[0]), rng)
        imgs.append(apply(x, p))
        labels.append(int(r.label))
        params.append(p)
        ids.append(r.id)
    return _to_batch(imgs, labels, params, ids)


def _sync_batch(pairs: Sequence[tuple[ImageRecord, ImageRecord]], store: ImageStore, policy: AugmentationPolicy,
                rng: np.random.Generator) -> Batch:
    imgs, labels, params, ids = [], [], [], []
    for real, fake in pairs:
        xr, xf = store.get(real), store.get(fake)
        p = sample_params(policy, (xr.shape[1], xr.shape[0]), rng)
        ar, af = paired_apply(xr, xf, p)
        imgs += [ar, af]
        labels += [int(Label.REAL), int(Label.FAKE)]
        params += [p, p]
        ids += [real.id, fake.id]
    return _to_batch(imgs, labels, params, ids)


def _check_pairs(m: DatasetManifest) -> list[tuple[ImageRecord, ImageRecord]]:
    pairs = m.pairs()
    if not pairs:
        raise TrainingError("Sync composition needs a pair-linked manifest (fakes with pair_id)")
    return pairs


def compose_batch(train: DatasetManifest, variant: str, policy: AugmentationPolicy, batch_size: int,
                  rng: np.random.Generator, store: ImageStore | None = None) -> Batch:
    """Draw one training batch. ``sync`` holds ``batch_size / 2`` real/fake pairs sharing parameters."""
    variant = variant.lower()
    store = store or ImageStore(train, cache=False)
    if variant == "sync":
        if batch_size % 2:
            raise TrainingError("Sync batches need an even batch size")
        pairs = _check_pairs(train)
        idx = rng.choice(len(pairs), size=batch_size // 2, replace=len(pairs) < batch_size // 2)
        return _sync_batch([pairs[i] for i in idx], store, policy, rng)
    if variant == "random":
        recs = train.records
        idx = rng.choice(len(recs), size=batch_size, replace=len(recs) < batch_size)
        return _random_batch([recs[i] for i in idx], store, policy, rng)
    raise TrainingError(f"unknown composer {variant!r}; choose from {COMPOSERS}")


def epoch_batches(train: DatasetManifest, variant: str, policy: AugmentationPolicy, batch_size: int,
                  seed: int, epoch: int, store: ImageStore):
    """One epoch: every real once with its matched fake (Sync), or every record once (Random)."""
    order_rng = np.random.default_rng(derive_seed(seed, "order", epoch))
    if variant == "sync":
        pairs = _check_pairs(train)
        perm = order_rng.permutation(len(pairs))
        step = batch_size // 2
        chunks = [[pairs[i] for i in perm[s:s + step]] for s in range(0, len(perm), step)]
        build = _sync_batch
    else:
        recs = train.records
        perm = order_rng.permutation(len(recs))
        chunks = [[recs[i] for i in perm[s:s + batch_size]] for s in range(0, len(perm), batch_size)]
        build = _random_batch
    for b, chunk in enumerate(chunks):
        if variant == "random" and len(chunk) < 2:
            continue  # batch norm needs two samples
        yield build(chunk, store, policy, np.random.default_rng(derive_seed(seed, "augment", epoch, b)))


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    train_crop_side: int = 96
    lr: float = 1e-4
    composer: str = "sync"
    patience_threshold: float = 0.001  # absolute accuracy gain that counts as improvement
    patience_window: int = 10
    lr_decay: float = 10.0
    min_lr: float = 1e-6
    max_epochs: int = 1000
    seed: int = 0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    channels_last: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "composer", self.composer.lower())
        if self.composer not in COMPOSERS:
            raise TrainingError(f"unknown composer {self.composer!r}; choose from {COMPOSERS}")
        if self.composer == "sync" and self.batch_size % 2:
            raise TrainingError("batch_size must be even for Sync composition")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be at least 2")
        if self.policy.train_crop_side != self.train_crop_side:
            object.__setattr__(self, "policy", AugmentationPolicy.from_json(
                {**self.policy.to_json(), "train_crop_side": self.train_crop_side}))
        if not (self.lr > 0 and self.min_lr > 0 and self.lr_decay > 1):
            raise TrainingError("lr, min_lr must be positive and lr_decay > 1")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["policy"] = self.policy.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "policy" in d:
            d["policy"] = AugmentationPolicy.from_json(d["policy"])
        return cls(**d)


@dataclass
class DetectorCheckpoint:
    backbone: BackboneConfig
    model: Detector
    history: list[dict[str, Any]] = field(default_factory=list)
    threshold: float = 0.5
    train_config: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    best_epoch: int = 0

    def __post_init__(self) -> None:
        self.set_threshold(self.threshold)

    def set_threshold(self, t: float) -> None:
        if not 0.0 < t < 1.0:
            raise DetectorError(f"decision threshold must lie in (0, 1), got {t}")
        self.threshold = float(t)

    @property
    def identity(self) -> str:
        return f"{self.backbone.family}@{self.provenance.get('train_manifest', 'untrained')[:12]}"

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), out / "weights.pt")
        (out / "config.json").write_text(json.dumps(
            {"backbone": self.backbone.to_json(), "train": self.train_config}, indent=2) + "\n")
        (out / "history.json").write_text(json.dumps(self.history, indent=2) + "\n")
        (out / "checkpoint.json").write_text(json.dumps(
            {"threshold": self.threshold, "best_epoch": self.best_epoch, "provenance": self.provenance,
             "weights": "weights.pt"}, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "DetectorCheckpoint":
        d = Path(ckpt_dir)
        try:
            cfg = json.loads((d / "config.json").read_text())
            info = json.loads((d / "checkpoint.json").read_text())
            history = json.loads((d / "history.json").read_text())
            backbone = BackboneConfig.from_json(cfg["backbone"])
            model = build_detector(BackboneConfig.from_json({**backbone.to_json(), "init": "random"}))
            model.load_state_dict(torch.load(d / info.get("weights", "weights.pt"), map_location="cpu",
                                             weights_only=True))
        except (OSError, KeyError, json.JSONDecodeError, RuntimeError) as e:
            raise DetectorError(f"cannot load checkpoint from {d}: {e}") from e
        model.eval()
        return cls(backbone, model, history, info["threshold"], cfg.get("train", {}),
                   info.get("provenance", {}), info.get("best_epoch", 0))


def validate(detector: nn.Module, m: DatasetManifest, min_side: int = 1) -> float:
    """Accuracy at threshold 0.5 over whole images."""
    from .evaluation import score

    if len(m) == 0:
        raise TrainingError("cannot validate on an empty manifest")
    s = score(detector, m, min_side=min_side)
    if len(s) == 0:
        raise TrainingError("no validation image is large enough to score")
    return s.accuracy(0.5)


def train(
    detector: Detector,
    train_m: DatasetManifest,
    val_m: DatasetManifest,
    cfg: TrainConfig,
    validator: Callable[[nn.Module], float] | None = None,
    progress: Callable[[dict[str, Any]], None] | None = None,
) -> DetectorCheckpoint:
    """Adam + BCE-with-logits; the lr drops tenfold whenever validation accuracy has not
    improved by ``patience_threshold`` for ``patience_window`` epochs, and training stops
    when the next lr would fall below ``min_lr``. Returns the best-validation weights."""
    labels = {r.label for r in val_m.records}
    if validator is None and labels != {Label.REAL, Label.FAKE}:
        raise TrainingError("validation manifest needs both real and fake records")
    if len(train_m) == 0:
        raise TrainingError("empty training manifest")
    if cfg.composer == "sync":
        _check_pairs(train_m)
    validator = validator or (lambda model: validate(model, val_m, min_side=cfg.train_crop_side))

    if cfg.channels_last:
        detector = detector.to(memory_format=torch.channels_last)
    store = ImageStore(train_m)
    opt = torch.optim.Adam(detector.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss()

    def evaluate() -> float:
        detector.eval()
        with torch.no_grad():
            return float(validator(detector))

    lr = cfg.lr
    acc = evaluate()
    history: list[dict[str, Any]] = [{"epoch": 0, "lr": lr, "val_accuracy": acc, "train_loss": None}]
    best_acc, best_epoch, best_state = acc, 0, copy.deepcopy(detector.state_dict())
    reference, last_improvement = acc, 0

    for epoch in range(1, cfg.max_epochs + 1):
        for g in opt.param_groups:
            g["lr"] = lr
        detector.train()
        losses = []
        for b, batch in enumerate(epoch_batches(train_m, cfg.composer, cfg.policy, cfg.batch_size,
                                                cfg.seed, epoch, store)):
            x = batch.x.contiguous(memory_format=torch.channels_last) if cfg.channels_last else batch.x
            loss = loss_fn(detector(x), batch.y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc = evaluate()
        rec = {"epoch": epoch, "lr": lr, "val_accuracy": acc,
               "train_loss": float(np.mean(losses)) if losses else None}
        history.append(rec)
        logger.info("epoch %d lr %.0e loss %s val acc %.4f", epoch, lr, rec["train_loss"], acc)
        if progress:
            progress(rec)
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, copy.deepcopy(detector.state_dict())
        if acc - reference >= cfg.patience_threshold - 1e-12:
            reference, last_improvement = acc, epoch
        elif epoch - last_improvement >= cfg.patience_window:
            new_lr = lr / cfg.lr_decay
            if new_lr < cfg.min_lr * (1 - 1e-9):
                logger.info("stopping: next lr %.0e is below %.0e", new_lr, cfg.min_lr)
                break
            lr, last_improvement = new_lr, epoch

    detector.load_state_dict(best_state)
    detector = detector.to(memory_format=torch.contiguous_format)
    detector.eval()
    provenance = {"train_manifest": manifest_hash(train_m), "val_manifest": manifest_hash(val_m),
                  "seed": cfg.seed, "best_val_accuracy": best_acc}
    return DetectorCheckpoint(detector.cfg, detector, history, 0.5, cfg.to_json(), provenance, best_epoch)


def lr_drops(history: Sequence[dict[str, Any]]) -> int:
    lrs = [h["lr"] for h in history]
    return sum(1 for a, b in zip(lrs, lrs[1:]) if not math.isclose(a, b))
