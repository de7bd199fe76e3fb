"""A small convolutional autoencoder trained from scratch, for runs without pretrained weights."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import ReconstructionError
from ..imaging import load_rgb
from ..manifest import DatasetManifest
from .handle import AutoencoderHandle

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyAutoencoderConfig:
    f: int = 4
    latent_channels: int = 4
    widths: tuple[int, ...] = (32, 64, 64)  # stem, then one entry per stride-2 stage
    epochs: int = 8
    lr: float = 2e-3
    batch_size: int = 16
    crop: int = 64
    upsample: str = "transpose"  # transpose | nearest
    target_mse: float = 0.004  # held-out, on the [0, 1] scale
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.f not in (4, 8):
            raise ReconstructionError(f"toy autoencoder supports f in {{4, 8}}, got {self.f}")
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != self.stages + 1:
            raise ReconstructionError(f"f={self.f} needs {self.stages + 1} widths, got {self.widths}")
        if self.upsample not in ("transpose", "nearest"):
            raise ReconstructionError(f"unknown upsample mode {self.upsample!r}")
        if self.crop % self.f:
            raise ReconstructionError("crop must be a multiple of f")

    @property
    def stages(self) -> int:
        return int(math.log2(self.f))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ToyAutoencoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class ToyAutoencoder(nn.Module):
    """Strided-conv encoder and a decoder of 2x upsampling stages. Fully convolutional."""

    def __init__(self, cfg: ToyAutoencoderConfig):
        super().__init__()
        w = cfg.widths
        enc: list[nn.Module] = [nn.Conv2d(3, w[0], 3, 1, 1), nn.SiLU()]
        for i in range(cfg.stages):
            enc += [nn.Conv2d(w[i], w[i + 1], 3, 2, 1), nn.SiLU()]
        enc.append(nn.Conv2d(w[-1], cfg.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, w[-1], 1), nn.SiLU()]
        for i in reversed(range(cfg.stages)):
            if cfg.upsample == "transpose":
                dec += [nn.ConvTranspose2d(w[i + 1], w[i], 4, 2, 1), nn.SiLU()]
            else:
                dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w[i + 1], w[i], 3, 1, 1), nn.SiLU()]
        dec.append(nn.Conv2d(w[0], 3, 3, 1, 1))
        self.decoder = nn.Sequential(*dec)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x * 2.0 - 1.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return (self.decoder(z) + 1.0) / 2.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))


def _handle(cfg: ToyAutoencoderConfig, model: ToyAutoencoder, identity: str, meta: dict,
            warning: str | None = None) -> AutoencoderHandle:
    return AutoencoderHandle(identity, model, cfg.f, cfg.latent_channels, meta=meta, warning=warning)


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy()).float().div_(255.0)


def heldout_mse(model: nn.Module, images: list[np.ndarray], f: int) -> float:
    """Mean squared error on full images (cropped to a multiple of f), [0, 1] scale."""
    if not images:
        return float("nan")
    model.eval()
    total = count = 0.0
    with torch.no_grad():
        for img in images:
            h, w = (img.shape[0] // f) * f, (img.shape[1] // f) * f
            x = _stack([img[:h, :w]])
            total += float(((model(x) - x) ** 2).sum())
            count += x.numel()
    return total / count


def train_toy_autoencoder(cfg: ToyAutoencoderConfig, m: DatasetManifest) -> AutoencoderHandle:
    """Fit a toy autoencoder on random crops of the images in ``m``; deterministic given ``cfg.seed``."""
    if len(m) == 0:
        raise ReconstructionError("cannot train an autoencoder on an empty manifest")
    images = [load_rgb(m.path_of(r)) for r in m.records]
    too_small = [r.id for r, im in zip(m.records, images) if min(im.shape[:2]) < cfg.crop]
    if too_small:
        raise ReconstructionError(f"{len(too_small)} images are smaller than the training crop {cfg.crop}")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(images))
    n_val = int(round(cfg.val_fraction * len(images))) if len(images) > 1 else 0
    val = [images[i] for i in order[:n_val]]
    train = [images[i] for i in order[n_val:]]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ToyAutoencoder(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    mse = heldout_mse(model, val or train, cfg.f)
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(len(train))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            crops = []
            for i in perm[start:start + cfg.batch_size]:
                img = train[i]
                y = int(rng.integers(0, img.shape[0] - cfg.crop + 1))
                x = int(rng.integers(0, img.shape[1] - cfg.crop + 1))
                crops.append(img[y:y + cfg.crop, x:x + cfg.crop])
            xb = _stack(crops)
            loss = torch.mean((model(xb) - xb) ** 2)
            if not torch.isfinite(loss):
                raise ReconstructionError(f"non-finite autoencoder loss at epoch {epoch}, batch {start // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        mse = heldout_mse(model, val or train, cfg.f)
        history.append({"epoch": epoch + 1, "train_mse": float(np.mean(losses)), "heldout_mse": mse})
        logger.info("toy AE epoch %d: train %.5f held-out %.5f", epoch + 1, history[-1]["train_mse"], mse)
        if mse < cfg.target_mse:
            break
    model.eval()
    warning = None
    if not mse < cfg.target_mse:
        warning = f"held-out MSE {mse:.5f} did not reach target {cfg.target_mse} in {cfg.epochs} epochs"
        logger.warning(warning)
    meta = {"config": cfg.to_json(), "history": history, "heldout_mse": mse, "n_train": len(train), "n_val": len(val)}
    return _handle(cfg, model, f"toy-f{cfg.f}-c{cfg.latent_channels}-seed{cfg.seed}", meta, warning)


def save_toy_autoencoder(handle: AutoencoderHandle, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "toy", "identity": handle.identity, "config": handle.meta["config"],
                "meta": handle.meta, "warning": handle.warning,
                "state_dict": handle.module.state_dict()}, path)
    return path


def load_toy_autoencoder(path: str | Path) -> AutoencoderHandle:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as e:
        raise ReconstructionError(f"cannot load toy autoencoder {path}: {e}") from e
    cfg = ToyAutoencoderConfig.from_json(blob["config"])
    model = ToyAutoencoder(cfg)
    model.load_state_dict(blob["state_dict"])
    return _handle(cfg, model, blob["identity"], blob.get("meta", {}), blob.get("warning"))
