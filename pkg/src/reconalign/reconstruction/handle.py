"""The encode/decode contract and single-pass reconstruction of images and datasets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..accounting import NetworkCostConfig, trace_layers
from ..errors import ReconstructionError
from ..imaging import FORMATS, derive_seed, from_tensor, load_rgb, save_image, sha256_bytes, to_tensor
from ..manifest import DatasetManifest, ImageRecord, Label

logger = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.01


@dataclass
class AutoencoderHandle:
    """Wraps a module exposing ``encode``/``decode`` on images in [0, 1]."""

    identity: str
    module: nn.Module
    downsample_factor: int
    latent_channels: int
    meta: dict[str, Any] = field(default_factory=dict)
    warning: str | None = None  # set when training missed its target
    _cost_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ReconstructionError(f"downsample factor must be a power of two, got {f}")
        self.module.eval()

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.module.encode(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.module.decode(z)

    def padded_dims(self, width: int, height: int) -> tuple[int, int]:
        f = self.downsample_factor
        return (-(-width // f) * f, -(-height // f) * f)

    def cost(self, width: int, height: int) -> tuple[NetworkCostConfig, NetworkCostConfig]:
        """Encoder and decoder layer inventories for one ``width x height`` image (after padding)."""
        pw, ph = self.padded_dims(width, height)
        key = (pw, ph)
        if key not in self._cost_cache:
            f = self.downsample_factor
            enc = trace_layers(self.module, lambda m, x: m.encode(x), (1, 3, ph, pw), f"{self.identity}:enc")
            dec = trace_layers(self.module, lambda m, z: m.decode(z),
                               (1, self.latent_channels, ph // f, pw // f), f"{self.identity}:dec")
            self._cost_cache[key] = (enc, dec)
        return self._cost_cache[key]

    def macs(self, width: int, height: int) -> int:
        enc, dec = self.cost(width, height)
        return enc.total() + dec.total()


class IdentityAutoencoder(nn.Module):
    """f = 1 stub whose reconstruction is exact."""

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x.clone()

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z.clone()


def identity_handle() -> AutoencoderHandle:
    return AutoencoderHandle("identity", IdentityAutoencoder(), 1, 3)


def reconstruct_tensor(ae: AutoencoderHandle, x: torch.Tensor) -> torch.Tensor:
    """``(B, 3, H, W)`` in [0, 1] -> same shape; reflect-pad to a multiple of f, then crop back."""
    h, w = x.shape[-2:]
    f = ae.downsample_factor
    if min(h, w) < f:
        raise ReconstructionError(f"image {w}x{h} has a side smaller than the downsample factor {f}")
    pw, ph = ae.padded_dims(w, h)
    xp = F.pad(x, (0, pw - w, 0, ph - h), mode="reflect") if (pw, ph) != (w, h) else x
    out = ae.decode(ae.encode(xp))
    if out.shape[-2:] != (ph, pw):
        raise ReconstructionError(f"{ae.identity}: decoder returned {tuple(out.shape[-2:])}, expected {(ph, pw)}")
    return out[..., :h, :w]


def reconstruct(ae: AutoencoderHandle, x: np.ndarray) -> np.ndarray:
    """Single encode/decode pass on an ``(H, W, 3) uint8`` image; output has the same size."""
    if x.ndim != 3 or x.shape[2] != 3:
        raise ReconstructionError(f"expected an (H, W, 3) image, got {x.shape}")
    return from_tensor(reconstruct_tensor(ae, to_tensor(x)[None])[0])


@dataclass(frozen=True)
class SavePolicy:
    """Container used when writing reconstructions.

    ``match`` keeps PNG sources lossless and re-encodes JPEG/WebP sources in
    their own container at a quality drawn from ``quality``; ``jpeg`` always
    writes JPEG; ``png`` always writes PNG.
    """

    mode: str = "match"
    quality: tuple[int, int] = (70, 100)

    def __post_init__(self) -> None:
        if self.mode not in ("match", "jpeg", "png"):
            raise ReconstructionError(f"unknown save policy {self.mode!r}")
        lo, hi = self.quality
        if not 1 <= lo <= hi <= 100:
            raise ReconstructionError(f"invalid quality range {self.quality}")

    @classmethod
    def parse(cls, text: str) -> "SavePolicy":
        """``match`` | ``png`` | ``jpeg`` | ``jpeg:LO-HI`` (``match:LO-HI`` also accepted)."""
        mode, _, rng = text.partition(":")
        if not rng:
            return cls(mode)
        try:
            lo, hi = (int(v) for v in rng.replace(":", "-").split("-"))
        except ValueError:
            raise ReconstructionError(f"cannot parse save policy {text!r}") from None
        return cls(mode, (lo, hi))

    def __str__(self) -> str:
        return self.mode if self.mode == "png" else f"{self.mode}:{self.quality[0]}-{self.quality[1]}"

    def choose(self, rec: ImageRecord, seed: int) -> tuple[str, int | None]:
        fmt = {"match": rec.container_format, "jpeg": "jpeg", "png": "png"}[self.mode]
        if fmt == "png":
            return fmt, None
        rng = np.random.default_rng(derive_seed(seed, "save-quality", rec.id))
        return fmt, int(rng.integers(self.quality[0], self.quality[1] + 1))


def reconstruct_dataset(
    ae: AutoencoderHandle,
    m: DatasetManifest,
    out_root: str | Path,
    save_policy: SavePolicy | str = SavePolicy(),
    seed: int = 0,
) -> DatasetManifest:
    """Write one reconstruction per real record; returns the manifest of fakes.

    Fakes link back through ``pair_id``; merge with ``m`` to obtain the
    aligned dataset. Files mirror the source layout under ``out_root``.
    """
    if isinstance(save_policy, str):
        save_policy = SavePolicy.parse(save_policy)
    not_real = [r.id for r in m.records if r.label != Label.REAL]
    if not_real:
        raise ReconstructionError(f"reconstruction expects real records only; {len(not_real)} are fake "
                                  f"(first: {not_real[0]!r})")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    records: list[ImageRecord] = []
    qualities: dict[str, int] = {}
    failures: list[str] = []
    enc_macs = dec_macs = 0
    for rec in m.records:
        try:
            x = load_rgb(m.path_of(rec))
            y = reconstruct(ae, x)
            fmt, q = save_policy.choose(rec, seed)
            rel = Path(rec.path).with_suffix(FORMATS[fmt][1]).as_posix()
            data = save_image(y, out_root / rel, fmt, q)
            enc, dec = ae.cost(x.shape[1], x.shape[0])
        except Exception as e:  # noqa: BLE001 - isolated per image
            logger.warning("reconstruction failed for %s: %s", rec.id, e)
            failures.append(rec.id)
            if len(failures) > MAX_FAILURE_RATE * len(m.records):
                raise ReconstructionError(
                    f"{len(failures)} of {len(m.records)} reconstructions failed (limit {MAX_FAILURE_RATE:.0%}); "
                    f"last error on {rec.id}: {e}") from e
            continue
        enc_macs += enc.total()
        dec_macs += dec.total()
        if q is not None:
            qualities[rec.id] = q
        records.append(ImageRecord(
            id=f"{rec.id}#recon",
            path=rel,
            width_px=y.shape[1],
            height_px=y.shape[0],
            container_format=fmt,
            label=Label.FAKE,
            source_tag=f"{rec.source_tag}:recon",
            content_hash=sha256_bytes(data),
            pair_id=rec.id,
        ))
    meta = {
        "reconstruction": {
            "autoencoder": ae.identity,
            "downsample_factor": ae.downsample_factor,
            "seed": seed,
            "save_policy": str(save_policy),
            "save_qualities": qualities,
            "failures": failures,
            "macs": {"enc": enc_macs, "dec": dec_macs, "total": enc_macs + dec_macs},
            "source_root": str(m.root),
        }
    }
    return DatasetManifest(out_root.resolve(), tuple(records), meta)
