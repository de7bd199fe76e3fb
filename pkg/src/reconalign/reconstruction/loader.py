"""Resolve an autoencoder spec string to a handle."""
from __future__ import annotations

import json
from pathlib import Path

import torch

from ..errors import ReconstructionError
from .handle import AutoencoderHandle, identity_handle
from .ldm import LdmAutoencoderKL, LdmConfig
from .toy import load_toy_autoencoder

FIRST_STAGE_PREFIX = "first_stage_model."


def _read_state_dict(path: Path) -> dict[str, torch.Tensor]:
    if path.suffix == ".safetensors":
        try:
            from safetensors.torch import load_file
        except ImportError as e:
            raise ReconstructionError("reading .safetensors weights needs the 'safetensors' package") from e
        sd = load_file(str(path))
    else:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        sd = blob.get("state_dict", blob) if isinstance(blob, dict) else blob
    if any(k.startswith(FIRST_STAGE_PREFIX) for k in sd):
        # full latent-diffusion checkpoint: keep only the autoencoder
        sd = {k[len(FIRST_STAGE_PREFIX):]: v for k, v in sd.items() if k.startswith(FIRST_STAGE_PREFIX)}
    return {k: v for k, v in sd.items() if not k.startswith("loss.")}


def _ldm_config(weights: Path) -> LdmConfig:
    for cand in (weights.with_suffix(".json"), weights.parent / "config.json"):
        if cand.is_file():
            return LdmConfig.from_json(json.loads(cand.read_text(encoding="utf-8")))
    return LdmConfig()


def load_ldm_autoencoder(weights: str | Path, cfg: LdmConfig | None = None) -> AutoencoderHandle:
    """Latent-diffusion KL autoencoder. Architecture comes from ``cfg``, else a
    JSON sidecar (``<weights>.json`` or ``config.json``), else the kl-f8 defaults."""
    weights = Path(weights)
    if not weights.is_file():
        raise ReconstructionError(f"autoencoder weights not found: {weights}")
    cfg = cfg or _ldm_config(weights)
    model = LdmAutoencoderKL(cfg)
    try:
        model.load_state_dict(_read_state_dict(weights), strict=True)
    except (RuntimeError, OSError, KeyError) as e:
        raise ReconstructionError(f"cannot load LDM autoencoder weights from {weights}: {e}") from e
    return AutoencoderHandle(f"ldm-kl-f{model.downsample_factor}:{weights.name}", model,
                             model.downsample_factor, model.latent_channels, meta={"config": cfg.to_json()})


def load_external_autoencoder(spec: str) -> AutoencoderHandle:
    """``identity`` | ``toy:<file>`` | ``ldm:<weights file>``."""
    kind, _, location = spec.partition(":")
    if kind == "identity" and not location:
        return identity_handle()
    if kind == "toy" and location:
        if not Path(location).is_file():
            raise ReconstructionError(f"autoencoder file not found: {location}")
        return load_toy_autoencoder(location)
    if kind == "ldm" and location:
        return load_ldm_autoencoder(location)
    raise ReconstructionError(f"cannot resolve autoencoder spec {spec!r}; expected identity, toy:<file> or ldm:<file>")
