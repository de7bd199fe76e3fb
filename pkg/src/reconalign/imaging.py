"""Image I/O and the low-level pixel operations shared across modules.

Images are handled as ``uint8`` arrays of shape ``(H, W, 3)``. Every encoder
setting is pinned so that the same array and parameters always produce the
same bytes.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

BLUR_KERNEL_SIZE = 9

# container -> (PIL format name, file extension)
FORMATS = {
    "png": ("PNG", ".png"),
    "jpeg": ("JPEG", ".jpg"),
    "webp": ("WEBP", ".webp"),
}
PIL_TO_FORMAT = {"PNG": "png", "JPEG": "jpeg", "WEBP": "webp"}
EXTENSIONS = {".png": "png", ".jpg": "jpeg", ".jpeg": "jpeg", ".webp": "webp"}

JPEG_SUBSAMPLING = 2  # 4:2:0
WEBP_METHOD = 4
PNG_COMPRESS_LEVEL = 6


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an arbitrary tuple of keys (e.g. global seed, record id)."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def encode_image(arr: np.ndarray, fmt: str, quality: int | None = None) -> bytes:
    """Encode ``arr`` to bytes with pinned encoder settings."""
    img = Image.fromarray(_check_rgb(arr), "RGB")
    buf = io.BytesIO()
    if fmt == "jpeg":
        img.save(buf, "JPEG", quality=int(quality if quality is not None else 95),
                 subsampling=JPEG_SUBSAMPLING, optimize=False)
    elif fmt == "webp":
        img.save(buf, "WEBP", quality=int(quality if quality is not None else 100),
                 method=WEBP_METHOD, lossless=False)
    elif fmt == "png":
        img.save(buf, "PNG", compress_level=PNG_COMPRESS_LEVEL)
    else:
        raise ValueError(f"unsupported container format: {fmt!r}")
    return buf.getvalue()


def decode_image(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def save_image(arr: np.ndarray, path: str | Path, fmt: str, quality: int | None = None) -> bytes:
    data = encode_image(arr, fmt, quality)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


def jpeg_roundtrip(arr: np.ndarray, quality: int) -> np.ndarray:
    return decode_image(encode_image(arr, "jpeg", quality))


def webp_roundtrip(arr: np.ndarray, quality: int) -> np.ndarray:
    return decode_image(encode_image(arr, "webp", quality))


def resize(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize. PIL widens the filter support when shrinking, so
    downscaling is antialiased while upscaling is plain bilinear."""
    if width < 1 or height < 1:
        raise ValueError(f"invalid target size {width}x{height}")
    h, w = arr.shape[:2]
    if (w, h) == (width, height):
        return arr.copy()
    img = Image.fromarray(_check_rgb(arr), "RGB")
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.uint8).copy()


def crop_resize(arr: np.ndarray, box: tuple[int, int, int, int], side: int) -> np.ndarray:
    """Crop ``box = (x, y, w, h)`` and resize it to ``side x side``."""
    x, y, w, h = box
    return resize(arr[y:y + h, x:x + w], side, side)


def gaussian_kernel(sigma: float, size: int = BLUR_KERNEL_SIZE) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(arr: np.ndarray, sigma: float, size: int = BLUR_KERNEL_SIZE) -> np.ndarray:
    """Separable Gaussian blur with a fixed ``size``-tap kernel; sigma <= 0 is the identity."""
    if sigma <= 0:
        return arr.copy()
    k = gaussian_kernel(sigma, size)
    out = arr.astype(np.float64)
    out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def gaussian_noise_field(shape: tuple[int, ...], sigma: float, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def add_noise(arr: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    img = Image.fromarray(_check_rgb(arr), "RGB").convert("L").convert("RGB")
    return np.asarray(img, dtype=np.uint8).copy()


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """``(H, W, 3) uint8`` -> ``(3, H, W) float32`` in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float().div_(255.0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` float in [0, 1] -> ``(H, W, 3) uint8`` (round half to even)."""
    a = t.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return a.permute(1, 2, 0).cpu().numpy().copy()


def _check_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    return np.ascontiguousarray(arr)
