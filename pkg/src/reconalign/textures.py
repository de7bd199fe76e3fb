"""Procedural textures from random expression trees over pixel coordinates.

A program is a tree of scalar-field nodes with values in [-1, 1], mapped to
RGB by a cosine palette at the root. Pixel ``(x, y)`` of a ``w x h`` render
samples the field at ``u = (x + 0.5) / w``, ``v = (y + 0.5) / h``, so renders
of one program at different sizes sample the same continuous image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

from .errors import ConstantRenderError, TextureError
from .imaging import derive_seed, save_image, sha256_bytes
from .manifest import DatasetManifest, ImageRecord, Label

logger = logging.getLogger(__name__)

MIN_RENDER_SIDE = 32
DEPTH_LIMITS = (2, 12)
MAX_RESAMPLES = 10
SOURCE_TAG = "procedural"
# Frequency content is kept moderate so that an f=4 autoencoder reproduces the
# content and its residual is dominated by decoder artifacts, not by lost detail.
MAX_FREQUENCY = 3.0  # cycles per image for sinusoid leaves
LATTICE_SIZES = (3, 8)
WAVE_GAIN = (1.0, 2.5)


@dataclass(frozen=True)
class Sinusoid:
    fx: float
    fy: float
    phase: float
    amp: float = 1.0

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.amp * np.sin(2 * np.pi * (self.fx * u + self.fy * v) + self.phase)


@dataclass(frozen=True)
class NoiseLattice:
    """Bicubic interpolation of a periodic ``size x size`` lattice of uniform values."""

    size: int
    seed: int

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        grid = np.random.default_rng(self.seed).uniform(-1.0, 1.0, (self.size, self.size))
        coords = np.stack([v * self.size, u * self.size])
        out = ndimage.map_coordinates(grid, coords, order=3, mode="grid-wrap")
        return np.clip(out, -1.0, 1.0)


@dataclass(frozen=True)
class Rotate:
    angle: float
    child: "Node"

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        du, dv = u - 0.5, v - 0.5
        return self.child.eval(0.5 + c * du - s * dv, 0.5 + s * du + c * dv)


@dataclass(frozen=True)
class PolyWarp:
    """Second-order polynomial displacement of the coordinates."""

    cu: tuple[float, float, float]  # u += cu . (du^2, du*dv, dv^2)
    cv: tuple[float, float, float]
    child: "Node"

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        du, dv = u - 0.5, v - 0.5
        terms = (du * du, du * dv, dv * dv)
        wu = u + sum(c * t for c, t in zip(self.cu, terms))
        wv = v + sum(c * t for c, t in zip(self.cv, terms))
        return self.child.eval(wu, wv)


@dataclass(frozen=True)
class Wave:
    gain: float
    phase: float
    child: "Node"

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sin(self.gain * self.child.eval(u, v) + self.phase)


@dataclass(frozen=True)
class Blend:
    mode: str  # mix | mul | max
    weight: float
    a: "Node"
    b: "Node"

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        x, y = self.a.eval(u, v), self.b.eval(u, v)
        if self.mode == "mix":
            return self.weight * x + (1.0 - self.weight) * y
        if self.mode == "mul":
            return x * y
        if self.mode == "max":
            return np.maximum(x, y)
        raise TextureError(f"unknown blend mode {self.mode!r}")


Node = Union[Sinusoid, NoiseLattice, Rotate, PolyWarp, Wave, Blend]


@dataclass(frozen=True)
class Palette:
    """``rgb = a + b * cos(2 pi (c * t + d))`` with ``t = (child + 1) / 2``."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]
    c: tuple[float, float, float]
    d: tuple[float, float, float]
    child: Node

    def eval(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        t = (self.child.eval(u, v)[..., None] + 1.0) / 2.0
        a, b, c, d = (np.asarray(p, dtype=np.float64) for p in (self.a, self.b, self.c, self.d))
        return np.clip(a + b * np.cos(2 * np.pi * (c * t + d)), 0.0, 1.0)


@dataclass(frozen=True)
class TextureProgram:
    root: Palette
    seed: int | None = None

    @property
    def depth(self) -> int:
        return 1 + node_depth(self.root.child)

    def to_json(self) -> dict:
        return asdict(self)


def node_depth(n: Node) -> int:
    if isinstance(n, (Sinusoid, NoiseLattice)):
        return 1
    if isinstance(n, Blend):
        return 1 + max(node_depth(n.a), node_depth(n.b))
    return 1 + node_depth(n.child)


def _leaf(rng: np.random.Generator) -> Node:
    if rng.random() < 0.6:
        fx, fy = rng.uniform(-MAX_FREQUENCY, MAX_FREQUENCY, 2)
        return Sinusoid(float(fx), float(fy), float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0.5, 1.0)))
    return NoiseLattice(int(rng.integers(LATTICE_SIZES[0], LATTICE_SIZES[1] + 1)), int(rng.integers(0, 2**31)))


def _tree(rng: np.random.Generator, depth: int) -> Node:
    """Random scalar-field tree of exactly ``depth`` levels."""
    if depth <= 1:
        return _leaf(rng)
    kind = rng.choice(["rotate", "warp", "wave", "blend"], p=[0.2, 0.2, 0.25, 0.35])
    if kind == "rotate":
        return Rotate(float(rng.uniform(0, 2 * np.pi)), _tree(rng, depth - 1))
    if kind == "warp":
        cu = tuple(float(c) for c in rng.uniform(-1.5, 1.5, 3))
        cv = tuple(float(c) for c in rng.uniform(-1.5, 1.5, 3))
        return PolyWarp(cu, cv, _tree(rng, depth - 1))
    if kind == "wave":
        return Wave(float(rng.uniform(*WAVE_GAIN)), float(rng.uniform(0, 2 * np.pi)), _tree(rng, depth - 1))
    mode = str(rng.choice(["mix", "mul", "max"]))
    other = int(rng.integers(1, depth))
    deep, shallow = _tree(rng, depth - 1), _tree(rng, other)
    a, b = (deep, shallow) if rng.random() < 0.5 else (shallow, deep)
    return Blend(mode, float(rng.uniform(0.2, 0.8)), a, b)


def sample_program(rng: np.random.Generator, depth_range: tuple[int, int] = (2, 6)) -> TextureProgram:
    """Draw a program whose depth (palette included) is uniform in ``depth_range``."""
    lo, hi = depth_range
    if not DEPTH_LIMITS[0] <= lo <= hi <= DEPTH_LIMITS[1]:
        raise TextureError(f"depth_range must lie within {list(DEPTH_LIMITS)}, got {depth_range}")
    depth = int(rng.integers(lo, hi + 1))
    a = rng.uniform(0.3, 0.7, 3)
    b = np.minimum(a, 1.0 - a) * rng.uniform(0.6, 1.0, 3)
    palette = Palette(
        a=tuple(float(x) for x in a),
        b=tuple(float(x) for x in b),
        c=tuple(float(x) for x in rng.uniform(0.5, 2.0, 3)),
        d=tuple(float(x) for x in rng.uniform(0.0, 1.0, 3)),
        child=_tree(rng, depth - 1),
    )
    return TextureProgram(palette)


def pixel_grid(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(w, dtype=np.float64) + 0.5) / w
    v = (np.arange(h, dtype=np.float64) + 0.5) / h
    return np.meshgrid(u, v)


def render(p: TextureProgram, w: int, h: int) -> np.ndarray:
    """Evaluate ``p`` at every pixel center; returns ``(h, w, 3) uint8``."""
    if w < MIN_RENDER_SIDE or h < MIN_RENDER_SIDE:
        raise TextureError(f"render size {w}x{h} is below the minimum side {MIN_RENDER_SIDE}")
    u, v = pixel_grid(w, h)
    rgb = p.root.eval(u, v)
    out = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    if out.min() == out.max():
        raise ConstantRenderError(f"program renders a constant image ({int(out.flat[0])})")
    return out


def sample_renderable(seed: int, w: int, h: int, depth_range: tuple[int, int] = (2, 6)) -> tuple[TextureProgram, np.ndarray]:
    """Resample programs from ``seed`` until one renders a non-constant image."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLES):
        prog = sample_program(rng, depth_range)
        try:
            return TextureProgram(prog.root, seed), render(prog, w, h)
        except ConstantRenderError:
            continue
    raise TextureError(f"no non-constant program after {MAX_RESAMPLES} attempts (seed {seed})")


def generate_dataset(
    n: int,
    side: int | tuple[int, int],
    out_root: str | Path,
    jpeg_quality_range: tuple[int, int] = (70, 100),
    seed: int = 0,
    depth_range: tuple[int, int] = (2, 6),
) -> DatasetManifest:
    """Render ``n`` textures and save them as JPEG; ``side`` may be a (lo, hi) range of square sides."""
    if n < 1:
        raise TextureError("n must be at least 1")
    q_lo, q_hi = jpeg_quality_range
    if not 1 <= q_lo <= q_hi <= 100:
        raise TextureError(f"invalid JPEG quality range {jpeg_quality_range}")
    out_root = Path(out_root)
    written: list[Path] = []
    records: list[ImageRecord] = []
    qualities: dict[str, int] = {}
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng(derive_seed(seed, "texture-params", i))
            s = side if isinstance(side, int) else int(rng.integers(side[0], side[1] + 1))
            q = int(rng.integers(q_lo, q_hi + 1))
            _, img = sample_renderable(derive_seed(seed, "texture", i), s, s, depth_range)
            name = f"tex_{i:06d}.jpg"
            path = out_root / name
            written.append(path)
            data = save_image(img, path, "jpeg", q)
            rid = f"{SOURCE_TAG}/{name}"
            qualities[rid] = q
            records.append(ImageRecord(rid, name, s, s, "jpeg", Label.REAL, SOURCE_TAG, sha256_bytes(data)))
    except OSError as e:
        for p in written:
            p.unlink(missing_ok=True)
        raise TextureError(f"writing textures to {out_root} failed after {len(written)} files: {e}") from e
    meta = {"textures": {"n": n, "side": side, "seed": seed, "depth_range": list(depth_range),
                         "jpeg_quality_range": [q_lo, q_hi], "jpeg_qualities": qualities}}
    return DatasetManifest(out_root.resolve(), tuple(records), meta)
