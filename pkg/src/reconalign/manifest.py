"""Image catalogs: ingestion, JSON-lines serialization, seeded splits and verification."""
from __future__ import annotations

import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ManifestError
from .imaging import EXTENSIONS, PIL_TO_FORMAT, sha256_bytes, sha256_file

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "reconalign-manifest"
MANIFEST_VERSION = 1
CONTAINER_FORMATS = ("png", "jpeg", "webp")


class Label(IntEnum):
    REAL = 0
    FAKE = 1

    @classmethod
    def parse(cls, value: str | int) -> "Label":
        if isinstance(value, str) and not value.isdigit():
            try:
                return cls[value.upper()]
            except KeyError:
                raise ManifestError(f"unknown label {value!r}; expected 'real' or 'fake'") from None
        return cls(int(value))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str  # posix path relative to the manifest root
    width_px: int
    height_px: int
    container_format: str
    label: Label
    source_tag: str
    content_hash: str
    pair_id: str | None = None  # for a fake: id of the real record it was derived from

    def __post_init__(self) -> None:
        if self.width_px < 1 or self.height_px < 1:
            raise ManifestError(f"{self.id}: dimensions must be positive")
        if self.container_format not in CONTAINER_FORMATS:
            raise ManifestError(f"{self.id}: unknown container format {self.container_format!r}")
        object.__setattr__(self, "label", Label(self.label))

    @property
    def dims(self) -> tuple[int, int]:
        return (self.width_px, self.height_px)

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["label"] = int(self.label)
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "ImageRecord":
        return cls(
            id=d["id"],
            path=d["path"],
            width_px=int(d["width_px"]),
            height_px=int(d["height_px"]),
            container_format=d["container_format"],
            label=Label(int(d["label"])),
            source_tag=d["source_tag"],
            content_hash=d["content_hash"],
            pair_id=d.get("pair_id"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple[ImageRecord, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def path_of(self, rec: ImageRecord) -> Path:
        return self.root / rec.path

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    @property
    def reals(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label == Label.REAL]

    @property
    def fakes(self) -> list[ImageRecord]:
        return [r for r in self.records if r.label == Label.FAKE]

    def pairs(self) -> list[tuple[ImageRecord, ImageRecord]]:
        """(real, fake) tuples for every fake whose pair_id resolves, in real-record order."""
        ids = self.by_id()
        fake_of: dict[str, ImageRecord] = {}
        for f in self.fakes:
            real = ids.get(f.pair_id) if f.pair_id else None
            if real is not None and real.label == Label.REAL:
                fake_of.setdefault(real.id, f)
        return [(r, fake_of[r.id]) for r in self.reals if r.id in fake_of]

    def is_paired(self) -> bool:
        return len(self.fakes) > 0 and len(self.pairs()) == len(self.fakes) == len(self.reals)

    def with_records(self, records: Iterable[ImageRecord], **meta: Any) -> "DatasetManifest":
        return DatasetManifest(self.root, tuple(records), {**self.meta, **meta})


@dataclass(frozen=True)
class Violation:
    record_id: str
    kind: str
    detail: str


# -- serialization -----------------------------------------------------------

def dumps_manifest(m: DatasetManifest, root_text: str | None = None) -> str:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "root": root_text if root_text is not None else m.root.as_posix(),
        "meta": m.meta,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += [json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) for r in m.records]
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest, path: str | Path) -> Path:
    """Write ``m`` as JSON lines. The root is stored relative to the file's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rel_root = Path(os.path.relpath(m.root.resolve(), path.parent.resolve())).as_posix()
    try:
        path.write_text(dumps_manifest(m, rel_root), encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"failed to write manifest {path}: {e}") from e
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"manifest not found or unreadable: {path}") from e
    if not lines:
        raise ManifestError(f"empty manifest file: {path}")
    try:
        header = json.loads(lines[0])
        records = [ImageRecord.from_json(json.loads(ln)) for ln in lines[1:] if ln.strip()]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path} is not a {MANIFEST_FORMAT} file")
    root = (path.parent / header["root"]).resolve()
    return DatasetManifest(root, tuple(records), header.get("meta", {}))


def manifest_hash(m: DatasetManifest) -> str:
    """Digest of records and meta; independent of where the root lives."""
    return sha256_bytes(dumps_manifest(m, root_text="").encode("utf-8"))


# -- ingestion ---------------------------------------------------------------

def probe_image(data: bytes) -> tuple[int, int, str]:
    """Decode fully and return (width, height, container format)."""
    with Image.open(io.BytesIO(data)) as img:
        img.load()
        fmt = PIL_TO_FORMAT.get(img.format or "")
        if fmt is None:
            raise ValueError(f"unsupported container {img.format!r}")
        return img.width, img.height, fmt


def _ingest_one(root: Path, path: Path, label: Label, source_tag: str) -> ImageRecord | None:
    rel = path.relative_to(root).as_posix()
    try:
        data = path.read_bytes()
        w, h, fmt = probe_image(data)
    except Exception as e:  # noqa: BLE001 - any decode failure means "skip"
        logger.warning("skipping undecodable image %s: %s", path, e)
        return None
    return ImageRecord(
        id=f"{source_tag}/{rel}",
        path=rel,
        width_px=w,
        height_px=h,
        container_format=fmt,
        label=label,
        source_tag=source_tag,
        content_hash=sha256_bytes(data),
    )


def ingest_directory(
    root: str | Path,
    label: Label | str | int,
    source_tag: str,
    workers: int = 1,
) -> DatasetManifest:
    """Catalog every decodable image under ``root`` (recursive), ordered by path."""
    root = Path(root)
    label = Label.parse(label) if not isinstance(label, Label) else label
    if not root.is_dir():
        raise ManifestError(f"not a readable directory: {root}")
    try:
        files = sorted(
            (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in EXTENSIONS),
            key=lambda p: p.relative_to(root).as_posix(),
        )
    except OSError as e:
        raise ManifestError(f"cannot list {root}: {e}") from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(lambda p: _ingest_one(root, p, label, source_tag), files))
    else:
        recs = [_ingest_one(root, p, label, source_tag) for p in files]
    records = tuple(r for r in recs if r is not None)
    return DatasetManifest(root.resolve(), records, {"ingest": {"label": int(label), "source_tag": source_tag}})


def merge_manifests(*manifests: DatasetManifest, meta: dict[str, Any] | None = None) -> DatasetManifest:
    """Union of manifests re-rooted at their common ancestor directory."""
    if not manifests:
        raise ManifestError("nothing to merge")
    roots = [m.root.resolve() for m in manifests]
    common = Path(os.path.commonpath([str(r) for r in roots]))
    records = []
    for m, r in zip(manifests, roots):
        prefix = r.relative_to(common)
        for rec in m.records:
            records.append(replace(rec, path=(prefix / rec.path).as_posix()))
    records.sort(key=lambda rec: rec.path)
    merged_meta: dict[str, Any] = {}
    for m in manifests:
        merged_meta.update(m.meta)
    merged_meta.update(meta or {})
    return DatasetManifest(common, tuple(records), merged_meta)


# -- splitting ---------------------------------------------------------------

def _units(records: Sequence[ImageRecord]) -> dict[str, list[ImageRecord]]:
    """Group records so that a real travels together with every fake linked to it."""
    ids = {r.id for r in records}
    units: dict[str, list[ImageRecord]] = {}
    for r in records:
        key = r.pair_id if (r.pair_id and r.pair_id in ids) else r.id
        units.setdefault(key, []).append(r)
    return units


def _partition(keys: list[str], fractions: Sequence[float], seed: int) -> list[list[str]]:
    keys = sorted(keys)
    order = np.random.default_rng(seed).permutation(len(keys))
    shuffled = [keys[i] for i in order]
    n = len(shuffled)
    bounds = [0]
    acc = 0.0
    for frac in fractions[:-1]:
        acc += frac
        bounds.append(int(math.floor(acc * n + 0.5)))
    bounds.append(n)
    return [shuffled[bounds[i]:bounds[i + 1]] for i in range(len(fractions))]


def split_manifest(
    m: DatasetManifest,
    fractions: Sequence[float],
    seed: int,
    stratify_by_source: bool = False,
) -> list[DatasetManifest]:
    """Disjoint seeded split; linked real/fake records always land in the same part."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(not (f > 0) for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ManifestError(f"fractions must be positive and sum to 1, got {fractions}")
    units = _units(m.records)
    if stratify_by_source:
        groups: dict[str, list[str]] = {}
        for key, recs in units.items():
            groups.setdefault(recs[0].source_tag, []).append(key)
        parts: list[list[str]] = [[] for _ in fractions]
        for tag in sorted(groups):
            for i, chunk in enumerate(_partition(groups[tag], fractions, seed)):
                parts[i].extend(chunk)
    else:
        parts = _partition(list(units), fractions, seed)

    position = {r.id: i for i, r in enumerate(m.records)}
    out = []
    for i, keys in enumerate(parts):
        recs = sorted((r for k in keys for r in units[k]), key=lambda r: position[r.id])
        meta = {**m.meta, "split": {"index": i, "fractions": fractions, "seed": seed,
                                    "stratify_by_source": stratify_by_source}}
        out.append(DatasetManifest(m.root, tuple(recs), meta))
    return out


def subsample_pairs(m: DatasetManifest, n: int, seed: int) -> DatasetManifest:
    """Keep ``n`` seeded-random units (pairs, or single records when unpaired)."""
    units = _units(m.records)
    if n > len(units):
        raise ManifestError(f"requested {n} units but manifest has only {len(units)}")
    keys = sorted(units)
    chosen = {keys[i] for i in np.random.default_rng(seed).permutation(len(keys))[:n]}
    position = {r.id: i for i, r in enumerate(m.records)}
    recs = sorted((r for k in chosen for r in units[k]), key=lambda r: position[r.id])
    return DatasetManifest(m.root, tuple(recs), {**m.meta, "subsample": {"n": n, "seed": seed}})


# -- verification ------------------------------------------------------------

def verify_manifest(m: DatasetManifest) -> list[Violation]:
    """Compare the manifest against disk state and check pair links. Never raises."""
    out: list[Violation] = []
    for r in m.records:
        p = m.path_of(r)
        if not p.is_file():
            out.append(Violation(r.id, "missing_file", str(p)))
            continue
        try:
            digest = sha256_file(p)
        except OSError as e:
            out.append(Violation(r.id, "unreadable", str(e)))
            continue
        if digest != r.content_hash:
            out.append(Violation(r.id, "hash_mismatch", f"expected {r.content_hash[:12]}, found {digest[:12]}"))
        try:
            w, h, fmt = probe_image(p.read_bytes())
        except Exception as e:  # noqa: BLE001
            out.append(Violation(r.id, "undecodable", str(e)))
            continue
        if (w, h) != r.dims:
            out.append(Violation(r.id, "dimension_mismatch", f"recorded {r.dims}, found {(w, h)}"))
        if fmt != r.container_format:
            out.append(Violation(r.id, "format_mismatch", f"recorded {r.container_format}, found {fmt}"))

    ids = m.by_id()
    claimed: dict[str, str] = {}
    for r in m.records:
        if r.pair_id is None:
            continue
        if r.label != Label.FAKE:
            out.append(Violation(r.id, "broken_pair", "only fake records may carry a pair_id"))
            continue
        target = ids.get(r.pair_id)
        if target is None or target.label != Label.REAL:
            out.append(Violation(r.id, "broken_pair", f"pair_id {r.pair_id!r} does not resolve to a real record"))
            continue
        if r.pair_id in claimed:
            out.append(Violation(r.id, "pair_not_bijective", f"real {r.pair_id!r} already linked to {claimed[r.pair_id]!r}"))
            continue
        claimed[r.pair_id] = r.id
        if target.dims != r.dims:
            out.append(Violation(r.id, "pair_dimension_mismatch", f"real {target.dims} vs fake {r.dims}"))
    return out
