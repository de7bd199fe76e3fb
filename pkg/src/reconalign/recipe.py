"""Run configuration and the composite experiments built from the individual modules."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .augmentation import AugmentationPolicy
from .detector import BackboneConfig, TrainConfig, build_detector, train
from .errors import ReconAlignError, UserError
from .evaluation import average_precision, score, tpr_at_fpr
from .imaging import derive_seed
from .manifest import DatasetManifest, merge_manifests, subsample_pairs, write_manifest
from .reconstruction import (
    AutoencoderHandle,
    SavePolicy,
    ToyAutoencoderConfig,
    load_external_autoencoder,
    reconstruct_dataset,
    train_toy_autoencoder,
)
from .textures import generate_dataset

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "run_config.json"
PRESETS = ("desk",)


@dataclass
class RunConfig:
    """Everything a run needs; blocks are plain dicts that map onto the module configs."""

    seed: int = 0
    tag: str = "run"
    paths: dict[str, str] = field(default_factory=dict)
    textures: dict[str, Any] = field(default_factory=dict)  # n, side, quality, depth_range
    autoencoder: dict[str, Any] = field(default_factory=dict)  # spec, or toy config keys
    save_policy: str = "match"
    backbone: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    augmentation: dict[str, Any] = field(default_factory=dict)
    sweeps: list[dict[str, Any]] = field(default_factory=list)
    postprocess: dict[str, Any] = field(default_factory=dict)
    accounting: dict[str, Any] = field(default_factory=dict)
    recipe: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise UserError(f"unknown run config keys: {', '.join(extra)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, source: str | Path) -> "RunConfig":
        """Read a JSON config file, or a bundled preset by name."""
        if str(source) in PRESETS:
            text = resources.files("reconalign").joinpath(f"data/configs/{source}.json").read_text()
        else:
            p = Path(source)
            if not p.is_file():
                raise UserError(f"config file not found: {p}")
            text = p.read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise UserError(f"config {source} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise UserError(f"config {source} must hold a JSON object")
        return cls.from_json(d)

    def override(self, assignments: Sequence[str]) -> "RunConfig":
        """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
        d = self.to_json()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise UserError(f"override must look like key=value, got {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
                if not isinstance(node, dict):
                    raise UserError(f"cannot override inside non-object key {p!r}")
            node[parts[-1]] = value
        return RunConfig.from_json(d)

    def subseed(self, *parts: object) -> int:
        return derive_seed(self.seed, *parts)

    # -- module configs ------------------------------------------------------

    def augmentation_policy(self) -> AugmentationPolicy:
        try:
            return AugmentationPolicy.from_json(self.augmentation)
        except TypeError as e:
            raise UserError(f"bad augmentation block: {e}") from None

    def train_config(self, **changes: Any) -> TrainConfig:
        d = {"seed": self.seed, **self.train, **changes, "policy": self.augmentation_policy().to_json()}
        if "train_crop_side" not in d:
            d["train_crop_side"] = d["policy"]["train_crop_side"]
        try:
            return TrainConfig.from_json(d)
        except TypeError as e:
            raise UserError(f"bad train block: {e}") from None

    def backbone_config(self) -> BackboneConfig:
        try:
            return BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.backbone.items()})
        except TypeError as e:
            raise UserError(f"bad backbone block: {e}") from None

    def toy_config(self) -> ToyAutoencoderConfig:
        d = {k: v for k, v in self.autoencoder.items() if k != "spec"}
        d.setdefault("seed", self.subseed("autoencoder") % 2**31)
        try:
            return ToyAutoencoderConfig.from_json(d)
        except TypeError as e:
            raise UserError(f"bad autoencoder block: {e}") from None


def write_snapshot(cfg: RunConfig, out: str | Path, name: str = SNAPSHOT_NAME) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return path


# -- composite runs ----------------------------------------------------------

@dataclass
class AlignedData:
    """Paired real/fake manifests built from procedural textures, split by pair."""

    reals: DatasetManifest
    fakes: DatasetManifest
    pool: DatasetManifest
    val: DatasetManifest
    test: DatasetManifest
    autoencoder: AutoencoderHandle


def _select_units(m: DatasetManifest, keys: set[str], tag: str) -> DatasetManifest:
    recs = tuple(r for r in m.records if (r.pair_id or r.id) in keys)
    return m.with_records(recs, split=tag)


def build_aligned_textures(cfg: RunConfig, out: str | Path, n_pool: int, n_val: int, n_test: int) -> AlignedData:
    """Render textures, fit (or load) the autoencoder on the pool, reconstruct everything, split by pair."""
    out = Path(out)
    tex = cfg.textures
    side = tex.get("side", 128)
    side = side if isinstance(side, int) else tuple(side)
    n = n_pool + n_val + n_test
    reals = generate_dataset(n, side, out / "textures", tuple(tex.get("quality", (70, 100))),
                             seed=cfg.subseed("textures") % 2**31, depth_range=tuple(tex.get("depth_range", (2, 6))))
    order = np.random.default_rng(cfg.subseed("split") % 2**32).permutation(n)
    ids = [reals.records[i].id for i in order]
    test_ids, val_ids, pool_ids = set(ids[:n_test]), set(ids[n_test:n_test + n_val]), set(ids[n_test + n_val:])

    spec = cfg.autoencoder.get("spec")
    if spec:
        ae = load_external_autoencoder(spec)
    else:
        ae = train_toy_autoencoder(cfg.toy_config(), _select_units(reals, pool_ids, "pool"))
    fakes = reconstruct_dataset(ae, reals, out / "recon", SavePolicy.parse(cfg.save_policy),
                                seed=cfg.subseed("reconstruct") % 2**31)
    both = merge_manifests(reals, fakes)
    parts = {name: _select_units(both, keys, name) for name, keys in
             (("pool", pool_ids), ("val", val_ids), ("test", test_ids))}
    for name, m in parts.items():
        write_manifest(m, out / f"{name}.jsonl")
    return AlignedData(reals, fakes, parts["pool"], parts["val"], parts["test"], ae)


@dataclass
class RecipeCell:
    variant: str
    size: int
    status: str  # ok | failed
    tpr_at_5fpr: float | None = None
    ap: float | None = None
    best_epoch: int | None = None
    seconds: float | None = None
    error: str = ""


def experiment_recipe(cfg: RunConfig, out: str | Path) -> list[RecipeCell]:
    """Dataset-size sweep: for each size and batch variant, train on nested pair subsets and
    report TPR at 5% FPR on a shared test split. Failed cells are recorded and skipped."""
    r = cfg.recipe
    sizes = sorted(int(s) for s in r.get("sizes", (250, 1000)))
    variants = [str(v).lower() for v in r.get("variants", ("random", "sync"))]
    if not sizes or sizes[0] < 1:
        raise UserError("recipe sizes must be positive")
    out = Path(out)
    write_snapshot(cfg, out)
    data = build_aligned_textures(cfg, out / "data", sizes[-1], int(r.get("val_pairs", 200)),
                                  int(r.get("test_pairs", 400)))
    cells: list[RecipeCell] = []
    for size in sizes:
        subset = subsample_pairs(data.pool, size, seed=cfg.subseed("subsample") % 2**32)
        for variant in variants:
            t0 = time.time()
            cell_dir = out / "cells" / f"{variant}-{size}"
            try:
                tcfg = cfg.train_config(composer=variant, seed=cfg.subseed("train", variant) % 2**31)
                det = build_detector(cfg.backbone_config(), seed=tcfg.seed)
                ck = train(det, subset, data.val, tcfg)
                s = score(ck.model, data.test, min_side=tcfg.train_crop_side, name=f"{variant}-{size}")
                cell = RecipeCell(variant, size, "ok", tpr_at_fpr(s, 0.05), average_precision(s),
                                  ck.best_epoch, round(time.time() - t0, 1))
                ck.save(cell_dir)
            except (ReconAlignError, RuntimeError, ValueError) as e:
                logger.error("recipe cell %s/%d failed: %s", variant, size, e)
                cell = RecipeCell(variant, size, "failed", seconds=round(time.time() - t0, 1), error=str(e))
            logger.info("recipe cell %s/%d: %s", variant, size, cell)
            cells.append(cell)
    write_recipe_tables(cells, sizes, variants, out)
    return cells


def write_recipe_tables(cells: list[RecipeCell], sizes: Sequence[int], variants: Sequence[str], out: Path) -> None:
    """``table.csv``: variants by sizes, TPR@5%FPR in percent; ``cells.csv``: one row per cell."""
    by = {(c.variant, c.size): c for c in cells}
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", *sizes])
        for v in variants:
            row = []
            for s in sizes:
                c = by.get((v, s))
                row.append(f"{100 * c.tpr_at_5fpr:.2f}" if c and c.status == "ok" else "failed")
            w.writerow([v, *row])
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "size", "status", "tpr_at_5fpr", "ap", "best_epoch", "error"])
        for c in cells:
            w.writerow([c.variant, c.size, c.status, "" if c.tpr_at_5fpr is None else repr(c.tpr_at_5fpr),
                        "" if c.ap is None else repr(c.ap), "" if c.best_epoch is None else c.best_epoch, c.error])


def read_recipe_table(path: str | Path) -> dict[str, dict[int, float | None]]:
    """Parse ``table.csv`` back into {variant: {size: tpr or None}}."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    sizes = [int(s) for s in rows[0][1:]]
    return {row[0]: {s: (None if v == "failed" else float(v) / 100) for s, v in zip(sizes, row[1:])}
            for row in rows[1:]}


def is_nondecreasing(values: Sequence[float], tolerance: float = 0.0) -> bool:
    return all(b >= a - tolerance for a, b in zip(values, values[1:]) if not (math.isnan(a) or math.isnan(b)))


__all__ = ["RunConfig", "write_snapshot", "AlignedData", "build_aligned_textures", "RecipeCell",
           "experiment_recipe", "write_recipe_tables", "read_recipe_table", "is_nondecreasing"]
