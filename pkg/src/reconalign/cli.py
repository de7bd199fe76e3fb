"""Command-line entry point.

Settings are resolved in increasing precedence: built-in defaults, the
``--config`` file (a JSON RunConfig or a bundled preset name), ``--set
key.sub=value`` overrides, then the explicit flags of each subcommand. The
resolved RunConfig is written as ``run_config.json`` beside every output.
Exit status is 0 on success, 2 on bad input, 1 on internal errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from .errors import ReconAlignError
from .recipe import SNAPSHOT_NAME, RunConfig, write_snapshot

logger = logging.getLogger("reconalign")

OUT_ENV = "RECONALIGN_OUT"
EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


class InputError(ReconAlignError):
    """Bad command-line input detected before any output is written."""


def _range(text: str, cast: Callable[[str], Any] = int) -> tuple:
    """``70:100``, ``70-100`` or a single value."""
    for sep in (":", "-", ","):
        if sep in text.strip("-"):
            lo, hi = text.split(sep, 1)
            return cast(lo), cast(hi)
    v = cast(text)
    return v, v


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _need_file(path: str | None, what: str) -> Path:
    if not path:
        raise InputError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _need_dir(path: str | None, what: str) -> Path:
    if not path:
        raise InputError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"{what} not found: {p}")
    return p


def _snapshot_beside(cfg: RunConfig, out_file: Path) -> Path:
    return write_snapshot(cfg, out_file.parent, f"{out_file.stem}.{SNAPSHOT_NAME}")


def _write_json(obj: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import Label, ingest_directory, write_manifest

    root = _need_dir(args.root, "--root")
    label = Label.parse(args.label)
    out = Path(args.out) if args.out else _default_out("ingest") / "manifest.jsonl"
    cfg.paths.update(root=str(root), out=str(out), command="ingest", label=label.name.lower(), source=args.source)
    m = ingest_directory(root, label, args.source, workers=args.workers)
    write_manifest(m, out)
    _snapshot_beside(cfg, out)
    print(f"{len(m)} records -> {out}")
    return [out]


def cmd_gen_textures(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import write_manifest
    from .textures import generate_dataset

    tex = cfg.textures
    if args.n is not None:
        tex["n"] = args.n
    if args.side is not None:
        lo, hi = _range(args.side)
        tex["side"] = lo if lo == hi else [lo, hi]
    if args.quality is not None:
        tex["quality"] = list(_range(args.quality))
    if args.depth is not None:
        tex["depth_range"] = list(_range(args.depth))
    out = Path(args.out) if args.out else _default_out("gen-textures")
    cfg.paths.update(out=str(out), command="gen-textures")
    side = tex.get("side", 128)
    m = generate_dataset(int(tex.get("n", 2000)), side if isinstance(side, int) else tuple(side), out,
                         tuple(tex.get("quality", (70, 100))), seed=cfg.seed,
                         depth_range=tuple(tex.get("depth_range", (2, 6))))
    write_manifest(m, out / "manifest.jsonl")
    write_snapshot(cfg, out)
    print(f"{len(m)} textures -> {out}")
    return [out]


def cmd_train_ae(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import read_manifest
    from .reconstruction import save_toy_autoencoder, train_toy_autoencoder

    src = _need_file(args.manifest, "--manifest")
    for key in ("epochs", "target_mse", "f", "latent_channels"):
        if getattr(args, key) is not None:
            cfg.autoencoder[key] = getattr(args, key)
    cfg.autoencoder.setdefault("seed", cfg.seed)
    out = Path(args.out) if args.out else _default_out("train-ae")
    cfg.paths.update(manifest=str(src), out=str(out), command="train-ae")
    handle = train_toy_autoencoder(cfg.toy_config(), read_manifest(src))
    path = save_toy_autoencoder(handle, out / "autoencoder.pt")
    _write_json(handle.meta, out / "training.json")
    write_snapshot(cfg, out)
    print(f"held-out MSE {handle.meta['heldout_mse']:.5f}; use --ae toy:{path}")
    return [out]


def cmd_reconstruct(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import merge_manifests, read_manifest, write_manifest
    from .reconstruction import SavePolicy, load_external_autoencoder, reconstruct_dataset

    src = _need_file(args.manifest, "--manifest")
    if args.ae:
        cfg.autoencoder["spec"] = args.ae
    if args.save_policy:
        cfg.save_policy = args.save_policy
    spec = cfg.autoencoder.get("spec")
    if not spec:
        raise InputError("--ae is required (identity, toy:<file> or ldm:<file>)")
    policy = SavePolicy.parse(cfg.save_policy)
    out = Path(args.out) if args.out else _default_out("reconstruct")
    cfg.paths.update(manifest=str(src), out=str(out), command="reconstruct")
    reals = read_manifest(src)
    ae = load_external_autoencoder(spec)
    fakes = reconstruct_dataset(ae, reals, out, policy, seed=cfg.seed)
    write_manifest(fakes, out / "manifest.jsonl")
    write_manifest(merge_manifests(reals, fakes), out / "paired.jsonl")
    write_snapshot(cfg, out)
    print(f"{len(fakes)} reconstructions -> {out}")
    return [out]


def cmd_split(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import read_manifest, split_manifest, write_manifest

    src = _need_file(args.manifest, "--manifest")
    names = args.names.split(",")
    if len(names) != len(args.fractions):
        raise InputError("--names and --fractions must have the same length")
    out = Path(args.out) if args.out else _default_out("split")
    cfg.paths.update(manifest=str(src), out=str(out), command="split", fractions=args.fractions, names=names)
    parts = split_manifest(read_manifest(src), args.fractions, cfg.seed, stratify_by_source=args.stratify)
    for name, part in zip(names, parts):
        write_manifest(part, out / f"{name}.jsonl")
        print(f"{name}: {len(part)} records")
    write_snapshot(cfg, out)
    return [out]


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .detector import build_detector, train
    from .manifest import read_manifest

    tr_path = _need_file(args.train, "--train")
    va_path = _need_file(args.val, "--val")
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("composer", "composer")):
        if getattr(args, flag) is not None:
            cfg.train[key] = getattr(args, flag)
    if args.backbone:
        cfg.backbone["family"] = args.backbone
    if args.init:
        cfg.backbone["init"] = args.init
    tcfg = cfg.train_config()
    bcfg = cfg.backbone_config()
    out = Path(args.out) if args.out else _default_out("train")
    cfg.paths.update(train=str(tr_path), val=str(va_path), out=str(out), command="train")
    tr, va = read_manifest(tr_path), read_manifest(va_path)
    det = build_detector(bcfg, seed=tcfg.seed)

    def progress(rec: dict) -> None:
        logger.info("epoch %d lr %.0e loss %.4f val acc %.4f", rec["epoch"], rec["lr"], rec["train_loss"],
                    rec["val_accuracy"])

    ck = train(det, tr, va, tcfg, progress=progress)
    ck.save(out)
    write_snapshot(cfg, out)
    print(f"best val accuracy {ck.provenance.get('best_val_accuracy')} at epoch {ck.best_epoch} -> {out}")
    return [out]


def _load_checkpoint(path: str | None):
    from .detector import DetectorCheckpoint

    return DetectorCheckpoint.load(_need_dir(path, "--checkpoint"))


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .evaluation import calibrate_threshold, evaluate, score
    from .manifest import read_manifest

    src = _need_file(args.manifest, "--manifest")
    val = _need_file(args.calibrate, "--calibrate") if args.calibrate else None
    if args.threshold is not None and val is not None:
        raise InputError("--threshold and --calibrate are mutually exclusive")
    ck = _load_checkpoint(args.checkpoint)
    ev = cfg.paths
    min_side = ck.train_config.get("train_crop_side", 96) if args.min_side is None else args.min_side
    out = Path(args.out) if args.out else _default_out("eval")
    ev.update(checkpoint=args.checkpoint, manifest=str(src), out=str(out), command="eval")
    threshold = ck.threshold if args.threshold is None else args.threshold
    if val is not None:
        threshold = calibrate_threshold(score(ck.model, read_manifest(val), min_side=min_side))
        ev["calibrate"] = str(val)
    s = score(ck.model, read_manifest(src), min_side=min_side, name=ck.identity)
    report = evaluate(s, threshold, args.fpr)
    report.write(out, s)
    write_snapshot(cfg, out)
    print(f"accuracy {report.accuracy['overall']:.4f} at threshold {threshold:.4f}; AP {report.ap}")
    return [out]


def cmd_calibrate(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .evaluation import calibrate_threshold, score
    from .manifest import read_manifest

    val = _need_file(args.val, "--val")
    ck_dir = _need_dir(args.checkpoint, "--checkpoint")
    ck = _load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else _default_out("calibrate")
    if out.resolve() == ck_dir.resolve():
        raise InputError("--out must differ from --checkpoint; the source checkpoint is left untouched")
    cfg.paths.update(checkpoint=str(ck_dir), val=str(val), out=str(out), command="calibrate")
    min_side = ck.train_config.get("train_crop_side", 96)
    t = calibrate_threshold(score(ck.model, read_manifest(val), min_side=min_side))
    ck.set_threshold(t)
    ck.save(out)
    write_snapshot(cfg, out)
    print(f"calibrated threshold {t!r} -> {out}")
    return [out]


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import read_manifest
    from .robustness import SweepSpec, export_curve, render_plot, sweep

    src = _need_file(args.manifest, "--manifest")
    if args.kind:
        block = {"kind": args.kind, "levels": args.grid, "reencode_at_identity": args.reencode_identity,
                 "seed": cfg.seed}
        if not args.grid:
            raise InputError("--grid is required with --kind")
        cfg.sweeps = [block]
    if not cfg.sweeps:
        raise InputError("no sweep given; pass --kind and --grid or a config with a sweeps block")
    specs = [SweepSpec(b["kind"], tuple(b["levels"]), bool(b.get("reencode_at_identity", False)),
                       int(b.get("seed", cfg.seed))) for b in cfg.sweeps]
    ck = _load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else _default_out("sweep")
    cfg.paths.update(checkpoint=args.checkpoint, manifest=str(src), out=str(out), command="sweep")
    m = read_manifest(src)
    for spec in specs:
        curve = sweep(ck.model, m, spec, min_side=args.min_side)
        export_curve(curve, out / f"{spec.kind}.csv")
        _write_json(curve.to_json(), out / f"{spec.kind}.json")
        render_plot(curve, out / f"{spec.kind}.png", [ck.identity])
        print(f"{spec.kind}: " + ", ".join(f"{lv:g}={ms:.4f}" for lv, ms in zip(curve.levels, curve.mean_scores)))
    write_snapshot(cfg, out)
    return [out]


def cmd_postprocess(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .manifest import read_manifest, write_manifest
    from .robustness import PostProcessPolicy, build_postprocessed_manifest

    src = _need_file(args.manifest, "--manifest")
    if args.policy:
        try:
            cfg.postprocess.update(json.loads(_need_file(args.policy, "--policy").read_text()))
        except json.JSONDecodeError as e:
            raise InputError(f"policy file is not valid JSON: {e}") from None
    cfg.postprocess.setdefault("seed", cfg.seed)
    try:
        policy = PostProcessPolicy.from_json(cfg.postprocess)
    except TypeError as e:
        raise InputError(f"bad post-process policy: {e}") from None
    out = Path(args.out) if args.out else _default_out("postprocess")
    cfg.paths.update(manifest=str(src), out=str(out), command="postprocess")
    m = build_postprocessed_manifest(read_manifest(src), policy, out)
    write_manifest(m, out / "manifest.jsonl")
    write_snapshot(cfg, out)
    print(f"{len(m)} post-processed images -> {out}")
    return [out]


def cmd_macs(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .accounting import load_configs, pipeline_macs

    acc = cfg.accounting
    for key in ("pipeline", "steps", "n"):
        if getattr(args, key) is not None:
            acc[key] = getattr(args, key)
    if args.configs:
        acc["configs"] = str(_need_dir(args.configs, "--configs"))
    out = Path(args.out) if args.out else _default_out("macs")
    cfg.paths.update(out=str(out), command="macs")
    cfgs = load_configs(acc.get("configs"))
    mode = acc.get("pipeline", "both")
    report = pipeline_macs((cfgs["enc"], cfgs["dec"]), cfgs.get("unet"), cfgs.get("text"),
                           steps=int(acc.get("steps", 50)), n=int(acc.get("n", 1)), mode=mode)
    d = report.to_json()
    if "unet" in report.components and report.steps:
        d["text_share_of_unet_term"] = report.components["text"] / (report.steps * report.components["unet"])
    _write_json(d, out / "macs.json")
    write_snapshot(cfg, out)
    print(json.dumps({"pipelines": report.pipelines, "ratio": report.ratio}))
    return [out]


def cmd_recipe(args: argparse.Namespace, cfg: RunConfig) -> list[Path]:
    from .recipe import experiment_recipe

    if args.sizes:
        cfg.recipe["sizes"] = [int(v) for v in args.sizes]
    if args.variants:
        cfg.recipe["variants"] = args.variants.split(",")
    out = Path(args.out) if args.out else _default_out("recipe")
    cfg.paths.update(out=str(out), command="recipe")
    cells = experiment_recipe(cfg, out)
    print((out / "table.csv").read_text(), end="")
    failed = [c for c in cells if c.status != "ok"]
    if failed:
        logger.warning("%d recipe cells failed", len(failed))
    return [out]


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reconalign", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config, or a preset name (desk)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help=f"output location (default ${OUT_ENV}/<command>)")
    common.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, parents=[common], help=help, description=help)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("ingest", cmd_ingest, "index a directory of images into a manifest file")
    sp.add_argument("--root", required=True)
    sp.add_argument("--label", required=True, choices=["real", "fake"])
    sp.add_argument("--source", required=True, help="source tag")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("gen-textures", cmd_gen_textures, "render procedural textures as real images")
    sp.add_argument("--n", type=int)
    sp.add_argument("--side", help="square side, or lo:hi for mixed sizes")
    sp.add_argument("--quality", help="JPEG quality range lo:hi")
    sp.add_argument("--depth", help="program depth range lo:hi")

    sp = add("train-ae", cmd_train_ae, "fit the toy autoencoder on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--target-mse", type=float)
    sp.add_argument("--f", type=int, choices=[4, 8])
    sp.add_argument("--latent-channels", type=int)

    sp = add("reconstruct", cmd_reconstruct, "build aligned fakes by autoencoder reconstruction")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ae", help="identity | toy:<file> | ldm:<file>")
    sp.add_argument("--save-policy", help="match | png | jpeg:lo-hi")

    sp = add("split", cmd_split, "split a manifest by pair into named parts")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fractions", type=_floats, default=[0.8, 0.1, 0.1])
    sp.add_argument("--names", default="train,val,test")
    sp.add_argument("--stratify", action="store_true", help="stratify by source tag")

    sp = add("train", cmd_train, "train a detector")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", required=True)
    sp.add_argument("--epochs", type=int, help="maximum epochs")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--composer", choices=["random", "sync"])
    sp.add_argument("--backbone", choices=["small-cnn", "resnet50-like"])
    sp.add_argument("--init", help="random | pretrained-imagenet | external:<path>")

    sp = add("eval", cmd_eval, "score a manifest and write an evaluation report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--calibrate", metavar="VAL_MANIFEST", help="calibrate the threshold on this manifest first")
    sp.add_argument("--fpr", type=_floats, default=[0.05], help="comma-separated target FPRs")
    sp.add_argument("--min-side", type=int)

    sp = add("calibrate", cmd_calibrate, "write a copy of a checkpoint with a validation-calibrated threshold")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--val", required=True)

    sp = add("sweep", cmd_sweep, "score a manifest under a grid of one perturbation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--kind", choices=["resize", "blur", "noise", "jpeg", "webp", "fixed"])
    sp.add_argument("--grid", type=_floats)
    sp.add_argument("--reencode-identity", action="store_true", help="re-encode even at quality 100")
    sp.add_argument("--min-side", type=int, default=96)

    sp = add("postprocess", cmd_postprocess, "build a post-processed copy of a test set")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--policy", help="JSON post-process policy")

    sp = add("macs", cmd_macs, "compare dataset-creation cost in multiply-accumulates")
    sp.add_argument("--pipeline", choices=["denoise", "reconstruct", "both"])
    sp.add_argument("--configs", help="directory with enc/dec/unet/text JSON layer lists (default: bundled)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n", type=int)

    sp = add("recipe", cmd_recipe, "dataset-size sweep over batch variants on procedural textures")
    sp.add_argument("--sizes", type=lambda s: [int(v) for v in s.split(",")])
    sp.add_argument("--variants", help="comma-separated subset of random,sync")
    return p


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.override(args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _existing(paths: Sequence[Path]) -> set[Path]:
    return {p for p in paths if p.exists()}


def _planned_outputs(args: argparse.Namespace) -> list[Path]:
    out = getattr(args, "out", None)
    if out:
        return [Path(out)]
    if args.command == "ingest":
        return [_default_out("ingest") / "manifest.jsonl"]
    return [_default_out(args.command)]


def _remove(paths: Sequence[Path]) -> None:
    for p in paths:
        if p.is_dir():
            shutil.rmtree(p, ignore_errors=True)
        elif p.exists():
            p.unlink()
            snap = p.parent / f"{p.stem}.{SNAPSHOT_NAME}"
            snap.unlink(missing_ok=True)


def run_subcommand(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    planned = _planned_outputs(args)
    before = _existing(planned)
    try:
        cfg = _resolve_config(args)
        args.fn(args, cfg)
        return EXIT_OK
    except (ReconAlignError, FileNotFoundError, ValueError) as e:
        _remove([p for p in planned if p not in before])
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"reconalign {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - report and map to the internal-error status
        logger.exception("internal error in %s", args.command)
        return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run_subcommand(argv))


if __name__ == "__main__":
    main()
