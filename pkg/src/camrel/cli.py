"""Command-line interface: ``camrel {synth,train,map,attribute,eval,experiment}``.

Every subcommand writes files only; on failure any file it created is removed
and the exit code is non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .experiment import ExperimentConfig, load_split_patches, reliability_sets, run_experiment, train_strategy
from .imageio import read_image
from .metrics import (attribution_metrics, confusion, reliability_accuracy, roc, write_confusion_csv,
                      write_metrics_csv, write_roc_csv, write_table_row_csv)
from .models import SELECTED_MD_WIDTHS, CheckpointError, build_mc, load_checkpoint, save_checkpoint
from .pipeline import MODES, PATCH, attribute_image, attribute_patches, build_map, export_map, extract_patches, \
    score_patches
from .synth import SynthConfig, generate_dataset
from .training import STRATEGIES, StrategyConfig, read_manifest, split_dataset, load_patch_set, train_mc, \
    write_epoch_log

log = logging.getLogger("camrel")


class CommandError(Exception):
    """User-facing failure: printed without a traceback."""


class Outputs:
    """Tracks files and directories created by a command so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def dir(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CommandError(f"cannot create output directory {path}: {exc}") from None
        self.paths += reversed(missing)
        return path

    def file(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in reversed(self.paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


# ---------------------------------------------------------------------------
# argument types


def _gamma(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"gamma must be in [0, 1], got {v}")
    return v


def _stride(text: str) -> int:
    v = int(text)
    if not 1 <= v <= PATCH:
        raise argparse.ArgumentTypeError(f"stride must be in [1, {PATCH}], got {v}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(path, kind: str | None = None, flag: str = "--checkpoint"):
    if path is None:
        raise CommandError(f"missing checkpoint: pass {flag}")
    if not Path(path).exists():
        raise CommandError(f"checkpoint {path} not found (given by {flag})")
    try:
        net, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None
    if kind is not None and meta.get("kind", kind) != kind:
        raise CommandError(f"{flag} {path} holds a {meta.get('kind')!r} network, expected {kind!r}")
    return net, meta


def _check_pair(mc, mf) -> None:
    n_mc = mc.shape_chain()[-1][0]
    n_in = [layer for layer in mf.param_layers() if layer.part == "md"][0].params["weights"].shape[0]
    if n_mc != n_in:
        raise CommandError(f"attribution network has {n_mc} outputs but the reliability head expects {n_in}")


def _read_image(path):
    try:
        img = read_image(path)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read image {path}: {exc}") from None
    if img.shape[0] < PATCH or img.shape[1] < PATCH:
        raise CommandError(f"image {path} is {img.shape[0]}x{img.shape[1]}, smaller than {PATCH}x{PATCH}")
    return img


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, outputs: Outputs) -> int:
    try:
        cfg = SynthConfig(num_models=args.models, instances_per_model=args.instances, scenes=args.scenes,
                          images_per_scene=args.images_per_scene, size=args.size,
                          base_weights=args.weights, image_format=args.format, seed=args.seed)
    except ValueError as exc:
        raise CommandError(f"invalid synthetic config: {exc}") from None
    out = outputs.dir(args.out)
    for name in ("images", "layouts", "manifest.csv"):
        outputs.file(out / name)
    catalog = generate_dataset(cfg, out)
    print(f"{len(catalog)} images, {len(catalog.models)} models, "
          f"{len({r.instance_id for r in catalog.records})} instances, "
          f"{len({r.scene_id for r in catalog.records})} scenes -> {out / 'manifest.csv'}")
    return 0


def _catalog(path):
    if not Path(path).exists():
        raise CommandError(f"manifest {path} not found")
    try:
        cat = read_manifest(path)
        cat.validate()
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    return cat


def cmd_train(args, outputs: Outputs) -> int:
    catalog = _catalog(args.manifest)
    out = outputs.dir(args.out)
    _, sets = load_split_patches(catalog, args.seed, args.patches)
    meta = {"models": catalog.models, "seed": args.seed}
    if args.strategy == "mc" or args.train_mc:
        mc = build_mc(len(catalog.models), args.seed)
        res = train_mc(mc, sets["tcam"], sets["val"],
                       StrategyConfig("mc", args.batch_size, args.mc_epochs or args.epochs, args.seed))
        write_epoch_log(res.log, outputs.file(out / "log_mc.csv"))
        save_checkpoint(mc, {**meta, "kind": "mc"}, outputs.file(out / "mc.ckpt"))
        print(f"attribution network: best epoch {res.best_epoch}, val acc {res.best_val_acc:.4f} -> {out / 'mc.ckpt'}")
        if args.strategy == "mc":
            return 0
    else:
        mc, _ = _load(args.mc_checkpoint, "mc", "--mc-checkpoint (or --train-mc)")
    tip_set, val_set = reliability_sets(mc, sets["tip"], sets["val"], args.balance_cap, args.seed)
    res = train_strategy(args.strategy, mc, tip_set, val_set, args.md_widths,
                         StrategyConfig(args.strategy, args.batch_size, args.epochs, args.seed))
    write_epoch_log(res.log, outputs.file(out / f"log_{args.strategy}.csv"))
    path = outputs.file(out / f"mf_{args.strategy}.ckpt")
    save_checkpoint(res.network, {**meta, "kind": "mf", "strategy": args.strategy, "best_epoch": res.best_epoch},
                    path)
    print(f"{args.strategy}: best epoch {res.best_epoch}, val acc {res.best_val_acc:.4f} -> {path}")
    return 0


def cmd_map(args, outputs: Outputs) -> int:
    mf, _ = _load(args.checkpoint, "mf")
    img = _read_image(args.image)
    grid = extract_patches(img, args.stride)
    m = build_map(score_patches(mf, grid.patches), grid)
    out = outputs.dir(args.out)
    stem = args.stem or Path(args.image).stem + "_map"
    for suffix in (".pgm", ".txt", "_coverage.txt") + (("_overlay.png",) if args.overlay else ()):
        outputs.file(out / f"{stem}{suffix}")
    paths = export_map(m, out, stem, image=img if args.overlay else None)
    print(" ".join(str(p) for p in paths.values()))
    return 0


def cmd_attribute(args, outputs: Outputs) -> int:
    mc, mc_meta = _load(args.mc_checkpoint, "mc", "--mc-checkpoint")
    mf, _ = _load(args.checkpoint, "mf", "--checkpoint")
    _check_pair(mc, mf)
    grid = extract_patches(_read_image(args.image), args.stride)
    labels = attribute_patches(mc, grid.patches)
    scores = score_patches(mf, grid.patches)
    res = attribute_image(labels, scores, args.gamma, args.mode)
    names = mc_meta.get("models")
    report = {
        "image": str(args.image), "mode": res.mode, "gamma": res.gamma, "stride": args.stride,
        "label": int(res.label), "model": names[res.label] if names else str(res.label),
        "fallback": res.fallback, "selected": [int(k) for k in res.selected],
        "patches": [{"row": int(r), "col": int(c), "label": int(lab), "score": float(g)}
                    for (r, c), lab, g in zip(grid.coords, labels, scores)],
    }
    text = json.dumps(report, indent=2)
    if args.out:
        outputs.file(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args, outputs: Outputs) -> int:
    catalog = _catalog(args.manifest)
    mc, _ = _load(args.mc_checkpoint, "mc", "--mc-checkpoint")
    mf, _ = _load(args.checkpoint, "mf", "--checkpoint")
    _check_pair(mc, mf)
    split = split_dataset(catalog, args.seed)
    if not split.eval:
        raise CommandError("the split has no evaluation images")
    ev = load_patch_set(catalog, split.eval, args.patches, args.seed)
    x = ev.as_float()
    pred = attribute_patches(mc, x)
    y = (pred == ev.labels).astype(np.int64)
    g = score_patches(mf, x)
    sel = g > args.gamma
    am = attribution_metrics(pred, ev.labels, sel)
    out = outputs.dir(args.out)
    metrics = {"eval_patches": len(ev), "reliability_accuracy": reliability_accuracy(g, y),
               "accuracy_all": am.accuracy_all, "selected_patches": am.selected_count,
               "accuracy_selected": am.accuracy, "accuracy_delta": am.accuracy_delta}
    if 0 < y.sum() < len(y):
        curve = roc(g, y)
        metrics["auc"] = curve.auc
        write_roc_csv(curve, outputs.file(out / "roc.csv"))
    write_metrics_csv(metrics, outputs.file(out / "metrics.csv"))
    n = len(catalog.models)
    write_confusion_csv(confusion(pred, ev.labels, n), outputs.file(out / "confusion_all.csv"))
    write_confusion_csv(confusion(pred[sel], ev.labels[sel], n), outputs.file(out / "confusion_selected.csv"))
    md_depth = sum(1 for layer in mf.param_layers() if layer.part == "md")
    write_table_row_csv([{"md": f"Md{md_depth}", "strategy": args.strategy_name, **am.table_row()}],
                        outputs.file(out / "table.csv"))
    for k, v in metrics.items():
        print(f"{k}: {v}")
    return 0


def cmd_experiment(args, outputs: Outputs) -> int:
    catalog = _catalog(args.manifest)
    out = outputs.dir(args.out)
    cfg = ExperimentConfig(seed=args.seed, mc_epochs=args.mc_epochs, head_epochs=args.epochs,
                           scratch_epochs=args.epochs, mc_batch_size=args.batch_size,
                           head_batch_size=args.batch_size, gamma=args.gamma, map_stride=args.stride)
    res = run_experiment(catalog, out, cfg)
    for p in res.files.values():
        outputs.file(p)
    for k, v in res.metrics.items():
        print(f"{k}: {v}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camrel", description="Patch reliability for camera model attribution")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-camera dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--models", type=int, default=4)
    s.add_argument("--instances", type=int, default=2)
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--images-per-scene", type=int, default=4)
    s.add_argument("--size", type=int, default=320)
    s.add_argument("--weights", type=_floats, default=SynthConfig.base_weights,
                   help="content mix: smooth,texture,flat,saturated")
    s.add_argument("--format", choices=("ppm", "png"), default="ppm")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the attribution network and/or a reliability strategy")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--strategy", choices=("mc",) + STRATEGIES, default="transfer")
    t.add_argument("--mc-checkpoint")
    t.add_argument("--train-mc", action="store_true", help="train the attribution network first")
    t.add_argument("--epochs", type=_positive, default=20)
    t.add_argument("--mc-epochs", type=_positive)
    t.add_argument("--batch-size", type=_positive, default=128)
    t.add_argument("--patches", type=_positive, default=300, help="patches sampled per image")
    t.add_argument("--balance-cap", type=_positive, default=90000)
    t.add_argument("--md-widths", type=_ints, default=SELECTED_MD_WIDTHS[4])
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("map", help="reliability map of one image")
    m.add_argument("--image", required=True)
    m.add_argument("--checkpoint", required=True, help="composite (reliability) checkpoint")
    m.add_argument("--out", required=True)
    m.add_argument("--stride", type=_stride, default=PATCH)
    m.add_argument("--stem")
    m.add_argument("--overlay", action="store_true")
    m.set_defaults(func=cmd_map)

    a = sub.add_parser("attribute", help="camera model of one image from its reliable patches")
    a.add_argument("--image", required=True)
    a.add_argument("--mc-checkpoint", required=True)
    a.add_argument("--checkpoint", required=True, help="composite (reliability) checkpoint")
    a.add_argument("--gamma", type=_gamma, default=0.5)
    a.add_argument("--stride", type=_stride, default=PATCH)
    a.add_argument("--mode", choices=MODES, default="majority_reliable")
    a.add_argument("--out", help="also write the JSON report here")
    a.set_defaults(func=cmd_attribute)

    e = sub.add_parser("eval", help="metrics on the evaluation split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--mc-checkpoint", required=True)
    e.add_argument("--checkpoint", required=True, help="composite (reliability) checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0, help="split seed used for training")
    e.add_argument("--gamma", type=_gamma, default=0.5)
    e.add_argument("--patches", type=_positive, default=300)
    e.add_argument("--strategy-name", default="transfer", help="label for the table row")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="full run: all strategies and evaluation")
    x.add_argument("--manifest", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, required=True)
    x.add_argument("--mc-epochs", type=_positive, default=ExperimentConfig.mc_epochs)
    x.add_argument("--epochs", type=_positive, default=ExperimentConfig.head_epochs)
    x.add_argument("--batch-size", type=_positive, default=ExperimentConfig.mc_batch_size)
    x.add_argument("--gamma", type=_gamma, default=0.5)
    x.add_argument("--stride", type=_stride, default=ExperimentConfig.map_stride)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    outputs = Outputs()
    try:
        return args.func(args, outputs)
    except CommandError as exc:
        outputs.cleanup()
        print(f"camrel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        outputs.cleanup()
        print(f"camrel {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        outputs.cleanup()
        raise


if __name__ == "__main__":
    sys.exit(main())
