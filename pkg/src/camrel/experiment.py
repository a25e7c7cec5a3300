"""End-to-end reliability experiment on a catalog.

split -> sample patches -> train the attribution network -> label patches by
its correctness -> balance -> train the three strategies -> evaluate on the
held-out set.  Every output file is a pure function of (catalog, config), so
two runs with the same seed produce byte-identical CSVs.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imageio import read_image, read_image_uint8
from .metrics import (attribution_metrics, balanced_reliability_accuracy, confusion, reliability_accuracy, roc,
                      write_confusion_csv, write_metrics_csv, write_roc_csv, write_table_row_csv)
from .models import SELECTED_MD_WIDTHS, build_mc, build_md, compose_mf, save_checkpoint, split_mf
from .pipeline import attribute_patches, build_map, extract_patches, score_patches
from .synth import SATURATED, TEXTURE, layout_path
from .nn import Network
from .training import (STRATEGIES, Catalog, DatasetSplit, PatchSet, StrategyConfig, TrainResult, balance_classes,
                       label_reliability, load_patch_set, split_dataset, train_mc, train_pretrained, train_scratch,
                       train_transfer, write_epoch_log)

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    patches_per_image: int = 300
    mc_epochs: int = 20
    mc_batch_size: int = 32
    head_epochs: int = 20
    head_batch_size: int = 32
    scratch_epochs: int = 20
    md_widths: tuple = SELECTED_MD_WIDTHS[4]
    balance_cap: int = 90000
    gamma: float = 0.5
    selection_strategy: str = "transfer"
    map_stride: int = 32
    strategies: tuple = STRATEGIES

    def __post_init__(self):
        if self.selection_strategy not in self.strategies:
            raise ValueError(f"selection strategy {self.selection_strategy!r} is not among {self.strategies}")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}")


@dataclass
class ExperimentResult:
    metrics: dict
    files: dict[str, Path]
    timings: dict[str, float] = field(default_factory=dict)


def _content_map_means(catalog: Catalog, indices, maps) -> dict[str, float]:
    """Mean map value over saturated and over textured pixels, pooled across images."""
    sums = {"saturated": [0.0, 0], "texture": [0.0, 0]}
    for i, m in zip(indices, maps):
        lp = layout_path(catalog.path(i))
        if not lp.exists():
            continue
        layout = read_image_uint8(lp)[..., 0]
        for name, kind in (("saturated", SATURATED), ("texture", TEXTURE)):
            sel = (layout == kind) & m.covered
            sums[name][0] += float(m.values[sel].sum())
            sums[name][1] += int(sel.sum())
    return {f"map_mean_{k}": (s / n if n else float("nan")) for k, (s, n) in sums.items()}


def load_split_patches(catalog: Catalog, seed: int, count: int = 300) -> tuple[DatasetSplit, dict[str, PatchSet]]:
    split = split_dataset(catalog, seed)
    sets = {name: load_patch_set(catalog, getattr(split, name), count, seed)
            for name in ("tcam", "tip", "val", "eval")}
    log.info("patches: %s", {k: len(v) for k, v in sets.items()})
    return split, sets


def reliability_sets(mc: Network, tip: PatchSet, val: PatchSet, cap: int, seed: int):
    """Label patches by attribution correctness and balance both classes; returns ``(x, y)`` pairs."""
    y_tip = label_reliability(mc, tip, tip.labels)
    y_val = label_reliability(mc, val, val.labels)
    keep_tip = balance_classes(y_tip, cap, seed)
    keep_val = balance_classes(y_val, cap, seed + 1)
    log.info("balanced reliability sets: tip %d of %d, val %d of %d", len(keep_tip), len(tip),
             len(keep_val), len(val))
    return (tip.patches[keep_tip], y_tip[keep_tip]), (val.patches[keep_val], y_val[keep_val])


def train_strategy(strategy: str, mc: Network, tip_set, val_set, md_widths, config: StrategyConfig,
                   pretrained: Network | None = None) -> TrainResult:
    """Train one strategy; Scratch ignores ``mc`` apart from its output width.

    Transfer is two-tiered: its head starts from a Pre-Trained composite
    (``pretrained``, trained here with the same config when not given) and is
    then fine-tuned together with ip1/ip2.
    """
    n_models = mc.shape_chain()[-1][0]
    md = build_md(md_widths, num_inputs=n_models, seed=config.seed)
    if strategy == "scratch":
        mf = compose_mf(build_mc(n_models, config.seed + 1), md)
        return train_scratch(mf, tip_set, val_set, config)
    if strategy == "pretrained":
        return train_pretrained(mc, md, tip_set, val_set, config)
    if strategy == "transfer":
        if pretrained is None:
            pretrained = train_pretrained(mc, md, tip_set, val_set, replace(config, strategy="pretrained")).network
        return train_transfer(mc, split_mf(pretrained)[1], tip_set, val_set, config)
    raise ValueError(f"unknown strategy {strategy!r}")


def run_experiment(catalog: Catalog, out_dir, config: ExperimentConfig | None = None) -> ExperimentResult:
    cfg = config or ExperimentConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    split, sets = load_split_patches(catalog, cfg.seed, cfg.patches_per_image)
    tcam, tip, val, ev = sets["tcam"], sets["tip"], sets["val"], sets["eval"]
    n_models = len(catalog.models)
    lap("load")

    mc = build_mc(n_models, cfg.seed)
    res = train_mc(mc, tcam, val, StrategyConfig("mc", cfg.mc_batch_size, cfg.mc_epochs, cfg.seed))
    files["log_mc"] = write_epoch_log(res.log, out / "log_mc.csv")
    files["ckpt_mc"] = save_checkpoint(mc, {"kind": "mc", "models": catalog.models, "seed": cfg.seed},
                                       out / "mc.ckpt")
    lap("train_mc")

    tip_set, val_set = reliability_sets(mc, tip, val, cfg.balance_cap, cfg.seed)
    lap("label")

    nets = {}
    for strategy in cfg.strategies:
        epochs = cfg.scratch_epochs if strategy == "scratch" else cfg.head_epochs
        sres = train_strategy(strategy, mc, tip_set, val_set, cfg.md_widths,
                              StrategyConfig(strategy, cfg.head_batch_size, epochs, cfg.seed), nets.get("pretrained"))
        nets[strategy] = sres.network
        files[f"log_{strategy}"] = write_epoch_log(sres.log, out / f"log_{strategy}.csv")
        files[f"ckpt_{strategy}"] = save_checkpoint(
            sres.network, {"kind": "mf", "strategy": strategy, "models": catalog.models, "seed": cfg.seed,
                           "best_epoch": sres.best_epoch}, out / f"mf_{strategy}.ckpt")
        lap(f"train_{strategy}")

    # evaluation on the held-out device and scenes
    x_ev = ev.as_float()
    pred = attribute_patches(mc, x_ev)
    y_ev = (pred == ev.labels).astype(np.int64)
    metrics = {"eval_patches": len(ev), "mc_accuracy": float(np.mean(y_ev))}
    rows = []
    scores = {}
    for strategy, net in nets.items():
        g = score_patches(net, x_ev)
        scores[strategy] = g
        metrics[f"reliability_accuracy_{strategy}"] = balanced_reliability_accuracy(g, y_ev)
        metrics[f"reliability_accuracy_unbalanced_{strategy}"] = reliability_accuracy(g, y_ev)
        curve = roc(g, y_ev)
        metrics[f"auc_{strategy}"] = curve.auc
        files[f"roc_{strategy}"] = write_roc_csv(curve, out / f"roc_{strategy}.csv")
        am = attribution_metrics(pred, ev.labels, g > cfg.gamma)
        rows.append({"md": f"Md{len(cfg.md_widths)}", "strategy": strategy, **am.table_row()})
    lap("score")

    sel = scores[cfg.selection_strategy] > cfg.gamma
    am = attribution_metrics(pred, ev.labels, sel)
    metrics.update({"selected_patches": am.selected_count, "accuracy_all": am.accuracy_all,
                    "accuracy_selected": am.accuracy, "accuracy_delta": am.accuracy_delta})
    files["table"] = write_table_row_csv(rows, out / "table.csv")
    files["confusion_all"] = write_confusion_csv(confusion(pred, ev.labels, n_models), out / "confusion_all.csv")
    files["confusion_selected"] = write_confusion_csv(confusion(pred[sel], ev.labels[sel], n_models),
                                                      out / "confusion_selected.csv")

    # dense reliability maps of the evaluation images
    mf = nets[cfg.selection_strategy]
    maps = []
    for i in split.eval:
        grid = extract_patches(read_image(catalog.path(i)), cfg.map_stride)
        maps.append(build_map(score_patches(mf, grid.patches), grid))
    metrics.update(_content_map_means(catalog, split.eval, maps))
    lap("maps")

    files["metrics"] = write_metrics_csv(metrics, out / "metrics.csv")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    files["config"] = out / "config.json"
    log.info("experiment done: %s", {k: round(v, 1) for k, v in timings.items()})
    return ExperimentResult(metrics, files, timings)
