"""Dataset handling and the training strategies.

Catalog manifests are plain text, one ``image_path,model_id,instance_id,scene_id``
record per line (``#`` starts a comment; relative paths resolve against the
manifest's directory).  Epoch logs are CSV with columns
``epoch,train_loss,train_acc,val_loss,val_acc,lr``.
"""
from __future__ import annotations

import csv
import itertools
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_image_uint8
from .models import (PATCH_SHAPE, apply_freeze, build_md, compose_mf, load_checkpoint, validate_md_widths)
from .nn import (DTYPE, Adam, CyclicSGD, Network, binary_crossentropy_on_head, categorical_crossentropy,
                 make_rng, softmax)
from .pipeline import PATCH, PatchGrid, attribute_patches, tile_grid

log = logging.getLogger(__name__)

STRATEGIES = ("scratch", "pretrained", "transfer")
LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")
# scene shares of the evaluation and validation sets (11 and 10 of 84 scenes)
EVAL_SCENE_SHARE = 11 / 84
VAL_SCENE_SHARE = 10 / 84


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    model_id: str
    instance_id: str
    scene_id: str

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


class Catalog:
    """Image records annotated with camera model, device instance and scene."""

    def __init__(self, records, root=None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        self.models = sorted({r.model_id for r in self.records}, key=_natural_key)
        self.label_of = {m: i for i, m in enumerate(self.models)}

    def __len__(self):
        return len(self.records)

    def validate(self) -> None:
        if not self.records:
            raise ValueError("catalog is empty")
        for m in self.models:
            inst = {r.instance_id for r in self.records if r.model_id == m}
            if len(inst) < 2:
                raise ValueError(f"camera model {m!r} has {len(inst)} instance(s); at least 2 are required")

    def path(self, i: int) -> Path:
        p = Path(self.records[i].image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def label(self, i: int) -> int:
        return self.label_of[self.records[i].model_id]


def read_manifest(path) -> Catalog:
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4 or not all(parts):
                raise ValueError(f"{path}:{lineno}: expected image_path,model_id,instance_id,scene_id")
            records.append(ImageRecord(*parts))
    return Catalog(records, root=path.parent)


def write_manifest(catalog: Catalog, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in catalog.records:
            fh.write(f"{r.image_path},{r.model_id},{r.instance_id},{r.scene_id}\n")
    return path


# ---------------------------------------------------------------------------
# split


@dataclass
class DatasetSplit:
    tcam: list[int]
    tip: list[int]
    val: list[int]
    eval: list[int]
    eval_scenes: list[str] = field(default_factory=list)
    train_scenes: list[str] = field(default_factory=list)
    val_scenes: list[str] = field(default_factory=list)
    eval_instances: list[str] = field(default_factory=list)

    @property
    def train(self) -> list[int]:
        return sorted(self.tcam + self.tip)


def scene_counts(n_scenes: int) -> tuple[int, int, int]:
    """(eval, train, val) scene counts; 84 scenes give 11/63/10."""
    if n_scenes < 3:
        raise ValueError(f"need at least 3 scenes to split, got {n_scenes}")
    n_e = max(1, int(np.floor(n_scenes * EVAL_SCENE_SHARE + 0.5)))
    n_v = max(1, int(np.floor(n_scenes * VAL_SCENE_SHARE + 0.5)))
    n_t = n_scenes - n_e - n_v
    if n_t < 1:
        n_e, n_v, n_t = 1, 1, n_scenes - 2
    return n_e, n_t, n_v


def split_dataset(catalog: Catalog, seed: int = 0) -> DatasetSplit:
    """Partition into D_tcam, D_tip, D_v, D_e.

    The evaluation set uses one held-out device per model (the last one in
    natural order) and its own scenes; training and validation use the
    other devices on disjoint scene sets.  Training images are split into
    two halves per model.
    """
    catalog.validate()
    scenes = sorted({r.scene_id for r in catalog.records}, key=_natural_key)
    n_e, n_t, _ = scene_counts(len(scenes))
    order = make_rng(seed, 61).permutation(len(scenes))
    shuffled = [scenes[i] for i in order]
    e_sc, t_sc, v_sc = set(shuffled[:n_e]), set(shuffled[n_e:n_e + n_t]), set(shuffled[n_e + n_t:])

    held = {}
    for m in catalog.models:
        inst = sorted({r.instance_id for r in catalog.records if r.model_id == m}, key=_natural_key)
        held[m] = inst[-1]

    train, val, ev = [], [], []
    for i, r in enumerate(catalog.records):
        if r.instance_id == held[r.model_id]:
            if r.scene_id in e_sc:
                ev.append(i)
        elif r.scene_id in t_sc:
            train.append(i)
        elif r.scene_id in v_sc:
            val.append(i)

    tcam, tip = [], []
    rng = make_rng(seed, 62)
    for m in catalog.models:
        idx = [i for i in train if catalog.records[i].model_id == m]
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            (tcam if j % 2 == 0 else tip).append(idx[p])
    return DatasetSplit(sorted(tcam), sorted(tip), val, ev,
                        eval_scenes=sorted(e_sc, key=_natural_key), train_scenes=sorted(t_sc, key=_natural_key),
                        val_scenes=sorted(v_sc, key=_natural_key),
                        eval_instances=sorted(held.values(), key=_natural_key))


def check_split(catalog: Catalog, split: DatasetSplit) -> None:
    """Raise AssertionError if any instance/scene disjointness rule is broken."""
    recs = catalog.records
    sets = {"tcam": set(split.tcam), "tip": set(split.tip), "val": set(split.val), "eval": set(split.eval)}
    for a, b in itertools.combinations(sets, 2):
        assert not sets[a] & sets[b], f"{a} and {b} share images"
    train = sets["tcam"] | sets["tip"]
    sc = {k: {recs[i].scene_id for i in v} for k, v in [("train", train), ("val", sets["val"]),
                                                          ("eval", sets["eval"])]}
    inst = {k: {recs[i].instance_id for i in v} for k, v in [("train", train), ("val", sets["val"]),
                                                             ("eval", sets["eval"])]}
    assert not sc["train"] & sc["val"], "train and validation share scenes"
    assert not sc["eval"] & (sc["train"] | sc["val"]), "evaluation scenes leak into train/validation"
    assert not inst["eval"] & (inst["train"] | inst["val"]), "evaluation instance used in train/validation"
    per_model = {}
    for i in sets["eval"]:
        per_model.setdefault(recs[i].model_id, set()).add(recs[i].instance_id)
    assert all(len(v) == 1 for v in per_model.values()), "more than one evaluation instance per model"
    assert inst["val"] <= inst["train"] or not sets["val"] or not train, "validation uses unseen instances"


# ---------------------------------------------------------------------------
# patches


def sample_patches(image: np.ndarray, count: int, seed: int = 0) -> PatchGrid:
    """Seeded sample of up to ``count`` tiles from the non-overlapping 64-stride grid."""
    h, w = image.shape[:2]
    if h < PATCH or w < PATCH:
        raise ValueError(f"image {h}x{w} is smaller than one {PATCH}x{PATCH} tile")
    coords = tile_grid(h, w, PATCH)
    if count < len(coords):
        pick = np.sort(make_rng(seed, 71).choice(len(coords), size=count, replace=False))
        coords = coords[pick]
    patches = np.stack([image[r:r + PATCH, c:c + PATCH] for r, c in coords])
    return PatchGrid(patches, coords, (h, w))


@dataclass
class PatchSet:
    """Patches (uint8) with their camera-model label, source image index and tile offset."""

    patches: np.ndarray
    labels: np.ndarray
    image_index: np.ndarray
    coords: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.intp)
        return PatchSet(self.patches[idx], self.labels[idx], self.image_index[idx], self.coords[idx])

    def as_float(self, idx=None) -> np.ndarray:
        p = self.patches if idx is None else self.patches[idx]
        return to_float(p)


def to_float(p: np.ndarray) -> np.ndarray:
    return p.astype(DTYPE) / DTYPE(255) if p.dtype == np.uint8 else p.astype(DTYPE, copy=False)


def load_patch_set(catalog: Catalog, indices, count: int = 300, seed: int = 0) -> PatchSet:
    patches, labels, owners, coords = [], [], [], []
    for i in indices:
        img = read_image_uint8(catalog.path(i))
        grid = sample_patches(img, count, seed=int(make_rng(seed, 72, i).integers(2**62)))
        patches.append(grid.patches)
        coords.append(grid.coords)
        labels.append(np.full(len(grid.coords), catalog.label(i)))
        owners.append(np.full(len(grid.coords), i))
    if not patches:
        return PatchSet(np.zeros((0,) + PATCH_SHAPE, np.uint8), np.zeros(0, int), np.zeros(0, int),
                        np.zeros((0, 2), int))
    return PatchSet(np.concatenate(patches), np.concatenate(labels), np.concatenate(owners), np.concatenate(coords))


def label_reliability(mc: Network, patches, true_models) -> np.ndarray:
    """1 where the attribution network gets the camera model right, else 0."""
    x = patches.as_float() if isinstance(patches, PatchSet) else to_float(np.asarray(patches))
    pred = attribute_patches(mc, x)
    return (pred == np.asarray(true_models)).astype(np.int64)


def balance_classes(labels, cap: int, seed: int = 0) -> np.ndarray:
    """Indices of an equal-class subset of size ``2 * min(cap // 2, minority)``."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(f"cannot balance: {len(pos)} reliable and {len(neg)} unreliable patches")
    k = min(cap // 2, len(pos), len(neg))
    rng = make_rng(seed, 81)
    keep = np.concatenate([rng.choice(pos, size=k, replace=False), rng.choice(neg, size=k, replace=False)])
    return np.sort(keep)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StrategyConfig:
    strategy: str = "transfer"
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    lr: float = 1e-3
    lr_min: float = 5e-5
    lr_max: float = 15e-5
    half_cycle_epochs: float = 4.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES + ("mc",):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainResult:
    network: Network
    best_epoch: int
    best_val_acc: float
    log: list[dict]
    lr_trace: list[float] = field(default_factory=list)


def _frozen_prefix(net: Network) -> int:
    """Number of leading layers that are frozen or parameter-free and feed only frozen layers."""
    last_frozen = -1
    for i, layer in enumerate(net.layers):
        if layer.has_params:
            if not layer.frozen:
                break
            last_frozen = i
    return last_frozen + 1


def _batched_forward(layers: list, x: np.ndarray, chunk: int = 64) -> np.ndarray:
    outs = []
    for s in range(0, len(x), chunk):
        y = to_float(x[s:s + chunk])
        for layer in layers:
            y = layer.forward(y)
        outs.append(y)
    return np.concatenate(outs)


def _evaluate(net: Network, x: np.ndarray, y: np.ndarray, loss_kind: str) -> tuple[float, float]:
    if len(x) == 0:
        return float("nan"), float("nan")
    out = _batched_forward(net.layers, x)
    if loss_kind == "mc":
        loss, _ = categorical_crossentropy(softmax(out), y)
        acc = float(np.mean(out.argmax(axis=1) == y))
    else:
        loss, _ = _head_loss(loss_kind, out, y)
        acc = float(np.mean((out[:, 0] > 0.5) == (y == 1)))
    return loss, acc


def _head_loss(loss_kind: str, probs: np.ndarray, y: np.ndarray):
    if loss_kind == "binary":
        return binary_crossentropy_on_head(probs, y)
    # categorical view of the same head: class 0 = reliable
    return categorical_crossentropy(probs, 1 - y)


def fit(net: Network, x: np.ndarray, y: np.ndarray, x_val: np.ndarray, y_val: np.ndarray, loss_kind: str,
        optimizer, epochs: int, batch_size: int, seed: int) -> TrainResult:
    """Mini-batch training with per-epoch validation; restores the best epoch's weights.

    ``loss_kind`` is ``"mc"`` (softmax + categorical cross-entropy on logits),
    ``"binary"`` or ``"categorical"`` (reliability head).  Leading frozen
    layers are evaluated once and cached.
    """
    if len(x) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    k = _frozen_prefix(net)
    if k:
        x = _batched_forward(net.layers[:k], x)
        x_val = _batched_forward(net.layers[:k], x_val)
    trainable = Network(net.layers[k:], name=net.name + "_trainable")
    n = len(x)
    best_acc, best_epoch, best_weights = -1.0, 0, None
    rows = []
    for epoch in range(1, epochs + 1):
        perm = make_rng(seed, 91, epoch).permutation(n)
        tot_loss, tot_correct = 0.0, 0
        for s in range(0, n, batch_size):
            idx = np.sort(perm[s:s + batch_size])
            xb, yb = to_float(x[idx]), y[idx]
            if loss_kind == "mc":
                logits = trainable.forward(xb, train=True)
                loss, g = categorical_crossentropy(softmax(logits), yb)
                tot_correct += int(np.sum(logits.argmax(axis=1) == yb))
            else:
                probs = trainable.forward(xb, train=True)
                loss, g = _head_loss(loss_kind, probs, yb)
                tot_correct += int(np.sum((probs[:, 0] > 0.5) == (yb == 1)))
            trainable.backward(g, from_logits=True)
            optimizer.step(trainable)
            tot_loss += loss * len(idx)
        trainable.clear_cache()
        val_loss, val_acc = _evaluate(trainable, x_val, y_val, loss_kind)
        lr = optimizer.trace[-1] if getattr(optimizer, "trace", None) else optimizer.current_lr()
        rows.append({"epoch": epoch, "train_loss": tot_loss / n, "train_acc": tot_correct / n,
                     "val_loss": val_loss, "val_acc": val_acc, "lr": lr})
        log.info("%s epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", net.name, epoch,
                 rows[-1]["train_loss"], rows[-1]["train_acc"], val_loss, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_weights = val_acc, epoch, net.get_weights()
    net.set_weights(best_weights)
    return TrainResult(net, best_epoch, best_acc, rows, list(getattr(optimizer, "trace", [])))


def write_epoch_log(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
    return path


def _as_network(obj) -> Network:
    if isinstance(obj, Network):
        return obj.copy()
    net, _ = load_checkpoint(obj)
    return net


def _reliability_inputs(data):
    """Accept ``(x, y)`` tuples or PatchSet-like objects carrying ``reliability``."""
    x, y = data
    return np.asarray(x), np.asarray(y)


def train_mc(mc: Network, tcam: PatchSet, val: PatchSet, config: StrategyConfig) -> TrainResult:
    """Camera-model attribution training: softmax + categorical cross-entropy, Adam."""
    if len(tcam) == 0 or len(val) == 0:
        raise ValueError("train_mc needs non-empty training and validation patches")
    for layer in mc.param_layers():
        layer.frozen = False
    return fit(mc, tcam.patches, tcam.labels, val.patches, val.labels, "mc", Adam(lr=config.lr),
               config.epochs, config.batch_size, config.seed)


def train_scratch(mf: Network, tip, val, config: StrategyConfig) -> TrainResult:
    """Whole composite trained from its current (random) weights with binary cross-entropy and Adam."""
    x, y = _reliability_inputs(tip)
    xv, yv = _reliability_inputs(val)
    apply_freeze(mf, "none")
    return fit(mf, x, y, xv, yv, "binary", Adam(lr=config.lr), config.epochs, config.batch_size, config.seed)


def _compose(mc, md) -> Network:
    mc = _as_network(mc)
    md = md.copy()
    return compose_mf(mc, md)


def train_pretrained(mc, md: Network, tip, val, config: StrategyConfig) -> TrainResult:
    """Frozen attribution network; the head is trained as a 2-class categorical classifier with Adam."""
    mf = _compose(mc, md)
    x, y = _reliability_inputs(tip)
    xv, yv = _reliability_inputs(val)
    apply_freeze(mf, "all_mc")
    return fit(mf, x, y, xv, yv, "categorical", Adam(lr=config.lr), config.epochs, config.batch_size, config.seed)


def transfer_optimizer(config: StrategyConfig, n_train: int) -> CyclicSGD:
    steps_per_epoch = -(-n_train // config.batch_size)
    half = max(1, int(round(config.half_cycle_epochs * steps_per_epoch)))
    return CyclicSGD(config.lr_min, config.lr_max, half)


def train_transfer(mc, md: Network, tip, val, config: StrategyConfig) -> TrainResult:
    """Convolutions frozen; ip1/ip2 and the head trained jointly with binary cross-entropy and cyclic SGD."""
    mf = _compose(mc, md)
    x, y = _reliability_inputs(tip)
    xv, yv = _reliability_inputs(val)
    apply_freeze(mf, "conv_only")
    opt = transfer_optimizer(config, len(x))
    return fit(mf, x, y, xv, yv, "binary", opt, config.epochs, config.batch_size, config.seed)


def md_candidates(max_layers: int = 6) -> list[tuple[int, ...]]:
    """All heads of 2..max_layers inner-product layers (hidden widths from {32, 64, 128})."""
    out = []
    for depth in range(1, max_layers):
        out += [tuple(h) + (2,) for h in itertools.product((32, 64, 128), repeat=depth)]
    return out


@dataclass
class GridResult:
    best: dict[int, tuple[tuple[int, ...], float]]
    scores: dict[tuple[int, ...], float]


def grid_search_md(mc, tip, val, epochs: int = 15, candidates=None, config: StrategyConfig | None = None) -> GridResult:
    """Train every candidate head with the Pre-Trained strategy; keep the best per depth.

    Ties on validation accuracy go to the candidate enumerated first.
    """
    config = config or StrategyConfig("pretrained")
    mc = _as_network(mc)
    apply_freeze(mc, "none")
    n_models = mc.shape_chain()[-1][0]
    x, y = _reliability_inputs(tip)
    xv, yv = _reliability_inputs(val)
    # the attribution network is frozen for every candidate: compute its features once
    feats = np.maximum(_batched_forward(mc.layers, x), 0)
    feats_v = np.maximum(_batched_forward(mc.layers, xv), 0)
    cfg = StrategyConfig("pretrained", config.batch_size, epochs, config.seed, config.lr)
    scores, best = {}, {}
    for widths in candidates or md_candidates():
        widths = validate_md_widths(widths)
        md = build_md(widths, num_inputs=n_models, seed=config.seed)
        res = fit(md, feats, y, feats_v, yv, "categorical", Adam(lr=cfg.lr), cfg.epochs, cfg.batch_size, cfg.seed)
        scores[widths] = res.best_val_acc
        depth = len(widths)
        if depth not in best or res.best_val_acc > best[depth][1]:
            best[depth] = (widths, res.best_val_acc)
    return GridResult(best, scores)
