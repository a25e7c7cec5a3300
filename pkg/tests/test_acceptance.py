"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end experiment (criteria 7 and 8) trains on the default synthetic
dataset twice, about 25 minutes on one core.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from camrel.experiment import ExperimentConfig, run_experiment
from camrel.metrics import pairwise_auc, roc
from camrel.models import (SELECTED_MD_WIDTHS, build_mc, build_md, compose_mf, load_checkpoint, mc_parameter_count,
                           save_checkpoint)
from camrel.nn import (Conv2D, Flatten, InnerProduct, MaxPool2x2, Network, ReLU, Softmax, binary_head_loss,
                       crossentropy_loss, gradient_check, make_rng, quadratic_loss, triangular_lr)
from camrel.pipeline import PATCH, build_map, extract_patches
from camrel.synth import SynthConfig, generate_dataset
from camrel.training import StrategyConfig, check_split, split_dataset, train_pretrained, train_transfer

from test_training import make_catalog


def _brute_force_map(scores, coords, shape):
    values = np.zeros(shape)
    coverage = np.zeros(shape, dtype=int)
    for y in range(shape[0]):
        for x in range(shape[1]):
            covering = [g for g, (r, c) in zip(scores, coords) if r <= y < r + PATCH and c <= x < c + PATCH]
            if covering:
                total = 0.0
                for g in covering:
                    total += g
                values[y, x] = total / len(covering)
                coverage[y, x] = len(covering)
    return values, coverage


def _reliability_pairs(n, seed):
    rng = make_rng(seed)
    x = rng.uniform(size=(n, 64, 64, 3)).astype(np.float32)
    return x, np.arange(n) % 2


def test_01_gradient_correctness(criterion):
    rng = make_rng(101)
    start = time.perf_counter()
    linear = Network([InnerProduct(rng.normal(size=(4, 3)), rng.normal(size=3))])
    lin = gradient_check(linear, rng.normal(size=(5, 4)), quadratic_loss(rng.normal(size=(5, 3))),
                         epsilon=1e-4, tolerance=1e-6)
    kinds = Network([Conv2D.init(5, 5, 3, 4, rng, name="conv"), MaxPool2x2(name="pool"), ReLU(name="relu"),
                     Flatten(name="flat"), InnerProduct.init(30 * 30 * 4, 6, rng, name="ip_a"), ReLU(name="relu2"),
                     InnerProduct.init(6, 3, rng, name="ip_b"), Softmax(name="softmax")], input_shape=(64, 64, 3))
    each = gradient_check(kinds, rng.uniform(size=(2, 64, 64, 3)), crossentropy_loss([0, 2]),
                          epsilon=1e-5, max_coords=40)
    mf = compose_mf(build_mc(4, 7), build_md(SELECTED_MD_WIDTHS[4], 4, 7))
    full = gradient_check(mf, rng.uniform(size=(1, 64, 64, 3)), binary_head_loss([1]), epsilon=1e-3, max_coords=30)
    elapsed = time.perf_counter() - start
    ok = lin.max_error < 1e-6 and each.max_error < 1e-3 and full.max_error < 1e-3 and elapsed < 120
    ok = ok and len(full.errors) == 10 and not any(full.skipped.values())
    criterion(1, "gradient correctness", ok, f"linear {lin.max_error:.1e}, layer kinds {each.max_error:.1e}, "
              f"full composite {full.max_error:.1e}, {elapsed:.0f}s")
    assert ok


def test_02_architecture(criterion):
    mc = build_mc(18, 0)
    chain = [s[0] for s in mc.shape_chain() if len(s) == 3]
    count = mc.num_parameters()
    ok = chain == [61, 31, 27, 14, 10, 5, 1] and mc.shape_chain()[-1] == (18,) and count == 340_642
    ok = ok and mc_parameter_count(18) == count
    criterion(2, "architecture conformance", ok, f"chain {chain}, {count} parameters")
    assert ok


def test_03_aggregation_oracle(criterion):
    grid = extract_patches(np.zeros((160, 160, 3), np.float32), 32)
    scores = make_rng(303).uniform(size=len(grid))
    m = build_map(scores, grid)
    values, coverage = _brute_force_map(scores, grid.coords, (160, 160))
    ok = np.array_equal(m.values, values) and np.array_equal(m.coverage, coverage)
    criterion(3, "reliability map equals brute-force oracle", ok, f"{len(grid)} patches")
    assert ok


def test_04_auc_oracle(criterion):
    rng = make_rng(404)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        worst = max(worst, abs(roc(scores, labels).auc - pairwise_auc(scores, labels)))
    ok = worst <= 1e-12
    criterion(4, "AUC equals pair counting", ok, f"max difference {worst:.1e}")
    assert ok


def test_05_freeze_contracts(criterion):
    tip, val = _reliability_pairs(16, 1), _reliability_pairs(8, 2)
    mc = build_mc(4, 3)
    pre = train_pretrained(mc, build_md(SELECTED_MD_WIDTHS[4], 4, 3), tip, val,
                           StrategyConfig("pretrained", batch_size=8, epochs=1)).network
    tra = train_transfer(mc, build_md(SELECTED_MD_WIDTHS[4], 4, 3), tip, val,
                         StrategyConfig("transfer", batch_size=8, epochs=1)).network

    def same(net, name):
        return all(np.array_equal(net[name].params[k], mc[name].params[k]) for k in mc[name].params)

    convs = ["conv1", "conv2", "conv3", "conv4"]
    ok_pre = all(same(pre, n) for n in convs + ["ip1", "ip2"])
    ok_tra = all(same(tra, n) for n in convs) and not same(tra, "ip1") and not same(tra, "ip2")
    criterion(5, "freeze contracts", ok_pre and ok_tra, f"pretrained {ok_pre}, transfer {ok_tra}")
    assert ok_pre and ok_tra


def test_06_cyclic_lr_trace(criterion):
    tip, val = _reliability_pairs(16, 3), _reliability_pairs(4, 4)
    cfg = StrategyConfig("transfer", batch_size=8, epochs=16, half_cycle_epochs=4)
    trace = np.array(train_transfer(build_mc(4, 5), build_md((32, 2), 4, 5), tip, val, cfg).lr_trace)
    half = 8  # 4 epochs of 2 steps
    expected = [triangular_lr(t, 5e-5, 15e-5, half) for t in range(len(trace))]
    minima = np.flatnonzero(trace == 5e-5).tolist()
    maxima = np.flatnonzero(trace == 15e-5).tolist()
    ok = len(trace) == 4 * half and np.array_equal(trace, expected)
    ok = ok and minima == [0, 16] and maxima == [8, 24] and trace.min() == 5e-5 and trace.max() == 15e-5
    ok = ok and np.allclose(np.diff(trace[:half + 1]), 1e-4 / half, rtol=1e-9)
    criterion(6, "cyclic learning rate trace", ok, f"{len(trace)} steps, minima at {minima}, maxima at {maxima}")
    assert ok


@pytest.fixture(scope="module")
def synthetic_catalog(tmp_path_factory):
    return generate_dataset(SynthConfig(), tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="module")
def experiment(synthetic_catalog, tmp_path_factory):
    start = time.perf_counter()
    res = run_experiment(synthetic_catalog, tmp_path_factory.mktemp("run1"), ExperimentConfig(seed=0))
    return res, time.perf_counter() - start


@pytest.mark.slow
def test_07_end_to_end(experiment, criterion):
    res, elapsed = experiment
    m = res.metrics
    checks = {
        "a": m["mc_accuracy"] >= 0.90,
        "b": (m["reliability_accuracy_transfer"] >= m["reliability_accuracy_pretrained"] - 0.01
              and m["reliability_accuracy_transfer"] > m["reliability_accuracy_scratch"]
              and m["reliability_accuracy_pretrained"] > m["reliability_accuracy_scratch"]),
        "c": m["accuracy_delta"] >= 0.03,
        "d": m["auc_transfer"] >= 0.80,
        "e": m["map_mean_saturated"] < m["map_mean_texture"],
    }
    detail = (f"Mc acc {m['mc_accuracy']:.4f}; reliability acc scratch {m['reliability_accuracy_scratch']:.4f} "
              f"pretrained {m['reliability_accuracy_pretrained']:.4f} transfer {m['reliability_accuracy_transfer']:.4f}; "
              f"acc all {m['accuracy_all']:.4f} selected {m['accuracy_selected']:.4f} "
              f"delta {m['accuracy_delta']:.4f}; AUC {m['auc_transfer']:.4f}; map saturated "
              f"{m['map_mean_saturated']:.4f} texture {m['map_mean_texture']:.4f}; {elapsed / 60:.1f} min")
    for key, ok in checks.items():
        criterion(7, f"end-to-end ({key})", ok, detail if key == "a" else "")
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


@pytest.mark.slow
def test_08_determinism(experiment, synthetic_catalog, tmp_path, criterion):
    first, _ = experiment
    second = run_experiment(synthetic_catalog, tmp_path, ExperimentConfig(seed=0))
    names = sorted(Path(p).name for p in first.files.values() if str(p).endswith(".csv"))
    differing = [n for n in names
                 if (Path(first.files["metrics"]).parent / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = bool(names) and not differing
    criterion(8, "determinism", ok, f"{len(names)} CSV files compared" + (f", differ: {differing}" if differing else ""))
    assert ok


def test_09_split_invariants(criterion):
    rng = make_rng(909)
    start = time.perf_counter()
    failures = 0
    for k in range(200):
        n_models = int(rng.integers(2, 8))
        instances = [int(rng.integers(2, 5)) for _ in range(n_models)]
        cat = make_catalog(n_models, instances, int(rng.integers(3, 40)), int(rng.integers(1, 4)), seed=k)
        try:
            check_split(cat, split_dataset(cat, int(rng.integers(2**31))))
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 10
    criterion(9, "dataset split invariants", ok, f"200 catalogs, {failures} failures, {elapsed:.2f}s")
    assert ok


def test_10_checkpoint_roundtrip(criterion, tmp_path):
    mf = compose_mf(build_mc(18, 10), build_md(SELECTED_MD_WIDTHS[4], 18, 10))
    path = save_checkpoint(mf, {"kind": "mf"}, tmp_path / "mf.ckpt")
    loaded, _ = load_checkpoint(path)
    x = make_rng(1010).uniform(size=(100, 64, 64, 3)).astype(np.float32)
    ok = np.array_equal(loaded.predict(x), mf.predict(x))
    criterion(10, "checkpoint round-trip", ok, "100 inputs")
    assert ok
