"""scikit-learn compatible wrappers around the attribution and reliability networks.

Inputs are stacks of 64x64x3 patches (uint8 or floats in [0, 1]).  The
wrappers only handle validation and bookkeeping; training itself is done by
the functions in :mod:`camrel.training`.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .models import SELECTED_MD_WIDTHS, PATCH_SHAPE, build_mc, validate_md_widths
from .nn import Network, make_rng, softmax
from .pipeline import attribute_patches, build_map, extract_patches, score_patches
from .training import STRATEGIES, StrategyConfig, balance_classes, train_mc
from .experiment import train_strategy


def _check_patches(X) -> np.ndarray:
    X = np.asarray(X)
    dtype = None if X.dtype == np.uint8 else np.float32
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 4 or X.shape[1:] != PATCH_SHAPE:
        raise ValueError(f"expected patches of shape (n, 64, 64, 3), got {X.shape}")
    return X


def _holdout(y: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class hold-out split (at least one sample per class on each side when possible)."""
    rng = make_rng(seed, 101)
    train, val = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = min(max(1, int(round(fraction * len(idx)))), max(len(idx) - 1, 1))
        val.append(idx[:k])
        train.append(idx[k:] if len(idx) > 1 else idx)
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


class _Data:
    # minimal PatchSet stand-in for train_mc
    def __init__(self, patches, labels):
        self.patches, self.labels = patches, labels

    def __len__(self):
        return len(self.labels)


class CameraModelClassifier(ClassifierMixin, BaseEstimator):
    """Patch-level camera model attribution network."""

    def __init__(self, epochs: int = 20, batch_size: int = 128, lr: float = 1e-3, validation_fraction: float = 0.1,
                 seed: int = 0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        X = _check_patches(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 camera models")
        if X_val is None:
            tr, va = _holdout(y_idx, self.validation_fraction, self.seed)
            X, X_val, y_idx, y_val_idx = X[tr], X[va], y_idx[tr], y_idx[va]
        else:
            X_val = _check_patches(X_val)
            y_val_idx = np.searchsorted(self.classes_, np.asarray(y_val))
        self.network_ = build_mc(len(self.classes_), self.seed)
        res = train_mc(self.network_, _Data(X, y_idx), _Data(X_val, y_val_idx),
                       StrategyConfig("mc", self.batch_size, self.epochs, self.seed, self.lr))
        self.history_ = res.log
        self.best_epoch_ = res.best_epoch
        return self

    @classmethod
    def from_network(cls, network: Network, classes=None) -> "CameraModelClassifier":
        est = cls()
        est.network_ = network
        n = network.shape_chain()[-1][0]
        est.classes_ = np.arange(n) if classes is None else np.asarray(classes)
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.network_.predict(_check_patches(X), logits=True)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.classes_[attribute_patches(self.network_, _check_patches(X))]


class ReliabilityEstimator(ClassifierMixin, BaseEstimator):
    """Patch reliability: ``fit`` takes patches and their camera models.

    Each training patch is labelled 1 when ``attribution`` predicts its camera
    model correctly and 0 otherwise, the two classes are balanced, and the
    chosen strategy trains the composite network.  ``predict_proba[:, 1]`` is
    the reliability score g.
    """

    def __init__(self, attribution: CameraModelClassifier | None = None, strategy: str = "transfer",
                 md_widths=SELECTED_MD_WIDTHS[4], epochs: int = 20, batch_size: int = 128, gamma: float = 0.5,
                 balance_cap: int = 90000, validation_fraction: float = 0.1, seed: int = 0):
        self.attribution = attribution
        self.strategy = strategy
        self.md_widths = md_widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.gamma = gamma
        self.balance_cap = balance_cap
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _validate_params(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        validate_md_widths(self.md_widths)
        if self.attribution is None:
            raise ValueError("a fitted CameraModelClassifier is required as `attribution`")
        check_is_fitted(self.attribution, "network_")

    def reliability_labels(self, X, y) -> np.ndarray:
        return (self.attribution.predict(X) == np.asarray(y)).astype(np.int64)

    def fit(self, X, y, X_val=None, y_val=None):
        self._validate_params()
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        X = _check_patches(X)
        r = self.reliability_labels(X, y)
        if X_val is None:
            tr, va = _holdout(r, self.validation_fraction, self.seed)
            X, X_val, r, r_val = X[tr], X[va], r[tr], r[va]
        else:
            X_val = _check_patches(X_val)
            r_val = self.reliability_labels(X_val, y_val)
        keep = balance_classes(r, self.balance_cap, self.seed)
        keep_val = balance_classes(r_val, self.balance_cap, self.seed + 1)
        self.classes_ = np.array([0, 1])
        res = train_strategy(self.strategy, self.attribution.network_, (X[keep], r[keep]),
                             (X_val[keep_val], r_val[keep_val]), self.md_widths,
                             StrategyConfig(self.strategy, self.batch_size, self.epochs, self.seed))
        self.network_ = res.network
        self.history_ = res.log
        self.best_epoch_ = res.best_epoch
        return self

    def score_samples(self, X) -> np.ndarray:
        """Reliability score g of each patch."""
        check_is_fitted(self, "network_")
        return score_patches(self.network_, _check_patches(X))

    def predict_proba(self, X) -> np.ndarray:
        g = self.score_samples(X).astype(np.float64)
        return np.column_stack([1.0 - g, g])

    def predict(self, X) -> np.ndarray:
        return (self.score_samples(X) > self.gamma).astype(np.int64)


class ReliabilityMapper(TransformerMixin, BaseEstimator):
    """Turns whole images into per-pixel reliability maps with a fitted :class:`ReliabilityEstimator`."""

    def __init__(self, estimator: ReliabilityEstimator | None = None, stride: int = 64):
        self.estimator = estimator
        self.stride = stride

    def fit(self, X=None, y=None):
        if self.estimator is None:
            raise ValueError("a fitted ReliabilityEstimator is required as `estimator`")
        check_is_fitted(self.estimator, "network_")
        if not 1 <= self.stride <= 64:
            raise ValueError(f"stride must be in [1, 64], got {self.stride}")
        return self

    def transform(self, X) -> list[np.ndarray]:
        self.fit()
        out = []
        for image in X:
            grid = extract_patches(np.asarray(image), self.stride)
            out.append(build_map(self.estimator.score_samples(grid.patches), grid).values)
        return out
