"""Patch extraction, per-patch scoring/attribution and reliability maps."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import to_uint8, write_image, write_matrix
from .nn import DTYPE, Network

PATCH = 64
MODES = ("majority_reliable", "best_patch")


@dataclass
class PatchGrid:
    patches: np.ndarray          # K x 64 x 64 x 3
    coords: np.ndarray           # K x 2 top-left (row, col)
    source_shape: tuple[int, int]

    def __len__(self):
        return len(self.coords)


@dataclass
class ReliabilityMap:
    values: np.ndarray           # H x W, mean score of covering patches (0 where uncovered)
    coverage: np.ndarray         # H x W, number of covering patches

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0


@dataclass
class AttributionResult:
    patch_labels: np.ndarray
    scores: np.ndarray
    selected: np.ndarray
    label: int
    mode: str
    gamma: float
    fallback: bool = False


def tile_grid(h: int, w: int, stride: int) -> np.ndarray:
    """Top-left offsets of every full 64x64 window at the given stride, row-major."""
    rows = np.arange(0, h - PATCH + 1, stride)
    cols = np.arange(0, w - PATCH + 1, stride)
    return np.array([(r, c) for r in rows for c in cols], dtype=np.int64).reshape(-1, 2)


def as_unit_image(image: np.ndarray) -> np.ndarray:
    """8-bit images are divided by 255; float images are assumed to be in [0, 1] already."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(DTYPE) / DTYPE(255)
    return image.astype(DTYPE, copy=False)


def extract_patches(image: np.ndarray, stride: int = PATCH) -> PatchGrid:
    image = as_unit_image(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < PATCH or w < PATCH:
        raise ValueError(f"image {h}x{w} is smaller than {PATCH}x{PATCH}")
    if not 1 <= stride <= PATCH:
        raise ValueError(f"stride must be in [1, {PATCH}], got {stride}")
    coords = tile_grid(h, w, stride)
    patches = np.stack([image[r:r + PATCH, c:c + PATCH] for r, c in coords])
    return PatchGrid(patches, coords, (h, w))


def _check_patches(patches: np.ndarray) -> np.ndarray:
    patches = as_unit_image(patches)
    if patches.ndim == 3:
        patches = patches[None]
    if patches.shape[1:] != (PATCH, PATCH, 3):
        raise ValueError(f"patches must be {PATCH}x{PATCH}x3, got {patches.shape[1:]}")
    return patches


def score_patches(mf: Network, patches: np.ndarray) -> np.ndarray:
    """Reliability g_k = first softmax output of the composite, one patch at a time."""
    probs = mf.predict(_check_patches(patches))
    return probs[:, 0]


def score_patch(mf: Network, patch: np.ndarray) -> float:
    return float(score_patches(mf, patch)[0])


def attribute_patches(mc: Network, patches: np.ndarray) -> np.ndarray:
    """Argmax of the attribution logits; ties go to the lowest index."""
    return mc.predict(_check_patches(patches), logits=True).argmax(axis=1)


def attribute_patch(mc: Network, patch: np.ndarray) -> int:
    return int(attribute_patches(mc, patch)[0])


def build_map(scores, grid: PatchGrid) -> ReliabilityMap:
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(grid.coords):
        raise ValueError(f"{len(scores)} scores for {len(grid.coords)} patches")
    h, w = grid.source_shape
    total = np.zeros((h, w))
    coverage = np.zeros((h, w), dtype=np.int64)
    for g, (r, c) in zip(scores, grid.coords):
        total[r:r + PATCH, c:c + PATCH] += g
        coverage[r:r + PATCH, c:c + PATCH] += 1
    values = np.divide(total, coverage, out=np.zeros_like(total), where=coverage > 0)
    return ReliabilityMap(values, coverage)


def attribute_image(labels, scores, gamma: float = 0.5, mode: str = "majority_reliable") -> AttributionResult:
    """Image-level label from per-patch labels and reliability scores.

    ``majority_reliable`` votes over patches with ``g > gamma``; vote ties go
    to the label whose voters have the larger summed score, then the lower
    label.  With no reliable patch it falls back to ``best_patch``, which
    takes the label of the highest-scoring patch.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if len(labels) == 0 or len(labels) != len(scores):
        raise ValueError(f"need matching non-empty labels/scores, got {len(labels)} and {len(scores)}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "majority_reliable":
        selected = np.flatnonzero(scores > gamma)
        if len(selected):
            votes = Counter(labels[selected].tolist())
            mass = Counter()
            for k in selected:
                mass[int(labels[k])] += scores[k]
            winner = min(votes, key=lambda lab: (-votes[lab], -mass[lab], lab))
            return AttributionResult(labels, scores, selected, int(winner), mode, gamma)
    best = int(np.argmax(scores))
    return AttributionResult(labels, scores, np.array([best]), int(labels[best]), mode, gamma,
                             fallback=mode == "majority_reliable")


def map_to_uint8(m: ReliabilityMap) -> np.ndarray:
    return to_uint8(m.values)


def green_overlay(image: np.ndarray, m: ReliabilityMap, alpha: float = 0.6) -> np.ndarray:
    """Darkened grayscale image with green intensity proportional to the map value."""
    img = as_unit_image(image).astype(np.float64)
    gray = img.mean(axis=2) * (1 - alpha)
    out = np.stack([gray, gray, gray], axis=-1)
    out[..., 1] += alpha * m.values
    return np.clip(out, 0, 1)


def export_map(m: ReliabilityMap, out_dir, stem: str = "map", image: np.ndarray | None = None) -> dict[str, Path]:
    """Write ``<stem>.pgm`` (value x 255, rounded half up), ``<stem>.txt`` and ``<stem>_coverage.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "image": write_image(out_dir / f"{stem}.pgm", map_to_uint8(m)),
        "matrix": write_matrix(out_dir / f"{stem}.txt", m.values),
        "coverage": write_matrix(out_dir / f"{stem}_coverage.txt", m.coverage, fmt="%d"),
    }
    if image is not None:
        paths["overlay"] = write_image(out_dir / f"{stem}_overlay.png", green_overlay(image, m))
    return paths
