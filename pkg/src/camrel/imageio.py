"""8-bit image and plain-text matrix IO."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def read_image_uint8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, img: np.ndarray) -> Path:
    """Write float [0, 1] or uint8 data; format follows the suffix (.ppm, .pgm, .png)."""
    path = Path(path)
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)
    return path


def write_matrix(path, values: np.ndarray, fmt: str = "%.6f") -> Path:
    """Text matrix: a ``H W`` header line then one row of numbers per line."""
    path = Path(path)
    values = np.asarray(values)
    h, w = values.shape
    with open(path, "w") as fh:
        fh.write(f"{h} {w}\n")
        for row in values:
            fh.write(" ".join(fmt % v for v in row) + "\n")
    return path


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        h, w = (int(t) for t in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if h else np.zeros((0, w))
    if data.shape != (h, w):
        raise ValueError(f"{path}: header says {h}x{w}, found {data.shape}")
    return data
