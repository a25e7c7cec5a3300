"""Synthetic camera-model datasets.

Each "camera model" is a tiny acquisition pipeline (Bayer sampling, a
per-model demosaicing kernel, channel gains, a tone curve and sensor noise).
Textured content exposes the demosaicing traces, flat and smooth content only
the noise, and blown highlights destroy every trace, so patch reliability
depends on content the same way it does on real photographs.

Seeds: every random draw comes from ``make_rng(seed, *keys)`` with fixed
integer keys (scene index, image index, model, instance), so output never
depends on generation order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import write_image
from .nn import make_rng

log = logging.getLogger(__name__)

CONTENT_TYPES = ("smooth", "texture", "flat", "saturated")
SMOOTH, TEXTURE, FLAT, SATURATED = range(4)

# RGGB Bayer tile; the profile phase shifts it by (dy, dx)
_BAYER = np.array([[0, 1], [1, 2]])
_PHASES = ((0, 0), (0, 1), (1, 0), (1, 1))
NEUTRAL_KERNEL = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float64)


@dataclass(frozen=True)
class CameraProfile:
    model_id: int
    cfa_phase: int = 0
    kernel: tuple = tuple(map(tuple, NEUTRAL_KERNEL))
    gamma: float = 1.0
    sigma: float = 0.0
    gains: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0 <= self.cfa_phase < 4:
            raise ValueError(f"cfa_phase must be in 0..3, got {self.cfa_phase}")
        if not 0.6 <= self.gamma <= 1.6:
            raise ValueError(f"gamma {self.gamma} outside [0.6, 1.6]")
        if not 0.0 <= self.sigma <= 0.05:
            raise ValueError(f"sigma {self.sigma} outside [0, 0.05]")
        if len(self.gains) != 3 or not all(0.8 <= g <= 1.2 for g in self.gains):
            raise ValueError(f"gains {self.gains} outside [0.8, 1.2]")
        k = np.asarray(self.kernel, dtype=float)
        if k.shape != (3, 3) or (k < 0).any():
            raise ValueError("kernel must be a non-negative 3x3 array")

    @property
    def kernel_array(self) -> np.ndarray:
        return np.asarray(self.kernel, dtype=np.float64)

    @property
    def is_neutral_kernel(self) -> bool:
        return bool(np.array_equal(self.kernel_array, NEUTRAL_KERNEL))


def identity_profile(model_id: int = 0) -> CameraProfile:
    return CameraProfile(model_id)


def _k(rows):
    return tuple(tuple(float(v) for v in r) for r in rows)


# directional interpolation kernels: each model pulls missing samples from a different corner
DEFAULT_PROFILES = (
    CameraProfile(0, 0, _k([[3, 3, 0.2], [3, 1, 0.2], [0.2, 0.2, 0.2]]), 0.75, 0.003, (1.08, 1.0, 0.9)),
    CameraProfile(1, 1, _k([[0.2, 0.2, 0.2], [0.2, 1, 3], [0.2, 3, 3]]), 0.9, 0.012, (0.92, 1.0, 1.1)),
    CameraProfile(2, 2, _k([[0.2, 3, 3], [0.2, 1, 3], [0.2, 0.2, 0.2]]), 1.1, 0.024, (1.0, 1.0, 1.0)),
    CameraProfile(3, 3, _k([[0.2, 0.2, 0.2], [3, 1, 0.2], [3, 3, 0.2]]), 1.3, 0.04, (1.1, 0.95, 1.03)),
)


def model_profile(model_id: int, seed: int = 0) -> CameraProfile:
    """Profile of a camera model; the first four are fixed, later ones are seeded draws."""
    if model_id < len(DEFAULT_PROFILES):
        return DEFAULT_PROFILES[model_id]
    rng = make_rng(seed, 11, model_id)
    kernel = rng.uniform(0.2, 3.0, size=(3, 3))
    return CameraProfile(model_id, int(rng.integers(4)), _k(kernel), float(rng.uniform(0.7, 1.4)),
                         float(rng.uniform(0.004, 0.04)), tuple(float(g) for g in rng.uniform(0.9, 1.1, 3)))


def instance_profile(profile: CameraProfile, instance: int, seed: int = 0) -> CameraProfile:
    """Small seeded perturbation of a model profile for one physical device."""
    rng = make_rng(seed, 12, profile.model_id, instance)
    kernel = profile.kernel_array
    if not profile.is_neutral_kernel:
        kernel = kernel * rng.uniform(0.95, 1.05, size=(3, 3))
    gains = np.clip(np.asarray(profile.gains) * rng.uniform(0.98, 1.02, 3), 0.8, 1.2)
    return replace(profile, kernel=_k(kernel),
                   gamma=float(np.clip(profile.gamma * rng.uniform(0.98, 1.02), 0.6, 1.6)),
                   sigma=float(np.clip(profile.sigma * rng.uniform(0.92, 1.08), 0.0, 0.05)),
                   gains=tuple(float(g) for g in gains))


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneSpec:
    height: int = 320
    width: int = 320
    weights: tuple = (0.3, 0.45, 0.17, 0.08)
    seed: int = 0
    cell_size: int = 112

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (4,) or (w < 0).any() or not np.isclose(w.sum(), 1.0, atol=1e-9):
            raise ValueError(f"content weights must be 4 non-negative values summing to 1, got {self.weights}")
        if self.height < 64 or self.width < 64:
            raise ValueError("scene must be at least 64x64")


def scene_layout(spec: SceneSpec) -> np.ndarray:
    """Per-pixel content type: Voronoi cells, each drawn from the mix weights."""
    rng = make_rng(spec.seed, 21)
    h, w = spec.height, spec.width
    n = max(1, round(h * w / spec.cell_size ** 2))
    pts = rng.uniform(0, 1, size=(n, 2)) * (h, w)
    kinds = rng.choice(4, size=n, p=np.asarray(spec.weights, dtype=float))
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return kinds[d.argmin(axis=-1)].astype(np.uint8)


def generate_scene(spec: SceneSpec, return_layout: bool = False):
    """Seeded H x W x 3 scene in [0, 1] composited from the four content types."""
    rng = make_rng(spec.seed, 22)
    h, w = spec.height, spec.width
    layout = scene_layout(spec)
    img = np.empty((h, w, 3), dtype=np.float64)

    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * yy + np.sin(theta) * xx
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.1, 0.85, size=(2, 3))
    smooth = c0 + ramp[..., None] * (c1 - c0)

    white = rng.normal(size=(h, w, 3))
    white = 0.6 * white + 0.4 * white.mean(axis=2, keepdims=True)
    tex = ndimage.gaussian_filter(white, sigma=(rng.uniform(0.5, 1.2),) * 2 + (0,))
    tex = tex / max(tex.std(), 1e-9) * rng.uniform(0.1, 0.2)
    tex = np.clip(rng.uniform(0.3, 0.65, size=3) + tex, 0.02, 0.95)

    flat = rng.uniform(0.1, 0.85, size=3)

    img[layout == SMOOTH] = smooth[layout == SMOOTH]
    img[layout == TEXTURE] = tex[layout == TEXTURE]
    img[layout == FLAT] = flat
    img[layout == SATURATED] = 1.0
    img = img.astype(np.float32)
    return (img, layout) if return_layout else img


# ---------------------------------------------------------------------------
# camera pipeline


def cfa_masks(h: int, w: int, phase: int) -> np.ndarray:
    """Boolean H x W x 3 masks of the sampled channel at each pixel."""
    dy, dx = _PHASES[phase]
    yy, xx = np.mgrid[0:h, 0:w]
    ch = _BAYER[(yy + dy) % 2, (xx + dx) % 2]
    return np.stack([ch == c for c in range(3)], axis=-1)


def demosaic(raw: np.ndarray, masks: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Normalized-convolution demosaicing: missing samples are kernel-weighted means of known ones."""
    out = np.empty(masks.shape, dtype=np.float64)
    for c in range(3):
        m = masks[..., c].astype(np.float64)
        num = ndimage.correlate(raw * m, kernel, mode="mirror")
        den = ndimage.correlate(m, kernel, mode="mirror")
        est = num / np.maximum(den, 1e-12)
        out[..., c] = np.where(masks[..., c], raw, est)
    return out


def apply_camera_pipeline(scene: np.ndarray, profile: CameraProfile, seed: int = 0) -> np.ndarray:
    """mosaic -> demosaic -> channel gains -> tone curve -> sensor noise -> clamp.

    A neutral (delta) kernel models an ideal full-colour sensor: the Bayer
    stage is skipped.  Pixels saturated in every channel of the scene are
    blown highlights and come out as pure 1.0 regardless of the profile.
    """
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim != 3 or scene.shape[2] != 3:
        raise ValueError(f"scene must be H x W x 3, got {scene.shape}")
    h, w, _ = scene.shape
    if profile.is_neutral_kernel:
        img = scene.copy()
    else:
        masks = cfa_masks(h, w, profile.cfa_phase)
        raw = (scene * masks).sum(axis=-1)
        img = demosaic(raw, masks, profile.kernel_array)
    gains = np.asarray(profile.gains, dtype=np.float64)
    if not np.all(gains == 1.0):
        img = img * gains
    img = np.clip(img, 0.0, 1.0)
    if profile.gamma != 1.0:
        img = img ** profile.gamma
    if profile.sigma > 0:
        img = img + make_rng(seed, 31).normal(0.0, profile.sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    blown = (scene >= 1.0).all(axis=-1)
    img[blown] = 1.0
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SynthConfig:
    num_models: int = 4
    instances_per_model: int = 2
    scenes: int = 12
    images_per_scene: int = 8
    size: int = 320
    base_weights: tuple = (0.3, 0.45, 0.17, 0.08)
    concentration: float = 20.0
    image_format: str = "ppm"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_models < 2:
            raise ValueError("num_models must be >= 2")
        if self.instances_per_model < 2:
            raise ValueError("instances_per_model must be >= 2")
        if self.scenes < 1 or self.images_per_scene < 1:
            raise ValueError("scenes and images_per_scene must be >= 1")
        SceneSpec(self.size, self.size, tuple(self.base_weights))  # validates weights and size
        if self.image_format not in ("ppm", "png"):
            raise ValueError(f"image_format must be ppm or png, got {self.image_format!r}")


def scene_spec_for(cfg: SynthConfig, scene: int, image: int) -> SceneSpec:
    """Scene content shared by every device shooting (scene, image)."""
    rng = make_rng(cfg.seed, 41, scene)
    weights = rng.dirichlet(cfg.concentration * np.asarray(cfg.base_weights, dtype=float) + 1e-3)
    weights = weights / weights.sum()
    return SceneSpec(cfg.size, cfg.size, tuple(float(x) for x in weights),
                     seed=int(make_rng(cfg.seed, 42, scene, image).integers(2**62)))


def generate_dataset(cfg: SynthConfig, out_dir) -> "Catalog":
    """Write images, content layouts and a manifest; returns the catalog."""
    from .training import Catalog, ImageRecord, write_manifest

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "layouts").mkdir(parents=True, exist_ok=True)
    records = []
    for scene in range(cfg.scenes):
        for image in range(cfg.images_per_scene):
            spec = scene_spec_for(cfg, scene, image)
            content, layout = generate_scene(spec, return_layout=True)
            write_image(out_dir / "layouts" / f"s{scene:03d}_i{image:02d}.pgm", layout)
            for model in range(cfg.num_models):
                base = model_profile(model, cfg.seed)
                for inst in range(cfg.instances_per_model):
                    prof = instance_profile(base, inst, cfg.seed)
                    noise_seed = int(make_rng(cfg.seed, 43, scene, image, model, inst).integers(2**62))
                    img = apply_camera_pipeline(content, prof, seed=noise_seed)
                    name = f"m{model}_d{inst}_s{scene:03d}_i{image:02d}.{cfg.image_format}"
                    write_image(out_dir / "images" / name, img)
                    records.append(ImageRecord(image_path=f"images/{name}", model_id=str(model),
                                               instance_id=f"{model}-{inst}", scene_id=str(scene)))
    catalog = Catalog(records, root=out_dir)
    write_manifest(catalog, out_dir / "manifest.csv")
    log.info("wrote %d images to %s", len(records), out_dir)
    return catalog


def layout_path(image_path) -> Path:
    """Content-layout file of a generated image (shared by all devices)."""
    p = Path(image_path)
    _, _, scene, image = p.stem.split("_")
    return p.parent.parent / "layouts" / f"{scene}_{image}.pgm"
