"""Aligned / non-aligned two-crop views and H&E stain + blur augmentation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from nestkd import kernels
from nestkd.errors import InvalidCrop, InvalidSize

VIEW_SIZE = 224
AREA_RANGE = (0.25, 1.0)
ASPECT_RANGE = (0.9, 1.1)
MAX_CROP_ATTEMPTS = 10

# Ruifrok & Johnston optical-density vectors for hematoxylin, eosin and DAB (rows).
RGB_FROM_HED = np.array(
    [[0.65, 0.70, 0.29],
     [0.07, 0.99, 0.11],
     [0.27, 0.57, 0.78]]
)
RGB_FROM_HED = RGB_FROM_HED / np.linalg.norm(RGB_FROM_HED, axis=1, keepdims=True)
HED_FROM_RGB = np.linalg.inv(RGB_FROM_HED)

# -log10(I / 255) with I clamped to >= 1 so black stays finite
_OD_LUT = (-np.log10(np.maximum(np.arange(256), 1) / 255.0)).astype(np.float64)
# total optical density at which a pixel counts as fully stained for the shift term
_TISSUE_OD = 0.15


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    w: int
    h: int
    hflip: bool = False
    vflip: bool = False

    def check(self, width: int, height: int) -> None:
        if self.w < 1 or self.h < 1 or self.x0 < 0 or self.y0 < 0:
            raise InvalidCrop(f"{self} has a negative origin or empty extent")
        if self.x0 + self.w > width or self.y0 + self.h > height:
            raise InvalidCrop(f"{self} exceeds source {width}x{height}")

    def area_fraction(self, width: int, height: int) -> float:
        return (self.w * self.h) / (width * height)


@dataclass(frozen=True)
class VisualAugConfig:
    """Stain perturbation and blur settings.

    Each stain channel (H, E, DAB) concentration is multiplied by a factor in
    ``[1 - hed_scale, 1 + hed_scale]`` and shifted by a value in
    ``[-hed_shift, hed_shift]``. The shift is weighted by how stained the
    pixel is, so unstained (white) background is left untouched.
    """

    hed_scale: tuple[float, float, float] = (0.05, 0.05, 0.05)
    hed_shift: tuple[float, float, float] = (0.02, 0.02, 0.02)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_probability: float = 0.5

    def __post_init__(self):
        for name in ("hed_scale", "hed_shift"):
            v = getattr(self, name)
            if np.isscalar(v):
                v = (float(v),) * 3
            v = tuple(float(x) for x in v)
            if len(v) != 3 or not all(math.isfinite(x) and x >= 0 for x in v):
                raise ValueError(f"{name} must be three finite non-negative values")
            object.__setattr__(self, name, v)
        if any(s >= 1.0 for s in self.hed_scale):
            raise ValueError("hed_scale must be < 1 so stain factors stay positive")
        lo, hi = (float(x) for x in self.blur_sigma)
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo <= hi):
            raise ValueError("blur_sigma must be a finite (low, high) pair with 0 <= low <= high")
        object.__setattr__(self, "blur_sigma", (lo, hi))
        p = float(self.blur_probability)
        if not 0.0 <= p <= 1.0:
            raise ValueError("blur_probability must lie in [0, 1]")
        object.__setattr__(self, "blur_probability", p)

    @classmethod
    def disabled(cls) -> "VisualAugConfig":
        return cls(hed_scale=0.0, hed_shift=0.0, blur_sigma=(0.0, 0.0), blur_probability=0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ViewSet:
    """Views of one tile: index 0 is the student, then one per teacher."""

    aligned: list[np.ndarray]
    nonaligned: list[np.ndarray] | None
    aligned_crop: CropSpec
    nonaligned_crops: list[CropSpec] | None
    model_ids: list[str] = field(default_factory=list)


def sample_crop(source_size, rng) -> CropSpec:
    """Random crop covering 25-100% of the tile with aspect ratio in [0.9, 1.1].

    Draws that do not fit are re-sampled up to 10 times; after that the full
    tile is used.
    """
    width, height = (int(v) for v in source_size)
    if width < VIEW_SIZE or height < VIEW_SIZE:
        raise InvalidSize(f"source {width}x{height} is smaller than {VIEW_SIZE}px")
    src_area = width * height
    src_aspect = width / height
    for _ in range(MAX_CROP_ATTEMPTS):
        frac = rng.uniform(*AREA_RANGE)
        aspect = rng.uniform(*ASPECT_RANGE) * src_aspect
        w = int(round(math.sqrt(frac * src_area * aspect)))
        h = int(round(math.sqrt(frac * src_area / aspect)))
        if not (1 <= w <= width and 1 <= h <= height):
            continue
        if not AREA_RANGE[0] <= (w * h) / src_area <= AREA_RANGE[1]:
            continue
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        hflip = bool(rng.random() < 0.5)
        vflip = bool(rng.random() < 0.5)
        return CropSpec(x0, y0, w, h, hflip, vflip)
    return CropSpec(0, 0, width, height, bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def apply_spatial(tile: np.ndarray, crop: CropSpec, size: int = VIEW_SIZE) -> np.ndarray:
    """Crop, flip and bilinearly resize to ``size`` x ``size``."""
    height, width = tile.shape[:2]
    crop.check(width, height)
    region = tile[crop.y0:crop.y0 + crop.h, crop.x0:crop.x0 + crop.w]
    if region.shape[:2] != (size, size):
        region = np.asarray(Image.fromarray(np.ascontiguousarray(region)).resize((size, size), Image.BILINEAR))
    if crop.hflip:
        region = region[:, ::-1]
    if crop.vflip:
        region = region[::-1]
    return np.ascontiguousarray(region)


def perturb_stains(image: np.ndarray, scale, shift, backend=None) -> np.ndarray:
    """Scale/shift the H, E, DAB concentrations of a uint8 RGB image.

    Concentrations are ``od @ HED_FROM_RGB``; the scaled and shifted values go
    back through ``RGB_FROM_HED``. Both 3x3 maps fold into one matrix, and the
    shift is weighted by optical density so white background stays white.
    """
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    matrix = np.ascontiguousarray((HED_FROM_RGB * scale) @ RGB_FROM_HED)
    bias = np.ascontiguousarray(shift @ RGB_FROM_HED)
    image = np.ascontiguousarray(image, dtype=np.uint8)
    return kernels.stain_transform(image, matrix, bias, _OD_LUT, _TISSUE_OD, backend=backend)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image.copy()
    out = gaussian_filter(image.astype(np.float32), sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_visual(image: np.ndarray, config: VisualAugConfig, rng) -> np.ndarray:
    scale = 1.0 + np.array([rng.uniform(-a, a) for a in config.hed_scale])
    shift = np.array([rng.uniform(-b, b) for b in config.hed_shift])
    blur = rng.random() < config.blur_probability
    sigma = rng.uniform(*config.blur_sigma)
    out = image
    if np.any(scale != 1.0) or np.any(shift != 0.0):
        out = perturb_stains(out, scale, shift)
    if blur and sigma > 0:
        out = gaussian_blur(out, sigma)
    return out if out is not image else image.copy()


def make_training_views(tile: np.ndarray, n_teachers: int, config: VisualAugConfig, rng,
                        include_nonaligned: bool = True, model_ids=None) -> ViewSet:
    """Views for the student (index 0) and each teacher.

    One crop is shared by all aligned views; each model also gets its own
    independent non-aligned crop. Every view gets its own stain/blur draw.
    """
    height, width = tile.shape[:2]
    n_models = 1 + int(n_teachers)
    crop_rng, *streams = rng.spawn(1 + n_models + 2 * n_models)
    aligned_crop = sample_crop((width, height), crop_rng)
    nonaligned_rngs = streams[:n_models]
    visual_rngs = streams[n_models:]
    base = apply_spatial(tile, aligned_crop)
    aligned = [apply_visual(base, config, visual_rngs[i]) for i in range(n_models)]
    nonaligned = nonaligned_crops = None
    if include_nonaligned:
        nonaligned_crops = [sample_crop((width, height), r) for r in nonaligned_rngs]
        nonaligned = [
            apply_visual(apply_spatial(tile, c), config, visual_rngs[n_models + i])
            for i, c in enumerate(nonaligned_crops)
        ]
    if model_ids is None:
        model_ids = ["student"] + [f"teacher{i}" for i in range(n_teachers)]
    return ViewSet(aligned, nonaligned, aligned_crop, nonaligned_crops, list(model_ids))
