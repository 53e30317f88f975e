"""Colour deconvolution into H/E/DAB optical densities and the two augmentation pipelines.

Channel order is always (H, E, D). Optical density uses a +1 offset so that
black pixels stay finite and a pure white pixel maps to exactly zero density:

    OD = -log10((rgb + 1) / 256)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import PatchRecord
from .tiling import with_pixels

# Ruifrok & Johnston stain vectors (rows: hematoxylin, eosin, DAB in RGB optical density)
STAIN_VECTORS = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)


def stain_matrix(vectors: np.ndarray = STAIN_VECTORS) -> np.ndarray:
    """Row-normalised RGB-from-HED matrix."""
    v = np.asarray(vectors, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


RGB_FROM_HED = stain_matrix()
HED_FROM_RGB = np.linalg.inv(RGB_FROM_HED)
OD_OFFSET = 1.0
OD_SCALE = 256.0


def rgb_to_hed(pixels: np.ndarray, hed_from_rgb: np.ndarray = HED_FROM_RGB) -> np.ndarray:
    rgb = np.asarray(pixels, dtype=np.float64)
    od = -np.log10((rgb + OD_OFFSET) / OD_SCALE)
    return od @ hed_from_rgb


def hed_to_rgb(hed: np.ndarray, rgb_from_hed: np.ndarray = RGB_FROM_HED) -> np.ndarray:
    od = np.asarray(hed, dtype=np.float64) @ rgb_from_hed
    rgb = OD_SCALE * np.power(10.0, -od) - OD_OFFSET
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class StainParams:
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    beta: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        return {"alpha": list(self.alpha), "beta": list(self.beta)}


@dataclass(frozen=True)
class AugmentationConfig:
    """Ranges for the stain transform plus the standard view pipeline.

    ``mode="wide"`` draws both the factor and the bias from [0, 1];
    ``mode="centered"`` (default) perturbs around the identity using
    ``alpha_range`` and ``beta_range``.
    """

    mode: str = "centered"
    alpha_range: tuple[float, float] = (0.95, 1.05)
    beta_range: tuple[float, float] = (-0.05, 0.05)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        if self.mode not in ("centered", "wide"):
            raise ValueError(f"unknown stain sampling mode {self.mode!r}")
        for name in ("alpha_range", "beta_range", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        for name in ("flip_p", "jitter_p", "grayscale_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def identity(cls, **kw) -> "AugmentationConfig":
        base = dict(
            alpha_range=(1.0, 1.0), beta_range=(0.0, 0.0), flip_p=0.0, jitter_p=0.0,
            brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, grayscale_p=0.0, blur_p=0.0,
        )
        base.update(kw)
        return cls(**base)

    def ranges(self) -> tuple[tuple[float, float], tuple[float, float]]:
        if self.mode == "wide":
            return (0.0, 1.0), (0.0, 1.0)
        return self.alpha_range, self.beta_range


def sample_stain_params(rng: np.random.Generator, config: AugmentationConfig = AugmentationConfig()) -> StainParams:
    (alo, ahi), (blo, bhi) = config.ranges()
    alpha = rng.uniform(alo, ahi, size=3)
    beta = rng.uniform(blo, bhi, size=3)
    return StainParams(tuple(float(a) for a in alpha), tuple(float(b) for b in beta))


def modify_hed(hed: np.ndarray, params: StainParams) -> np.ndarray:
    return hed * np.asarray(params.alpha) + np.asarray(params.beta)


def stain_augment_pixels(pixels: np.ndarray, params: StainParams) -> np.ndarray:
    return hed_to_rgb(modify_hed(rgb_to_hed(pixels), params))


def stain_augment(patch: PatchRecord, params: StainParams) -> PatchRecord:
    return with_pixels(patch, stain_augment_pixels(patch.load_pixels(), params))


# ITU-R 601 luma, shared by grayscale conversion and the saturation/contrast blends
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
_RGB2YIQ = np.array(
    [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=np.float64
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _hue_matrix(shift: float) -> np.ndarray:
    """RGB -> RGB matrix rotating chroma by ``shift`` turns in YIQ space."""
    theta = 2.0 * np.pi * shift
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return (_YIQ2RGB @ rot @ _RGB2YIQ).astype(np.float32)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ _LUMA


def aug1_pixels(pixels: np.ndarray, rng: np.random.Generator, config: AugmentationConfig = AugmentationConfig()) -> np.ndarray:
    """Flip, colour jitter, grayscale and blur, in that order.

    Every random decision is drawn even when the step is skipped so the stream
    of draws does not depend on earlier outcomes.
    """
    flip = rng.random() < config.flip_p
    jitter = rng.random() < config.jitter_p
    factors = rng.uniform(-1.0, 1.0, size=4)
    order = rng.permutation(4)
    gray = rng.random() < config.grayscale_p
    blur = rng.random() < config.blur_p
    sigma = rng.uniform(*config.blur_sigma)

    img = np.asarray(pixels)
    changed = False
    if flip:
        img = img[:, ::-1]
    out = img.astype(np.float32)
    if jitter:
        strengths = (config.brightness, config.contrast, config.saturation, config.hue)
        for k in order:
            amount = strengths[k] * factors[k]
            if strengths[k] == 0.0:
                continue
            changed = True
            if k == 0:
                out = out * (1.0 + amount)
            elif k == 1:
                out = (out - _gray(out).mean()) * (1.0 + amount) + _gray(out).mean()
            elif k == 2:
                g = _gray(out)[..., None]
                out = (out - g) * (1.0 + amount) + g
            else:
                out = out @ _hue_matrix(amount).T
            out = np.clip(out, 0.0, 255.0)
    if gray:
        changed = True
        out = np.repeat(_gray(out)[..., None], 3, axis=-1)
    if blur and sigma > 0:
        changed = True
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect", truncate=3.0)
    if not changed:
        return np.ascontiguousarray(img)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def aug1_view(patch: PatchRecord, rng: np.random.Generator, config: AugmentationConfig = AugmentationConfig()) -> PatchRecord:
    return with_pixels(patch, aug1_pixels(patch.load_pixels(), rng, config))
