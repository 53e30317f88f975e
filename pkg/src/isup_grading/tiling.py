"""Slide tiling, per-patch statistics and bag selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import PatchRecord
from .errors import EmptySlideError, ParameterError

log = logging.getLogger(__name__)

PATCH_SIZE = 256
BAG_SIZE = 36
SATURATION_MIN = 0.07
VALUE_MAX = 0.95


@dataclass(frozen=True)
class SlideImage:
    slide_id: str
    pixels: np.ndarray


def tissue_mask(pixels: np.ndarray, sat_min: float = SATURATION_MIN, value_max: float = VALUE_MAX) -> np.ndarray:
    """Boolean H x W mask: HSV saturation above ``sat_min`` and value below ``value_max``."""
    rgb = np.asarray(pixels, dtype=np.float64) / 255.0
    vmax = rgb.max(axis=-1)
    vmin = rgb.min(axis=-1)
    sat = np.divide(vmax - vmin, vmax, out=np.zeros_like(vmax), where=vmax > 0)
    return (sat > sat_min) & (vmax < value_max)


def tissue_fraction(patch, sat_min: float = SATURATION_MIN, value_max: float = VALUE_MAX) -> float:
    pixels = patch.load_pixels() if isinstance(patch, PatchRecord) else patch
    return float(tissue_mask(pixels, sat_min, value_max).mean())


def mean_intensity(patch) -> float:
    pixels = patch.load_pixels() if isinstance(patch, PatchRecord) else patch
    return float(np.asarray(pixels, dtype=np.float64).mean())


def make_patch(slide_id: str, index: int, pixels: np.ndarray, grid=(0, 0), **kw) -> PatchRecord:
    return PatchRecord(
        slide_id=slide_id,
        index=index,
        pixels=pixels,
        tissue_fraction=tissue_fraction(pixels),
        mean_intensity=mean_intensity(pixels),
        grid=tuple(grid),
        **kw,
    )


def with_pixels(patch: PatchRecord, pixels: np.ndarray) -> PatchRecord:
    """Copy of ``patch`` carrying new pixels and recomputed statistics."""
    return replace(
        patch, pixels=pixels, tissue_fraction=tissue_fraction(pixels), mean_intensity=mean_intensity(pixels)
    )


def pad_to_grid(pixels: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    h, w = pixels.shape[:2]
    ph = -h % patch_size
    pw = -w % patch_size
    if ph == 0 and pw == 0:
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), constant_values=255)


def downsample(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Integer block-mean downsampling (e.g. 10X -> 5X with factor 2)."""
    if factor == 1:
        return pixels
    h, w = pixels.shape[:2]
    h2, w2 = h // factor, w // factor
    blocks = pixels[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor, 3).astype(np.float64)
    return np.round(blocks.mean(axis=(1, 3))).astype(np.uint8)


def extract_patches(slide: SlideImage, patch_size: int = PATCH_SIZE) -> list[PatchRecord]:
    """Non-overlapping row-major tiles; the right/bottom remainder is padded white."""
    pixels = np.asarray(slide.pixels)
    if pixels.ndim != 3 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise EmptySlideError(f"slide {slide.slide_id} has no pixels (shape {pixels.shape})")
    if pixels.shape[2] == 4:
        pixels = pixels[..., :3]
    padded = pad_to_grid(pixels.astype(np.uint8, copy=False), patch_size)
    rows = padded.shape[0] // patch_size
    cols = padded.shape[1] // patch_size
    patches = []
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size].copy()
            patches.append(make_patch(slide.slide_id, r * cols + c, tile, grid=(r, c)))
    return patches


def reassemble(patches: list[PatchRecord], height: int, width: int, patch_size: int = PATCH_SIZE) -> np.ndarray:
    rows = -(-height // patch_size)
    cols = -(-width // patch_size)
    canvas = np.empty((rows * patch_size, cols * patch_size, 3), dtype=np.uint8)
    for p in patches:
        r, c = p.grid
        canvas[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = p.load_pixels()
    return canvas[:height, :width]


def select_bag(patches: list[PatchRecord], n: int = BAG_SIZE) -> list[PatchRecord]:
    """The ``n`` darkest patches in ascending mean intensity.

    Ties break on patch index. Short slides are padded by cycling the sorted
    list so every bag has exactly ``n`` entries.
    """
    if n < 1:
        raise ParameterError(f"bag size must be >= 1, got {n}")
    if not patches:
        raise EmptySlideError("cannot select a bag from an empty patch list")
    ranked = sorted(patches, key=lambda p: (p.mean_intensity, p.index))
    if len(ranked) >= n:
        return ranked[:n]
    return [ranked[i % len(ranked)] for i in range(n)]


def load_slide(path) -> SlideImage:
    from PIL import Image

    path = Path(path)
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return SlideImage(path.stem, pixels)


def save_png(path, pixels: np.ndarray, compress_level: int = 1) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path, compress_level=compress_level)


def tile_directory(input_dir, output_dir, patch_size: int = PATCH_SIZE, bag_size: int = BAG_SIZE,
                   downsample_factor: int = 1) -> Path:
    """Tile every PNG/TIFF slide in ``input_dir`` into ``output_dir/patches`` plus ``patches.jsonl``.

    Only the selected bag plus bookkeeping is written; each manifest row records
    whether the patch made it into the bag.
    """
    from .core import write_jsonl

    input_dir, output_dir = Path(input_dir), Path(output_dir)
    files = sorted(p for p in input_dir.iterdir() if p.suffix.lower() in {".png", ".tif", ".tiff"})
    if not files:
        raise EmptySlideError(f"no PNG or TIFF slides under {input_dir}")
    rows = []
    for f in files:
        slide = load_slide(f)
        slide = SlideImage(slide.slide_id, downsample(slide.pixels, downsample_factor))
        patches = extract_patches(slide, patch_size)
        bag_ids = {p.index for p in select_bag(patches, bag_size)}
        sdir = output_dir / "patches" / slide.slide_id
        sdir.mkdir(parents=True, exist_ok=True)
        for p in patches:
            ppath = sdir / f"{p.index:04d}.png"
            save_png(ppath, p.pixels)
            row = replace(p, path=str(ppath)).to_json()
            row["in_bag"] = p.index in bag_ids
            rows.append(row)
        log.info("tiled %s into %d patches", slide.slide_id, len(patches))
    return write_jsonl(output_dir / "patches.jsonl", rows)
