"""Procedural slide corpus with planted Gleason-pattern regions and exact masks.

Each slide is rendered in stain-concentration space (hematoxylin and eosin
optical densities) and converted to RGB through a slide-specific jittered
stain matrix, so slides from the same grade differ in colour the way slides
from different labs do. Tissue classes differ in gland (lumen) size and
nuclear density:

    benign  large lumens, sparse nuclei
    GG3     medium glands
    GG4     small fused glands, denser nuclei
    GG5     no lumens, sheets of nuclei
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import GLEASON_PAIRS, ISUP_GRADES, SlideRecord, write_jsonl
from .errors import ParameterError
from .stain import RGB_FROM_HED
from .tiling import SlideImage

log = logging.getLogger(__name__)

BACKGROUND = 255
# mask codes: 0 benign tissue, 3/4/5 Gleason pattern, 255 background


@dataclass(frozen=True)
class TextureParams:
    lumen_sigma: float
    lumen_cover: float
    nuclei_sigma: float
    nuclei_cover: float
    stroma_od: float = 0.30
    nuclei_od: float = 0.95


DEFAULT_TEXTURES = {
    0: TextureParams(lumen_sigma=9.0, lumen_cover=0.22, nuclei_sigma=1.4, nuclei_cover=0.06),
    3: TextureParams(lumen_sigma=4.5, lumen_cover=0.20, nuclei_sigma=1.4, nuclei_cover=0.16),
    4: TextureParams(lumen_sigma=2.2, lumen_cover=0.12, nuclei_sigma=1.4, nuclei_cover=0.32),
    5: TextureParams(lumen_sigma=2.0, lumen_cover=0.0, nuclei_sigma=1.2, nuclei_cover=0.55),
}


@dataclass(frozen=True)
class SynthSpec:
    slides_per_grade: int = 10
    size: int = 1024
    textures: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    # fractions of the tissue area covered by the primary / secondary pattern
    primary_fraction: tuple[float, float] = (0.50, 0.60)
    secondary_fraction: tuple[float, float] = (0.22, 0.32)
    tissue_cover: float = 0.85
    region_scale: float = 150.0
    # per-slide stain jitter: multiplicative on H and E density, additive offset
    stain_scale: tuple[float, float] = (0.80, 1.20)
    stain_shift: tuple[float, float] = (-0.04, 0.04)
    seed: int = 7
    grades: tuple[int, ...] = ISUP_GRADES

    def validate(self) -> None:
        if self.slides_per_grade < 0:
            raise ParameterError("slides_per_grade must be non-negative")
        if self.size < 256:
            raise ParameterError("slides must be at least 256 pixels on a side")
        plo, phi = self.primary_fraction
        slo, shi = self.secondary_fraction
        if not (0 < plo <= phi and 0 < slo <= shi):
            raise ParameterError("lesion fractions must be positive, non-empty intervals")
        if phi + shi > 1.0:
            raise ParameterError(f"lesion fractions can sum to {phi + shi:.2f} > 1")
        if shi >= plo:
            raise ParameterError("secondary fraction must stay below the primary fraction")
        if not 0 < self.tissue_cover <= 1:
            raise ParameterError("tissue_cover must lie in (0, 1]")


@dataclass
class SynthSlide:
    image: SlideImage
    record: SlideRecord
    mask: np.ndarray


def _blobs(rng, shape, sigma, cover):
    """Boolean blob mask from thresholded smoothed noise covering ``cover`` of the area."""
    if cover <= 0:
        return np.zeros(shape, dtype=bool)
    # coarse blobs are drawn at reduced resolution
    f = 2 if sigma >= 4 else 1
    small = (-(-shape[0] // f), -(-shape[1] // f))
    noise = ndimage.gaussian_filter(rng.standard_normal(small, dtype=np.float32), sigma / f, mode="wrap")
    if f > 1:
        noise = np.repeat(np.repeat(noise, f, axis=0), f, axis=1)[: shape[0], : shape[1]]
    return noise > np.quantile(noise, 1.0 - cover)


def _smooth_field(rng, shape, scale):
    """Low-frequency random field; drawn at reduced resolution and upsampled."""
    f = max(1, int(scale // 8))
    small = (-(-shape[0] // f), -(-shape[1] // f))
    g = ndimage.gaussian_filter(rng.standard_normal(small), scale / f, mode="reflect")
    g = np.repeat(np.repeat(g, f, axis=0), f, axis=1)[: shape[0], : shape[1]]
    return ndimage.uniform_filter(g, size=f)


def _tissue_region(rng, size, cover):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    wobble = _smooth_field(rng, (size, size), size / 6)
    wobble = wobble / (np.abs(wobble).max() + 1e-12)
    radius = np.sqrt((xx / 0.5) ** 2 + (yy / 0.5) ** 2) + 0.25 * wobble
    return radius <= np.quantile(radius, cover)


def _class_map(rng, spec: SynthSpec, tissue, primary, secondary, fracs):
    cls = np.full(tissue.shape, BACKGROUND, dtype=np.uint8)
    cls[tissue] = 0
    if primary == 0:
        return cls
    n_tissue = tissue.sum()
    f1 = _smooth_field(rng, tissue.shape, spec.region_scale)
    order = np.argsort(-f1[tissue], kind="stable")
    idx = np.flatnonzero(tissue.ravel())[order]
    n_p = int(round(fracs[0] * n_tissue))
    n_s = int(round(fracs[1] * n_tissue))
    flat = cls.ravel()
    flat[idx[:n_p]] = primary
    # secondary pattern grows out of the next band of the same field plus its own noise
    rest = idx[n_p:]
    f2 = _smooth_field(rng, tissue.shape, spec.region_scale).ravel()[rest]
    pick = rest[np.argsort(-f2, kind="stable")[:n_s]]
    flat[pick] = secondary
    return flat.reshape(tissue.shape)


def render_slide(rng, spec: SynthSpec, classes: np.ndarray) -> np.ndarray:
    shape = classes.shape
    h_od = np.zeros(shape, dtype=np.float32)
    e_od = np.zeros(shape, dtype=np.float32)
    grain = ndimage.gaussian_filter(rng.standard_normal(shape, dtype=np.float32), 1.0)
    for code, tex in spec.textures.items():
        region = classes == code
        if not region.any():
            continue
        lumen = _blobs(rng, shape, tex.lumen_sigma, tex.lumen_cover)
        nuclei = _blobs(rng, shape, tex.nuclei_sigma, tex.nuclei_cover) & ~lumen
        e = np.where(lumen, 0.02, tex.stroma_od * (1.0 + 0.15 * grain))
        h = np.where(nuclei, tex.nuclei_od * (1.0 + 0.1 * grain), 0.08 + 0.02 * grain)
        h = np.where(lumen, 0.02, h)
        h_od[region] = h[region]
        e_od[region] = e[region]
    lo, hi = spec.stain_scale
    slo, shi = spec.stain_shift
    scale = rng.uniform(lo, hi, size=2)
    shift = rng.uniform(slo, shi, size=2)
    tissue = classes != BACKGROUND
    h_od = np.where(tissue, np.clip(h_od * scale[0] + shift[0], 0, None), 0)
    e_od = np.where(tissue, np.clip(e_od * scale[1] + shift[1], 0, None), 0)
    od = h_od[..., None] * RGB_FROM_HED[0] + e_od[..., None] * RGB_FROM_HED[1]
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _pair_for(grade: int, k: int) -> tuple[int, int]:
    pairs = GLEASON_PAIRS[grade]
    return pairs[k % len(pairs)]


def generate_slide(spec: SynthSpec, grade: int, k: int, slide_seed) -> SynthSlide:
    rng = np.random.default_rng(slide_seed)
    primary, secondary = _pair_for(grade, k)
    tissue = _tissue_region(rng, spec.size, spec.tissue_cover)
    if primary == 0:
        fracs = (0.0, 0.0)
    else:
        fracs = (rng.uniform(*spec.primary_fraction), rng.uniform(*spec.secondary_fraction))
    classes = _class_map(rng, spec, tissue, primary, secondary, fracs)
    pixels = render_slide(rng, spec, classes)
    sid = f"g{grade}_{k:03d}"
    record = SlideRecord.from_gleason(sid, primary, secondary)
    return SynthSlide(SlideImage(sid, pixels), record, classes)


def generate_corpus(spec: SynthSpec = SynthSpec()) -> list[SynthSlide]:
    """Slides for every grade in ``spec.grades``, each with a per-slide derived seed."""
    spec.validate()
    out = []
    for grade in spec.grades:
        for k in range(spec.slides_per_grade):
            out.append(generate_slide(spec, grade, k, np.random.SeedSequence([spec.seed, grade, k])))
    return out


def patch_classes(mask: np.ndarray, patch_size: int = 256, min_tissue: float = 0.0) -> dict[tuple[int, int], int]:
    """Ground-truth class per grid tile: the majority tissue class, -1 for tissue-free tiles."""
    from .tiling import pad_to_grid

    padded = pad_to_grid(mask[..., None], patch_size)[..., 0]
    rows, cols = padded.shape[0] // patch_size, padded.shape[1] // patch_size
    out = {}
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            counts = {code: int((tile == code).sum()) for code in (0, 3, 4, 5)}
            total = sum(counts.values())
            if total == 0 or total < min_tissue * tile.size:
                out[(r, c)] = -1
            else:
                out[(r, c)] = max(counts, key=lambda code: (counts[code], -code))
    return out


def pure_patch_classes(mask: np.ndarray, patch_size: int = 256) -> dict[tuple[int, int], int]:
    """Tiles lying entirely inside one planted class; other tiles are omitted."""
    from .tiling import pad_to_grid

    padded = pad_to_grid(mask[..., None], patch_size)[..., 0]
    rows, cols = padded.shape[0] // patch_size, padded.shape[1] // patch_size
    out = {}
    for r in range(rows):
        for c in range(cols):
            tile = padded[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size]
            vals = np.unique(tile)
            if len(vals) == 1 and vals[0] != BACKGROUND:
                out[(r, c)] = int(vals[0])
    return out


def corpus_stats(records, masks=None, patch_size: int = 256) -> dict:
    """Per-grade slide histogram and, when masks are given, planted majority-class tile counts."""
    records = list(records)
    if not records:
        raise ParameterError("corpus is empty")
    hist = [0] * 6
    for r in records:
        hist[r.isup] += 1
    for g, n in enumerate(hist):
        if n == 0:
            log.warning("no slides of ISUP grade %d in corpus", g)
    out = {"slides_per_grade": hist, "total_slides": len(records)}
    if masks is not None:
        counts = {0: 0, 3: 0, 4: 0, 5: 0}
        for m in masks:
            for code in patch_classes(m, patch_size).values():
                if code >= 0:
                    counts[code] += 1
        out["patch_classes"] = {str(k): v for k, v in counts.items()}
    return out


def write_corpus(slides: list[SynthSlide], out_dir) -> Path:
    """Slides as PNG, masks under ``masks/``, and a ``corpus.jsonl`` manifest."""
    from .tiling import save_png

    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in slides:
        img_path = out_dir / "slides" / f"{s.record.slide_id}.png"
        mask_path = out_dir / "masks" / f"{s.record.slide_id}.png"
        save_png(img_path, s.image.pixels)
        from PIL import Image

        Image.fromarray(s.mask).save(mask_path, compress_level=1)
        rows.append(SlideRecord(
            s.record.slide_id, s.record.primary_gg, s.record.secondary_gg, s.record.isup,
            image_path=str(img_path), mask_path=str(mask_path),
        ))
    return write_jsonl(out_dir / "corpus.jsonl", rows)


def load_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)
