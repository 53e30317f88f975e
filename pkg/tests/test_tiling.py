import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isup_grading.core import PatchRecord
from isup_grading.errors import EmptySlideError, ParameterError
from isup_grading.tiling import (
    SlideImage,
    extract_patches,
    mean_intensity,
    reassemble,
    select_bag,
    tissue_fraction,
)

PINK = (200, 100, 180)


def _slide(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return SlideImage("s", rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def test_grid_counts():
    assert len(extract_patches(_slide(512, 512))) == 4
    patches = extract_patches(_slide(300, 300))
    assert len(patches) == 4
    # padded remainder is white
    assert (patches[3].pixels[44:, 44:] == 255).all()


def test_row_major_order():
    patches = extract_patches(_slide(512, 768))
    assert [p.grid for p in patches] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert [p.index for p in patches] == list(range(6))


def test_empty_slide():
    with pytest.raises(EmptySlideError):
        extract_patches(SlideImage("e", np.zeros((0, 0, 3), dtype=np.uint8)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 700), st.integers(1, 700), st.integers(0, 100))
def test_reassembly_is_exact(h, w, seed):
    slide = _slide(h, w, seed)
    assert np.array_equal(reassemble(extract_patches(slide), h, w), slide.pixels)


def _pixel_is_tissue(rgb):
    h, s, v = colorsys.rgb_to_hsv(*(c / 255 for c in rgb))
    return s > 0.07 and v < 0.95


def test_tissue_fraction_matches_pixel_count_oracle():
    rng = np.random.default_rng(3)
    pixels = np.full((512, 512, 3), 255, dtype=np.uint8)
    mask = rng.random((512, 512)) < 0.3
    pixels[mask] = PINK
    pixels[~mask & (rng.random((512, 512)) < 0.2)] = (128, 128, 128)  # gray: no saturation
    for p in extract_patches(SlideImage("s", pixels)):
        r, c = p.grid
        tile = pixels[r * 256:(r + 1) * 256, c * 256:(c + 1) * 256].reshape(-1, 3)
        expected = sum(_pixel_is_tissue(tuple(px)) for px in tile[::7]) / len(tile[::7])
        sub = tissue_fraction(tile[::7].reshape(1, -1, 3))
        assert sub == pytest.approx(expected, abs=1e-6)
        assert p.tissue_fraction == pytest.approx(mask[r * 256:(r + 1) * 256, c * 256:(c + 1) * 256].mean(), abs=1e-6)


def test_tissue_fraction_examples():
    white = np.full((256, 256, 3), 255, np.uint8)
    stained = np.zeros((256, 256, 3), np.uint8) + np.array(PINK, np.uint8)
    quarter = white.copy()
    quarter[:64] = PINK
    assert tissue_fraction(white) == 0.0
    assert tissue_fraction(stained) == 1.0
    assert tissue_fraction(quarter) == pytest.approx(0.25, abs=1e-6)


def test_mean_intensity_examples():
    half = np.zeros((256, 256, 3), np.uint8)
    half[:128] = 255
    assert mean_intensity(np.full((256, 256, 3), 255, np.uint8)) == 255.0
    assert mean_intensity(np.zeros((256, 256, 3), np.uint8)) == 0.0
    assert mean_intensity(half) == 127.5


def test_statistics_invariant_under_duplication():
    px = _slide(256, 256).pixels
    doubled = np.concatenate([px, px])
    assert tissue_fraction(doubled) == pytest.approx(tissue_fraction(px), abs=1e-12)
    assert mean_intensity(doubled) == pytest.approx(mean_intensity(px), abs=1e-9)


def _records(intensities):
    return [PatchRecord("s", i, mean_intensity=float(v)) for i, v in enumerate(intensities)]


def test_select_bag_darkest_ascending():
    rng = np.random.default_rng(0)
    patches = _records(rng.uniform(0, 255, 100))
    bag = select_bag(patches, 36)
    assert len(bag) == 36
    vals = [p.mean_intensity for p in bag]
    assert vals == sorted(vals)
    assert vals[-1] <= min(p.mean_intensity for p in patches if p not in bag)


def test_select_bag_cyclic_padding():
    patches = _records(np.linspace(200, 10, 10))
    bag = select_bag(patches, 36)
    ranked = sorted(patches, key=lambda p: p.mean_intensity)
    assert [p.index for p in bag] == [ranked[i % 10].index for i in range(36)]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from([10.0, 20.0, 30.0]), min_size=1, max_size=50), st.randoms())
def test_select_bag_permutation_stable(vals, rnd):
    patches = _records(vals)
    shuffled = patches[:]
    rnd.shuffle(shuffled)
    assert [p.index for p in select_bag(shuffled, 12)] == [p.index for p in select_bag(patches, 12)]


def test_select_bag_errors():
    with pytest.raises(EmptySlideError):
        select_bag([], 36)
    with pytest.raises(ParameterError):
        select_bag(_records([1.0]), 0)
