import logging

import numpy as np
import pytest
from sklearn.model_selection import cross_val_score
from sklearn.neighbors import NearestCentroid

from isup_grading.core import read_slide_manifest
from isup_grading.errors import ParameterError
from isup_grading.stain import rgb_to_hed
from isup_grading.synth import (
    BACKGROUND,
    SynthSpec,
    corpus_stats,
    generate_corpus,
    load_mask,
    patch_classes,
    pure_patch_classes,
    write_corpus,
)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(SynthSpec(slides_per_grade=2, size=512, seed=3))


def test_grade_zero_is_benign_only(small_corpus):
    for s in small_corpus:
        if s.record.isup == 0:
            assert set(np.unique(s.mask)) <= {0, BACKGROUND}


def test_primary_dominates_secondary(small_corpus):
    for s in small_corpus:
        p, q = int(s.record.primary_gg), int(s.record.secondary_gg)
        if p and p != q:
            assert (s.mask == p).sum() > (s.mask == q).sum()


def test_labels_consistent_with_mask(small_corpus):
    for s in small_corpus:
        present = set(np.unique(s.mask)) - {0, BACKGROUND}
        assert present == {int(s.record.primary_gg), int(s.record.secondary_gg)} - {0}


def test_regeneration_bit_identical():
    spec = SynthSpec(slides_per_grade=10, size=256, seed=7)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert len(a) == 60
    for x, y in zip(a, b):
        assert x.record == y.record
        assert np.array_equal(x.image.pixels, y.image.pixels)
        assert np.array_equal(x.mask, y.mask)


def test_infeasible_fractions_rejected():
    with pytest.raises(ParameterError):
        generate_corpus(SynthSpec(primary_fraction=(0.6, 0.8), secondary_fraction=(0.3, 0.4)))
    with pytest.raises(ParameterError):
        generate_corpus(SynthSpec(primary_fraction=(0.3, 0.4), secondary_fraction=(0.35, 0.4)))


def test_corpus_stats_histogram_and_oracle(small_corpus, caplog):
    stats = corpus_stats([s.record for s in small_corpus], [s.mask for s in small_corpus])
    assert stats["slides_per_grade"] == [2] * 6
    # pixel-count oracle for the majority-class tiles
    expected = {0: 0, 3: 0, 4: 0, 5: 0}
    for s in small_corpus:
        for r in range(0, 512, 256):
            for c in range(0, 512, 256):
                tile = s.mask[r:r + 256, c:c + 256]
                counts = {k: int((tile == k).sum()) for k in expected}
                if sum(counts.values()):
                    best = max(counts.values())
                    expected[min(k for k in counts if counts[k] == best)] += 1
    assert stats["patch_classes"] == {str(k): v for k, v in expected.items()}
    with caplog.at_level(logging.WARNING):
        hist = corpus_stats([s.record for s in small_corpus if s.record.isup != 3])["slides_per_grade"]
    assert hist[3] == 0 and "grade 3" in caplog.text


def test_pure_tiles_are_single_class(small_corpus):
    for s in small_corpus:
        for (r, c), cls in pure_patch_classes(s.mask).items():
            tile = s.mask[r * 256:(r + 1) * 256, c * 256:(c + 1) * 256]
            assert np.all(tile == cls)
        pc = patch_classes(s.mask)
        for key, cls in pure_patch_classes(s.mask).items():
            assert pc[key] == cls


def test_texture_classes_separable_by_nuclear_blob_density(small_corpus):
    # fraction of window area covered by nuclear (high hematoxylin) blobs,
    # nearest-centroid classifier, 5-fold cross validation
    rng = np.random.default_rng(0)
    X, Y = [], []
    w = 96
    for s in small_corpus:
        hed = rgb_to_hed(s.image.pixels)
        for _ in range(150):
            r, c = rng.integers(0, 512 - w, 2)
            window = s.mask[r:r + w, c:c + w]
            vals = np.unique(window)
            if len(vals) == 1 and vals[0] != BACKGROUND:
                X.append([(hed[r:r + w, c:c + w, 0] > 0.45).mean()])
                Y.append(int(vals[0]))
    assert set(Y) == {0, 3, 4, 5}
    acc = cross_val_score(NearestCentroid(), np.array(X), np.array(Y), cv=5).mean()
    assert acc >= 0.95


def test_write_corpus(tmp_path, small_corpus):
    path = write_corpus(small_corpus[:3], tmp_path)
    recs = read_slide_manifest(path)
    assert [r.slide_id for r in recs] == [s.record.slide_id for s in small_corpus[:3]]
    assert np.array_equal(load_mask(recs[0].mask_path), small_corpus[0].mask)
