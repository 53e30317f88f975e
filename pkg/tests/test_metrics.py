import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import auc_oracle, kappa_oracle

from isup_grading.errors import DegenerateKappaError, ParameterError, UndefinedMetricError
from isup_grading.metrics import (
    auc_rank,
    confusion_matrix,
    detection_metrics,
    grading_report,
    kappa_weights,
    plot_confusion,
    quadratic_kappa,
    write_confusion_csv,
)


def test_weights():
    W = kappa_weights()
    assert W[2, 3] == pytest.approx(0.04)
    assert W[0, 5] == 1.0
    assert np.all(np.diag(W) == 0)
    assert np.array_equal(W, W.T)


def test_perfect_agreement():
    assert quadratic_kappa(np.diag([3, 1, 4, 1, 5, 9])) == 1.0


def test_random_matrices_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cm = rng.integers(0, 8, (6, 6))
        cm[0, 1] += 1
        cm[3, 3] += 1
        assert quadratic_kappa(cm) == pytest.approx(kappa_oracle(cm.tolist()), abs=1e-9)


def test_transpose_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cm = rng.integers(0, 5, (6, 6)) + np.eye(6, dtype=int)
        assert quadratic_kappa(cm) == pytest.approx(quadratic_kappa(cm.T), abs=1e-12)


def test_moving_diagonal_mass_farther_decreases_kappa():
    # Enumerated 2-slide matrices: one correct anchor slide plus one slide whose
    # prediction walks away from its true grade, in the direction away from the
    # anchor. (Walking towards and past the anchor also shifts the predicted
    # marginal and is not monotone; same-true-grade pairs give kappa 0 always.)
    checked = 0
    for anchor, g in itertools.product(range(6), range(6)):
        if anchor == g:
            continue
        step = 1 if g > anchor else -1
        preds = range(g, 6) if step == 1 else range(g, -1, -1)
        ks = []
        for pred in preds:
            cm = np.zeros((6, 6), int)
            cm[anchor, anchor] += 1
            cm[g, pred] += 1
            ks.append(quadratic_kappa(cm))
        assert all(b < a for a, b in zip(ks, ks[1:])), (anchor, g, ks)
        checked += len(ks) - 1
    assert checked == 40


def test_degenerate_cases():
    cm = np.zeros((6, 6), int)
    cm[2, 2] = 5
    assert quadratic_kappa(cm) == 1.0
    cm = np.zeros((6, 6), int)
    cm[2, 4] = 5
    with pytest.raises(DegenerateKappaError, match="grade 2"):
        quadratic_kappa(cm)
    with pytest.raises(ParameterError):
        quadratic_kappa(np.zeros((6, 6)))


def test_auc_examples():
    y = [0, 0, 1, 1]
    assert auc_rank(y, [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert auc_rank(y, [0.9, 0.8, 0.2, 0.1]) == 0.0
    assert auc_rank(y, [0.5] * 4) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc_rank([1, 1], [0.2, 0.3])


def test_auc_twenty_sample_fixture():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 20)
    s = np.round(rng.random(20), 1)  # plenty of ties
    assert auc_rank(y, s) == auc_oracle(y.tolist(), s.tolist())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 6)), min_size=2, max_size=30))
def test_auc_matches_pairwise(pairs):
    y = [a for a, _ in pairs]
    s = [b / 6 for _, b in pairs]
    if all(y) or not any(y):
        return
    assert auc_rank(y, s) == pytest.approx(auc_oracle(y, s), abs=1e-12)


def test_detection_threshold():
    acc, f1, auc = detection_metrics([0, 0, 3, 5], [0.1, 0.5, 0.6, 0.9])
    assert (acc, f1, auc) == (1.0, 1.0, 1.0)


def test_report_fields_against_direct_recomputation():
    rng = np.random.default_rng(2)
    t = rng.integers(0, 6, 40)
    p = np.clip(t + rng.integers(-2, 3, 40), 0, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = grading_report(t, p)
    O = [[0] * 6 for _ in range(6)]
    for a, b in zip(t, p):
        O[a][b] += 1
    assert r.confusion == O
    assert r.kappa == pytest.approx(kappa_oracle(O), abs=1e-9)
    assert r.accuracy == sum(a == b for a, b in zip(t, p)) / 40
    assert r.mean_abs_error == sum(abs(a - b) for a, b in zip(t, p)) / 40
    assert r.severe_errors == sum(abs(a - b) >= 2 for a, b in zip(t, p))
    f1 = []
    for g in range(6):
        tp = sum(a == g and b == g for a, b in zip(t, p))
        npred = sum(b == g for b in p)
        ntrue = sum(a == g for a in t)
        f1.append(0.0 if npred + ntrue == 0 else 2 * tp / (npred + ntrue))
    assert r.macro_f1 == pytest.approx(sum(f1) / 6, abs=1e-12)


def test_report_trivial_cases():
    r = grading_report([0, 1, 2, 3, 4, 5], [0, 1, 2, 3, 4, 5])
    assert r.kappa == 1.0 and r.severe_errors == 0
    r = grading_report([0, 1, 2, 3, 4, 5], [1, 2, 3, 4, 5, 4])
    assert r.mean_abs_error == 1.0
    with pytest.raises(ParameterError):
        grading_report([], [])


def test_macro_f1_zero_division_warns():
    with pytest.warns(UserWarning, match="F1 undefined"):
        grading_report([1, 2], [1, 2])


def test_outputs(tmp_path):
    cm = confusion_matrix([0, 1, 1], [0, 1, 2])
    csv_path = write_confusion_csv(tmp_path / "cm.csv", cm)
    assert csv_path.read_text().count("\n") == 7
    png = plot_confusion(tmp_path / "cm.png", cm, "test")
    assert png.read_bytes()[:4] == b"\x89PNG"
