"""Quadratic weighted kappa, detection metrics and grading reports over ISUP grades."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateKappaError, ParameterError, UndefinedMetricError

N_GRADES = 6


def confusion_matrix(true_grades, predicted_grades, n: int = N_GRADES) -> np.ndarray:
    t = np.asarray(true_grades, dtype=np.int64)
    p = np.asarray(predicted_grades, dtype=np.int64)
    if t.shape != p.shape:
        raise ParameterError(f"length mismatch: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= n or p.max() >= n):
        raise ParameterError(f"grades must lie in [0, {n - 1}]")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def kappa_weights(n: int = N_GRADES) -> np.ndarray:
    i, j = np.indices((n, n))
    return ((i - j) / (n - 1)) ** 2


def quadratic_kappa(cm) -> float:
    """1 - sum(W*O) / sum(W*E), with E the outer product of the marginals scaled to sum(O).

    Two raters that each use a single grade have no variance: equal grades
    score 1.0, different grades raise DegenerateKappaError.
    """
    O = np.asarray(cm, dtype=np.float64)
    total = O.sum()
    if total <= 0:
        raise ParameterError("confusion matrix is empty")
    rows = O.sum(axis=1)
    cols = O.sum(axis=0)
    if np.count_nonzero(rows) == 1 and np.count_nonzero(cols) == 1:
        i, j = int(np.flatnonzero(rows)[0]), int(np.flatnonzero(cols)[0])
        if i == j:
            return 1.0
        raise DegenerateKappaError(
            f"kappa undefined: every slide is true grade {i} and every prediction is grade {j}"
        )
    W = kappa_weights(O.shape[0])
    E = np.outer(rows, cols) / total
    return float(1.0 - (W * O).sum() / (W * E).sum())


def auc_rank(y_true, scores) -> float:
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both benign and malignant slides")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _f1(tp, fp, fn, label=None) -> float:
    denom = 2 * tp + fp + fn
    if denom == 0:
        warnings.warn(f"F1 undefined for class {label}: no true or predicted samples; scored 0", stacklevel=3)
        return 0.0
    return 2 * tp / denom


def detection_metrics(true_grades, malignancy_scores, threshold: float = 0.5) -> tuple[float, float, float]:
    """Benign (grade 0) vs malignant accuracy, F1 and AUC; positives are scores above ``threshold``."""
    y = np.asarray(true_grades) >= 1
    s = np.asarray(malignancy_scores, dtype=np.float64)
    auc = auc_rank(y, s)
    pred = s > threshold
    acc = float((pred == y).mean())
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    return acc, _f1(tp, fp, fn, "malignant"), auc


@dataclass
class GradingReport:
    confusion: list[list[int]]
    kappa: float
    accuracy: float
    macro_f1: float
    mean_abs_error: float
    severe_errors: int
    n: int

    def to_json(self) -> dict:
        return asdict(self)


def grading_report(true_grades, predicted_grades) -> GradingReport:
    t = np.asarray(true_grades, dtype=np.int64)
    p = np.asarray(predicted_grades, dtype=np.int64)
    if t.size == 0:
        raise ParameterError("cannot report on zero slides")
    cm = confusion_matrix(t, p)
    f1s = []
    for g in range(N_GRADES):
        tp = int(cm[g, g])
        fp = int(cm[:, g].sum() - tp)
        fn = int(cm[g, :].sum() - tp)
        f1s.append(_f1(tp, fp, fn, g))
    err = np.abs(t - p)
    return GradingReport(
        confusion=cm.tolist(),
        kappa=quadratic_kappa(cm),
        accuracy=float((t == p).mean()),
        macro_f1=float(np.mean(f1s)),
        mean_abs_error=float(err.mean()),
        severe_errors=int((err >= 2).sum()),
        n=int(t.size),
    )


def write_confusion_csv(path, cm) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(range(N_GRADES)))
        for g, row in enumerate(np.asarray(cm)):
            w.writerow([g] + [int(v) for v in row])
    return path


def plot_confusion(path, cm, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center", color="white" if v > cm.max() / 2 else "black")
    ax.set_xlabel("predicted ISUP")
    ax.set_ylabel("true ISUP")
    ax.set_xticks(range(N_GRADES))
    ax.set_yticks(range(N_GRADES))
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
