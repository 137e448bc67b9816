"""Patient-level voting, classification metrics, ROC analysis and power-law fits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .data.sampling import SUBTYPES


@dataclass
class PatientPrediction:
    patient_id: str
    predictions: list[int]
    probabilities: np.ndarray  # (n_sequences, 2)
    votes: dict[str, int]
    subtype: str
    abc_fraction: float
    true_subtype: str | None = None

    @property
    def label(self) -> int:
        return SUBTYPES.index(self.subtype)


def majority_vote(probabilities: np.ndarray) -> tuple[int, list[int], dict[str, int]]:
    """Most frequent per-sequence argmax; a tied vote falls back to the mean
    ABC probability (>= 0.5 means ABC)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need at least one sequence prediction")
    preds = [0 if p[0] >= p[1] else 1 for p in probs]
    abc = preds.count(0)
    gcb = len(preds) - abc
    if abc != gcb:
        winner = 0 if abc > gcb else 1
    else:
        winner = 0 if probs[:, 0].mean() >= 0.5 else 1
    return winner, preds, {"ABC": abc, "GCB": gcb}


def predict_patient(patient_id: str, probabilities, true_subtype: str | None = None) -> PatientPrediction:
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.size == 0:
        raise ValueError(f"patient {patient_id}: no sequences to vote on")
    winner, preds, votes = majority_vote(probs)
    return PatientPrediction(
        patient_id=patient_id,
        predictions=preds,
        probabilities=probs,
        votes=votes,
        subtype=SUBTYPES[winner],
        abc_fraction=votes["ABC"] / len(preds),
        true_subtype=true_subtype,
    )


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows: true class, cols: predicted
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    fnr: dict[str, float]
    accuracy: float
    flags: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fnr": self.fnr,
            "confusion": self.confusion.tolist(),
            "n": self.total,
            "flags": self.flags,
        }


def confusion_matrix(predictions, labels, n_classes: int = 2) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pred, true in zip(predictions, labels):
        cm[int(true), int(pred)] += 1
    return cm


def metrics_from_confusion(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.sum() == 0:
        raise ValueError("cannot compute metrics on an empty confusion matrix")
    precision, recall, f1, fnr, flags = {}, {}, {}, {}, []
    for i, name in enumerate(SUBTYPES):
        tp = cm[i, i]
        predicted = cm[:, i].sum()
        actual = cm[i, :].sum()
        if predicted == 0:
            flags.append(f"precision_undefined:{name}")
        if actual == 0:
            flags.append(f"recall_undefined:{name}")
        pre = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        precision[name] = float(pre)
        recall[name] = float(rec)
        f1[name] = float(2 * pre * rec / (pre + rec)) if pre + rec > 0 else 0.0
        fnr[name] = float(1.0 - rec)
    return MetricsReport(cm, precision, recall, f1, fnr, float(np.trace(cm) / cm.sum()), flags)


def compute_metrics(predictions, labels) -> MetricsReport:
    """Per-class precision/recall/F1/FNR and accuracy from integer class labels.

    A class never predicted gets precision 0 and a flag.
    """
    predictions, labels = list(predictions), list(labels)
    if not labels:
        raise ValueError("compute_metrics needs at least one prediction")
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    return metrics_from_confusion(confusion_matrix(predictions, labels))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    accuracy_thresholds: np.ndarray
    accuracy: np.ndarray


def roc_points(scores, labels, positive: int = 0, accuracy_grid: int = 11) -> RocCurve:
    """ROC of ``scores`` for the ``positive`` class plus accuracy over
    thresholds in [0.5, 1].

    ``scores`` is the positive-class score per patient and ``labels`` the true
    class indices. Thresholds sweep the distinct scores from high to low,
    framed by +inf (nothing positive) and the lowest score (everything
    positive). A patient is called positive when its score is >= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(labels) == positive
    if truth.all() or not truth.any():
        raise ValueError("ROC needs both classes among the labels")
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    called = scores[None, :] >= thresholds[:, None]
    tpr = (called & truth).sum(1) / truth.sum()
    fpr = (called & ~truth).sum(1) / (~truth).sum()
    auc = float(np.trapezoid(tpr, fpr))
    grid = np.linspace(0.5, 1.0, accuracy_grid)
    acc = np.array([((scores >= t) == truth).mean() for t in grid])
    return RocCurve(thresholds, fpr, tpr, auc, grid, acc)


def concordance_auc(scores, labels, positive: int = 0) -> float:
    """Probability that a random positive outscores a random negative, ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(labels) == positive
    pos, neg = scores[truth], scores[~truth]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


@dataclass
class PowerLawFit:
    a: float
    b: float
    c: float
    rss: float
    flags: list[str] = field(default_factory=list)

    def predict(self, n) -> np.ndarray:
        return self.a - self.b * np.asarray(n, dtype=np.float64) ** (-self.c)

    def project(self, target: float) -> float | None:
        """Training-set size reaching ``target`` accuracy, or None when the
        target is not below the asymptote ``a``."""
        if target >= self.a or self.b <= 0 or self.c <= 0:
            return None
        return float((self.b / (self.a - target)) ** (1.0 / self.c))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "rss": self.rss, "flags": self.flags}


def fit_power_law(n, acc, x0=None, n_starts: int = 24, seed: int = 0) -> PowerLawFit:
    """Least-squares fit of ``acc(n) = a - b * n**(-c)``.

    Bounded trust-region fits from a grid of random starts; ``a`` is kept in
    ``[max(acc), 1]`` and ``b, c`` positive. Extra start ``x0`` (a, b, c) is
    tried first, which makes refitting from a previous solution monotone.
    """
    n = np.asarray(n, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    if len(n) < 4 or len(n) != len(acc):
        raise ValueError("power-law fit needs at least 4 (n, accuracy) points")
    if np.any(np.diff(n) <= 0) or n[0] <= 0:
        raise ValueError("n must be positive and strictly increasing")

    lo_a = float(acc.max())
    hi_a = 1.0
    if lo_a >= hi_a:
        lo_a = hi_a - 1e-9
    lower = [lo_a, 1e-12, 1e-6]
    upper = [hi_a, 1e6, 10.0]

    def residual(theta):
        a, b, c = theta
        return a - b * n ** (-c) - acc

    rng = np.random.default_rng(seed)
    starts = [] if x0 is None else [np.clip(np.asarray(x0, float), lower, upper)]
    for _ in range(n_starts):
        a0 = rng.uniform(lo_a, hi_a)
        c0 = 10 ** rng.uniform(-2, 0.5)
        b0 = max((a0 - acc[0]) * n[0] ** c0, 1e-6)
        starts.append(np.clip([a0, b0, c0], lower, upper))

    best = None
    for start in starts:
        try:
            sol = least_squares(residual, start, bounds=(lower, upper), x_scale="jac",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
        except ValueError:
            continue
        if not np.all(np.isfinite(sol.x)):
            continue
        rss = float(np.sum(sol.fun**2))
        if best is None or rss < best[1]:
            best = (sol.x, rss)
    if best is None:
        raise RuntimeError(f"power-law fit failed from all {len(starts)} starts")

    (a, b, c), rss = best
    flags = []
    if b * n[0] ** (-c) < 1e-6 or np.ptp(acc) < 1e-12:
        flags.append("degenerate:b_to_zero")
    return PowerLawFit(float(a), float(b), float(c), rss, flags)


def refit_residual_ok(fit: PowerLawFit, n, acc) -> bool:
    refit = fit_power_law(n, acc, x0=(fit.a, fit.b, fit.c))
    return refit.rss <= fit.rss + 1e-15


def binomial_sign_test(successes: int, trials: int) -> float:
    """One-sided P(X >= successes) for X ~ Binomial(trials, 1/2)."""
    return sum(math.comb(trials, k) for k in range(successes, trials + 1)) / 2**trials


def warn_single_class(labels) -> bool:
    if len(set(labels)) < 2:
        warnings.warn("evaluation split contains a single class", RuntimeWarning, stacklevel=2)
        return True
    return False
