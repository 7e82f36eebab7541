"""Agreement metrics for 5-grade ordinal classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import N_GRADES
from .errors import ScreeningError


class LengthMismatchError(ScreeningError):
    pass


class EmptyInputError(ScreeningError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """5x5 count matrix: rows are true grades, columns predicted grades."""

    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion(truth, pred) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise LengthMismatchError(f"{truth.size} truth labels vs {pred.size} predictions")
    if truth.size == 0:
        raise EmptyInputError("no samples")
    if truth.min() < 0 or truth.max() >= N_GRADES or pred.min() < 0 or pred.max() >= N_GRADES:
        raise ValueError("grades must lie in 0-4")
    counts = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts)


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement with squared-distance weights.

    Weights are w_ij = (i - j)^2 / (K - 1)^2; the expected matrix is the outer
    product of the normalized marginals. Returns 1 for perfect agreement and
    exactly 0 for a constant predictor. The all-mass-in-one-cell case (0/0) is
    defined as 1 on the diagonal, 0 off it.
    """
    if cm.n < 1:
        raise EmptyInputError("empty confusion matrix")
    k = cm.counts.shape[0]
    idx = np.arange(k, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    n = float(cm.n)
    observed = cm.counts.astype(np.float64) / n
    row_marg = cm.counts.sum(axis=1).astype(np.float64) / n
    col_marg = cm.counts.sum(axis=0).astype(np.float64) / n
    expected = np.outer(row_marg, col_marg)
    num = float((weights * observed).sum())
    den = float((weights * expected).sum())
    if den == 0.0:
        return 1.0 if float(np.trace(observed)) == 1.0 else 0.0
    return 1.0 - num / den


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n < 1:
        raise EmptyInputError("empty confusion matrix")
    return float(np.trace(cm.counts)) / float(cm.n)
