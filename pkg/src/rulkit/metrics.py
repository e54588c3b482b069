"""Evaluation metrics: RMSE and the asymmetric late-prediction score.

The score penalizes late predictions (predicted RUL above the true value)
harder than early ones: each engine contributes exp(d/10)-1 when the error
d = predicted - true is positive and exp(-d/13)-1 when it is negative.
"""

from __future__ import annotations

import numpy as np


def _check_pair(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=float).reshape(-1)
    p = np.asarray(y_pred, dtype=float).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ValueError("empty inputs")
    if not (np.isfinite(t).all() and np.isfinite(p).all()):
        raise ValueError("inputs must be finite")
    return t, p


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    t, p = _check_pair(y_true, y_pred)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def score_terms(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """Per-engine contributions to the asymmetric score."""
    t, p = _check_pair(y_true, y_pred)
    d = p - t
    return np.where(d < 0, np.exp(-d / 13.0) - 1.0, np.exp(d / 10.0) - 1.0)


def phm_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(np.sum(score_terms(y_true, y_pred)))
