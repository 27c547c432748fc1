"""Rank correlation."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

log = logging.getLogger(__name__)


def spearman(pred, truth) -> float:
    """Pearson correlation of average-tied ranks; 0 (with a warning) when either side is constant."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(truth, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"length mismatch {a.shape} vs {b.shape}")
    if a.size < 3:
        raise ContractError("spearman needs at least 3 samples")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if den == 0:
        warnings.warn("constant input to spearman; defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip((ra * rb).sum() / den, -1.0, 1.0))


def spearman_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Row-wise Spearman of two (P, T) arrays, quietly mapping constant rows to 0."""
    pred = np.atleast_2d(pred)
    truth = np.atleast_2d(truth)
    out = np.zeros(pred.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(pred.shape[0]):
            out[i] = spearman(pred[i], truth[i])
    return out
