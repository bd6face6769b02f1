"""Least-squares Monte Carlo estimates of conditional expectations."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import List, Optional, Sequence

import numpy as np

__all__ = ["RegressionEstimator", "RankDeficientError", "polynomial_basis",
           "estimate_conditional_expectation", "fit_predict"]


class RankDeficientError(np.linalg.LinAlgError):
    """Design matrix without full column rank and no ridge to fall back on."""

    def __init__(self, msg: str, step: Optional[int] = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


@dataclass
class RegressionEstimator:
    """Polynomial regression on the conditioning state.

    ``coefficients`` collects one fitted coefficient vector per call when
    ``keep_coefficients`` is set (the solvers leave it off).
    """

    degree: int = 2
    ridge: float = 1e-10
    keep_coefficients: bool = False
    coefficients: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


def polynomial_basis(features: Sequence[np.ndarray], degree: int) -> np.ndarray:
    """All monomials of total degree ``<= degree``, constant column first."""
    cols = [np.ones_like(np.asarray(features[0], dtype=float))] if len(features) else []
    x = [np.asarray(f, dtype=float) for f in features]
    for d in range(1, degree + 1):
        for combo in combinations_with_replacement(range(len(x)), d):
            c = x[combo[0]].copy()
            for j in combo[1:]:
                c = c * x[j]
            cols.append(c)
    return np.stack(cols, axis=-1)


def _standardize(features: Sequence[np.ndarray]) -> List[np.ndarray]:
    # centre and scale; drop (numerically) constant features, which the intercept already covers
    out = []
    for f in features:
        f = np.asarray(f, dtype=float)
        sd = f.std()
        if sd > 1e-12 * max(1.0, float(np.abs(f).max())):
            out.append((f - f.mean()) / sd)
    return out


def fit_predict(design: np.ndarray, targets: np.ndarray, ridge: float, step: Optional[int] = None,
                return_coef: bool = False):
    """Least-squares fit of ``targets`` (n,) or (n, m) on ``design`` (n, p)."""
    n, p = design.shape
    if ridge > 0:
        a = np.vstack([design, np.sqrt(ridge * n) * np.eye(p)])
        t = np.concatenate([targets, np.zeros((p,) + targets.shape[1:])])
        coef = np.linalg.lstsq(a, t, rcond=None)[0]
    else:
        coef, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
        if rank < p:
            raise RankDeficientError(f"design matrix has rank {rank} < {p}", step)
    fitted = design @ coef
    return (fitted, coef) if return_coef else fitted


def estimate_conditional_expectation(targets, features, est: RegressionEstimator,
                                     step: Optional[int] = None) -> np.ndarray:
    """Fitted values of ``E[targets | features]`` on a polynomial basis.

    ``features`` is one array or a sequence of arrays, each with one entry per
    path. With ``ridge == 0`` a rank-deficient basis raises
    :class:`RankDeficientError`; otherwise constant features are dropped and
    the remaining ones standardized before fitting.
    """
    y = np.asarray(targets, dtype=float)
    feats = [features] if isinstance(features, np.ndarray) and features.ndim == 1 else list(features)
    feats = [np.asarray(f, dtype=float) for f in feats]
    if any(f.shape[0] != y.shape[0] for f in feats):
        raise ValueError("targets and features must have the same number of paths")
    if est.ridge > 0:
        feats = _standardize(feats)
    if y.shape[0] < est.degree + 1:
        raise ValueError(f"need at least {est.degree + 1} paths, got {y.shape[0]}")
    design = polynomial_basis(feats, est.degree) if feats else np.ones((y.shape[0], 1))
    fitted, coef = fit_predict(design, y, est.ridge, step, return_coef=True)
    if est.keep_coefficients:
        est.coefficients.append(coef)
    return fitted
