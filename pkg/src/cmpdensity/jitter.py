"""Jittered linear quantile regression for counts.

Counts are made continuous with ``z = y + u``, ``u ~ U[0, 1)``, then mapped
through ``T(z; p) = log(z - p)`` (or ``log(varsigma)`` when ``z <= p``) so the
p-th conditional quantile of ``T`` is linear in the covariates. After the
check-loss fit the count quantile is recovered as ``ceil(p + exp(x'beta) - 1)``.
Coefficients are averaged over ``m_jitter`` independent jitters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.interpolate import BSpline
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "RankDeficientError",
    "check_loss",
    "jitter",
    "transform",
    "fit_quantile_regression",
    "LinearBasis",
    "SplineBasis",
    "QuantileFit",
    "fit_jittered",
    "estimate_count_quantile",
    "detect_crossing",
]


class RankDeficientError(ValueError):
    """Design matrix does not have full column rank."""


def check_loss(r, p):
    """``p * r`` for ``r >= 0`` and ``(p - 1) * r`` otherwise."""
    r = np.asarray(r, dtype=float)
    out = np.where(r >= 0, p * r, (p - 1.0) * r)
    return float(out) if out.ndim == 0 else out


def jitter(y, rng):
    y = np.asarray(y)
    return y + rng.random(y.shape)


def transform(z, p, varsigma=1e-5):
    z = np.asarray(z, dtype=float)
    above = z > p
    out = np.full(z.shape, math.log(varsigma))
    out[above] = np.log(z[above] - p)
    return float(out) if out.ndim == 0 else out


def _objective(beta, X, t, p):
    return float(np.sum(check_loss(t - X @ beta, p)))


def _snap_to_vertex(beta, X, t):
    """Re-solve ``beta`` exactly through the ``d`` best-fitting observations.

    An optimal check-loss fit interpolates ``d`` observations; LP solvers
    return that vertex only up to their feasibility tolerance.
    """
    d = X.shape[1]
    order = np.argsort(np.abs(t - X @ beta), kind="stable")
    rows = []
    for i in order:
        trial = rows + [i]
        if np.linalg.matrix_rank(X[trial]) == len(trial):
            rows = trial
            if len(rows) == d:
                break
    if len(rows) < d:
        return beta
    return np.linalg.solve(X[rows], t[rows])


def _solve_lp(X, t, p, extra_obj=None, bound=None):
    n, d = X.shape
    # variables: beta (free), u+ (n), u- (n);  X beta + u+ - u- = t
    c = np.concatenate([np.zeros(d), np.full(n, p), np.full(n, 1.0 - p)])
    eye = sparse.identity(n, format="csr")
    A_eq = sparse.hstack([sparse.csr_matrix(X), eye, -eye], format="csr")
    bounds = [(None, None)] * d + [(0, None)] * (2 * n)
    if extra_obj is None:
        res = linprog(c, A_eq=A_eq, b_eq=t, bounds=bounds, method="highs")
    else:
        obj = np.concatenate([extra_obj, np.zeros(2 * n)])
        res = linprog(
            obj, A_ub=c[None, :], b_ub=[bound], A_eq=A_eq, b_eq=t, bounds=bounds, method="highs"
        )
    if res.status != 0:
        raise RuntimeError(f"check-loss LP failed: {res.message}")
    return res.x[:d]


def _solve_dual(X, t, p):
    # max t'a  s.t.  X'a = (1 - p) X'1,  0 <= a <= 1; beta is the equality dual
    res = linprog(-t, A_eq=X.T, b_eq=(1.0 - p) * X.sum(axis=0), bounds=(0, 1), method="highs")
    if res.status != 0:
        raise RuntimeError(f"check-loss LP failed: {res.message}")
    cands = [_snap_to_vertex(sign * res.eqlin.marginals, X, t) for sign in (-1.0, 1.0)]
    return min(cands, key=lambda b: _objective(b, X, t, p))


def fit_quantile_regression(t, X, p, tie_break=True):
    """Minimize ``sum(check_loss(t - X @ beta, p))`` over ``beta``.

    The problem is solved as a linear program and the answer snapped onto the
    exact interpolating vertex. With ``tie_break`` a second LP picks, among
    all minimizers, the one with the smallest mean fitted value, so an
    intercept-only fit returns the lower sample quantile
    ``inf{u : F_n(u) >= p}``.

    Raises
    ------
    RankDeficientError
        If ``X`` lacks full column rank.
    """
    t = np.asarray(t, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != t.shape[0]:
        raise ValueError("targets and design rows differ in length")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError("design matrix is rank deficient")

    beta = _solve_dual(X, t, p)
    best = _objective(beta, X, t, p)
    if not tie_break:
        return beta
    slack = 1e-9 * max(1.0, abs(best))
    try:
        alt = _solve_lp(X, t, p, extra_obj=X.mean(axis=0), bound=best + slack)
    except RuntimeError:
        return beta
    alt = _snap_to_vertex(alt, X, t)
    if _objective(alt, X, t, p) <= best + slack:
        return alt
    return beta


class LinearBasis(BaseEstimator, TransformerMixin):
    """Intercept plus the raw covariate columns."""

    def fit(self, x, y=None):
        x = check_array(np.asarray(x, dtype=float).reshape(len(x), -1))
        self.n_features_in_ = x.shape[1]
        return self

    def transform(self, x):
        check_is_fitted(self, "n_features_in_")
        x = check_array(np.asarray(x, dtype=float).reshape(len(x), -1))
        return np.hstack([np.ones((x.shape[0], 1)), x])


class SplineBasis(BaseEstimator, TransformerMixin):
    """Cubic B-spline basis for one covariate, interior knots at quantiles.

    The basis functions sum to one, so no separate intercept column is added.
    Inputs outside the training range are clipped to it.
    """

    def __init__(self, knot_quantiles=(0.25, 0.5, 0.75), degree=3):
        self.knot_quantiles = knot_quantiles
        self.degree = degree

    def fit(self, x, y=None):
        x = np.asarray(x, dtype=float).ravel()
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            raise ValueError("spline basis needs a non-constant covariate")
        inner = np.quantile(x, self.knot_quantiles)
        k = self.degree
        self.knots_ = np.concatenate([[lo] * (k + 1), inner, [hi] * (k + 1)])
        self.range_ = (lo, hi)
        return self

    def transform(self, x):
        check_is_fitted(self, "knots_")
        x = np.clip(np.asarray(x, dtype=float).ravel(), *self.range_)
        return BSpline.design_matrix(x, self.knots_, self.degree).toarray()


@dataclass
class QuantileFit:
    """Averaged jittered fit at one quantile level."""

    p: float
    beta: np.ndarray
    basis: object
    m_jitter: int
    varsigma: float = 1e-5

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.m_jitter < 1:
            raise ValueError("m_jitter must be >= 1")


def fit_jittered(y, x, p, basis=None, m_jitter=100, rng=None, varsigma=1e-5, tie_break=False):
    """Fit the jittered quantile regression at level ``p``.

    Each replication draws fresh uniform noise; the returned coefficients are
    the replication average.
    """
    rng = rng if rng is not None else np.random.default_rng()
    basis = basis if basis is not None else LinearBasis()
    basis.fit(x)
    X = basis.transform(x)
    betas = []
    for _ in range(m_jitter):
        t = transform(jitter(y, rng), p, varsigma)
        betas.append(fit_quantile_regression(t, X, p, tie_break=tie_break))
    return QuantileFit(p, np.mean(betas, axis=0), basis, m_jitter, varsigma)


def estimate_count_quantile(x, fit):
    """Count quantile ``max(0, ceil(p + exp(x'beta) - 1))`` at covariates ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    X = fit.basis.transform(x[:, None] if x.ndim == 1 else x)
    q_z = fit.p + np.exp(X @ fit.beta)
    # guard against 3.0000000000000004-style rounding before the ceiling
    out = np.maximum(0, np.ceil(np.round(q_z - 1.0, 10))).astype(np.int64)
    return out


def detect_crossing(fits, x_grid):
    """All ``(x, p1, p2)`` with ``p1 < p2`` but ``Q(p1 | x) > Q(p2 | x)``."""
    fits = sorted(fits, key=lambda f: f.p)
    x_grid = np.asarray(x_grid, dtype=float)
    Q = np.array([estimate_count_quantile(x_grid, f) for f in fits])
    out = []
    for a in range(len(fits)):
        for b in range(a + 1, len(fits)):
            for g in np.flatnonzero(Q[a] > Q[b]):
                out.append((float(x_grid[g]), fits[a].p, fits[b].p))
    return out
