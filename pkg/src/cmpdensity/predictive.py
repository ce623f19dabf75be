"""Posterior predictive pmf and quantiles at new covariate values.

A new point ``x`` is treated as an extra subject: within each posterior
snapshot it joins cluster ``h`` with the conditional-prior weight
``b_{x,C_h} m_h / (a + N_{C_h})`` and a fresh cluster with
``sum_j a b_{x,j} / (a + N_j)``. The fresh-cluster component is represented
by one base-measure atom per snapshot. Averaging these mixtures over
snapshots gives the predictive pmf; every quantile at ``x`` is read off the
same cumulative sum, so quantile curves cannot cross.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import compoisson
from .exchange import link

__all__ = [
    "ConditionalPmf",
    "draw_fresh_atoms",
    "mixture_components",
    "mixture_pmf",
    "conditional_pmf",
    "conditional_quantile",
    "quantile_curves",
]

TAIL_MASS = 1e-6
COMPONENT_TOL = 1e-12
MIN_COMPONENT_WEIGHT = 1e-12


@dataclass(frozen=True)
class ConditionalPmf:
    """Predictive pmf on ``0..support_max``; ``tail_mass`` is what lies beyond."""

    x: np.ndarray
    support_max: int
    probs: np.ndarray
    tail_mass: float

    def cdf(self):
        return np.cumsum(self.probs)

    def mean(self):
        return float(np.arange(self.probs.size) @ self.probs)


def draw_fresh_atoms(draws, dim, base, rng):
    """One base-measure atom per snapshot, as ``(b, c)`` arrays of shape (T, d)."""
    T = len(draws.snapshots)
    return rng.normal(0.0, base.sd_b, (T, dim)), rng.normal(0.0, base.sd_c, (T, dim))


def _new_subject_weights(snap, feats, train_feats, a, psi):
    d2 = np.sum((train_feats - feats) ** 2, axis=1) if train_feats.shape[1] else np.zeros(snap.log_gamma.size)
    lb = snap.log_gamma - psi * d2
    lb = lb - (lb.max() + math.log(np.exp(lb - lb.max()).sum()))
    b = np.exp(lb)
    N = np.bincount(snap.C[snap.S], minlength=b.size)
    m = np.bincount(snap.S, minlength=snap.k)
    w0 = a * float(np.sum(b / (a + N)))
    w = b[snap.C] * m / (a + N[snap.C])
    return w0, w


def mixture_components(x, draws, data, fresh):
    """Flatten the predictive at design row ``x`` into ``(weights, mu, nu)``.

    Weights are normalized within each snapshot and divided by the number of
    snapshots, so they sum to one.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != data.d:
        raise ValueError(f"covariate row has dimension {x.shape[0]}, expected {data.d}")
    feats = data.kernel_features_for(x)[0]
    train = data.kernel_features
    T = len(draws.snapshots)
    if T == 0:
        raise ValueError("no posterior snapshots")
    ws, mus, nus = [], [], []
    fb, fc = fresh
    for t, snap in enumerate(draws.snapshots):
        w0, w = _new_subject_weights(snap, feats, train, draws.a, draws.psi)
        mu, nu = link(x[None, :], snap.b.T, snap.c.T)
        mu0, nu0 = link(x[None, :], fb[t], fc[t])
        wt = np.concatenate([w, [w0]])
        ws.append(wt / (wt.sum() * T))
        mus.append(np.concatenate([mu[0], mu0]))
        nus.append(np.concatenate([nu[0], nu0]))
    return np.concatenate(ws), np.concatenate(mus), np.concatenate(nus)


@lru_cache(maxsize=16384)
def _component_pmf(mu, nu):
    lo, terms = compoisson._series_window(mu, nu, COMPONENT_TOL, 1_000_000)
    probs = np.exp(terms - compoisson.logsumexp(terms))
    probs.setflags(write=False)
    return lo, probs


def mixture_pmf(weights, mu, nu, tail=TAIL_MASS):
    """Pmf of ``sum_k weights[k] COM-P(mu[k], nu[k])`` truncated at its far tail.

    Returns ``(probs, tail_mass)`` with ``probs`` on ``0..len(probs)-1``.
    Each component is evaluated only over the window holding all but a
    ``1e-12`` fraction of its mass; components with weight below ``1e-12``
    are dropped and their weight booked as tail mass.
    """
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not total > 0:
        raise ValueError("mixture weights must have positive sum")
    weights = weights / total
    key = np.stack([np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    w_u = np.bincount(inv.ravel(), weights=weights, minlength=uniq.shape[0])
    keep = w_u >= MIN_COMPONENT_WEIGHT
    dropped = float(w_u[~keep].sum())
    parts = [(w, *_component_pmf(float(m), float(v))) for w, (m, v) in zip(w_u[keep], uniq[keep])]
    upper = max(lo + p.size for _, lo, p in parts)
    probs = np.zeros(upper)
    for w, lo, p in parts:
        probs[lo : lo + p.size] += w * p
    cum = np.cumsum(probs)
    # cut the support once the kept mass is within a small fraction of tail
    stop = int(np.searchsorted(cum, cum[-1] - 1e-2 * tail, side="left"))
    probs = probs[: stop + 1]
    tail_mass = max(0.0, 1.0 - float(cum[stop]))
    if tail_mass >= tail:
        raise compoisson.ConvergenceError(
            f"predictive mixture leaves {tail_mass:.3g} mass beyond its support"
        )
    return probs, tail_mass


def conditional_pmf(x, draws, data, hyper=None, rng=None, fresh=None):
    """Posterior predictive pmf of the count at design row ``x``.

    ``x`` must be on the same scale as ``data.X`` (intercept included).
    ``fresh`` are the per-snapshot base-measure atoms from
    :func:`draw_fresh_atoms`; when omitted they are drawn from
    ``hyper.base_measure`` with ``rng``.
    """
    if fresh is None:
        if hyper is None or rng is None:
            raise ValueError("need either fresh atoms or hyperparameters and an rng")
        fresh = draw_fresh_atoms(draws, data.d, hyper.base_measure, rng)
    w, mu, nu = mixture_components(x, draws, data, fresh)
    probs, tail = mixture_pmf(w, mu, nu)
    return ConditionalPmf(np.asarray(x, dtype=float).ravel(), probs.size - 1, probs, tail)


def conditional_quantile(p, pmf):
    """Smallest ``y`` with predictive cdf ``>= p``; ``p`` may be an array."""
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0) | (p_arr >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    q = np.searchsorted(pmf.cdf(), p_arr, side="left")
    return int(q) if q.ndim == 0 else q.astype(np.int64)


def quantile_curves(p_list, x_grid, draws, data, hyper, rng):
    """Quantiles for every row of ``x_grid`` (design scale) and level in ``p_list``.

    Returns an integer array of shape ``(len(x_grid), len(p_list))``. The
    same fresh atoms are shared by every grid point.
    """
    p_list = np.asarray(p_list, dtype=float)
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    fresh = draw_fresh_atoms(draws, data.d, hyper.base_measure, rng)
    out = np.zeros((x_grid.shape[0], p_list.size), dtype=np.int64)
    if p_list.size == 0:
        return out
    for g, x in enumerate(x_grid):
        out[g] = conditional_quantile(p_list, conditional_pmf(x, draws, data, fresh=fresh))
    return out
