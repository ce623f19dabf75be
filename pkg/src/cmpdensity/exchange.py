"""Exchange-algorithm Metropolis-Hastings for COM-Poisson regression atoms.

For a proposal theta* the sampler draws auxiliary counts y* from the model
at theta* and accepts with

    q_theta(y*) q_theta*(y) / (q_theta(y) q_theta*(y*)) * prior(theta*) / prior(theta)

where ``q`` is the unnormalized COM-Poisson density. The normalizing
constants cancel, so nothing in this module evaluates them. Random-walk
proposals are symmetric and drop out of the ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import compoisson

__all__ = [
    "NU_MIN",
    "NU_MAX",
    "LOG_MU_BOUND",
    "RegressionAtom",
    "NormalBaseMeasure",
    "ExchangeProposalConfig",
    "AcceptanceTracker",
    "link",
    "exchange_log_ratio",
    "exchange_update_atom",
]

NU_MIN = 1e-3
NU_MAX = 1e3
LOG_MU_BOUND = 15.0


@dataclass
class RegressionAtom:
    """Coefficients of one COM-Poisson regression component.

    ``log mu_i = x_i @ b`` and ``log nu_i = x_i @ c``.
    """

    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        if self.b.shape != self.c.shape or self.b.ndim != 1:
            raise ValueError("b and c must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.c))):
            raise ValueError("atom coefficients must be finite")

    @property
    def dim(self):
        return self.b.shape[0]

    def copy(self):
        return RegressionAtom(self.b.copy(), self.c.copy())

    def params_at(self, X):
        """``(mu, nu)`` arrays at the rows of ``X``."""
        return link(X, self.b, self.c)


def link(X, b, c):
    """Apply both log links with the numerical guards on mu and nu."""
    X = np.asarray(X, dtype=float)
    eta_mu = np.clip(X @ b, -LOG_MU_BOUND, LOG_MU_BOUND)
    eta_nu = np.clip(X @ c, math.log(NU_MIN), math.log(NU_MAX))
    return np.exp(eta_mu), np.exp(eta_nu)


@dataclass(frozen=True)
class NormalBaseMeasure:
    """Independent zero-mean normals on every coefficient of b and c."""

    sd_b: float = 2.0
    sd_c: float = 2.0

    def __post_init__(self):
        if self.sd_b <= 0 or self.sd_c <= 0:
            raise ValueError("prior scales must be positive")

    def log_density(self, atom):
        return float(
            -0.5 * np.dot(atom.b, atom.b) / self.sd_b**2
            - 0.5 * np.dot(atom.c, atom.c) / self.sd_c**2
        )

    def draw(self, dim, rng):
        return RegressionAtom(rng.normal(0.0, self.sd_b, dim), rng.normal(0.0, self.sd_c, dim))


@dataclass
class ExchangeProposalConfig:
    """Random-walk scales on the two link coefficient blocks plus the prior.

    ``prior`` must expose ``log_density(atom)``.
    """

    step_mu: float = 0.1
    step_nu: float = 0.1
    prior: object = field(default_factory=NormalBaseMeasure)

    def __post_init__(self):
        if self.step_mu < 0 or self.step_nu < 0:
            raise ValueError("step sizes must be non-negative")


@dataclass
class AcceptanceTracker:
    """Running proposal/acceptance counts for the two coefficient blocks."""

    proposed_mu: int = 0
    accepted_mu: int = 0
    proposed_nu: int = 0
    accepted_nu: int = 0

    def rate(self, block):
        prop = getattr(self, f"proposed_{block}")
        return getattr(self, f"accepted_{block}") / prop if prop else float("nan")

    def reset(self):
        self.proposed_mu = self.accepted_mu = 0
        self.proposed_nu = self.accepted_nu = 0


def exchange_log_ratio(y, theta_cur, theta_prop, y_aux):
    """Log exchange acceptance ratio, summed over observations.

    Parameters
    ----------
    y : array_like of int
        Observed counts.
    theta_cur, theta_prop : tuple of array_like
        ``(mu, nu)`` per observation under the current and proposed values.
    y_aux : array_like of int
        Auxiliary counts drawn under ``theta_prop``.
    """
    y = np.atleast_1d(np.asarray(y))
    y_aux = np.atleast_1d(np.asarray(y_aux))
    mu, nu = (np.broadcast_to(np.asarray(v, dtype=float), y.shape) for v in theta_cur)
    mu_s, nu_s = (np.broadcast_to(np.asarray(v, dtype=float), y.shape) for v in theta_prop)
    if y_aux.shape != y.shape or mu.shape != y.shape or mu_s.shape != y.shape:
        raise ValueError("y, y_aux and both parameter sequences must have equal length")
    q = compoisson.log_unnormalized
    return float(
        np.sum(q(y_aux, mu, nu) + q(y, mu_s, nu_s) - q(y, mu, nu) - q(y_aux, mu_s, nu_s))
    )


def _block_step(atom, X, y, cfg, rng, which):
    scale = cfg.step_mu if which == "mu" else cfg.step_nu
    if scale == 0:
        return atom, False
    prop = atom.copy()
    if which == "mu":
        prop.b = atom.b + rng.normal(0.0, scale, atom.dim)
    else:
        prop.c = atom.c + rng.normal(0.0, scale, atom.dim)
    mu, nu = atom.params_at(X)
    mu_s, nu_s = prop.params_at(X)
    y_aux = compoisson.sample(mu_s, nu_s, rng)
    log_alpha = exchange_log_ratio(y, (mu, nu), (mu_s, nu_s), y_aux)
    log_alpha += cfg.prior.log_density(prop) - cfg.prior.log_density(atom)
    if log_alpha >= 0 or math.log(rng.random()) < log_alpha:
        return prop, True
    return atom, False


def exchange_update_atom(atom, X, y, cfg, rng, tracker=None):
    """One exchange-MH sweep over an atom: the b block, then the c block.

    Parameters
    ----------
    atom : RegressionAtom
    X : ndarray of shape (m, d)
        Covariate rows of the member observations.
    y : ndarray of shape (m,)
        Their counts.
    cfg : ExchangeProposalConfig
    rng : numpy.random.Generator
    tracker : AcceptanceTracker, optional
        Updated in place with the outcome of both proposals.

    Returns
    -------
    RegressionAtom
        The new state (``atom`` itself when both proposals are rejected).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("an atom update needs at least one member")
    if X.shape != (y.size, atom.dim):
        raise ValueError("covariate rows do not match the atom dimension")
    atom, acc_mu = _block_step(atom, X, y, cfg, rng, "mu")
    atom, acc_nu = _block_step(atom, X, y, cfg, rng, "nu")
    if tracker is not None:
        tracker.proposed_mu += cfg.step_mu > 0
        tracker.accepted_mu += acc_mu
        tracker.proposed_nu += cfg.step_nu > 0
        tracker.accepted_nu += acc_nu
    return atom
