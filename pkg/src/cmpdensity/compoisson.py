"""COM-Poisson distribution in the mean-like (mu, nu) parameterization.

The pmf is

    P(Y = y) = (mu**y / y!)**nu / Z(mu, nu),   y = 0, 1, 2, ...

with Z(mu, nu) = sum_j (mu**j / j!)**nu. ``nu = 1`` is the Poisson, ``nu > 1``
is underdispersed and ``nu < 1`` overdispersed. ``floor(mu)`` is a mode and
E[Y] ~ mu, V[Y] ~ mu / nu.

Everything is computed in log space. The normalizer has no closed form and is
summed outwards from the mode until both the current term and a geometric
bound on the remaining tail fall below ``rel_tol`` times the running sum.

Sampling uses rejection from a Poisson envelope (nu >= 1) or a geometric
envelope (nu < 1) and only ever touches the unnormalized density, which is
what the exchange algorithm needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, xlogy

__all__ = [
    "ComPoissonParams",
    "NormalizerConfig",
    "ConvergenceError",
    "SamplerError",
    "log_unnormalized",
    "log_normalizer",
    "log_pmf",
    "pmf_table",
    "moments_approx",
    "moments_exact",
    "cdf",
    "quantile",
    "sample",
]

_CHUNK = 256


class ConvergenceError(ArithmeticError):
    """Series truncation criterion not met within ``max_terms`` terms."""


class SamplerError(RuntimeError):
    """Rejection sampler exceeded its iteration guard."""


@dataclass(frozen=True)
class ComPoissonParams:
    mu: float
    nu: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValueError(f"mu must be positive and finite, got {self.mu!r}")
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be positive and finite, got {self.nu!r}")


@dataclass(frozen=True)
class NormalizerConfig:
    rel_tol: float = 1e-12
    max_terms: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")


DEFAULT_CONFIG = NormalizerConfig()


def logsumexp(a):
    a = np.asarray(a, dtype=float)
    top = a.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(np.exp(a - top).sum()))


def log_unnormalized(y, mu, nu):
    """``nu * (y log mu - log y!)``, broadcasting over all arguments."""
    y = np.asarray(y, dtype=float)
    return nu * (xlogy(y, mu) - gammaln(y + 1.0))


def _log_term(j, log_mu, nu):
    return nu * (j * log_mu - math.lgamma(j + 1.0))


def _series_window(mu, nu, rel_tol, max_terms, power=0):
    """Return ``(lo, log_terms)`` covering every non-negligible term.

    ``log_terms[k]`` is ``log(j**power) + nu*(j log mu - log j!)`` for
    ``j = lo + k``. The window grows outwards from the mode in chunks; on
    each side growth stops once the edge term is below ``rel_tol`` of the
    running sum and the geometric tail bound ``t r / (1 - r)`` is too.
    """
    log_mu = math.log(mu)
    mode = int(math.floor(mu))
    lo = hi = mode  # inclusive bounds of the evaluated window
    step = max(_CHUNK, int(4.0 * math.sqrt(mu / nu)) + 1)

    def block(a, b):
        j = np.arange(a, b + 1, dtype=float)
        t = log_unnormalized(j, mu, nu)
        if power:
            t = t + power * np.log(np.where(j > 0, j, 1.0)) + np.where(j > 0, 0.0, -np.inf)
        return t

    terms = block(lo, hi)
    left_done = lo == 0
    right_done = False
    log_tol = math.log(rel_tol)
    while True:
        if hi - lo + 1 > max_terms:
            raise ConvergenceError(
                f"COM-Poisson series (mu={mu}, nu={nu}) did not converge "
                f"within {max_terms} terms"
            )
        if not left_done:
            new_lo = max(0, lo - step)
            terms = np.concatenate([block(new_lo, lo - 1), terms])
            lo = new_lo
        if not right_done:
            terms = np.concatenate([terms, block(hi + 1, hi + step)])
            hi += step
        log_sum = logsumexp(terms)
        if not left_done:
            if lo == 0:
                left_done = True
            else:
                # ratio of the next term down to the edge term, < 1 below the mode
                log_r = nu * (math.log(lo) - log_mu)
                if power:
                    log_r += power * (math.log(lo - 1) - math.log(lo)) if lo > 1 else -np.inf
                edge = terms[0]
                if log_r < 0 and edge - log_sum < log_tol:
                    tail = edge + log_r - math.log(-math.expm1(log_r))
                    left_done = tail - log_sum < log_tol
        if not right_done:
            log_r = nu * (log_mu - math.log(hi + 1))
            if power:
                log_r += power * (math.log(hi + 1) - math.log(hi))
            edge = terms[-1]
            if log_r < 0 and edge - log_sum < log_tol:
                tail = edge + log_r - math.log(-math.expm1(log_r))
                right_done = tail - log_sum < log_tol
        if left_done and right_done:
            return lo, terms
        step *= 2


@lru_cache(maxsize=8192)
def _log_normalizer_cached(mu, nu, rel_tol, max_terms):
    _, terms = _series_window(mu, nu, rel_tol, max_terms)
    return float(logsumexp(terms))


def _as_params(params):
    if isinstance(params, ComPoissonParams):
        return params
    mu, nu = params
    return ComPoissonParams(float(mu), float(nu))


def log_normalizer(params, cfg=DEFAULT_CONFIG):
    """log Z(mu, nu) to relative precision ``cfg.rel_tol``.

    Raises
    ------
    ConvergenceError
        If ``cfg.max_terms`` terms are not enough to meet the criterion.
    """
    p = _as_params(params)
    return _log_normalizer_cached(float(p.mu), float(p.nu), cfg.rel_tol, cfg.max_terms)


def log_pmf(y, params, cfg=DEFAULT_CONFIG):
    """Normalized log pmf, vectorized over ``y``."""
    p = _as_params(params)
    y_arr = np.asarray(y)
    if np.any(y_arr < 0):
        raise ValueError("y must be non-negative")
    out = log_unnormalized(y_arr, p.mu, p.nu) - log_normalizer(p, cfg)
    return float(out) if out.ndim == 0 else out


def pmf_table(params, upper, cfg=DEFAULT_CONFIG):
    """pmf evaluated at ``0, 1, ..., upper``."""
    p = _as_params(params)
    y = np.arange(int(upper) + 1)
    return np.exp(log_unnormalized(y, p.mu, p.nu) - log_normalizer(p, cfg))


def moments_approx(params):
    """The approximations ``(mu, mu / nu)`` for mean and variance.

    These are rough for small ``mu``; see :func:`moments_exact`.
    """
    p = _as_params(params)
    return p.mu, p.mu / p.nu


def moments_exact(params, cfg=DEFAULT_CONFIG):
    """Mean and variance by truncated summation."""
    p = _as_params(params)
    log_z = log_normalizer(p, cfg)
    out = []
    for power in (1, 2):
        lo, terms = _series_window(p.mu, p.nu, cfg.rel_tol, cfg.max_terms, power=power)
        out.append(float(np.exp(logsumexp(terms) - log_z)))
    mean, second = out
    return mean, second - mean * mean


def cdf(y, params, cfg=DEFAULT_CONFIG):
    """P(Y <= y)."""
    p = _as_params(params)
    if y < 0:
        return 0.0
    return float(min(1.0, pmf_table(p, int(math.floor(y)), cfg).sum()))


def quantile(prob, params, cfg=DEFAULT_CONFIG):
    """Smallest integer ``y`` with ``cdf(y) >= prob``."""
    if not 0 < prob < 1:
        raise ValueError("prob must lie in (0, 1)")
    p = _as_params(params)
    log_z = log_normalizer(p, cfg)
    start = 0
    width = max(_CHUNK, int(p.mu + 10 * math.sqrt(p.mu / p.nu)) + 1)
    total = 0.0
    while True:
        y = np.arange(start, start + width)
        probs = np.exp(log_unnormalized(y, p.mu, p.nu) - log_z)
        cum = total + np.cumsum(probs)
        hit = np.flatnonzero(cum >= prob)
        if hit.size:
            return int(start + hit[0])
        if start > p.mu and probs[-1] < cfg.rel_tol * 1e-3:
            # rounding kept the cumulative sum just short of prob
            return int(start + width - 1)
        total = float(cum[-1])
        start += width
        width *= 2


# ---------------------------------------------------------------------------
# rejection sampling


def _geometric_p(mu, nu):
    return 2.0 * nu / (2.0 * mu * nu + 1.0 + nu)


def _sample_scalar(mu, nu, rng, max_iter):
    log_mu = math.log(mu)
    if nu >= 1.0:
        m = math.floor(mu)
        bound = (nu - 1.0) * (m * log_mu - math.lgamma(m + 1.0))
        for _ in range(max_iter):
            y = int(rng.poisson(mu))
            log_acc = (nu - 1.0) * (y * log_mu - math.lgamma(y + 1.0)) - bound
            if log_acc >= 0 or math.log(rng.random()) < log_acc:
                return y
    else:
        gp = _geometric_p(mu, nu)
        log_q = math.log1p(-gp)
        m = math.floor(mu / (1.0 - gp) ** (1.0 / nu))
        bound = _log_term(m, log_mu, nu) - math.log(gp) - m * log_q
        for _ in range(max_iter):
            y = int(rng.geometric(gp)) - 1
            log_acc = _log_term(y, log_mu, nu) - math.log(gp) - y * log_q - bound
            if log_acc >= 0 or math.log(rng.random()) < log_acc:
                return y
    raise SamplerError(f"rejection sampler exceeded {max_iter} iterations (mu={mu}, nu={nu})")


def sample(mu, nu, rng=None, size=None, max_iter=100_000):
    """Exact COM-Poisson draws by rejection.

    ``mu`` and ``nu`` may be scalars or arrays; they broadcast together with
    ``size``. No normalizing constant is ever evaluated.

    Parameters
    ----------
    mu, nu : float or array_like
        Positive parameters. ``sample(params, rng)`` with a
        :class:`ComPoissonParams` works too.
    rng : numpy.random.Generator
    size : int or tuple, optional
        Output shape when the parameters are scalar.
    max_iter : int
        Guard on rejection rounds; exceeding it raises :class:`SamplerError`.
    """
    if isinstance(mu, ComPoissonParams):
        # sample(params, rng, size=...)
        mu, nu, rng = mu.mu, mu.nu, nu
    if rng is None:
        raise TypeError("sample() needs a numpy Generator")
    if size is None and np.ndim(mu) == 0 and np.ndim(nu) == 0:
        if not (mu > 0 and nu > 0):
            raise ValueError("mu and nu must be positive")
        return _sample_scalar(float(mu), float(nu), rng, max_iter)

    mu_b, nu_b = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(nu, dtype=float))
    if size is not None:
        mu_b = np.broadcast_to(mu_b, size)
        nu_b = np.broadcast_to(nu_b, size)
    shape = mu_b.shape
    mu_f = np.ascontiguousarray(mu_b).ravel()
    nu_f = np.ascontiguousarray(nu_b).ravel()
    if np.any(mu_f <= 0) or np.any(nu_f <= 0):
        raise ValueError("mu and nu must be positive")

    out = np.empty(mu_f.size, dtype=np.int64)
    pois = nu_f >= 1.0
    if pois.all():
        _reject_poisson(mu_f, nu_f, rng, out, max_iter)
    elif not pois.any():
        _reject_geometric(mu_f, nu_f, rng, out, max_iter)
    else:
        part = np.empty(int(pois.sum()), dtype=np.int64)
        _reject_poisson(mu_f[pois], nu_f[pois], rng, part, max_iter)
        out[pois] = part
        part = np.empty(int((~pois).sum()), dtype=np.int64)
        _reject_geometric(mu_f[~pois], nu_f[~pois], rng, part, max_iter)
        out[~pois] = part
    return out.reshape(shape)


def _reject_rounds(draw, log_ratio, size, rng, out, max_iter, batch=4):
    """Vectorized rejection: ``batch`` candidates per pending entry each round.

    The first accepted candidate of every entry is kept, which is exactly a
    draw from the target; batching only cuts the number of numpy rounds.
    """
    idx = np.arange(size)
    for _ in range(max_iter):
        rows = np.repeat(idx, batch)
        cand = draw(rows)
        ok = (np.log(rng.random(rows.size)) < log_ratio(cand, rows)).reshape(-1, batch)
        hit = ok.any(axis=1)
        first = ok.argmax(axis=1)
        out[idx[hit]] = cand.reshape(-1, batch)[hit, first[hit]]
        idx = idx[~hit]
        if idx.size == 0:
            return
    raise SamplerError(f"rejection sampler exceeded {max_iter} rounds")


def _reject_poisson(mu, nu, rng, out, max_iter):
    # target / envelope = (mu**y / y!)**(nu - 1), maximal at y = floor(mu)
    log_mu = np.log(mu)
    m = np.floor(mu)
    bound = (nu - 1.0) * (m * log_mu - gammaln(m + 1.0))
    _reject_rounds(
        lambda rows: rng.poisson(mu[rows]),
        lambda cand, rows: (nu[rows] - 1.0) * (cand * log_mu[rows] - gammaln(cand + 1.0)) - bound[rows],
        mu.size,
        rng,
        out,
        max_iter,
    )


def _reject_geometric(mu, nu, rng, out, max_iter):
    # geometric(p) on {0, 1, ...}; the ratio target / envelope is unimodal
    gp = _geometric_p(mu, nu)
    log_mu = np.log(mu)
    log_q = np.log1p(-gp)
    m = np.floor(mu / np.power(1.0 - gp, 1.0 / nu))
    bound = nu * (m * log_mu - gammaln(m + 1.0)) - m * log_q
    _reject_rounds(
        lambda rows: rng.geometric(gp[rows]) - 1,
        lambda cand, rows: nu[rows] * (cand * log_mu[rows] - gammaln(cand + 1.0)) - cand * log_q[rows] - bound[rows],
        mu.size,
        rng,
        out,
        max_iter,
    )
