"""Simulation scenarios, exact quantile oracles and the MAE benchmark.

Two scenarios with ``x ~ U(0, 1)``:

* ``binomial``: ``y | x ~ Binomial(10, 0.3 x)``
* ``mixture``: ``0.4 Poisson(exp(1 + x)) + 0.2 Binomial(10, 1 - x) + 0.4 Geometric(0.2)``

The geometric component counts failures before the first success, so its
support starts at 0 and ``P(y) = 0.2 * 0.8**y``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .estimators import ComPoissonDPMRegressor, JitteredQuantileRegressor, child_rng

__all__ = [
    "SCENARIOS",
    "METHODS",
    "PRIMARY_LEVELS",
    "GRID_LEVELS",
    "Scenario",
    "generate",
    "sample_conditional",
    "true_cdf",
    "true_pmf",
    "true_quantile",
    "mae",
    "count_crossings",
    "BenchmarkSettings",
    "run_cell",
    "run_benchmark",
    "write_results",
    "RESULT_COLUMNS",
]

logger = logging.getLogger(__name__)

SCENARIOS = ("binomial", "mixture")
METHODS = ("bdr", "jitter_linear", "jitter_spline")
PRIMARY_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))
GRID_LEVELS = (0.1, 0.5, 0.9)
RESULT_COLUMNS = ("scenario", "n", "method", "metric", "value", "seed")
MIX_WEIGHTS = (0.4, 0.2, 0.4)
GEOM_P = 0.2


@dataclass(frozen=True)
class Scenario:
    name: str
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; expected one of {SCENARIOS}")
        if self.n < 1:
            raise ValueError("n must be positive")


def sample_conditional(name, x, rng):
    """One count per entry of ``x`` from the scenario's conditional law."""
    x = np.asarray(x, dtype=float)
    if name == "binomial":
        return rng.binomial(10, 0.3 * x).astype(np.int64)
    if name != "mixture":
        raise ValueError(f"unknown scenario {name!r}")
    comp = rng.choice(3, size=x.shape, p=MIX_WEIGHTS)
    y = np.empty(x.shape, dtype=np.int64)
    y[comp == 0] = rng.poisson(np.exp(1.0 + x[comp == 0]))
    y[comp == 1] = rng.binomial(10, 1.0 - x[comp == 1])
    # numpy's geometric counts trials, shift to failures
    y[comp == 2] = rng.geometric(GEOM_P, size=int(np.sum(comp == 2))) - 1
    return y


def generate(scenario, rng):
    """Draw ``(x, y)`` for the scenario; ``x`` has shape (n,)."""
    x = rng.random(scenario.n)
    return x, sample_conditional(scenario.name, x, rng)


def true_cdf(name, y, x):
    """Conditional cdf ``P(Y <= y | x)``; broadcasts over ``y`` and ``x``."""
    y = np.asarray(y)
    x = np.asarray(x, dtype=float)
    if name == "binomial":
        return stats.binom.cdf(y, 10, 0.3 * x)
    if name == "mixture":
        w = MIX_WEIGHTS
        return (
            w[0] * stats.poisson.cdf(y, np.exp(1.0 + x))
            + w[1] * stats.binom.cdf(y, 10, 1.0 - x)
            + w[2] * stats.geom.cdf(y + 1, GEOM_P)
        )
    raise ValueError(f"unknown scenario {name!r}")


def true_pmf(name, y, x):
    y = np.asarray(y)
    return true_cdf(name, y, x) - np.where(y > 0, true_cdf(name, y - 1, x), 0.0)


def true_quantile(name, p, x):
    """Smallest integer ``y`` with ``true_cdf(y | x) >= p``, found by scanning."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty(x_arr.shape, dtype=np.int64)
    for k, xv in np.ndenumerate(x_arr):
        y = 0
        while true_cdf(name, y, xv) < p:
            y += 1
        out[k] = y
    return int(out[0]) if np.ndim(x) == 0 else out


def mae(estimates, truths):
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths differ in shape")
    return float(np.mean(np.abs(estimates - truths)))


def count_crossings(Q):
    """Number of ``(x, p1 < p2)`` triples with ``Q[x, p1] > Q[x, p2]``.

    ``Q`` has one row per grid point and one column per increasing level.
    """
    Q = np.asarray(Q)
    return int(sum(np.sum(Q[:, a][:, None] > Q[:, a + 1 :]) for a in range(Q.shape[1])))


@dataclass(frozen=True)
class BenchmarkSettings:
    """Chain and jitter settings used for every benchmark cell."""

    burn_in: int = 1000
    n_iter: int = 3000
    thin: int = 10
    a: float = 1.0
    psi: float = 1.0
    m_jitter: int = 100
    grid_size: int = 50


def _evaluation_points(grid_size):
    primary = np.array(PRIMARY_LEVELS)
    grid = np.linspace(0.0, 1.0, grid_size)
    return primary, grid


def _metrics(Q_primary, Q_grid, name, primary, grid):
    """MAE rows from quantile matrices over all ``PRIMARY_LEVELS``."""
    levels = list(PRIMARY_LEVELS)
    truth_primary = [true_quantile(name, p, x) for p, x in zip(levels, primary)]
    est_primary = [Q_primary[k, k] for k in range(len(levels))]
    rows = {"mae_x_eq_p": mae(est_primary, truth_primary)}
    for p in GRID_LEVELS:
        col = levels.index(p)
        rows[f"mae_grid_p{p}"] = mae(Q_grid[:, col], true_quantile(name, p, grid))
    # every evaluation design counts toward crossings
    rows["crossings"] = float(count_crossings(Q_grid) + count_crossings(Q_primary))
    return rows


def run_cell(scenario, method, settings, seed):
    """Fit one method on one simulated data set and return ``{metric: value}``.

    ``seed`` drives the data draw and the method's own randomness through
    separate child streams.
    """
    x, y = generate(scenario, child_rng(seed, 0))
    X = x[:, None]
    primary, grid = _evaluation_points(settings.grid_size)
    started = time.perf_counter()
    if method == "bdr":
        est = ComPoissonDPMRegressor(
            a=settings.a,
            psi=settings.psi,
            burn_in=settings.burn_in,
            n_iter=settings.n_iter,
            thin=settings.thin,
            random_state=int(child_rng(seed, 1).integers(2**31)),
        ).fit(X, y)
        Q_primary = est.predict_quantile(primary[:, None], PRIMARY_LEVELS)
        Q_grid = est.predict_quantile(grid[:, None], PRIMARY_LEVELS)
    elif method in ("jitter_linear", "jitter_spline"):
        est = JitteredQuantileRegressor(
            quantiles=PRIMARY_LEVELS,
            basis=method.split("_")[1],
            m_jitter=settings.m_jitter,
            random_state=int(child_rng(seed, 2).integers(2**31)),
        ).fit(X, y)
        Q_primary = est.predict_quantile(primary[:, None])
        Q_grid = est.predict_quantile(grid[:, None])
    else:
        raise ValueError(f"unknown method {method!r}")
    out = _metrics(Q_primary, Q_grid, scenario.name, primary, grid)
    logger.info("%s n=%d %s seed=%d: %.1fs", scenario.name, scenario.n, method, seed, time.perf_counter() - started)
    return out


def run_benchmark(scenarios, methods=METHODS, settings=None, seed=0, replications=1):
    """Run every (scenario, method, replication) cell.

    Cell seeds come from ``(seed, scenario, n, replication)``, so a cell's
    result does not depend on which other cells run alongside. Returns a
    list of row dicts keyed by ``RESULT_COLUMNS``.
    """
    settings = settings or BenchmarkSettings()
    rows = []
    for scenario in scenarios:
        for r in range(replications):
            # all methods of a replication see the same data
            key = [int(seed), SCENARIOS.index(scenario.name), scenario.n, r, int(scenario.seed)]
            cell_seed = int(np.random.SeedSequence(key).generate_state(1)[0])
            for method in methods:
                for metric, value in run_cell(scenario, method, settings, cell_seed).items():
                    rows.append(
                        {
                            "scenario": scenario.name,
                            "n": scenario.n,
                            "method": method,
                            "metric": metric,
                            "value": value,
                            "seed": cell_seed,
                        }
                    )
    return rows


def write_results(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": repr(float(row["value"]))})
