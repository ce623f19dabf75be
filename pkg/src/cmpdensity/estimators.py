"""scikit-learn style estimators wrapping the DPM sampler and the jittering baseline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dpm import Dataset, Hyperparams, run_chain
from .jitter import LinearBasis, SplineBasis, estimate_count_quantile, fit_jittered
from .predictive import conditional_pmf, conditional_quantile, draw_fresh_atoms

__all__ = ["Standardizer", "ComPoissonDPMRegressor", "JitteredQuantileRegressor", "child_rng"]


def child_rng(seed, *path):
    """Generator for the stream at ``path`` below ``seed`` (deterministic)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


def _check_quantiles(quantiles):
    q = np.atleast_1d(np.asarray(quantiles, dtype=float))
    if q.ndim != 1 or q.size == 0:
        raise ValueError("need at least one quantile level")
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantile levels must lie in (0, 1)")
    if np.any(np.diff(q) <= 0):
        raise ValueError("quantile levels must be strictly increasing")
    return q


def _check_counts(y):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must hold non-negative integer counts")
    return y.astype(np.int64)


class Standardizer:
    """Affine map ``z = (x - center) / scale`` recorded at fit time.

    Constant columns keep scale 1 so they pass through centred at zero.
    """

    def __init__(self, center, scale):
        self.center = np.asarray(center, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def fit(cls, X, enabled=True):
        X = np.asarray(X, dtype=float)
        if not enabled:
            return cls(np.zeros(X.shape[1]), np.ones(X.shape[1]))
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.center) / self.scale

    def inverse(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.center

    def design(self, X):
        Z = self.transform(X)
        return np.hstack([np.ones((Z.shape[0], 1)), Z])

    def to_dict(self):
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["center"], d["scale"])


class ComPoissonDPMRegressor(BaseEstimator, RegressorMixin):
    """Density regression for counts with a covariate-dependent DPM of COM-Poisson regressions.

    Covariates are standardized (when ``standardize``) and an intercept is
    prepended before sampling. Predictions are posterior predictive
    quantiles; every level at a given ``x`` comes from one predictive pmf, so
    the curves never cross.

    Parameters
    ----------
    a : float
        DP concentration, held fixed.
    psi : float
        Bandwidth of the squared-exponential covariate kernel.
    prior_sd_b, prior_sd_c : float
        Scales of the normal base measure on the two link coefficient vectors.
    burn_in, n_iter, thin : int
        Chain length settings; ``n_iter`` counts all sweeps.
    step_mu, step_nu : float
        Initial random-walk scales, tuned during burn-in.
    gamma_update : {"gibbs", "fixed"}
        How the kernel location weights are treated.
    gamma_shape : float, optional
        Gamma prior shape for the location weights; ``1 / n`` when None.
    adapt : bool
        Tune the step sizes during burn-in.
    warmup_updates : int
        Exchange updates applied to the initial single-cluster atom.
    standardize : bool
    random_state : int
    """

    def __init__(
        self,
        a=1.0,
        psi=1.0,
        prior_sd_b=2.0,
        prior_sd_c=2.0,
        burn_in=1000,
        n_iter=3000,
        thin=10,
        step_mu=0.1,
        step_nu=0.1,
        gamma_update="gibbs",
        gamma_shape=None,
        adapt=True,
        warmup_updates=50,
        standardize=True,
        random_state=0,
    ):
        self.a = a
        self.psi = psi
        self.prior_sd_b = prior_sd_b
        self.prior_sd_c = prior_sd_c
        self.burn_in = burn_in
        self.n_iter = n_iter
        self.thin = thin
        self.step_mu = step_mu
        self.step_nu = step_nu
        self.gamma_update = gamma_update
        self.gamma_shape = gamma_shape
        self.adapt = adapt
        self.warmup_updates = warmup_updates
        self.standardize = standardize
        self.random_state = random_state

    def _hyper(self):
        return Hyperparams(
            prior_sd_b=self.prior_sd_b,
            prior_sd_c=self.prior_sd_c,
            a=self.a,
            psi=self.psi,
            burn_in=self.burn_in,
            n_iter=self.n_iter,
            thin=self.thin,
            seed=int(self.random_state),
            step_mu=self.step_mu,
            step_nu=self.step_nu,
            gamma_update=self.gamma_update,
            gamma_shape=self.gamma_shape,
            adapt=self.adapt,
            warmup_updates=self.warmup_updates,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = _check_counts(y)
        self.hyper_ = self._hyper()
        self.scaler_ = Standardizer.fit(X, self.standardize)
        self.data_ = Dataset(y, self.scaler_.design(X))
        self.draws_ = run_chain(self.data_, self.hyper_)
        self.fresh_ = draw_fresh_atoms(
            self.draws_, self.data_.d, self.hyper_.base_measure, child_rng(self.random_state, 1)
        )
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_draws(cls, draws, data, scaler, hyper, **params):
        """Rebuild a fitted estimator from stored posterior draws."""
        est = cls(random_state=hyper.seed, **params)
        est.hyper_ = hyper
        est.scaler_ = scaler
        est.data_ = data
        est.draws_ = draws
        est.fresh_ = draw_fresh_atoms(draws, data.d, hyper.base_measure, child_rng(hyper.seed, 1))
        est.n_features_in_ = data.d - 1
        return est

    def _design(self, X):
        check_is_fitted(self, "draws_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.scaler_.design(X)

    def predict_pmf(self, X):
        """List of :class:`ConditionalPmf`, one per row of ``X``."""
        return [conditional_pmf(x, self.draws_, self.data_, fresh=self.fresh_) for x in self._design(X)]

    def predict_quantile(self, X, quantiles=(0.1, 0.5, 0.9)):
        """Integer array of shape ``(n_rows, n_levels)``."""
        q = _check_quantiles(quantiles)
        return np.array([conditional_quantile(q, pmf) for pmf in self.predict_pmf(X)], dtype=np.int64)

    def predict(self, X):
        """Posterior predictive median."""
        return self.predict_quantile(X, (0.5,))[:, 0]


class JitteredQuantileRegressor(BaseEstimator, RegressorMixin):
    """Jittered linear quantile regression for counts at several levels.

    Each level is fitted separately, so the resulting curves may cross.

    Parameters
    ----------
    quantiles : sequence of float
        Strictly increasing levels in (0, 1).
    basis : {"linear", "spline"}
        ``"spline"`` needs a single covariate.
    m_jitter : int
        Number of jitter replications whose coefficients are averaged.
    varsigma : float
        Floor inside the log transform.
    tie_break : bool
        Pick the lower tied minimizer in each check-loss fit (slower).
    random_state : int
    """

    def __init__(
        self, quantiles=(0.5,), basis="linear", m_jitter=100, varsigma=1e-5, tie_break=False, random_state=0
    ):
        self.quantiles = quantiles
        self.basis = basis
        self.m_jitter = m_jitter
        self.varsigma = varsigma
        self.tie_break = tie_break
        self.random_state = random_state

    def _make_basis(self, n_features):
        if self.basis == "linear":
            return LinearBasis()
        if self.basis == "spline":
            if n_features != 1:
                raise ValueError("the spline basis supports a single covariate")
            return SplineBasis()
        raise ValueError(f"unknown basis {self.basis!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = _check_counts(y)
        q = _check_quantiles(self.quantiles)
        x = X[:, 0] if self.basis == "spline" else X
        self.fits_ = [
            fit_jittered(
                y,
                x,
                p,
                basis=self._make_basis(X.shape[1]),
                m_jitter=self.m_jitter,
                rng=child_rng(self.random_state, k),
                varsigma=self.varsigma,
                tie_break=self.tie_break,
            )
            for k, p in enumerate(q)
        ]
        self.n_features_in_ = X.shape[1]
        return self

    def predict_quantile(self, X):
        """Integer array of shape ``(n_rows, n_levels)``."""
        check_is_fitted(self, "fits_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        x = X[:, 0] if self.basis == "spline" else X
        return np.column_stack([estimate_count_quantile(x, f) for f in self.fits_])

    def predict(self, X):
        """Quantile at the first level (the only one by default)."""
        return self.predict_quantile(X)[:, 0]
