"""Covariate-dependent Dirichlet process mixture of COM-Poisson regressions.

Each subject ``i`` carries an atom ``phi_i = (b, c)``. Distinct atoms form
clusters; every cluster is attached to a basis location ``C_h`` (a subject
index), and subject ``i`` reaches basis ``j`` with kernel weight

    b_ij  ~  gamma_j * exp(-psi * ||x_i - x_j||**2).

One sweep of :func:`run_chain` does, in order,

1. an allocation move per subject, proposed from the conditional prior and
   accepted with an exchange-algorithm likelihood ratio,
2. an exchange-MH update of every cluster atom,
3. a redraw of every cluster's basis index, then a refresh of the location
   weights ``gamma``.

No normalizing constant is evaluated anywhere in the chain. Labels are
0-based: ``S`` takes values in ``0..k-1`` and ``C`` in ``0..n-1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import compoisson
from .exchange import (
    AcceptanceTracker,
    ExchangeProposalConfig,
    NormalBaseMeasure,
    RegressionAtom,
    exchange_update_atom,
    link,
)

__all__ = [
    "Dataset",
    "Hyperparams",
    "DpmState",
    "Snapshot",
    "PosteriorDraws",
    "RegressionAtom",
    "local_weights",
    "weight_matrix",
    "allocation_prior_weights",
    "update_allocation",
    "update_atoms",
    "update_basis_indices",
    "basis_index_probabilities",
    "update_location_weights",
    "initial_state",
    "run_chain",
    "coclustering",
    "point_partition",
]

logger = logging.getLogger(__name__)

GAMMA_UPDATES = ("gibbs", "fixed")


@dataclass
class Dataset:
    """Counts ``y`` and an ``(n, d)`` design ``X`` that includes the intercept."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError("y must be 1-d with one entry per row of X")
        if y.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need n >= 1 and d >= 1")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains missing or non-finite values")
        if y.dtype.kind == "f":
            if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
                raise ValueError("y must hold integer counts")
        if np.any(y < 0):
            raise ValueError("counts must be non-negative")
        self.y = y.astype(np.int64)
        self.X = X

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @cached_property
    def kernel_features(self):
        """Non-constant covariate columns, standardized for the distance kernel."""
        sd = self.X.std(axis=0)
        keep = sd > 0
        if not keep.any():
            return np.zeros((self.n, 0))
        Z = self.X[:, keep]
        return (Z - Z.mean(axis=0)) / sd[keep]

    def kernel_features_for(self, x):
        """Map raw covariate rows onto the training kernel scale."""
        sd = self.X.std(axis=0)
        keep = sd > 0
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x[:, keep] - self.X[:, keep].mean(axis=0)) / sd[keep]

    def kernel(self, psi):
        """``exp(-psi * sq_dists)``, cached per bandwidth."""
        cache = self.__dict__.setdefault("_kernel_cache", {})
        if psi not in cache:
            cache[psi] = np.exp(-psi * self.sq_dists)
        return cache[psi]

    @cached_property
    def sq_dists(self):
        F = self.kernel_features
        sq = np.einsum("ij,ij->i", F, F)
        D2 = sq[:, None] + sq[None, :] - 2.0 * F @ F.T
        np.maximum(D2, 0.0, out=D2)
        np.fill_diagonal(D2, 0.0)
        return D2


@dataclass(frozen=True)
class Hyperparams:
    """Tuning and prior settings for :func:`run_chain`.

    ``gamma_update="fixed"`` keeps the location weights uniform. ``"gibbs"``
    gives them independent Gamma(``gamma_shape``, 1) priors and refreshes them
    once per sweep; ``gamma_shape=None`` means ``1 / n``.
    """

    prior_sd_b: float = 2.0
    prior_sd_c: float = 2.0
    a: float = 1.0
    psi: float = 1.0
    burn_in: int = 1000
    n_iter: int = 3000
    thin: int = 10
    seed: int = 0
    step_mu: float = 0.1
    step_nu: float = 0.1
    adapt: bool = True
    warmup_updates: int = 50
    gamma_update: str = "gibbs"
    gamma_shape: float | None = None

    def __post_init__(self):
        if self.prior_sd_b <= 0 or self.prior_sd_c <= 0:
            raise ValueError("prior scales must be positive")
        if self.a <= 0 or self.psi < 0:
            raise ValueError("a must be positive and psi non-negative")
        if self.burn_in < 0 or self.thin < 1 or self.n_iter <= self.burn_in:
            raise ValueError("need n_iter > burn_in >= 0 and thin >= 1")
        if self.gamma_update not in GAMMA_UPDATES:
            raise ValueError(f"gamma_update must be one of {GAMMA_UPDATES}")
        if self.gamma_shape is not None and self.gamma_shape <= 0:
            raise ValueError("gamma_shape must be positive")

    @property
    def base_measure(self):
        return NormalBaseMeasure(self.prior_sd_b, self.prior_sd_c)

    def shape_for(self, n):
        return self.gamma_shape if self.gamma_shape is not None else 1.0 / n


@dataclass
class DpmState:
    """Full chain state.

    ``sizes[h]`` (members of cluster ``h``) and ``basis_count[j]`` (subjects
    whose cluster sits on basis ``j``) are kept in sync with ``S`` and ``C``.
    """

    S: np.ndarray
    C: np.ndarray
    atoms: list
    a: float
    psi: float
    log_gamma: np.ndarray
    sizes: np.ndarray = field(default=None)
    basis_count: np.ndarray = field(default=None)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.int64)
        self.C = np.asarray(self.C, dtype=np.int64)
        self.log_gamma = np.asarray(self.log_gamma, dtype=float)
        if self.sizes is None or self.basis_count is None:
            self.recount()

    @property
    def k(self):
        return len(self.atoms)

    @property
    def n(self):
        return self.S.shape[0]

    @property
    def gamma(self):
        """Location weights rescaled to sum to ``n``."""
        w = np.exp(self.log_gamma - self.log_gamma.max())
        return w * (self.n / w.sum())

    def recount(self):
        self.sizes = np.bincount(self.S, minlength=len(self.atoms)).astype(np.int64)
        self.basis_count = np.bincount(self.C[self.S], minlength=self.n).astype(np.int64)

    def check(self):
        """Raise ``AssertionError`` if the state is internally inconsistent."""
        k = self.k
        assert self.C.shape == (k,), "C length differs from the number of atoms"
        assert k <= self.n
        assert np.array_equal(np.unique(self.S), np.arange(k)), "labels not compact"
        assert np.all((self.C >= 0) & (self.C < self.n)), "basis index out of range"
        assert np.array_equal(self.sizes, np.bincount(self.S, minlength=k))
        assert np.array_equal(self.basis_count, np.bincount(self.C[self.S], minlength=self.n))

    def copy(self):
        return DpmState(
            self.S.copy(),
            self.C.copy(),
            [atom.copy() for atom in self.atoms],
            self.a,
            self.psi,
            self.log_gamma.copy(),
            self.sizes.copy(),
            self.basis_count.copy(),
        )


def _log_normalize(v):
    top = v.max()
    return v - (top + math.log(np.exp(v - top).sum()))


def local_weights(X, i, psi, gamma=None, *, sq_dists=None, log_gamma=None):
    """Kernel weights ``b_i.`` of subject ``i`` over all basis locations.

    ``X`` holds the kernel features (no intercept). Pass ``sq_dists`` to
    reuse a precomputed squared-distance matrix and ``log_gamma`` to supply
    the location weights on the log scale.
    """
    return np.exp(_local_log_weights(X, i, psi, gamma, sq_dists, log_gamma))


def _local_log_weights(X, i, psi, gamma=None, sq_dists=None, log_gamma=None):
    if sq_dists is not None:
        d2 = sq_dists[i]
    else:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        diff = X - X[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
    n = d2.shape[0]
    if log_gamma is None:
        log_gamma = np.zeros(n) if gamma is None else np.log(np.asarray(gamma, dtype=float))
    return _log_normalize(log_gamma - psi * d2)


def _state_log_weights(state, data, i):
    return _local_log_weights(None, i, state.psi, sq_dists=data.sq_dists, log_gamma=state.log_gamma)


def allocation_prior_weights(state, data, i, b=None):
    """Conditional-prior weights for moving subject ``i``.

    ``b`` may carry the precomputed kernel row ``b_i.``.

    Returns
    -------
    w0 : float
        Weight of opening a new cluster.
    w : ndarray
        Weights of the clusters that remain once ``i`` is removed.
    labels : ndarray
        Cluster labels matching ``w``.
    """
    if not 0 <= i < state.n:
        raise IndexError(f"subject index {i} out of range")
    if b is None:
        b = np.exp(_state_log_weights(state, data, i))
    a = state.a
    h_i = state.S[i]
    j_i = state.C[h_i]
    N = state.basis_count
    # subject i's own basis loses one member once i is removed
    w0 = a * float(b @ (1.0 / (a + N)))
    w0 += a * b[j_i] * (1.0 / (a + N[j_i] - 1) - 1.0 / (a + N[j_i]))
    m = state.sizes.copy()
    m[h_i] -= 1
    labels = np.flatnonzero(m > 0)
    Ch = state.C[labels]
    N_ex = N[Ch] - (Ch == j_i)
    w = b[Ch] * m[labels] / (a + N_ex)
    return w0, w, labels


def _choose(weights, rng):
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def _log_q(y, mu, nu):
    return nu * (y * math.log(mu) - math.lgamma(y + 1.0))


def _relabel(state):
    """Order clusters by first appearance in ``S``."""
    _, first = np.unique(state.S, return_index=True)
    order = np.argsort(first)  # old labels in order of first appearance
    if np.array_equal(order, np.arange(order.size)):
        return
    new_of_old = np.empty_like(order)
    new_of_old[order] = np.arange(order.size)
    state.S = new_of_old[state.S]
    state.C = state.C[order]
    state.atoms = [state.atoms[h] for h in order]
    state.sizes = state.sizes[order]


def update_allocation(state, data, i, rng, base=None, stats=None, b=None):
    """Step 1 for subject ``i``; mutates and returns ``state``.

    A destination (new cluster or an existing one) is proposed from the
    conditional prior. One auxiliary count is drawn at ``x_i`` under the
    proposed atom and the move is accepted with the exchange ratio.
    ``b`` optionally supplies the kernel row ``b_i.`` under the current gamma.
    """
    base = base if base is not None else NormalBaseMeasure()
    if b is None:
        b = np.exp(_state_log_weights(state, data, i))
    w0, w, labels = allocation_prior_weights(state, data, i, b)
    pick = _choose(np.concatenate(([w0], w)), rng)
    h_cur = int(state.S[i])
    if pick > 0 and labels[pick - 1] == h_cur:
        return state  # theta* = theta: ratio is exactly one, nothing moves
    x_i = data.X[i : i + 1]
    y_i = int(data.y[i])
    if pick == 0:
        proposal = base.draw(data.d, rng)
    else:
        proposal = state.atoms[labels[pick - 1]]
    mu, nu = (float(v[0]) for v in state.atoms[h_cur].params_at(x_i))
    mu_s, nu_s = (float(v[0]) for v in proposal.params_at(x_i))
    y_aux = compoisson.sample(mu_s, nu_s, rng)
    log_alpha = (
        _log_q(y_aux, mu, nu) + _log_q(y_i, mu_s, nu_s) - _log_q(y_i, mu, nu) - _log_q(y_aux, mu_s, nu_s)
    )
    if stats is not None:
        stats["proposed"] = stats.get("proposed", 0) + 1
    if not (log_alpha >= 0 or math.log(rng.random()) < log_alpha):
        return state
    if stats is not None:
        stats["accepted"] = stats.get("accepted", 0) + 1

    state.sizes[h_cur] -= 1
    state.basis_count[state.C[h_cur]] -= 1
    if pick == 0:
        j = _choose(b, rng)
        state.atoms.append(proposal)
        state.C = np.append(state.C, j)
        state.sizes = np.append(state.sizes, 1)
        state.S[i] = len(state.atoms) - 1
        state.basis_count[j] += 1
    else:
        h = labels[pick - 1]
        state.S[i] = h
        state.sizes[h] += 1
        state.basis_count[state.C[h]] += 1
    if state.sizes[h_cur] == 0:
        del state.atoms[h_cur]
        state.C = np.delete(state.C, h_cur)
        state.sizes = np.delete(state.sizes, h_cur)
        state.S[state.S > h_cur] -= 1
    _relabel(state)
    return state


def update_atoms(state, data, cfg, rng, tracker=None):
    """Step 2: exchange-MH update of every cluster atom given the partition."""
    order = np.argsort(state.S, kind="stable")
    bounds = np.concatenate(([0], np.cumsum(state.sizes)))
    for h in range(state.k):
        members = order[bounds[h] : bounds[h + 1]]
        state.atoms[h] = exchange_update_atom(
            state.atoms[h], data.X[members], data.y[members], cfg, rng, tracker
        )
    return state


def _log_weight_matrix(state, data):
    L = state.log_gamma[None, :] - state.psi * data.sq_dists
    top = L.max(axis=1, keepdims=True)
    return L - (top + np.log(np.exp(L - top).sum(axis=1, keepdims=True)))


def _kernel_products(state, data):
    """``(K, g, D)`` with ``g = gamma / max(gamma)`` and ``D = K @ g``.

    Returns None when the linear-scale products under- or overflow.
    """
    K = data.kernel(state.psi)
    g = np.exp(state.log_gamma - state.log_gamma.max())
    D = K @ g
    if not np.all(np.isfinite(D)) or np.any(D <= 0):
        return None
    return K, g, D


def weight_matrix(state, data):
    """All kernel rows ``b_i.`` under the current location weights."""
    prod = _kernel_products(state, data)
    if prod is None:
        return np.exp(_log_weight_matrix(state, data))
    K, g, D = prod
    return K * g[None, :] / D[:, None]


def _basis_log_weights(state, log_K, members):
    # the row normalizers of b_i. do not depend on j and drop out
    logp = log_K[members].sum(axis=0) + members.size * state.log_gamma
    return logp - logp.max()


def basis_index_probabilities(state, data, h):
    """Step-3 law of ``C_h``: ``prod_{i in h} b_ij`` normalized over ``j``."""
    members = np.flatnonzero(state.S == h)
    logp = _basis_log_weights(state, -state.psi * data.sq_dists, members)
    return np.exp(_log_normalize(logp))


def update_basis_indices(state, data, rng, hyper=None):
    """Step 3: redraw each ``C_h`` in proportion to ``prod_{i in h} b_ij``.

    Afterwards the location weights are refreshed according to
    ``hyper.gamma_update`` (left alone when ``hyper`` is None).
    """
    log_K = -state.psi * data.sq_dists
    order = np.argsort(state.S, kind="stable")
    bounds = np.concatenate(([0], np.cumsum(state.sizes)))
    for h in range(state.k):
        members = order[bounds[h] : bounds[h + 1]]
        state.C[h] = _choose(np.exp(_basis_log_weights(state, log_K, members)), rng)
    state.basis_count = np.bincount(state.C[state.S], minlength=state.n).astype(np.int64)
    if hyper is not None and hyper.gamma_update == "gibbs":
        update_location_weights(state, data, rng, hyper.shape_for(state.n))
    return state


def _log_gamma_variate(shape, rng):
    # Gamma(s) = Gamma(s + 1) * U**(1/s); stays finite on the log scale for tiny s
    return np.log(rng.gamma(shape + 1.0)) + np.log(rng.random(shape.shape)) / shape


def update_location_weights(state, data, rng, shape):
    """Gibbs refresh of ``gamma`` under independent Gamma(shape, 1) priors.

    The kernel normalizers are handled by exponential augmentation:
    ``T_i ~ Exp(D_i)`` with ``D_i = sum_l gamma_l K_il``, after which
    ``gamma_j ~ Gamma(shape + N_j, 1 + sum_i T_i K_ij)``.
    """
    E = rng.exponential(size=state.n)
    prod = _kernel_products(state, data)
    if prod is not None:
        K, g, D = prod
        # T_i = E_i / D_i on the gamma scale; g = gamma / max(gamma)
        s = K.T @ (E / D)
        log_rate = np.logaddexp(0.0, np.log(s) - state.log_gamma.max())
    else:
        log_K = -state.psi * data.sq_dists
        A = state.log_gamma[None, :] + log_K
        top = A.max(axis=1)
        log_D = top + np.log(np.exp(A - top[:, None]).sum(axis=1))
        M = (np.log(E) - log_D)[:, None] + log_K
        top = M.max(axis=0)
        log_rate = np.logaddexp(0.0, top + np.log(np.exp(M - top[None, :]).sum(axis=0)))
    shapes = shape + state.basis_count.astype(float)
    state.log_gamma = _log_gamma_variate(shapes, rng) - log_rate
    return state


@dataclass(frozen=True)
class Snapshot:
    iteration: int
    S: np.ndarray
    C: np.ndarray
    b: np.ndarray  # (k, d)
    c: np.ndarray  # (k, d)
    log_gamma: np.ndarray

    @property
    def k(self):
        return self.b.shape[0]

    def atom(self, h):
        return RegressionAtom(self.b[h], self.c[h])


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in snapshots plus per-sweep diagnostics."""

    snapshots: list
    a: float
    psi: float
    k_trace: np.ndarray
    allocation_rate: float
    atom_rate_mu: float
    atom_rate_nu: float
    step_mu: float
    step_nu: float

    def __len__(self):
        return len(self.snapshots)

    def to_dict(self):
        return {
            "a": self.a,
            "psi": self.psi,
            "k_trace": [int(v) for v in self.k_trace],
            "allocation_rate": self.allocation_rate,
            "atom_rate_mu": self.atom_rate_mu,
            "atom_rate_nu": self.atom_rate_nu,
            "step_mu": self.step_mu,
            "step_nu": self.step_nu,
            "snapshots": [
                {
                    "iteration": s.iteration,
                    "S": s.S.tolist(),
                    "C": s.C.tolist(),
                    "b": s.b.tolist(),
                    "c": s.c.tolist(),
                    "log_gamma": s.log_gamma.tolist(),
                }
                for s in self.snapshots
            ],
        }

    @classmethod
    def from_dict(cls, d):
        snaps = [
            Snapshot(
                int(s["iteration"]),
                np.asarray(s["S"], dtype=np.int64),
                np.asarray(s["C"], dtype=np.int64),
                np.asarray(s["b"], dtype=float).reshape(len(s["C"]), -1),
                np.asarray(s["c"], dtype=float).reshape(len(s["C"]), -1),
                np.asarray(s["log_gamma"], dtype=float),
            )
            for s in d["snapshots"]
        ]
        return cls(
            snaps,
            float(d["a"]),
            float(d["psi"]),
            np.asarray(d["k_trace"], dtype=np.int64),
            float(d["allocation_rate"]),
            float(d["atom_rate_mu"]),
            float(d["atom_rate_nu"]),
            float(d["step_mu"]),
            float(d["step_nu"]),
        )


def _snapshot(state, iteration):
    return Snapshot(
        iteration,
        state.S.copy(),
        state.C.copy(),
        np.array([atom.b for atom in state.atoms]),
        np.array([atom.c for atom in state.atoms]),
        state.log_gamma.copy(),
    )


def initial_state(data, hyper, rng, cfg=None):
    """Single cluster; G0 atom moved by ``hyper.warmup_updates`` exchange steps."""
    cfg = cfg or ExchangeProposalConfig(hyper.step_mu, hyper.step_nu, hyper.base_measure)
    atom = hyper.base_measure.draw(data.d, rng)
    for _ in range(hyper.warmup_updates):
        atom = exchange_update_atom(atom, data.X, data.y, cfg, rng)
    state = DpmState(
        S=np.zeros(data.n, dtype=np.int64),
        C=np.zeros(1, dtype=np.int64),
        atoms=[atom],
        a=hyper.a,
        psi=hyper.psi,
        log_gamma=np.zeros(data.n),
    )
    update_basis_indices(state, data, rng)
    return state


def _adapt(step, rate, target=0.25):
    if not np.isfinite(rate):
        return step
    return float(np.clip(step * math.exp(2.0 * (rate - target)), 1e-4, 5.0))


def run_chain(data, hyper, callback=None):
    """Run the sampler and return the thinned post-burn-in draws.

    Step sizes adapt every 50 sweeps during burn-in towards a 25% atom
    acceptance rate and are frozen afterwards. ``callback(it, state)`` is
    called after every sweep when given.
    """
    rng = np.random.default_rng(hyper.seed)
    base = hyper.base_measure
    cfg = ExchangeProposalConfig(hyper.step_mu, hyper.step_nu, base)
    state = initial_state(data, hyper, rng, cfg)
    tracker = AcceptanceTracker()
    alloc = {}
    post_tracker = AcceptanceTracker()
    post_alloc = {}
    snapshots = []
    k_trace = np.empty(hyper.n_iter, dtype=np.int64)
    for it in range(hyper.n_iter):
        burning = it < hyper.burn_in
        stats = alloc if burning else post_alloc
        B = weight_matrix(state, data)
        for i in range(data.n):
            update_allocation(state, data, i, rng, base, stats, B[i])
        update_atoms(state, data, cfg, rng, tracker if burning else post_tracker)
        update_basis_indices(state, data, rng, hyper)
        k_trace[it] = state.k
        if burning and hyper.adapt and (it + 1) % 50 == 0:
            cfg.step_mu = _adapt(cfg.step_mu, tracker.rate("mu"))
            cfg.step_nu = _adapt(cfg.step_nu, tracker.rate("nu"))
            tracker.reset()
        if not burning and (it - hyper.burn_in + 1) % hyper.thin == 0:
            snapshots.append(_snapshot(state, it))
        if callback is not None:
            callback(it, state)
        if (it + 1) % 500 == 0:
            logger.debug("sweep %d: k=%d", it + 1, state.k)
    rate = post_alloc.get("accepted", 0) / max(post_alloc.get("proposed", 0), 1)
    return PosteriorDraws(
        snapshots,
        hyper.a,
        hyper.psi,
        k_trace,
        rate,
        post_tracker.rate("mu"),
        post_tracker.rate("nu"),
        cfg.step_mu,
        cfg.step_nu,
    )


def coclustering(draws):
    """Posterior probability that each pair of subjects shares a cluster."""
    snaps = draws.snapshots if isinstance(draws, PosteriorDraws) else draws
    n = snaps[0].S.shape[0]
    P = np.zeros((n, n))
    for s in snaps:
        P += s.S[:, None] == s.S[None, :]
    return P / len(snaps)


def point_partition(draws):
    """Snapshot partition closest (least squares) to the co-clustering matrix."""
    snaps = draws.snapshots if isinstance(draws, PosteriorDraws) else draws
    P = coclustering(snaps)
    losses = [np.sum(((s.S[:, None] == s.S[None, :]) - P) ** 2) for s in snaps]
    return snaps[int(np.argmin(losses))].S.copy()

