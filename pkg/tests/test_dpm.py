import json
import math

import numpy as np
import pytest
from scipy import integrate

from cmpdensity import compoisson, dpm
from cmpdensity.dpm import (
    Dataset,
    DpmState,
    Hyperparams,
    PosteriorDraws,
    allocation_prior_weights,
    basis_index_probabilities,
    coclustering,
    local_weights,
    point_partition,
    run_chain,
    update_allocation,
    update_atoms,
    update_basis_indices,
    update_location_weights,
)
from cmpdensity.exchange import ExchangeProposalConfig, RegressionAtom, exchange_update_atom


def set_partitions(n):
    """All partitions of range(n) as label vectors in first-appearance order."""
    def rec(i, labels, k):
        if i == n:
            yield list(labels)
            return
        for h in range(k + 1):
            labels.append(h)
            yield from rec(i + 1, labels, max(k, h + 1))
            labels.pop()

    yield from rec(0, [], 0)


def make_state(S, C, n, log_gamma=None, a=1.0, psi=1.0, dim=1):
    S = np.asarray(S)
    k = int(S.max()) + 1
    atoms = [RegressionAtom(np.full(dim, 0.1 * h), np.zeros(dim)) for h in range(k)]
    lg = np.zeros(n) if log_gamma is None else np.asarray(log_gamma, dtype=float)
    return DpmState(S, np.asarray(C), atoms, a, psi, lg)


def line_data(x, y=None):
    x = np.asarray(x, dtype=float)
    y = np.zeros(x.size, dtype=int) if y is None else y
    return Dataset(np.asarray(y), np.column_stack([np.ones(x.size), x]))


class TestDataset:
    def test_valid(self):
        d = line_data([0.0, 1.0], [1, 2])
        assert (d.n, d.d) == (2, 2)
        assert d.y.dtype == np.int64

    @pytest.mark.parametrize(
        "y,X",
        [
            ([1.5, 2.0], np.ones((2, 1))),
            ([-1, 2], np.ones((2, 1))),
            ([1, 2], np.array([[1.0], [np.nan]])),
            ([1, 2, 3], np.ones((2, 1))),
            ([1, 2], np.ones(2)),
        ],
    )
    def test_invalid(self, y, X):
        with pytest.raises(ValueError):
            Dataset(np.asarray(y), X)

    def test_kernel_features_standardized(self):
        d = line_data([0.0, 1.0, 2.0, 3.0])
        F = d.kernel_features
        assert F.shape == (4, 1)
        assert F.mean() == pytest.approx(0.0)
        assert F.std() == pytest.approx(1.0)
        assert np.allclose(d.kernel_features_for(d.X[[1]]), F[[1]])

    def test_intercept_only_has_no_features(self):
        d = Dataset(np.array([1, 2, 3]), np.ones((3, 1)))
        assert d.kernel_features.shape == (3, 0)
        assert np.all(d.sq_dists == 0)


class TestHyperparams:
    def test_defaults(self):
        h = Hyperparams()
        assert h.base_measure.sd_b == 2.0 and h.a == 1.0
        assert h.shape_for(50) == pytest.approx(1 / 50)

    @pytest.mark.parametrize(
        "kw",
        [
            {"a": 0.0},
            {"prior_sd_b": -1.0},
            {"burn_in": 10, "n_iter": 10},
            {"thin": 0},
            {"gamma_update": "other"},
            {"gamma_shape": 0.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            Hyperparams(**kw)


class TestLocalWeights:
    def test_psi_zero_uniform(self):
        w = local_weights(np.array([0.0, 3.0, 7.0, 9.0]), 1, psi=0.0)
        assert np.allclose(w, 0.25)

    def test_identical_covariates_uniform(self):
        w = local_weights(np.full((5, 2), 1.3), 2, psi=4.0)
        assert np.allclose(w, 0.2)

    def test_hand_computation(self):
        # i is the first subject (0-based index 0), distances 0, .25, 1
        w = local_weights(np.array([0.0, 0.5, 1.0]), 0, psi=1.0)
        raw = np.array([1.0, math.exp(-0.25), math.exp(-1.0)])
        assert np.allclose(w, raw / raw.sum(), rtol=1e-14)

    def test_gamma_enters_multiplicatively(self):
        gamma = np.array([1.0, 2.0, 0.5])
        w = local_weights(np.array([0.0, 0.5, 1.0]), 0, 1.0, gamma)
        raw = gamma * np.array([1.0, math.exp(-0.25), math.exp(-1.0)])
        assert np.allclose(w, raw / raw.sum())

    def test_weight_matrix_matches_rows(self):
        rng = np.random.default_rng(0)
        d = line_data(rng.random(12))
        st = make_state(np.zeros(12, int), [3], 12, log_gamma=rng.normal(0, 2, 12))
        B = dpm.weight_matrix(st, d)
        for i in range(12):
            row = local_weights(d.kernel_features, i, st.psi, log_gamma=st.log_gamma)
            assert np.allclose(B[i], row, rtol=1e-12)


class TestAllocationWeights:
    def test_single_subject(self):
        d = line_data([0.3])
        st = make_state([0], [0], 1)
        w0, w, labels = allocation_prior_weights(st, d, 0)
        assert w0 == pytest.approx(1.0)
        assert w.size == 0 and labels.size == 0

    def test_hand_evaluation_n3(self):
        # one cluster holding all three subjects, its basis at j0 = 1, a = 1
        d = line_data([0.0, 0.5, 1.0])
        st = make_state([0, 0, 0], [1], 3)
        i = 0
        b = local_weights(d.kernel_features, i, 1.0)
        w0, w, labels = allocation_prior_weights(st, d, i)
        # without i: m = 2 and N = (0, 2, 0)
        assert w0 == pytest.approx(b[0] / 1 + b[1] / 3 + b[2] / 1, rel=1e-14)
        assert labels.tolist() == [0]
        assert w[0] == pytest.approx(b[1] * 2 / 3, rel=1e-14)

    def test_subject_in_singleton_is_removed(self):
        d = line_data([0.0, 0.5, 1.0])
        st = make_state([0, 1, 1], [0, 2], 3)
        w0, w, labels = allocation_prior_weights(st, d, 0)
        assert labels.tolist() == [1]
        b = local_weights(d.kernel_features, 0, 1.0)
        # i leaves basis 0 empty, basis 2 keeps two
        assert w0 == pytest.approx(b[0] + b[1] + b[2] / 3)
        assert w[0] == pytest.approx(b[2] * 2 / 3)

    def test_large_a_favours_new_cluster(self):
        d = line_data([0.0, 0.5, 1.0, 1.5])
        ratios = []
        for a in (1.0, 1e3, 1e6):
            st = make_state([0, 0, 1, 1], [0, 3], 4, a=a)
            w0, w, _ = allocation_prior_weights(st, d, 0)
            ratios.append(w.sum() / w0)
        assert ratios[0] > ratios[1] > ratios[2]
        assert ratios[2] < 1e-5

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_polya_urn_with_concentrated_location_weights(self, n):
        # identical covariates, all location weight on one basis j0
        d = Dataset(np.zeros(n, dtype=int), np.ones((n, 1)))
        a = 0.7
        j0 = n - 1
        lg = np.full(n, -800.0)
        lg[j0] = 0.0
        for S in set_partitions(n):
            k = max(S) + 1
            st = make_state(S, [j0] * k, n, log_gamma=lg, a=a)
            for i in range(n):
                w0, w, labels = allocation_prior_weights(st, d, i)
                m = np.bincount(np.delete(np.array(S), i), minlength=k)
                assert w0 == pytest.approx(a / (a + n - 1), rel=1e-12)
                assert np.allclose(w, m[labels] / (a + n - 1), rtol=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_weights_sum_to_one_by_enumeration(self, n):
        rng = np.random.default_rng(n)
        d = line_data(rng.random(n))
        for S in set_partitions(n):
            k = max(S) + 1
            for _ in range(3):
                C = rng.integers(0, n, k)
                st = make_state(S, C, n, log_gamma=rng.normal(0, 1, n), a=rng.uniform(0.2, 3))
                for i in range(n):
                    w0, w, _ = allocation_prior_weights(st, d, i)
                    assert w0 + w.sum() == pytest.approx(1.0, rel=1e-12)

    def test_bad_index(self):
        d = line_data([0.0, 1.0])
        st = make_state([0, 0], [0], 2)
        with pytest.raises(IndexError):
            allocation_prior_weights(st, d, 2)


class TestUpdateAllocation:
    def test_proposal_of_current_cluster_changes_nothing(self):
        n = 4
        d = line_data(np.linspace(0, 1, n), [1, 2, 1, 3])
        lg = np.full(n, -800.0)
        lg[0] = 0.0
        st = make_state([0] * n, [0], n, log_gamma=lg, a=1e-12)
        atoms = list(st.atoms)
        rng = np.random.default_rng(0)
        for i in range(n):
            update_allocation(st, d, i, rng)
        assert st.k == 1 and st.atoms[0] is atoms[0]
        assert np.array_equal(st.S, np.zeros(n))

    def test_state_stays_consistent(self):
        rng = np.random.default_rng(3)
        n = 25
        d = line_data(rng.random(n), rng.poisson(4, n))
        st = make_state(rng.integers(0, 4, n), rng.integers(0, n, 4), n, dim=2)
        st.S = np.unique(st.S, return_inverse=True)[1].astype(np.int64)
        st.atoms = st.atoms[: st.S.max() + 1]
        st.C = st.C[: st.S.max() + 1]
        st.recount()
        dpm._relabel(st)
        stats = {}
        for _ in range(20):
            for i in range(n):
                update_allocation(st, d, i, rng, stats=stats)
                st.check()
                _, first = np.unique(st.S, return_index=True)
                assert np.all(np.diff(first) > 0), "clusters not in first-appearance order"
        assert 0 < stats["accepted"] <= stats["proposed"]

    def test_never_calls_normalizer(self, monkeypatch):
        def boom(*args, **kwargs):
            raise AssertionError("normalizer evaluated")

        monkeypatch.setattr(compoisson, "log_normalizer", boom)
        monkeypatch.setattr(compoisson, "_log_normalizer_cached", boom)
        rng = np.random.default_rng(0)
        d = line_data(rng.random(20), rng.poisson(2, 20))
        run_chain(d, Hyperparams(burn_in=20, n_iter=40, thin=5, warmup_updates=5))


class TestBasisIndices:
    def test_singleton_cluster_uses_kernel_row(self):
        d = line_data([0.0, 0.4, 1.0, 1.1])
        st = make_state([0, 1, 1, 1], [0, 2], 4, log_gamma=[0.1, -0.3, 0.7, 0.0])
        p = basis_index_probabilities(st, d, 0)
        b = local_weights(d.kernel_features, 0, 1.0, log_gamma=st.log_gamma)
        assert np.allclose(p, b, rtol=1e-12)

    def test_identical_covariates_uniform(self):
        d = Dataset(np.zeros(5, dtype=int), np.ones((5, 1)))
        st = make_state([0, 0, 1, 1, 0], [0, 4], 5)
        assert np.allclose(basis_index_probabilities(st, d, 0), 0.2)

    def test_two_member_product_by_hand(self):
        d = line_data([0.0, 0.5, 1.0])
        st = make_state([0, 0, 1], [1, 2], 3)
        rows = np.array([local_weights(d.kernel_features, i, 1.0) for i in (0, 1)])
        # arbitrary positive row scalings must not matter
        prod = (3.7 * rows[0]) * (0.02 * rows[1])
        assert np.allclose(basis_index_probabilities(st, d, 0), prod / prod.sum(), atol=1e-10)

    def test_draws_follow_probabilities(self):
        d = line_data([0.0, 0.5, 1.0])
        st = make_state([0, 0, 1], [1, 2], 3, log_gamma=[0.0, -1.0, 0.5])
        p = basis_index_probabilities(st, d, 0)
        rng = np.random.default_rng(0)
        counts = np.zeros(3)
        for _ in range(20000):
            update_basis_indices(st, d, rng)
            counts[st.C[0]] += 1
        assert np.allclose(counts / counts.sum(), p, atol=0.015)
        st.check()

    def test_location_weight_gibbs_targets_posterior(self):
        # two subjects, both clusters on basis 0, Gamma(1, 1) priors:
        # p(g) ~ exp(-g0 - g1) * prod_i g0 K_i0 / (g0 K_i0 + g1 K_i1)
        d = line_data([0.0, 1.0])
        st = make_state([0, 1], [0, 0], 2, psi=0.25)
        K = np.exp(-0.25 * d.sq_dists)

        def dens(g0, g1):
            out = math.exp(-g0 - g1)
            for i in range(2):
                out *= g0 * K[i, 0] / (g0 * K[i, 0] + g1 * K[i, 1])
            return out

        lim = 40.0
        Z = integrate.dblquad(lambda g1, g0: dens(g0, g1), 0, lim, 0, lim, epsabs=1e-11)[0]
        E = integrate.dblquad(lambda g1, g0: dens(g0, g1) * g0 / (g0 + g1), 0, lim, 0, lim, epsabs=1e-11)[0] / Z
        rng = np.random.default_rng(11)
        vals = np.empty(40000)
        for t in range(vals.size):
            update_location_weights(st, d, rng, 1.0)
            g = np.exp(st.log_gamma)
            vals[t] = g[0] / g.sum()
        batches = vals.reshape(100, -1).mean(axis=1)
        mcse = batches.std(ddof=1) / math.sqrt(batches.size)
        assert abs(vals.mean() - E) < 4 * mcse


class TestUpdateAtoms:
    def test_single_cluster_matches_direct_exchange_update(self):
        rng = np.random.default_rng(0)
        d = line_data(rng.random(15), rng.poisson(3, 15))
        st = make_state(np.zeros(15, int), [0], 15, dim=2)
        cfg = ExchangeProposalConfig(0.3, 0.3)
        start = st.atoms[0].copy()
        update_atoms(st, d, cfg, np.random.default_rng(5))
        direct = exchange_update_atom(start, d.X, d.y, cfg, np.random.default_rng(5))
        assert np.array_equal(st.atoms[0].b, direct.b)
        assert np.array_equal(st.atoms[0].c, direct.c)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(8)
    x = rng.random(30)
    return line_data(x, rng.poisson(np.exp(1 + x)))


class TestChain:
    def test_one_snapshot(self, data):
        draws = run_chain(data, Hyperparams(burn_in=5, n_iter=8, thin=3, warmup_updates=2))
        assert len(draws) == 1
        assert draws.snapshots[0].iteration == 7

    def test_snapshot_count(self, data):
        draws = run_chain(data, Hyperparams(burn_in=10, n_iter=40, thin=5, warmup_updates=2))
        assert len(draws) == (40 - 10) // 5
        assert draws.k_trace.shape == (40,)

    def test_deterministic_and_serializable(self, data):
        h = Hyperparams(burn_in=10, n_iter=30, thin=4, seed=9, warmup_updates=3)
        a = run_chain(data, h).to_dict()
        b = run_chain(data, h).to_dict()
        assert json.dumps(a) == json.dumps(b)
        back = PosteriorDraws.from_dict(json.loads(json.dumps(a)))
        assert json.dumps(back.to_dict()) == json.dumps(a)

    def test_state_consistent_every_sweep(self, data):
        seen = []

        def check(it, state):
            state.check()
            seen.append(it)

        run_chain(data, Hyperparams(burn_in=10, n_iter=25, thin=5, warmup_updates=2), callback=check)
        assert seen == list(range(25))

    def test_fixed_gamma_stays_uniform(self, data):
        def check(it, state):
            assert np.all(state.log_gamma == 0.0)

        h = Hyperparams(burn_in=5, n_iter=10, thin=5, warmup_updates=2, gamma_update="fixed")
        run_chain(data, h, callback=check)


class TestPartitionSummaries:
    def test_coclustering_and_point_partition(self):
        snaps = [
            dpm.Snapshot(0, np.array([0, 0, 1]), np.array([0, 2]), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(3)),
            dpm.Snapshot(1, np.array([0, 0, 1]), np.array([0, 2]), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(3)),
            dpm.Snapshot(2, np.array([0, 1, 1]), np.array([0, 2]), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(3)),
        ]
        P = coclustering(snaps)
        assert P[0, 1] == pytest.approx(2 / 3)
        assert P[1, 2] == pytest.approx(1 / 3)
        assert np.allclose(np.diag(P), 1.0)
        assert point_partition(snaps).tolist() == [0, 0, 1]
