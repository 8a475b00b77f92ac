import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aldsgd.mixing import (
    BudgetSchedule,
    NegativeWeightWarning,
    base_weight_matrix,
    effective_mixing,
    sample_laplacian,
    selection_matrices,
    write_matrix_csv,
)
from aldsgd.topology import BASE_13_EDGES, build_graph, laplacian, make_dynamic_set


@pytest.fixture
def dset13():
    return make_dynamic_set(build_graph("explicit", 8, BASE_13_EDGES), 3)


class TestBudget:
    @pytest.mark.parametrize("c", [0.0, -0.1, 1.5])
    def test_rejects(self, c):
        with pytest.raises(ValueError):
            BudgetSchedule(c)

    def test_uniform_probabilities(self, dset13):
        for p, dec in zip(BudgetSchedule(0.3).probabilities(dset13), dset13.decompositions):
            assert p.shape == (len(dec),) and np.all(p == 0.3)


class TestSampleLaplacian:
    def test_full_budget(self, dset13):
        rng = np.random.default_rng(0)
        for k in range(1, 7):
            L = sample_laplacian(dset13, k, BudgetSchedule(1.0), rng)
            assert (L == laplacian(dset13.graphs[(k - 1) % 3])).all()

    def test_phase_of_round_4(self, dset13):
        L = sample_laplacian(dset13, 4, BudgetSchedule(1.0), np.random.default_rng(0))
        assert (L == laplacian(dset13.graphs[0])).all()

    def test_half_budget_fraction(self, dset13):
        rng = np.random.default_rng(1)
        n, active, total = 3000, 0, 0
        for k in range(1, n + 1):
            L = sample_laplacian(dset13, k, BudgetSchedule(0.5), rng)
            active += -L[np.triu_indices(8, 1)].sum()
            total += 13
        # matchings are switched as a unit, so the edge-count variance is per matching
        sizes = np.array([len(mt) for dec in dset13.decompositions for mt in dec])
        sd = np.sqrt(n / 3 * (sizes**2).sum() * 0.25)
        assert abs(active - 0.5 * total) < 3 * sd

    def test_valid_laplacian(self, dset13):
        rng = np.random.default_rng(2)
        for k in range(1, 30):
            L = sample_laplacian(dset13, k, BudgetSchedule(0.4), rng)
            assert (L == L.T).all() and (L.sum(axis=1) == 0).all()
            assert set(np.unique(L[~np.eye(8, dtype=bool)])) <= {0, -1}

    def test_bit_identical_per_seed(self, dset13):
        a = [sample_laplacian(dset13, k, BudgetSchedule(0.5), np.random.default_rng(5)) for k in (1, 2)]
        b = [sample_laplacian(dset13, k, BudgetSchedule(0.5), np.random.default_rng(5)) for k in (1, 2)]
        assert all((x == y).all() for x, y in zip(a, b))

    def test_round_zero_rejected(self, dset13):
        with pytest.raises(ValueError):
            sample_laplacian(dset13, 0, BudgetSchedule(1.0), np.random.default_rng(0))

    def test_static_full_budget_constant(self):
        ds = make_dynamic_set(build_graph("ring", 5))
        rng = np.random.default_rng(0)
        first = sample_laplacian(ds, 1, BudgetSchedule(1.0), rng)
        assert all((sample_laplacian(ds, k, BudgetSchedule(1.0), rng) == first).all() for k in range(2, 10))


class TestBaseWeight:
    def test_alpha_zero(self):
        W = base_weight_matrix(laplacian(build_graph("ring", 4)), 0.0)
        assert np.array_equal(W.entries, np.eye(4))

    def test_two_nodes(self):
        W = base_weight_matrix(laplacian(build_graph("ring", 2)), 0.5)
        np.testing.assert_array_equal(W.entries, [[0.5, 0.5], [0.5, 0.5]])

    def test_ring4(self):
        W = base_weight_matrix(laplacian(build_graph("ring", 4)), 0.25).entries
        np.testing.assert_allclose(np.diag(W), 0.5)
        np.testing.assert_allclose(W.sum(axis=0), 1, atol=1e-12)
        np.testing.assert_allclose(W.sum(axis=1), 1, atol=1e-12)
        assert (W >= 0).all()

    def test_negative_flagged(self):
        with pytest.warns(NegativeWeightWarning):
            W = base_weight_matrix(laplacian(build_graph("star", 5)), 0.5)
        assert W.has_negative

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            base_weight_matrix(laplacian(build_graph("ring", 4)), -0.1)

    @given(st.integers(2, 9), st.floats(0, 2))
    @settings(max_examples=50, deadline=None)
    def test_doubly_stochastic(self, m, alpha):
        L = laplacian(build_graph("complete", m))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NegativeWeightWarning)
            W = base_weight_matrix(L, alpha).entries
        assert np.array_equal(W, W.T)
        np.testing.assert_allclose(W @ np.ones(m), 1, atol=1e-12)


class TestSelection:
    def test_self_leaders(self):
        A, B = selection_matrices([(i, i) for i in range(4)])
        assert np.array_equal(A, np.eye(4)) and np.array_equal(B, np.eye(4))

    def test_rank_one(self):
        A, _ = selection_matrices([(0, 0)] * 4)
        assert np.linalg.matrix_rank(A) == 1
        assert (A.sum(axis=0) == 1).all()

    def test_star_degree_leader(self):
        g = build_graph("star", 4)
        leaders = [(i, int(np.argmax(np.where(g.adjacency()[i] | (np.arange(4) == i), g.degrees, -1))))
                   for i in range(4)]
        _, T = selection_matrices(leaders, g.adjacency())
        for leaf in (1, 2, 3):
            assert np.array_equal(T[:, leaf], np.eye(4)[0])

    def test_out_of_neighborhood(self):
        g = build_graph("ring", 5)
        with pytest.raises(ValueError):
            selection_matrices([(2, 0)] + [(i, i) for i in range(1, 5)], g.adjacency())


class TestEffective:
    def test_no_leader_weight(self):
        W = base_weight_matrix(laplacian(build_graph("ring", 4)), 0.25)
        A = np.eye(4)
        assert np.array_equal(effective_mixing(W, A, A, 0, 0).entries, W.entries)

    def test_identity(self):
        I = np.eye(3)
        assert np.array_equal(effective_mixing(I, I, I, 0.2, 0.3).entries, I)

    def test_two_node_example(self):
        W = base_weight_matrix(laplacian(build_graph("ring", 2)), 0.5)
        A, T = selection_matrices([(0, 0), (0, 0)])
        np.testing.assert_allclose(effective_mixing(W, A, T, 0.1, 0.1).entries, [[0.6, 0.6], [0.4, 0.4]], atol=1e-15)

    def test_rejects_large_omega(self):
        I = np.eye(2)
        with pytest.raises(ValueError):
            effective_mixing(I, I, I, 0.5, 0.5)

    @given(st.integers(2, 8), st.floats(0, 0.49), st.floats(0, 0.49), st.integers(0, 10**6))
    @settings(max_examples=50, deadline=None)
    def test_column_stochastic(self, m, wn, wt, seed):
        rng = np.random.default_rng(seed)
        L = laplacian(build_graph("complete", m))
        W = base_weight_matrix(L, 1.0 / m)
        A, T = selection_matrices(rng.integers(0, m, (m, 2)))
        Wt = effective_mixing(W, A, T, wn, wt).entries
        np.testing.assert_allclose(Wt.sum(axis=0), 1, atol=1e-12)


def test_csv_dump(tmp_path):
    M = np.array([[0.1, 1 / 3], [2.0, -1e-17]])
    path = tmp_path / "w.csv"
    write_matrix_csv(M, path)
    back = np.loadtxt(path, delimiter=",")
    assert np.array_equal(back, M)
