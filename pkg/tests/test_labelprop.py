import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from srot import measures
from srot.errors import InvalidDataset, InvalidParameter
from srot.labelprop import (
    UNCLASSIFIED,
    LabeledMeasure,
    accuracy,
    barycentric_projection,
    propagate_labels,
    run_labelprop_experiment,
    write_labelprop_report,
)
from srot.measures import make_empirical
from srot.solvers import partial_ot, solve_exact


class TestPropagate:
    def test_identity(self):
        pred = propagate_labels(np.eye(4) / 4, [2, 0, 1, 1], np.full(4, 0.25))
        assert pred.tolist() == [2, 0, 1, 1]

    def test_empty_column(self):
        P = np.array([[0.5, 0.0], [0.0, 0.0]])
        pred = propagate_labels(P, [3, 4], [0.5, 0.5], threshold_frac=0.0)
        assert pred.tolist() == [3, UNCLASSIFIED]

    def test_threshold_boundary(self):
        # exactly a quarter of the target mass still counts
        P = np.array([[0.0625], [0.0625], [0.125]])
        assert propagate_labels(P, [0, 1, 2], [0.5]).tolist() == [2]
        assert propagate_labels(P * 0.999, [0, 1, 2], [0.5]).tolist() == [UNCLASSIFIED]

    def test_tie_lowest_index(self):
        P = np.array([[0.3], [0.3]])
        assert propagate_labels(P, [7, 8], [0.6]).tolist() == [7]

    def test_bad_args(self):
        with pytest.raises(InvalidParameter):
            propagate_labels(np.ones((2, 2)), [0, 1], [1.0])
        with pytest.raises(InvalidParameter):
            propagate_labels(np.ones((2, 2)), [0, 1], [1.0, 1.0], threshold_frac=1.5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 8), m=st.integers(1, 8))
    def test_threshold_zero_and_monotone(self, seed, n, m):
        rng = np.random.default_rng(seed)
        P = rng.uniform(size=(n, m)) * (rng.uniform(size=(n, m)) < 0.6)
        labels = rng.integers(0, 3, n)
        b = rng.uniform(0.1, 1.0, m)
        pred0 = propagate_labels(P, labels, b, 0.0)
        np.testing.assert_array_equal(pred0 != UNCLASSIFIED, P.sum(0) > 0)
        counts = [np.sum(propagate_labels(P, labels, b, t) != UNCLASSIFIED)
                  for t in np.linspace(0, 1, 11)]
        assert all(c2 <= c1 for c1, c2 in zip(counts, counts[1:]))


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([0, 1], [0, 1], [True, True]) == (1.0, 1.0)

    def test_all_unclassified(self):
        assert accuracy([-1, -1], [0, 1], [True, True]) == (0.0, None)

    def test_hand_enumerated(self):
        truth = [0, 0, 1, 1, 0, 1, 0, 1]
        clean = [True] * 6 + [False] * 2
        pred = [0, 1, 1, -1, 0, -1, -1, 1]
        # clean hits: samples 0, 2, 4; five predictions made; the outlier
        # at index 7 matches its label but is not clean
        acc, lab = accuracy(pred, truth, clean)
        assert acc == pytest.approx(3 / 6)
        assert lab == pytest.approx(3 / 5)

    def test_lengths(self):
        with pytest.raises(InvalidParameter):
            accuracy([0], [0, 1], [True, True])


class TestBarycentric:
    def test_permutation(self):
        X = np.arange(6.0).reshape(3, 2)
        perm = [2, 0, 1]
        P = np.zeros((3, 3))
        P[perm, np.arange(3)] = 1 / 3
        proj, empty = barycentric_projection(P, X)
        np.testing.assert_allclose(proj, X[perm])
        assert not empty.any()

    def test_midpoint(self):
        proj, _ = barycentric_projection(np.array([[0.25], [0.25]]), [[0.0], [2.0]])
        assert proj[0, 0] == 1.0

    def test_empty_column(self):
        proj, empty = barycentric_projection(np.array([[0.5, 0.0]]), [[1.0, 1.0]])
        assert empty.tolist() == [False, True] and np.all(np.isnan(proj[1]))

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5, 3))
        mu, nu = make_empirical(X), make_empirical(rng.normal(size=(5, 3)))
        P = solve_exact(mu.weights, nu.weights, np.linalg.norm(X[:, None] - nu.points[None], axis=2)).coupling
        expected = np.zeros((5, 3))
        for j in range(5):
            tot = 0.0
            for i in range(5):
                expected[j] += P[i, j] * X[i]
                tot += P[i, j]
            expected[j] /= tot
        proj, _ = barycentric_projection(P, X)
        np.testing.assert_allclose(proj, expected, rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_convex_hull(self, seed):
        # membership certified through the plan weights themselves: a convex
        # combination with nonnegative coefficients summing to one
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(6, 2))
        P = rng.uniform(size=(6, 4)) * (rng.uniform(size=(6, 4)) < 0.7)
        proj, empty = barycentric_projection(P, X)
        for j in np.flatnonzero(~empty):
            res = linprog(np.zeros(6), A_eq=np.vstack([X.T, np.ones(6)]),
                          b_eq=np.append(proj[j], 1.0), bounds=(0, None), method="highs")
            assert res.status == 0
            w = res.x
            assert np.abs(X.T @ w - proj[j]).max() <= 1e-9


class TestLabeledMeasure:
    def test_range(self):
        mu = make_empirical(np.zeros((3, 1)))
        LabeledMeasure(mu, [0, 1, 2], 3)
        with pytest.raises(InvalidParameter):
            LabeledMeasure(mu, [0, 1, 3], 3)


@pytest.fixture(scope="module")
def small():
    return measures.gen_labelprop_analog(seed=0, n_per_class=40, n_extra=20,
                                         n_swapped_per_class=10)


class TestExperiment:
    def test_empty_grid(self, small):
        assert run_labelprop_experiment(small, ["partial"], []) == []

    def test_single(self, small):
        rows = run_labelprop_experiment(small, ["partial"], [0.7])
        assert len(rows) == 1 and rows[0].method == "partial" and rows[0].m == 0.7

    def test_partial_matches_direct(self, small):
        row, = run_labelprop_experiment(small, ["partial"], [0.5])
        C = np.linalg.norm(small.source.points[:, None] - small.target.points[None], axis=2)
        P = partial_ot(small.source.weights, small.target.weights, C, 0.5)
        pred = propagate_labels(P, small.source_labels, small.target.weights)
        acc, _ = accuracy(pred, small.target_labels, ~small.target_outlier_truth)
        assert row.accuracy == acc

    def test_unknown_method(self, small):
        with pytest.raises(InvalidParameter):
            run_labelprop_experiment(small, ["median"], [0.5])

    def test_needs_labels(self):
        with pytest.raises(InvalidDataset):
            run_labelprop_experiment(measures.gen_toy_2d(5, 1, 1), ["partial"], [0.5])

    def test_report(self, small, tmp_path):
        rows = run_labelprop_experiment(small, ["partial", "truncated"], [0.5, 0.9])
        write_labelprop_report(rows, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "method,m,accuracy,labeled_accuracy" and len(lines) == 5
