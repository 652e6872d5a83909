import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srot.classifier import init_model
from srot.errors import EmptyMeasure, InvalidGamma
from srot.measures import make_empirical
from srot.reweighting import (
    OutlierMask,
    SrotConfig,
    default_gamma,
    detect_outliers,
    hard_weights,
    soft_cost,
    srot_hard,
    srot_hard_detailed,
    srot_soft,
    srot_soft_detailed,
)
from srot.solvers import SolverConfig, cost_matrix, partial_ot, sinkhorn_unbalanced, solve_exact


def threshold_model(k=20.0):
    """1D classifier: source for x < 0, target for x > 0, sharpness ``k``."""
    return init_model([1, 2], 0).with_params([np.array([[-k, k]]), np.zeros(2)])


@pytest.fixture
def line():
    rng = np.random.default_rng(0)
    src = make_empirical(-1.0 - rng.uniform(size=(6, 1)))
    tgt = make_empirical(1.0 + rng.uniform(size=(5, 1)))
    return src, tgt


class TestDetection:
    def test_perfect_classifier(self, line):
        src, tgt = line
        m = threshold_model()
        assert not detect_outliers(m, src, "source").flags.any()
        assert not detect_outliers(m, tgt, "target").flags.any()

    def test_opposite_side_flagged(self):
        m = threshold_model()
        tgt = make_empirical([[1.0], [-0.5]])
        mask = detect_outliers(m, tgt, "target")
        assert mask.flags.tolist() == [False, True]
        assert np.all(mask.confidences > 0.5)

    def test_toy_type2(self, toy, toy_ar_model):
        mask = detect_outliers(toy_ar_model, toy.target, "target")
        assert mask.flags[toy.target_outlier_truth].sum() >= 3

    def test_csv(self, tmp_path):
        mask = OutlierMask([True, False], [0.9, 0.7], "source")
        mask.to_csv(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "index,flag,confidence,side"
        back = OutlierMask.from_csv(tmp_path / "m.csv")
        assert back.flags.tolist() == [True, False] and back.side == "source"


class TestHardWeights:
    def test_example(self):
        w = hard_weights(OutlierMask([True, False, False, False], np.ones(4), "source"), 4)
        np.testing.assert_allclose(w, [0, 1 / 3, 1 / 3, 1 / 3])

    def test_no_flags(self):
        np.testing.assert_allclose(hard_weights(OutlierMask([False] * 5, np.ones(5), "target")), 0.2)

    def test_all_flags(self):
        with pytest.raises(EmptyMeasure):
            hard_weights(OutlierMask([True] * 3, np.ones(3), "source"))

    @settings(max_examples=50, deadline=None)
    @given(flags=st.lists(st.booleans(), min_size=1, max_size=40).filter(lambda f: not all(f)))
    def test_sum_and_support(self, flags):
        w = hard_weights(OutlierMask(flags, np.ones(len(flags)), "source"))
        assert abs(w.sum() - 1) <= 1e-12
        np.testing.assert_array_equal(w > 0, ~np.array(flags))


class TestSoftCost:
    def test_default_gamma(self):
        assert default_gamma(np.array([[1.0, 5.0], [2.0, 0.0]])) == 5.0
        with pytest.raises(InvalidGamma):
            default_gamma(np.zeros((2, 2)))

    def test_confident_clean_near_euclidean(self, line):
        src, tgt = line
        base = cost_matrix(src, tgt).values
        gaps = [np.max(soft_cost(src, tgt, threshold_model(k)).values - base)
                for k in (10.0, 100.0, 1000.0)]
        # CE grows linearly in the logit gap, so the extra terms shrink like 1/k
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] <= 1e-2 * gaps[0] * 1.01
        assert gaps[2] <= 1e-3 * base.max()

    def test_floor_dominates(self):
        m = threshold_model(k=1e3)
        src = make_empirical([[-1.0], [1.0]])  # second source point sits on the target side
        tgt = make_empirical([[1.0], [2.0]])
        C = soft_cost(src, tgt, m, gamma=1.0, ce_floor=1e-6)
        assert C.values[1].min() >= 1e6
        assert C.values[0].max() < 10

    def test_toy_outlier_costs(self, toy, toy_ar_model):
        C = soft_cost(toy.source, toy.target, toy_ar_model)
        base = cost_matrix(toy.source, toy.target).values
        assert C.kind.param == pytest.approx(base.max())
        cols = detect_outliers(toy_ar_model, toy.target, "target").flags
        rows = detect_outliers(toy_ar_model, toy.source, "source").flags
        assert C.values[:, cols].min() > C.values[np.ix_(~rows, ~cols)].max()

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), g=st.floats(0.01, 100.0), ratio=st.floats(0.1, 10.0))
    def test_dominates_and_linear(self, seed, g, ratio):
        rng = np.random.default_rng(seed)
        src = make_empirical(rng.normal(size=(4, 2)))
        tgt = make_empirical(rng.normal(size=(3, 2)))
        m = init_model([2, 6, 2], seed)
        base = cost_matrix(src, tgt).values
        d1 = soft_cost(src, tgt, m, gamma=g).values - base
        d2 = soft_cost(src, tgt, m, gamma=g * ratio).values - base
        assert np.all(d1 >= 0)
        np.testing.assert_allclose(d2, ratio * d1, rtol=1e-9)


class TestSrotHard:
    def test_recovery_bitwise(self, line):
        src, tgt = line
        plan = srot_hard(src, tgt, threshold_model())
        ref = solve_exact(src.weights, tgt.weights, cost_matrix(src, tgt))
        assert plan.coupling.tobytes() == ref.coupling.tobytes()

    def test_recovery_partial(self, line):
        src, tgt = line
        cfg = SrotConfig(base_solver="partial", partial_mass=0.7)
        plan = srot_hard(src, tgt, threshold_model(), cfg)
        ref = partial_ot(src.weights, tgt.weights, cost_matrix(src, tgt), 0.7)
        assert plan.coupling.tobytes() == ref.coupling.tobytes()

    def test_toy_flagged_zero(self, toy, toy_ar_model):
        res = srot_hard_detailed(toy.source, toy.target, toy_ar_model)
        P = res.plan.coupling
        assert np.all(P[res.source_mask.flags] == 0)
        assert np.all(P[:, res.target_mask.flags] == 0)
        np.testing.assert_allclose(P.sum(0)[~res.target_mask.flags],
                                   1 / (~res.target_mask.flags).sum())


class TestSrotSoft:
    def test_toy_outliers_untransported(self, toy, toy_ar_model):
        res = srot_soft_detailed(toy.source, toy.target, toy_ar_model)
        assert res.plan.solver == "partial"
        assert res.plan.coupling[:, res.target_mask.flags].sum() <= 1e-12
        assert res.plan.mass == pytest.approx(1 - res.target_mask.fraction)

    def test_zero_detection_limit(self, line):
        src, tgt = line
        m = threshold_model(k=30.0)
        plan = srot_soft(src, tgt, m, SrotConfig(base_solver="exact"))
        base = cost_matrix(src, tgt).values
        exact = solve_exact(src.weights, tgt.weights, base)
        C = soft_cost(src, tgt, m)
        bound = float((C.values - base).max())
        assert abs(np.sum(plan.coupling * base) - exact.objective) <= bound + 1e-12

    def test_rescale_masses(self, toy, toy_ar_model):
        res = srot_soft_detailed(toy.source, toy.target, toy_ar_model,
                                 SrotConfig(base_solver="partial", rescale=True, partial_mass=0.9))
        # the source has no detection, so it is the side rescaled to m
        assert res.a.sum() == pytest.approx(0.9)
        assert res.b.sum() == pytest.approx(1.0)

    def test_monotone_suppression(self, toy, toy_ar_model):
        C = soft_cost(toy.source, toy.target, toy_ar_model).values
        cols = detect_outliers(toy_ar_model, toy.target, "target").flags
        flagged = []
        for tau in (10.0, 1.0, 0.1, 0.05, 0.01):
            plan = sinkhorn_unbalanced(toy.source.weights, toy.target.weights, C,
                                       SolverConfig(epsilon=0.01, tau=tau, max_iters=3000))
            flagged.append(plan.coupling[:, cols].sum())
        assert all(x2 <= x1 + 1e-12 for x1, x2 in zip(flagged, flagged[1:]))
