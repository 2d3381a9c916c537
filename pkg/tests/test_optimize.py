import numpy as np
import pytest

from pvstyle import optimize
from pvstyle.optimize import OptimizationError, OptimizerParams


def quadratic_objective(target):
    def objective(x):
        diff = x - target
        return float(np.sum(diff * diff)), 2 * diff
    return objective


class TestParams:
    def test_rejects_bad_method(self):
        with pytest.raises(ValueError, match="method"):
            OptimizerParams(method="sgd")

    def test_rejects_bad_decay(self):
        with pytest.raises(ValueError, match="decay"):
            OptimizerParams(beta1=1.5)


class TestMinimizeAdam:
    def test_reaches_known_minimum(self, rng):
        target = rng.random((6, 6, 3))
        objective = quadratic_objective(target)
        init = rng.random((6, 6, 3))
        initial = objective(init)[0]
        result, trace = optimize.minimize(
            objective, init, OptimizerParams(iterations=500))
        assert trace.losses[-1] < 1e-4 * initial

    def test_early_stop_at_minimum(self, rng):
        target = rng.random((4, 4, 3))
        result, trace = optimize.minimize(
            quadratic_objective(target), target.copy(),
            OptimizerParams(iterations=400))
        assert trace.stop_reason == "converged"
        assert trace.iterations < 400

    def test_deterministic(self, rng):
        target = rng.random((4, 4, 3))
        init = rng.random((4, 4, 3))
        r1, t1 = optimize.minimize(
            quadratic_objective(target), init, OptimizerParams(iterations=50))
        r2, t2 = optimize.minimize(
            quadratic_objective(target), init, OptimizerParams(iterations=50))
        np.testing.assert_array_equal(r1, r2)
        assert t1.losses == t2.losses

    def test_projection_invariant(self, rng):
        # minimum outside the box: every iterate must stay inside
        target = np.full((3, 3, 3), 2.0)
        seen = []

        def objective(x):
            seen.append(x.copy())
            diff = x - target
            return float(np.sum(diff * diff)), 2 * diff

        result, _ = optimize.minimize(
            objective, rng.random((3, 3, 3)), OptimizerParams(iterations=100))
        for x in seen:
            assert x.min() >= 0.0 and x.max() <= 1.0
        assert np.allclose(result, 1.0, atol=1e-3)

    def test_trace_length(self, rng):
        _, trace = optimize.minimize(
            quadratic_objective(rng.random((3, 3, 3))), rng.random((3, 3, 3)),
            OptimizerParams(iterations=37, tolerance=0.0))
        assert trace.iterations == 37
        assert len(trace.losses) == 37

    def test_nonfinite_abort(self, rng):
        def objective(x):
            return float("nan"), np.zeros_like(x)

        with pytest.raises(OptimizationError, match="iteration"):
            optimize.minimize(objective, rng.random((2, 2, 3)),
                              OptimizerParams(iterations=5))


class TestMinimizeLBFGS:
    def test_quadratic_convergence(self, rng):
        target = rng.random((5, 5, 3))
        objective = quadratic_objective(target)
        init = rng.random((5, 5, 3))
        initial = objective(init)[0]
        result, trace = optimize.minimize(
            objective, init, OptimizerParams(method="lbfgs", iterations=100))
        assert trace.losses[-1] < 1e-6 * initial

    def test_iterates_stay_in_box(self, rng):
        target = np.full((3, 3, 3), -1.0)
        result, _ = optimize.minimize(
            quadratic_objective(target), rng.random((3, 3, 3)),
            OptimizerParams(method="lbfgs", iterations=50))
        assert result.min() >= 0.0
        assert np.allclose(result, 0.0, atol=1e-6)


class TestFiniteDiffCheck:
    def test_quadratic_exact(self, rng):
        objective = quadratic_objective(rng.random((4, 4, 3)))
        err = optimize.finite_diff_check(objective, rng.random((4, 4, 3)), 1e-5)
        assert err < 1e-8

    def test_detects_corrupted_gradient(self, rng):
        target = rng.random((4, 4, 3))

        def corrupted(x):
            diff = x - target
            return float(np.sum(diff * diff)), 4 * diff  # gradient scaled x2

        err = optimize.finite_diff_check(corrupted, rng.random((4, 4, 3)), 1e-5)
        assert err > 0.3

    def test_deterministic_sampling(self, rng):
        objective = quadratic_objective(rng.random((4, 4, 3)))
        point = rng.random((4, 4, 3))
        assert (optimize.finite_diff_check(objective, point.copy())
                == optimize.finite_diff_check(objective, point.copy()))


class TestTraceCSV:
    def test_columns(self, tmp_path, rng):
        _, trace = optimize.minimize(
            quadratic_objective(rng.random((3, 3, 3))), rng.random((3, 3, 3)),
            OptimizerParams(iterations=5, tolerance=0.0))
        p = tmp_path / "trace.csv"
        optimize.trace_csv(trace, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "iteration,total,content,style,photorealism,temporal"
        assert len(lines) == 6
