"""Box-constrained first-order minimization over image pixels.

Adam is the default; L-BFGS with backtracking line search is available.
The box constraint [0, 1] is enforced by projection after every step, so
every intermediate iterate is a valid image.  Runs are deterministic:
identical inputs give bit-identical traces.
"""

from dataclasses import dataclass, field

import numpy as np

from . import PVStyleError


class OptimizationError(PVStyleError):
    pass


@dataclass(frozen=True)
class OptimizerParams:
    method: str = "adam"  # "adam" | "lbfgs"
    step: float = 0.02
    iterations: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    tolerance: float = 1e-6  # relative loss change for early stop
    history: int = 10  # lbfgs memory

    def __post_init__(self):
        if self.method not in ("adam", "lbfgs"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("decay rates must lie in (0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class OptimizationTrace:
    losses: list = field(default_factory=list)
    terms: list = field(default_factory=list)  # per-term breakdowns
    iterations: int = 0
    stop_reason: str = ""


def _evaluate(objective, x, iteration):
    result = objective(x)
    value, grad = result[0], result[1]
    terms = result[2] if len(result) > 2 else {}
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise OptimizationError(
            f"objective returned non-finite value/gradient at iteration {iteration}")
    return value, np.asarray(grad), terms


def minimize(objective, init, params):
    """Minimize objective(x) -> (value, grad[, terms]) over [0,1]^N.

    Returns the final iterate and a trace with one loss entry per
    iteration executed.
    """
    x = np.clip(np.asarray(init, dtype=np.float64), 0.0, 1.0)
    trace = OptimizationTrace()
    if params.method == "adam":
        _adam(objective, x, params, trace)
    else:
        _lbfgs(objective, x, params, trace)
    return x, trace


def _record(trace, value, terms):
    trace.losses.append(value)
    trace.terms.append(terms)
    trace.iterations += 1


def _converged(trace, params, streak):
    if len(trace.losses) < 2:
        return 0
    prev, cur = trace.losses[-2], trace.losses[-1]
    rel = abs(prev - cur) / max(abs(prev), 1e-12)
    return streak + 1 if rel < params.tolerance else 0


def _adam(objective, x, params, trace):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    streak = 0
    for t in range(1, params.iterations + 1):
        value, grad, terms = _evaluate(objective, x, t)
        _record(trace, value, terms)
        streak = _converged(trace, params, streak)
        if streak >= 10:
            trace.stop_reason = "converged"
            return
        m = params.beta1 * m + (1 - params.beta1) * grad
        v = params.beta2 * v + (1 - params.beta2) * grad * grad
        m_hat = m / (1 - params.beta1 ** t)
        v_hat = v / (1 - params.beta2 ** t)
        x -= params.step * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.clip(x, 0.0, 1.0, out=x)
    trace.stop_reason = "max_iterations"


def _lbfgs(objective, x, params, trace):
    s_list, y_list = [], []
    value, grad, terms = _evaluate(objective, x, 0)
    streak = 0
    for t in range(1, params.iterations + 1):
        _record(trace, value, terms)
        streak = _converged(trace, params, streak)
        if streak >= 10:
            trace.stop_reason = "converged"
            return
        direction = -_two_loop(grad, s_list, y_list)
        if np.dot(direction.ravel(), grad.ravel()) >= 0:
            direction = -grad
        step = 1.0 if s_list else params.step / max(np.abs(grad).max(), 1e-12)
        x_new, value_new, grad_new, terms_new = None, None, None, None
        for _ in range(20):
            candidate = np.clip(x + step * direction, 0.0, 1.0)
            v, g, tm = _evaluate(objective, candidate, t)
            if v <= value - 1e-4 * step * np.abs(
                    np.dot(direction.ravel(), grad.ravel())) or v < value:
                x_new, value_new, grad_new, terms_new = candidate, v, g, tm
                break
            step *= 0.5
        if x_new is None:
            trace.stop_reason = "line_search_failed"
            return
        s = x_new - x
        y = grad_new - grad
        if np.dot(s.ravel(), y.ravel()) > 1e-12:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > params.history:
                s_list.pop(0)
                y_list.pop(0)
        x[...] = x_new
        value, grad, terms = value_new, grad_new, terms_new
    trace.stop_reason = "max_iterations"


def _two_loop(grad, s_list, y_list):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.dot(y.ravel(), s.ravel())
        a = rho * np.dot(s.ravel(), q.ravel())
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s.ravel(), y.ravel()) / np.dot(y.ravel(), y.ravel())
    for a, rho, s, y in reversed(alphas):
        b = rho * np.dot(y.ravel(), q.ravel())
        q += (a - b) * s
    return q


def finite_diff_check(objective, point, step=1e-4, n_coords=64, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Samples a deterministic random subset of at least ``n_coords``
    coordinates; the error metric is |a - n| / max(|a|, |n|, 1e-8).
    """
    point = np.asarray(point, dtype=np.float64)
    _, grad, _ = _evaluate(objective, point, 0)
    rng = np.random.Generator(np.random.PCG64(seed))
    total = point.size
    count = min(total, max(n_coords, 64))
    coords = rng.choice(total, size=count, replace=False)
    flat = point.ravel()
    worst = 0.0
    for idx in coords:
        saved = flat[idx]
        flat[idx] = saved + step
        plus = objective(point)[0]
        flat[idx] = saved - step
        minus = objective(point)[0]
        flat[idx] = saved
        numeric = (plus - minus) / (2 * step)
        analytic = grad.ravel()[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def trace_csv(trace, path):
    """Dump per-iteration losses: iteration,total,content,style,photorealism,temporal."""
    with open(path, "w") as f:
        f.write("iteration,total,content,style,photorealism,temporal\n")
        for i, (total, terms) in enumerate(zip(trace.losses, trace.terms)):
            f.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n" % (
                i, total,
                terms.get("content", 0.0), terms.get("style", 0.0),
                terms.get("photorealism", 0.0), terms.get("temporal", 0.0)))
