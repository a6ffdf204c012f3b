"""Closed-form one-round maps and fixed-point solvers for clipped averaging.

These maps reproduce, analytically, what the simulation engine does on
quadratic ensembles: model clipping averages clipped local models
(lambda-map), difference clipping is a clipped preconditioned gradient
step (Lambda-map), and the stationary-point grid for the three-client
example problem is obtained by solving each map's fixed-point condition.
"""

import math
from dataclasses import dataclass

import numpy as np

from .clipping import clip
from .problems import (LinearRegressionObjective, ScalarQuadratic,
                       build_linear_regression_ensemble)

Q_INF = math.inf


class FixedPointError(RuntimeError):
    def __init__(self, residual):
        super().__init__(f"fixed-point iteration did not converge "
                         f"(last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class OneRoundMap:
    """A one-round update map x -> map(x) with a named construction."""

    kind: str
    fn: object

    def __call__(self, x):
        return self.fn(x)


def model_clip_map(x, b_values, lam, c):
    """Mean of clip(lam * x + (1 - lam) * b_i, c) over scalar quadratic clients."""
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    vals = [clip(np.array([lam * x + (1.0 - lam) * bi]), c)[0] for bi in b_values]
    return float(np.mean(vals))


def make_model_clip_map(b_values, eta_l, Q, c) -> OneRoundMap:
    if not 0.0 < eta_l < 1.0:
        raise ValueError("lambda = (1 - eta_l)^Q in (0, 1) requires eta_l in (0, 1)")
    lam = (1.0 - eta_l) ** Q
    return OneRoundMap("model-clip-lambda",
                       lambda x: np.array([model_clip_map(float(x[0]), b_values, lam, c)]))


def _gram(obj):
    if isinstance(obj, ScalarQuadratic):
        return np.eye(1)
    return obj.A.T @ obj.A


def lambda_map_matrix(A, eta_l, Q):
    """Local-phase preconditioner (I - (I - eta_l A^T A)^Q)(A^T A)^{-1}.

    Q may be Q_INF, in which case the geometric limit (A^T A)^{-1} is
    returned. For scalar A this is (1 - (1 - eta_l A^2)^Q) / A^2.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    M = A.T @ A
    evals = np.linalg.eigvalsh(M)
    if evals[0] <= 1e-14:
        raise ValueError("A^T A is singular")
    if eta_l >= 2.0 / evals[-1]:
        raise ValueError("eta_l must be below 2 / lambda_max(A^T A)")
    Minv = np.linalg.inv(M)
    if Q == Q_INF:
        return Minv
    I = np.eye(M.shape[0])
    return (I - np.linalg.matrix_power(I - eta_l * M, int(Q))) @ Minv


def _client_preconditioners(ensemble, eta_l, Q):
    out = []
    for obj in ensemble.clients:
        if isinstance(obj, ScalarQuadratic):
            out.append(lambda_map_matrix(np.eye(1), eta_l, Q))
        elif isinstance(obj, LinearRegressionObjective):
            out.append(lambda_map_matrix(obj.A, eta_l, Q))
        else:
            raise ValueError("closed-form map requires quadratic clients")
    return out


def difference_clip_map(x, ensemble, eta_l, Q, c):
    """One closed-form round of difference-clipped averaging (eta_g = 1):
    x - mean_i clip(Lambda_i grad f_i(x), c).
    """
    lams = _client_preconditioners(ensemble, eta_l, Q)
    step = np.zeros_like(np.asarray(x, dtype=float))
    for obj, lam in zip(ensemble.clients, lams):
        step = step + clip(lam @ obj.grad(x), c)
    return x - step / ensemble.n_clients


def make_difference_clip_map(ensemble, eta_l, Q, c) -> OneRoundMap:
    return OneRoundMap("difference-clip-Lambda",
                       lambda x: difference_clip_map(x, ensemble, eta_l, Q, c))


def make_gradient_clip_map(ensemble, c, step=0.01) -> OneRoundMap:
    """Single-local-step stationarity map: fixed points satisfy
    sum_i clip(grad f_i(x), c) = 0. The threshold applies to the raw
    per-client gradient, before any stepsize scaling.
    """
    def fn(x):
        s = np.zeros_like(np.asarray(x, dtype=float))
        for obj in ensemble.clients:
            s = s + clip(obj.grad(x), c)
        return x - step * s / ensemble.n_clients
    return OneRoundMap("gradient-clip", fn)


def make_local_min_clip_map(ensemble, c, step=0.2) -> OneRoundMap:
    """Exhaustive-local-phase stationarity map: fixed points satisfy
    sum_i clip(x - x_i^*, c) = 0, with x_i^* the client minimizers.
    """
    minimizers = [obj.local_minimizer for obj in ensemble.clients]
    if any(m is None for m in minimizers):
        raise ValueError("all clients need closed-form local minimizers")

    def fn(x):
        s = np.zeros_like(np.asarray(x, dtype=float))
        for m in minimizers:
            s = s + clip(x - m, c)
        return x - step * s / ensemble.n_clients
    return OneRoundMap("local-min-clip", fn)


def solve_fixed_point(map_fn, x_init, tol=1e-10, max_iter=10 ** 6, beta=0.5):
    """Damped iteration x <- (1 - beta) x + beta map(x) until the residual
    ||map(x) - x|| drops below tol.

    Scalar maps fall back to bisection on the residual when the damped
    iteration stalls. Raises FixedPointError instead of silently returning
    an unconverged point.
    """
    x = np.array(x_init, dtype=float, copy=True)
    prev_res = math.inf
    stalled = 0
    for _ in range(max_iter):
        fx = np.asarray(map_fn(x), dtype=float)
        res = float(np.linalg.norm(fx - x))
        if res <= tol:
            return x, res
        stalled = stalled + 1 if res >= prev_res * 0.999999 else 0
        if stalled >= 50 and x.size == 1:
            return _bisect_scalar(map_fn, float(x[0]), tol)
        prev_res = res
        x = (1.0 - beta) * x + beta * fx
    raise FixedPointError(prev_res)


def _bisect_scalar(map_fn, x0, tol):
    def resid(v):
        return float(map_fn(np.array([v]))[0] - v)
    lo, hi = x0 - 1.0, x0 + 1.0
    span = 1.0
    for _ in range(200):
        if resid(lo) * resid(hi) <= 0:
            break
        span *= 2.0
        lo, hi = x0 - span, x0 + span
    else:
        raise FixedPointError(abs(resid(x0)))
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        r = resid(mid)
        if abs(r) <= tol:
            return np.array([mid]), abs(r)
        if resid(lo) * r <= 0:
            hi = mid
        else:
            lo = mid
    raise FixedPointError(abs(resid(0.5 * (lo + hi))))


def huberized_loss(lam, A, b, c, x):
    """Scalar surrogate whose gradient is clip(lam * grad f(x), c) for
    f(x) = 0.5 (A x - b)^2: quadratic inside the threshold, linear outside.
    """
    if A == 0:
        raise ValueError("A must be nonzero")
    if lam <= 0 or c <= 0:
        raise ValueError("lam and c must be positive")
    m = b / A
    k = lam * A * A  # curvature of lam * f
    inner = k * (x - m)  # = lam * A * (A x - b)
    if abs(inner) <= c:
        return lam * 0.5 * (A * x - b) ** 2
    return c * abs(x - m) - c * c / (2.0 * k)


def table1_grid(solver_tol=1e-10):
    """Stationary points of the example ensemble for Q in {1, inf} and
    c in {inf, 1}, by fixed-point solving and by engine simulation.

    The threshold applies to the per-client direction before stepsize
    scaling, so the Q = 1 simulation clips at eta_l * c while the
    exhaustive-local-phase cells clip the update difference at c directly.
    """
    from . import engine
    from .clipping import ClippingPolicy
    from .privacy import PrivacyConfig

    ens = eq7_ensemble()
    x_init = np.array([0.9])
    maps = {
        ("1", "inf"): make_gradient_clip_map(ens, math.inf, step=0.01),
        ("1", "1"): make_gradient_clip_map(ens, 1.0, step=0.01),
        ("inf", "inf"): make_local_min_clip_map(ens, math.inf, step=0.2),
        ("inf", "1"): make_local_min_clip_map(ens, 1.0, step=0.2),
    }
    sims = {
        ("1", "inf"): dict(rounds=80, local_steps=1, eta_l=0.02,
                           policy=ClippingPolicy(mode="none")),
        ("1", "1"): dict(rounds=700, local_steps=1, eta_l=0.02,
                         policy=ClippingPolicy(mode="difference", threshold=0.02)),
        ("inf", "inf"): dict(rounds=8, local_steps=Q_INF, eta_l=0.05,
                             policy=ClippingPolicy(mode="none")),
        ("inf", "1"): dict(rounds=30, local_steps=Q_INF, eta_l=0.05,
                           policy=ClippingPolicy(mode="difference", threshold=1.0)),
    }
    out = {}
    for key, m in maps.items():
        x_inf, res = solve_fixed_point(m, x_init, tol=solver_tol)
        cfg = engine.RunConfig(
            n_clients=3, sampled_per_round=3, eta_g=1.0,
            privacy=PrivacyConfig(enabled=False), seed=0, x0=np.array([1.0]),
            **sims[key])
        trace = engine.run_experiment(cfg, ens)
        out[key] = {"solver": float(x_inf[0]), "solver_residual": res,
                    "simulation": float(trace.rounds[-1].x_next[0])}
    return out


def eq7_ensemble(g_bound=None):
    """The three-client scalar example with slopes (1, 2, 6), offsets
    (4, 1, -1): client minimizers (4, 1/2, -1/6), summed gradient 41 x,
    global optimum 0.
    """
    A_list = [np.array([[1.0]]), np.array([[2.0]]), np.array([[6.0]])]
    b_list = [np.array([4.0]), np.array([1.0]), np.array([-1.0])]
    return build_linear_regression_ensemble(A_list, b_list, g_bound=g_bound)
