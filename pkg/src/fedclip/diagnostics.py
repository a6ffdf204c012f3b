"""Convergence-bound quantities and update-distribution diagnostics.

Everything here is pure post-processing over an immutable simulation trace:
realized and expected-path clipping factors, the two clipping-bias
aggregates, the full bound breakdown, the client-drift lemma check, and the
per-round (magnitude, angle) scatter data.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Q_INF, Trace
from .privacy import PrivacyConfig, calibrate_noise, noise_term_in_bound


@dataclass
class BiasRound:
    t: int
    alpha_bar: float
    mean_abs_realized_gap: float   # mean_i |alpha_i - alpha_tilde_i|
    mean_abs_cross_gap: float      # mean_i |alpha_tilde_i - alpha_bar|
    mean_sq_realized_gap: float
    mean_sq_cross_gap: float


@dataclass
class BiasReport:
    rounds: list
    gamma1: float
    gamma2: float

    def bias_abs_avg(self) -> float:
        """(1/T) sum_t mean_i (|a - a~| + |a~ - abar|)."""
        return float(np.mean([r.mean_abs_realized_gap + r.mean_abs_cross_gap
                              for r in self.rounds]))

    def bias_sq_sum(self, n_clients: int) -> float:
        """(1/T) sum_t sum_i (|a - a~|^2 + |a~ - abar|^2)."""
        return float(np.mean([(r.mean_sq_realized_gap + r.mean_sq_cross_gap) * n_clients
                              for r in self.rounds]))


def clip_bias_terms(trace: Trace) -> BiasReport:
    """Per-round clipping-bias gaps and the averaged factors gamma1, gamma2."""
    rounds = []
    for rd in trace.rounds:
        rec = rd.record
        a = np.asarray(rec.alphas)
        at = np.asarray(rec.alpha_tildes)
        abar = float(np.mean(at))
        rounds.append(BiasRound(
            t=rec.t, alpha_bar=abar,
            mean_abs_realized_gap=float(np.mean(np.abs(a - at))),
            mean_abs_cross_gap=float(np.mean(np.abs(at - abar))),
            mean_sq_realized_gap=float(np.mean((a - at) ** 2)),
            mean_sq_cross_gap=float(np.mean((at - abar) ** 2))))
    abars = np.array([r.alpha_bar for r in rounds])
    return BiasReport(rounds=rounds, gamma1=float(np.mean(abars)),
                      gamma2=float(np.mean(abars ** 2)))


@dataclass
class BoundInputs:
    f_gap: float
    L: float
    sigma_l: float
    sigma_g: float
    G: float
    d: int
    eta_l: float
    eta_g: float
    Q: float
    T: int
    P: int
    N: int
    sigma2: float = 0.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    bias_abs_avg: float = 0.0
    bias_sq_sum: float = 0.0
    certified: bool = True  # False when oracle bound violations were recorded


def stepsize_regime(inputs: BoundInputs) -> dict:
    """Pass/fail flags for the stepsize conditions the bound assumes."""
    P, Q, L = inputs.P, inputs.Q, inputs.L
    cap = P / (48.0 * Q)
    if P > 1:
        cap = min(cap, P / (6.0 * Q * L * (P - 1)))
    return {
        "eta_product_ok": inputs.eta_g * inputs.eta_l <= cap,
        "eta_local_ok": inputs.eta_l <= 1.0 / (math.sqrt(60.0) * Q * L),
    }


def theorem1_bound(inputs: BoundInputs) -> dict:
    """Breakdown of the convergence bound on (1/T) sum_t abar^t ||grad f(x_t)||^2.

    Terms: initial gap, client drift, sampling variance, privacy noise, and
    the first / second order clipping-bias terms. The result is marked
    not-certified when the stepsize regime fails or oracle bound violations
    were recorded.
    """
    if inputs.eta_g <= 0 or inputs.eta_l <= 0 or inputs.Q <= 0 or inputs.T <= 0:
        raise ValueError("nonpositive denominator in bound")
    el, eg, Q, T, P = inputs.eta_l, inputs.eta_g, inputs.Q, inputs.T, inputs.P
    L, G = inputs.L, inputs.G
    terms = {
        "initial_gap": 4.0 * inputs.f_gap / (eg * el * Q * T),
        "drift": 12.5 * el ** 2 * L * Q * (inputs.sigma_l ** 2
                                           + 6.0 * Q * inputs.sigma_g ** 2) * inputs.gamma1,
        "sampling_variance": 6.0 * eg * el * L * inputs.sigma_l ** 2 * inputs.gamma2 / P,
        "privacy_noise": 2.0 * eg * L * inputs.d * inputs.sigma2 / (el * P * Q),
        "clipping_bias_abs": 4.0 * G ** 2 * inputs.bias_abs_avg,
        "clipping_bias_sq": 6.0 * eg * el * L * Q * G ** 2 * inputs.bias_sq_sum / P,
    }
    regime = stepsize_regime(inputs)
    out = dict(terms)
    out["total"] = sum(terms.values())
    out["regime"] = regime
    out["certified"] = inputs.certified and all(regime.values())
    return out


def bound_inputs_from_trace(trace: Trace, f_gap: float | None = None) -> BoundInputs:
    """Assemble BoundInputs from a trace, its problem, and its bias report."""
    cfg, prob = trace.config, trace.problem
    report = clip_bias_terms(trace)
    if f_gap is None:
        if prob.f_star is None:
            raise ValueError("problem has no f_star; pass f_gap explicitly")
        f_gap = prob.loss_mean(cfg.x0) - prob.f_star
    sigma2 = trace.noise_spec.sigma2 if trace.noise_spec is not None else 0.0
    return BoundInputs(
        f_gap=f_gap, L=prob.L, sigma_l=prob.sigma_l, sigma_g=prob.sigma_g,
        G=prob.G, d=prob.dim, eta_l=cfg.eta_l, eta_g=cfg.eta_g,
        Q=cfg.local_steps, T=cfg.rounds, P=cfg.sampled_per_round,
        N=cfg.n_clients, sigma2=sigma2,
        gamma1=report.gamma1, gamma2=report.gamma2,
        bias_abs_avg=report.bias_abs_avg(),
        bias_sq_sum=report.bias_sq_sum(prob.n_clients),
        certified=trace.oracle_violations() == 0)


def measured_stationarity(trace: Trace) -> float:
    """(1/T) sum_t abar^t ||grad f(x_t)||^2, the quantity the bound dominates."""
    vals = [rd.record.alpha_bar * rd.record.global_grad_norm ** 2
            for rd in trace.rounds]
    return float(np.mean(vals))


def corollary1_bound(eta_g, eta_l, Q, T, P, d, N, epsilon, delta,
                     L, f_gap, sigma_l, sigma_g, c_prime, v=2.0) -> dict:
    """Bound under the no-clipping-bias regime c = eta_l Q c' with calibrated
    noise substituted in; also reports the sqrt(d)/(N eps) reference scale.
    """
    c = eta_l * Q * c_prime
    spec = calibrate_noise(PrivacyConfig(enabled=True, epsilon=epsilon, delta=delta,
                                         v=v), c, P, N, T, dim=d)
    terms = {
        "initial_gap": 4.0 * f_gap / (eta_g * eta_l * Q * T),
        "drift": 12.5 * eta_l ** 2 * L * Q * (sigma_l ** 2 + 6.0 * Q * sigma_g ** 2),
        "sampling_variance": 6.0 * eta_g * eta_l * L * sigma_l ** 2 / P,
        "privacy_noise": noise_term_in_bound(spec, eta_g, eta_l, P, Q, L, d=d),
    }
    out = dict(terms)
    out["total"] = sum(terms.values())
    out["reference_scale"] = math.sqrt(d) / (N * epsilon)
    return out


def drift_check(trace: Trace, tol_factor: float = 1.0) -> dict:
    """Client-drift lemma check: for every round and local step q,
    (1/N) sum_i ||x^t - x_i^{t,q}||^2 <= 5 Q eta_l^2 (sigma_l^2 + 6 Q sigma_g^2)
    + 30 Q^2 eta_l^2 ||grad f(x_t)||^2.

    Trajectories are recomputed deterministically from the trace (the engine
    is counter-seeded, so the replay is exact). Deterministic oracles only.
    """
    cfg, prob = trace.config, trace.problem
    if cfg.noise_mode != "deterministic":
        raise ValueError("drift check requires deterministic oracles")
    Q = cfg.local_steps
    if Q == Q_INF:
        raise ValueError("drift check requires finite Q")
    Q = int(Q)
    el = cfg.eta_l
    rows = []
    ok = True
    for rd in trace.rounds:
        x0 = rd.x_start
        gn2 = rd.record.global_grad_norm ** 2
        rhs = (5.0 * Q * el ** 2 * (prob.sigma_l ** 2 + 6.0 * Q * prob.sigma_g ** 2)
               + 30.0 * Q ** 2 * el ** 2 * gn2)
        sq = np.zeros(Q)
        for obj in prob.clients:
            x = np.array(x0, copy=True)
            for q in range(Q):
                sq[q] += float(np.dot(x - x0, x - x0))
                x = x - el * obj.grad(x)
        sq /= prob.n_clients
        for q in range(Q):
            passed = sq[q] <= rhs * tol_factor + 1e-15
            ok = ok and passed
            rows.append({"t": rd.record.t, "q": q, "lhs": float(sq[q]),
                         "rhs": rhs, "pass": passed})
    return {"rows": rows, "pass": ok}


def update_distribution(trace: Trace) -> list:
    """Per-round (magnitude, angle-degrees) pairs plus magnitude summary stats.

    Angles compare each client's raw update with the previous round's mean
    transmitted update; round 0 has no reference and is omitted from angle
    data (pairs carry None).
    """
    out = []
    for rd in trace.rounds:
        rec = rd.record
        mags = np.asarray(rec.delta_norms)
        out.append({
            "t": rec.t,
            "pairs": list(zip([float(m) for m in mags], rec.angles)),
            "magnitude_mean": float(np.mean(mags)),
            "magnitude_var": float(np.var(mags)),
        })
    return out
