"""Federated averaging loop with optional clipping and noise injection.

One parameterized round implements plain FedAvg (mode "none", no noise),
its difference-clipped variant, and the differentially private variant
(clipping plus per-client Gaussian perturbation). Rounds are strictly
sequential; per-client work inside a round may run on a thread pool, and
the aggregation is a fixed-order reduction so worker count never changes
the result.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import clipping, privacy, rng as rngmod
from .problems import GradientOracle, ProblemInstance

Q_INF = math.inf

_DIVERGENCE_NORM = 1e12
_LOCAL_TOL = 1e-12
_LOCAL_MAX_STEPS = 10 ** 6


class DivergenceError(RuntimeError):
    def __init__(self, round_index, norm):
        super().__init__(f"iterate norm {norm:.3e} exceeded {_DIVERGENCE_NORM:.0e} "
                         f"at round {round_index}")
        self.round_index = round_index
        self.norm = norm


@dataclass(frozen=True)
class RunConfig:
    rounds: int
    local_steps: float  # int, or Q_INF for run-to-convergence local phases
    n_clients: int
    sampled_per_round: int
    eta_l: float
    eta_g: float
    policy: clipping.ClippingPolicy
    privacy: privacy.PrivacyConfig
    seed: int
    x0: np.ndarray
    noise_mode: str = "deterministic"
    batch_size: int | None = None
    replay_count: int = 32  # local-trajectory replays for the expected-path factor

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one round")
        q = self.local_steps
        if q != Q_INF and (int(q) != q or q < 1):
            raise ValueError("local_steps must be a positive integer or Q_INF")
        if not 1 <= self.sampled_per_round <= self.n_clients:
            raise ValueError("need 1 <= P <= N")
        if self.eta_l <= 0 or self.eta_g <= 0:
            raise ValueError("stepsizes must be positive")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))


@dataclass
class RoundRecord:
    """Public per-round telemetry (serialized to JSONL)."""

    t: int
    x: list
    sampled: list
    loss: float
    global_grad_norm: float
    alpha_bar: float
    delta_norms: list
    alphas: list
    alpha_tildes: list
    angles: list  # degrees vs previous round's mean transmitted update; None at t=0


@dataclass
class RoundData:
    """Round record plus in-memory internals needed by diagnostics."""

    record: RoundRecord
    x_start: np.ndarray
    x_next: np.ndarray
    grad_sums: np.ndarray      # (N, d) summed sampled gradients per client
    deltas_raw: np.ndarray     # (N, d) pre-clip local updates
    mean_transmitted: np.ndarray


@dataclass
class Trace:
    config: RunConfig
    problem: ProblemInstance
    rounds: list  # of RoundData
    noise_spec: privacy.NoiseSpec | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def records(self):
        return [rd.record for rd in self.rounds]

    def oracle_violations(self) -> int:
        return self.metadata.get("oracle_violations", 0)


def local_update(objective, oracle, x_start, Q, eta_l):
    """Run Q local SGD steps; return the final iterate and the gradient sum.

    With Q = Q_INF, iterate until the step norm falls below 1e-12 (capped at
    1e6 steps). For finite Q, x_final - x_start == -eta_l * grad_sum.
    """
    x = np.array(x_start, dtype=float, copy=True)
    gsum = np.zeros_like(x)
    if Q == Q_INF:
        for _ in range(_LOCAL_MAX_STEPS):
            g = oracle.sample(x)
            step = eta_l * g
            x -= step
            gsum += g
            if np.linalg.norm(x) > _DIVERGENCE_NORM:
                raise DivergenceError(-1, float(np.linalg.norm(x)))
            if np.linalg.norm(step) <= _LOCAL_TOL:
                break
    else:
        for _ in range(int(Q)):
            g = oracle.sample(x)
            x -= eta_l * g
            gsum += g
        if np.linalg.norm(x) > _DIVERGENCE_NORM:
            raise DivergenceError(-1, float(np.linalg.norm(x)))
    return x, gsum


def sample_clients(N, P, rng):
    """P i.i.d. uniform draws from {0..N-1} with replacement, sorted."""
    if N < 1 or P < 1:
        raise ValueError("need N >= 1 and P >= 1")
    return np.sort(rng.integers(0, N, size=P))


def _make_oracle(config, problem, obj, stream):
    return GradientOracle(
        obj, noise_mode=config.noise_mode, sigma_l=problem.sigma_l,
        batch_size=config.batch_size, rng=stream, grad_bound=problem.G)


def _client_pass(config, problem, i, t, x):
    """Local phase for one client: realized trajectory plus expected-path factor."""
    obj = problem.clients[i]
    oracle = _make_oracle(config, problem, obj,
                          rngmod.stream(config.seed, "grad", t, i))
    x_fin, gsum = local_update(obj, oracle, x, config.local_steps, config.eta_l)
    transmitted, alpha = clipping.apply_policy(config.policy, x_fin, x)
    delta_raw = x_fin - x
    if config.policy.mode == "difference" and config.noise_mode != "deterministic":
        # estimate E[sum of sampled gradients] by replaying the local phase
        acc = np.zeros_like(gsum)
        for r in range(config.replay_count):
            rep = _make_oracle(config, problem, obj,
                               rngmod.stream(config.seed, "replay", t, i, r))
            _, gs = local_update(obj, rep, x, config.local_steps, config.eta_l)
            acc += gs
        acc /= config.replay_count
        alpha_tilde = clipping.clip_factor(config.eta_l * acc,
                                           float(config.policy.threshold))
    else:
        # deterministic trajectory: the expectation equals the realized sum
        alpha_tilde = alpha
    return x_fin, gsum, delta_raw, transmitted, alpha, alpha_tilde, oracle.violations


def run_round(x, t, config: RunConfig, problem: ProblemInstance,
              noise_spec=None, prev_update=None, executor=None):
    """Execute one round; returns (x_next, RoundData, violation_count).

    All N clients are evaluated (diagnostics average over the full
    federation); only the sampled multiset contributes to the aggregate.
    """
    N = config.n_clients
    if executor is not None:
        results = list(executor.map(
            lambda i: _client_pass(config, problem, i, t, x), range(N)))
    else:
        results = [_client_pass(config, problem, i, t, x) for i in range(N)]

    grad_sums = np.stack([r[1] for r in results])
    deltas_raw = np.stack([r[2] for r in results])
    transmitted = [r[3] for r in results]
    alphas = [r[4] for r in results]
    alpha_tildes = [r[5] for r in results]
    violations = sum(r[6] for r in results)

    if config.sampled_per_round == N:
        # full participation: every client exactly once
        sampled = np.arange(N)
    else:
        sampled = sample_clients(N, config.sampled_per_round,
                                 rngmod.stream(config.seed, "sample", t))
    P = config.sampled_per_round
    agg = np.zeros_like(x)
    for slot, i in enumerate(sampled):
        v = transmitted[i]
        if config.policy.mode == "model":
            v = v - x
        if noise_spec is not None and noise_spec.sigma2 > 0:
            # the aggregate only ever sees clipped-update-plus-noise
            v = v + privacy.draw_noise(noise_spec,
                                       rngmod.stream(config.seed, "noise", t, slot))
        agg += v
    agg /= P
    x_next = x + config.eta_g * agg
    if np.linalg.norm(x_next) > _DIVERGENCE_NORM:
        raise DivergenceError(t, float(np.linalg.norm(x_next)))

    angles = []
    for i in range(N):
        if prev_update is None:
            angles.append(None)
        else:
            angles.append(_angle_degrees(deltas_raw[i], prev_update))
    grad_norm = float(np.linalg.norm(problem.grad_mean(x)))
    record = RoundRecord(
        t=t, x=[float(v) for v in x], sampled=[int(i) for i in sampled],
        loss=float(problem.loss_mean(x)), global_grad_norm=grad_norm,
        alpha_bar=float(np.mean(alpha_tildes)),
        delta_norms=[float(np.linalg.norm(d)) for d in deltas_raw],
        alphas=[float(a) for a in alphas],
        alpha_tildes=[float(a) for a in alpha_tildes],
        angles=angles)
    data = RoundData(record=record, x_start=np.array(x, copy=True), x_next=x_next,
                     grad_sums=grad_sums, deltas_raw=deltas_raw,
                     mean_transmitted=agg)
    return x_next, data, violations


def _angle_degrees(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return None
    cosv = float(np.dot(u, v) / (nu * nv))
    return float(np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0))))


def run_experiment(config: RunConfig, problem: ProblemInstance,
                   threads: int = 1) -> Trace:
    """Run T rounds, resolving an "auto" threshold with a phase-1 pass.

    The phase-1 pass runs the same configuration unclipped, records all
    pre-clip update magnitudes, resolves c = rho * mean, then restarts from
    x0 with the resolved policy.
    """
    if config.n_clients != problem.n_clients:
        raise ValueError("config client count does not match problem")
    cfg = config
    if cfg.policy.is_auto:
        phase1 = RunConfig(
            rounds=cfg.rounds, local_steps=cfg.local_steps,
            n_clients=cfg.n_clients, sampled_per_round=cfg.sampled_per_round,
            eta_l=cfg.eta_l, eta_g=cfg.eta_g,
            policy=clipping.ClippingPolicy(mode="none"),
            privacy=privacy.PrivacyConfig(enabled=False),
            seed=cfg.seed, x0=cfg.x0, noise_mode=cfg.noise_mode,
            batch_size=cfg.batch_size, replay_count=cfg.replay_count)
        pre = run_experiment(phase1, problem, threads=threads)
        norms = [n for rd in pre.rounds for n in rd.record.delta_norms]
        c = clipping.resolve_auto_threshold(norms, cfg.policy.rho)
        cfg = RunConfig(
            rounds=cfg.rounds, local_steps=cfg.local_steps,
            n_clients=cfg.n_clients, sampled_per_round=cfg.sampled_per_round,
            eta_l=cfg.eta_l, eta_g=cfg.eta_g, policy=cfg.policy.resolved(c),
            privacy=cfg.privacy, seed=cfg.seed, x0=cfg.x0,
            noise_mode=cfg.noise_mode, batch_size=cfg.batch_size,
            replay_count=cfg.replay_count)

    noise_spec = None
    metadata = {}
    if cfg.privacy.enabled:
        if cfg.policy.mode == "none" or not math.isfinite(float(cfg.policy.threshold)):
            raise ValueError("privacy requires a finite clipping threshold")
        noise_spec = privacy.calibrate_noise(
            cfg.privacy, float(cfg.policy.threshold),
            cfg.sampled_per_round, cfg.n_clients, cfg.rounds, dim=problem.dim)
        metadata["noise_sigma2"] = noise_spec.sigma2
        metadata["noise_in_regime"] = noise_spec.in_regime
        metadata["calibration_note"] = privacy.CALIBRATION_NOTE
    if cfg.policy.mode != "none":
        metadata["threshold"] = float(cfg.policy.threshold)

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        x = np.array(cfg.x0, dtype=float, copy=True)
        rounds = []
        prev_update = None
        total_violations = 0
        for t in range(cfg.rounds):
            x, data, viol = run_round(x, t, cfg, problem, noise_spec=noise_spec,
                                      prev_update=prev_update, executor=executor)
            total_violations += viol
            prev_update = data.mean_transmitted
            rounds.append(data)
    finally:
        if executor is not None:
            executor.shutdown()
    metadata["oracle_violations"] = total_violations
    return Trace(config=cfg, problem=problem, rounds=rounds,
                 noise_spec=noise_spec, metadata=metadata)


def record_to_json(record: RoundRecord) -> str:
    """Stable JSONL encoding of one round record."""
    obj = {
        "t": record.t,
        "x": record.x,
        "sampled": record.sampled,
        "loss": record.loss,
        "global_grad_norm": record.global_grad_norm,
        "alpha_bar": record.alpha_bar,
        "delta_norms": record.delta_norms,
        "alphas": record.alphas,
        "alpha_tildes": record.alpha_tildes,
        "angles": record.angles,
    }
    return json.dumps(obj, separators=(",", ":"))
