"""Norm clipping operator, clipping factors, and transmission policies."""

import math
from dataclasses import dataclass, replace

import numpy as np

AUTO = "auto"


def clip_factor(v, c: float) -> float:
    """Shrink factor c / max(c, ||v||), always in (0, 1].

    The max form is total: a zero vector (and any ||v|| <= c, including the
    tie ||v|| = c) gets factor exactly 1.
    """
    if c <= 0:
        raise ValueError("clipping threshold must be positive")
    if not math.isfinite(c):
        return 1.0
    n = float(np.linalg.norm(v))
    return c / max(c, n)


def clip(v, c: float):
    """Scale ``v`` to norm at most ``c``, preserving direction.

    Returns ``v`` unchanged (same values, fresh reference not required) when
    ||v|| <= c.
    """
    f = clip_factor(v, c)
    if f == 1.0:
        return v
    return v * f


@dataclass(frozen=True)
class ClippingPolicy:
    """How a client turns its local result into a transmission.

    mode: "none" | "model" | "difference".
    threshold: positive float, math.inf, or "auto" (resolved to
    rho * mean recorded update norm by a phase-1 run).
    """

    mode: str = "none"
    threshold: float | str | None = None
    rho: float = 0.5

    def __post_init__(self):
        if self.mode not in ("none", "model", "difference"):
            raise ValueError(f"unknown clipping mode {self.mode!r}")
        if self.mode != "none":
            if self.threshold == AUTO:
                if self.rho <= 0:
                    raise ValueError("auto threshold needs rho > 0")
            elif self.threshold is None or float(self.threshold) <= 0:
                raise ValueError("clipping threshold must be positive or 'auto'")

    @property
    def is_auto(self) -> bool:
        return self.threshold == AUTO

    def resolved(self, c: float) -> "ClippingPolicy":
        return replace(self, threshold=float(c))


def resolve_auto_threshold(recorded_norms, rho: float) -> float:
    """Threshold rule c = rho * mean of recorded update magnitudes."""
    if len(recorded_norms) == 0:
        raise ValueError("no recorded update norms to resolve threshold from")
    if rho <= 0:
        raise ValueError("rho must be positive")
    return float(rho * np.mean(recorded_norms))


def apply_policy(policy: ClippingPolicy, x_local_final, x_round_start):
    """Produce the transmitted vector and its realized clip factor.

    "difference" clips the update x_final - x_start; "model" clips the final
    model itself (the server later subtracts x_start); "none" transmits the
    raw difference with factor 1.
    """
    if x_local_final.shape != x_round_start.shape:
        raise ValueError("vector dimensions do not match")
    if policy.mode == "none":
        return x_local_final - x_round_start, 1.0
    if policy.is_auto:
        raise ValueError("auto threshold has not been resolved")
    c = float(policy.threshold)
    if policy.mode == "model":
        f = clip_factor(x_local_final, c)
        return clip(x_local_final, c), f
    delta = x_local_final - x_round_start
    f = clip_factor(delta, c)
    return clip(delta, c), f
