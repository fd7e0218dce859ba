"""Noise schedules alpha(t), their derivatives, and the clamped loss weight."""

import math
from dataclasses import dataclass

import numpy as np

from maskfuse.vocab import ConfigError

DEFAULT_WEIGHT_CLAMP = 5.0

LINEAR = "linear"
COSINE = "cosine"
DISCRETE = "discrete"


@dataclass(frozen=True)
class ScheduleKind:
    name: str
    steps: int | None = None  # grid size for DISCRETE only

    def __post_init__(self):
        if self.name not in (LINEAR, COSINE, DISCRETE):
            raise ConfigError(f"unknown schedule kind {self.name!r}")
        if self.name == DISCRETE:
            if self.steps is None or self.steps < 2:
                raise ConfigError(f"discrete schedule needs steps >= 2, got {self.steps}")
        elif self.steps is not None:
            raise ConfigError(f"{self.name} schedule takes no step count")

    @classmethod
    def linear(cls) -> "ScheduleKind":
        return cls(LINEAR)

    @classmethod
    def cosine(cls) -> "ScheduleKind":
        return cls(COSINE)

    @classmethod
    def discrete(cls, steps: int) -> "ScheduleKind":
        return cls(DISCRETE, int(steps))

    @classmethod
    def parse(cls, text: str) -> "ScheduleKind":
        """Parse "linear", "cosine", or "discrete:T"."""
        text = text.strip().lower()
        if text.startswith(DISCRETE):
            _, _, t = text.partition(":")
            if not t:
                raise ConfigError("discrete schedule must be written discrete:T")
            return cls.discrete(int(t))
        return cls(text)

    def __str__(self) -> str:
        return self.name if self.steps is None else f"{self.name}:{self.steps}"


@dataclass(frozen=True)
class ScheduleEval:
    """alpha, its time derivative (or discrete difference), and loss weight at t."""

    t: float
    alpha: float
    dalpha: float
    weight: float  # clamped at DEFAULT_WEIGHT_CLAMP; see loss_weight for other clamps


def alpha_at(kind: ScheduleKind, t) -> np.ndarray:
    """Keep probability alpha(t); accepts scalars or arrays, t in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    if kind.name == LINEAR:
        return 1.0 - t
    if kind.name == COSINE:
        return np.cos(0.5 * math.pi * t)
    # discrete: snap to the nearest grid point, linear rule on the grid
    k = np.rint(t * kind.steps)
    return 1.0 - k / kind.steps


def dalpha_at(kind: ScheduleKind, t) -> np.ndarray:
    """d(alpha)/dt for continuous kinds; alpha_k - alpha_{k-1} for DISCRETE."""
    t = np.asarray(t, dtype=np.float64)
    if kind.name == LINEAR:
        return np.full_like(t, -1.0)
    if kind.name == COSINE:
        return -0.5 * math.pi * np.sin(0.5 * math.pi * t)
    k = np.rint(t * kind.steps)
    return np.where(k == 0, 0.0, -1.0 / kind.steps)


def eval_schedule(kind: ScheduleKind, t: float) -> ScheduleEval:
    """Evaluate (alpha, dalpha, default-clamped weight) at one time point."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    alpha = float(alpha_at(kind, t))
    dalpha = float(dalpha_at(kind, t))
    ev = ScheduleEval(t=float(t), alpha=alpha, dalpha=dalpha, weight=0.0)
    weight = loss_weight(ev, DEFAULT_WEIGHT_CLAMP)
    return ScheduleEval(t=float(t), alpha=alpha, dalpha=dalpha, weight=weight)


def loss_weight(ev: ScheduleEval, clamp_value: float = DEFAULT_WEIGHT_CLAMP) -> float:
    """min(-dalpha / (1 - alpha), clamp_value); saturates to clamp_value at t=0.

    Pass clamp_value=inf for the raw (unclamped) weight used by the
    no-weight-clamp ablation; the t=0 saturation still applies so the result
    is always finite.
    """
    denom = 1.0 - ev.alpha
    if denom <= 0.0:
        return float(clamp_value) if math.isfinite(clamp_value) else float(DEFAULT_WEIGHT_CLAMP)
    return float(min(-ev.dalpha / denom, clamp_value))


def weight_at(kind: ScheduleKind, t, clamp_value: float = DEFAULT_WEIGHT_CLAMP) -> np.ndarray:
    """Vectorized loss weight over an array of times."""
    t = np.asarray(t, dtype=np.float64)
    alpha = alpha_at(kind, t)
    dalpha = dalpha_at(kind, t)
    denom = 1.0 - alpha
    sat = float(clamp_value) if math.isfinite(clamp_value) else DEFAULT_WEIGHT_CLAMP
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(denom > 0.0, -dalpha / np.where(denom > 0.0, denom, 1.0), sat)
    return np.minimum(raw, clamp_value)


def raw_weight_at(kind: ScheduleKind, t) -> np.ndarray:
    """Unclamped -dalpha/(1-alpha); infinite at t=0 is the caller's problem.

    Used by the ELBO estimator, where draws with no masked positions
    contribute zero before the weight is ever applied.
    """
    t = np.asarray(t, dtype=np.float64)
    alpha = alpha_at(kind, t)
    dalpha = dalpha_at(kind, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(1.0 - alpha > 0.0, -dalpha / (1.0 - alpha), np.inf)


def mc_scale(kind: ScheduleKind) -> float:
    """Loss scale converting a single uniform draw into the full objective.

    The DISCRETE(T) objective is a sum of T per-step terms whose dalpha is
    the per-step difference; estimating that sum with one uniformly drawn
    step needs a factor of T. Continuous kinds integrate dt and need none.
    """
    return float(kind.steps) if kind.name == DISCRETE else 1.0
