"""Server learning-rate schedules: fixed and cyclic (sawtooth) rates."""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.logger import get_logger

logger = get_logger(__name__)


class ScheduleError(Exception):
    """Custom exception for schedule configuration and evaluation errors."""

    pass


class OutOfHorizonError(ScheduleError):
    """Raised when a rate is requested for a round outside the horizon."""

    def __init__(self, round_index: int, horizon: int):
        self.round = round_index
        self.horizon = horizon
        super().__init__(f"Round {round_index} is outside the horizon [0, {horizon})")


class ScheduleKind(Enum):
    FIXED = "fixed"
    CYCLIC = "cyclic"


class EvalMode(Enum):
    CLOSED_FORM = "closed_form"
    FOURIER = "fourier"


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Server learning-rate schedule.

    Attributes:
        kind: Fixed constant rate or cyclic rate.
        gamma_fixed: Baseline server rate the cyclic rate oscillates below.
        amplitude: Peak-to-peak size of the oscillation.
        frequency: Number of full cycles over the horizon.
        horizon: Total number of global rounds.
        eval_mode: Closed-form sawtooth or truncated Fourier series.
        fourier_terms: Number of series terms in Fourier mode.
    """

    kind: ScheduleKind = ScheduleKind.FIXED
    gamma_fixed: float = 1.0
    amplitude: float = 0.0
    frequency: float = 1.0
    horizon: int = 1
    eval_mode: EvalMode = EvalMode.CLOSED_FORM
    fourier_terms: int = 1000

    def __post_init__(self) -> None:
        validate_schedule(self)


def validate_schedule(cfg: ScheduleConfig) -> None:
    """
    Check schedule invariants.

    Raises:
        ScheduleError: Naming the first violated field.
    """
    if not math.isfinite(cfg.gamma_fixed) or cfg.gamma_fixed <= 0:
        raise ScheduleError(f"gamma_fixed must be positive, got {cfg.gamma_fixed}")
    if cfg.horizon < 1:
        raise ScheduleError(f"horizon must be at least 1, got {cfg.horizon}")
    if cfg.kind is ScheduleKind.FIXED:
        return
    if not math.isfinite(cfg.amplitude) or cfg.amplitude < 0:
        raise ScheduleError(f"amplitude must be non-negative, got {cfg.amplitude}")
    # a non-positive server rate would invert aggregation
    if cfg.amplitude > cfg.gamma_fixed:
        raise ScheduleError(
            f"amplitude ({cfg.amplitude}) must not exceed gamma_fixed ({cfg.gamma_fixed})"
        )
    if not math.isfinite(cfg.frequency) or cfg.frequency <= 0:
        raise ScheduleError(f"frequency must be positive, got {cfg.frequency}")
    if cfg.eval_mode is EvalMode.FOURIER and cfg.fourier_terms < 1:
        raise ScheduleError(f"fourier_terms must be at least 1, got {cfg.fourier_terms}")


def wrap(y: float) -> float:
    """Map y to [-1/2, 1/2) by subtracting the nearest integer."""
    return y - math.floor(y + 0.5)


def phase(cfg: ScheduleConfig, round_index: int) -> float:
    """Phase of a round: frequency counts cycles over the horizon."""
    return cfg.frequency * round_index / cfg.horizon


def sawtooth_series(x: float, terms: int) -> float:
    """
    Partial sum (1/pi) * sum_{k=1..K} (-1)^(k+1) sin(2 pi k x) / k.

    Converges to wrap(x) away from half-integer phases.
    """
    k = np.arange(1, terms + 1, dtype=np.float64)
    signs = np.where(k % 2 == 1, 1.0, -1.0)
    # sin is 1-periodic in x, reduce first to keep arguments small
    reduced = wrap(x)
    series = np.sum(signs * np.sin(2.0 * math.pi * k * reduced) / k)
    return float(series) / math.pi


def rate_at(cfg: ScheduleConfig, round_index: int) -> float:
    """
    Server learning rate for a global round.

    Args:
        cfg: Schedule configuration.
        round_index: Global round in [0, horizon).

    Returns:
        gamma_fixed for a fixed schedule, otherwise
        gamma_fixed - amplitude * (1/2 - wrap(x)) with x = frequency * round / horizon.

    Raises:
        OutOfHorizonError: If round_index is negative or not below the horizon.
        ScheduleError: If the result is not finite.
    """
    if round_index < 0 or round_index >= cfg.horizon:
        raise OutOfHorizonError(round_index, cfg.horizon)

    if cfg.kind is ScheduleKind.FIXED:
        return cfg.gamma_fixed

    x = phase(cfg, round_index)
    if cfg.eval_mode is EvalMode.CLOSED_FORM:
        ramp = wrap(x)
    else:
        ramp = sawtooth_series(x, cfg.fourier_terms)

    gamma = cfg.gamma_fixed - cfg.amplitude * (0.5 - ramp)
    if not math.isfinite(gamma):
        raise ScheduleError(f"Non-finite server rate at round {round_index}")
    return gamma


def rates(cfg: ScheduleConfig) -> np.ndarray:
    """Server rate for every round of the horizon."""
    return np.array([rate_at(cfg, r) for r in range(cfg.horizon)])
