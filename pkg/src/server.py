"""Server-side client sampling, aggregation (ServerOpt) and server learning rate."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence

import numpy as np

from src.client import LocalUpdate
from src.logger import get_logger
from src.model import LayoutMismatchError, ModelError, ParamVector, weighted_mean
from src.schedule import ScheduleConfig
from src.seeding import SAMPLING, derive_rng

logger = get_logger(__name__)


class ServerError(Exception):
    """Custom exception for server configuration and aggregation errors."""

    pass


class Weighting(Enum):
    BY_SAMPLE_COUNT = "by_sample_count"
    UNIFORM = "uniform"


class RateApplication(Enum):
    # gamma * aggregated, the aggregation formula taken verbatim
    LITERAL = "literal"
    # prev + gamma * (aggregated - prev), gamma as a step size on the aggregated update
    DELTA = "delta"


@dataclass(frozen=True)
class ServerConfig:
    """
    Server settings.

    Attributes:
        clients_per_round: Clients M sampled each round.
        aggregation_weighting: Weight client models by sample count or uniformly.
        rate_application: How the server rate is applied to the aggregate.
        schedule: Server learning-rate schedule.
        seed: Client sampling seed.
    """

    clients_per_round: int
    aggregation_weighting: Weighting = Weighting.BY_SAMPLE_COUNT
    rate_application: RateApplication = RateApplication.DELTA
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clients_per_round < 1:
            raise ServerError(f"clients_per_round must be positive, got {self.clients_per_round}")


def sample_clients(num_clients: int, cfg: ServerConfig, round_index: int) -> List[int]:
    """
    Uniformly sample clients_per_round distinct client ids without replacement.

    Deterministic in (cfg.seed, round_index); returned sorted ascending.

    Raises:
        ServerError: If more clients are requested than exist.
    """
    m = cfg.clients_per_round
    if m > num_clients:
        raise ServerError(f"Cannot sample {m} clients out of {num_clients}")
    if m == num_clients:
        return list(range(num_clients))
    rng = derive_rng(cfg.seed, SAMPLING, round_index)
    chosen = rng.choice(num_clients, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def aggregate(updates: Sequence[LocalUpdate], cfg: ServerConfig) -> ParamVector:
    """
    Average the locally updated models.

    Updates are sorted by client id before accumulation, so the result does not
    depend on arrival order.

    Raises:
        ServerError: On an empty update list or mismatched layouts.
    """
    if not updates:
        raise ServerError("Cannot aggregate an empty list of updates")
    ordered = sorted(updates, key=lambda u: u.client_id)
    if cfg.aggregation_weighting is Weighting.BY_SAMPLE_COUNT:
        items = [(u.params, float(u.num_samples)) for u in ordered]
    else:
        items = [(u.params, 1.0) for u in ordered]
    try:
        return weighted_mean(items)
    except ModelError as e:
        raise ServerError(f"Aggregation failed: {e}") from e


def apply_server_rate(
    prev_global: ParamVector,
    aggregated: ParamVector,
    gamma: float,
    mode: RateApplication,
) -> ParamVector:
    """
    Form the next global model from the aggregate and the server rate.

    Literal returns gamma * aggregated; Delta returns
    prev_global + gamma * (aggregated - prev_global). gamma == 1 returns the
    aggregate in both modes.

    Raises:
        ServerError: On a non-positive gamma or mismatched layouts.
    """
    if not gamma > 0:
        raise ServerError(f"Server rate must be positive, got {gamma}")
    if prev_global.spec != aggregated.spec:
        raise ServerError("prev_global and aggregated have different layouts")
    if gamma == 1.0:
        return aggregated
    if mode is RateApplication.LITERAL:
        return ParamVector(gamma * aggregated.values, aggregated.spec)
    step = aggregated.values - prev_global.values
    return ParamVector(prev_global.values + gamma * step, aggregated.spec)
