"""End-to-end federated runs and benchmark metrics."""

import hashlib
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.client import (
    ClientConfig,
    ClientError,
    ClientState,
    DivergenceError,
    LocalUpdate,
    draw_local_epochs,
    local_train,
)
from src.data import (
    ClientDataset,
    DataError,
    LabeledDataset,
    SkewConfig,
    generate_blobs,
    load_idx,
    partition_label_skew,
    train_test_split,
)
from src.logger import get_logger
from src.model import ModelSpec, ParamVector, init_params, predict_batch
from src.schedule import rate_at
from src.seeding import CLIENT_STATE, DATA, EPOCHS, INIT, REPEAT, SAMPLING, derive_seed
from src.server import ServerConfig, aggregate, apply_server_rate, sample_clients

logger = get_logger(__name__)


class OrchestratorError(Exception):
    """Custom exception for run configuration and metric errors."""

    pass


class DataKind(Enum):
    BLOBS = "blobs"
    IDX = "idx"


@dataclass(frozen=True)
class DataSource:
    """
    Where client data comes from and how it is split and skewed.

    Blob fields (samples_per_class, spread) apply to kind=blobs, path fields to
    kind=idx. Without test paths the test set is a stratified split of the pool.
    """

    kind: DataKind = DataKind.BLOBS
    num_classes: int = 10
    samples_per_class: int = 100
    spread: float = 0.5
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes_per_client: int = 4
    max_per_class: int = 100
    strict_disjoint: bool = False
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.kind is DataKind.IDX and not (self.train_images and self.train_labels):
            raise OrchestratorError("IDX data needs train_images and train_labels paths")
        if bool(self.test_images) != bool(self.test_labels):
            raise OrchestratorError("test_images and test_labels must be given together")


@dataclass(frozen=True)
class RunConfig:
    """
    One federated run.

    Attributes:
        model_spec: Classifier architecture.
        client_cfg: Local training settings.
        server_cfg: Sampling, aggregation and schedule; schedule.horizon must equal horizon.
        num_clients: Total clients N.
        horizon: Global rounds G.
        data: Data source, skew and split.
        eval_every: Evaluation cadence in rounds; the last round is always evaluated.
        master_seed: Root of every random stream in the run.
        repeat: Repeat index folded into the master seed.
        client_workers: Threads used for the local trainings of one round.
        record_wall_time: Record per-round wall time (otherwise 0).
    """

    model_spec: ModelSpec
    client_cfg: ClientConfig
    server_cfg: ServerConfig
    num_clients: int
    horizon: int
    data: DataSource = field(default_factory=DataSource)
    eval_every: int = 1
    master_seed: int = 0
    repeat: int = 0
    client_workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise OrchestratorError(f"horizon must be at least 1, got {self.horizon}")
        if self.num_clients < 1:
            raise OrchestratorError(f"num_clients must be positive, got {self.num_clients}")
        if self.server_cfg.clients_per_round > self.num_clients:
            raise OrchestratorError(
                f"clients_per_round ({self.server_cfg.clients_per_round}) exceeds "
                f"num_clients ({self.num_clients})"
            )
        if self.server_cfg.schedule.horizon != self.horizon:
            raise OrchestratorError(
                f"schedule horizon ({self.server_cfg.schedule.horizon}) must equal "
                f"the run horizon ({self.horizon})"
            )
        if not 1 <= self.eval_every <= self.horizon:
            raise OrchestratorError(f"eval_every must be in [1, {self.horizon}], got {self.eval_every}")
        if self.master_seed < 0 or self.repeat < 0:
            raise OrchestratorError("master_seed and repeat must be non-negative")
        if self.client_workers < 1:
            raise OrchestratorError(f"client_workers must be positive, got {self.client_workers}")


@dataclass(frozen=True)
class RoundRecord:
    """Metrics of one evaluated round; test_accuracy is that of the model the round produced."""

    round: int
    gamma: float
    selected: Tuple[int, ...]
    test_accuracy: float
    mean_train_loss: float
    wall_ms: int = 0


@dataclass(frozen=True)
class RunRecord:
    """Evaluated rounds of a run, in round order, plus the final global model."""

    config_digest: str
    records: Tuple[RoundRecord, ...]
    final_params: ParamVector


@dataclass(frozen=True)
class Federation:
    """Materialized client datasets and the global test set."""

    clients: List[ClientDataset]
    test: LabeledDataset


@dataclass(frozen=True)
class RepeatSummary:
    """Aggregate metrics over repeated runs of one configuration."""

    num_runs: int
    mean_max_accuracy: float
    std_max_accuracy: Optional[float]
    rounds_to_target: Tuple[Optional[int], ...]
    median_rounds_to_target: Optional[float]
    speedup: Optional[float] = None


def _json_default(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (frozenset, set)):
        return sorted(value)
    return str(value)


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of a run configuration."""
    canonical = json.dumps(asdict(cfg), sort_keys=True, default=_json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def root_seed(cfg: RunConfig) -> int:
    """Seed of the run, combining master seed and repeat index."""
    return derive_seed(cfg.master_seed, REPEAT, cfg.repeat)


def build_federation(cfg: RunConfig) -> Federation:
    """
    Load or generate the data pool, split off the test set and partition the rest.

    Raises:
        DataError: On dataset construction failures.
        OrchestratorError: If the data does not fit the model spec.
    """
    data = cfg.data
    data_seed = derive_seed(root_seed(cfg), DATA)
    spec = cfg.model_spec

    if data.kind is DataKind.BLOBS:
        pool = generate_blobs(
            data.num_classes, spec.input_dim, data.samples_per_class, data.spread,
            derive_seed(data_seed, 0),
        )
        train, test = train_test_split(pool, data.test_fraction, derive_seed(data_seed, 1))
    else:
        pool = load_idx(data.train_images, data.train_labels, data.num_classes)
        if data.test_images:
            test = load_idx(data.test_images, data.test_labels, pool.num_classes)
            train = pool
        else:
            train, test = train_test_split(pool, data.test_fraction, derive_seed(data_seed, 1))

    if train.dim != spec.input_dim:
        raise OrchestratorError(
            f"Data has {train.dim} features but the model expects {spec.input_dim}"
        )
    if max(train.num_classes, test.num_classes) > spec.num_classes:
        raise OrchestratorError(
            f"Data has {train.num_classes} classes but the model has {spec.num_classes} outputs"
        )

    skew = SkewConfig(
        num_clients=cfg.num_clients,
        classes_per_client=data.classes_per_client,
        max_per_class=data.max_per_class,
        seed=derive_seed(data_seed, 2),
        strict_disjoint=data.strict_disjoint,
    )
    clients = partition_label_skew(train, skew)
    return Federation(clients, test)


def evaluate(spec: ModelSpec, params: ParamVector, test: LabeledDataset) -> float:
    """
    Fraction of test samples the model classifies correctly.

    Raises:
        OrchestratorError: If the test set is empty.
    """
    if len(test) == 0:
        raise OrchestratorError("Cannot evaluate on an empty test set")
    predictions = predict_batch(spec, params, test.features)
    return float(np.mean(predictions == test.labels))


def _train_selected(
    cfg: RunConfig,
    federation: Federation,
    params: ParamVector,
    states: Dict[int, ClientState],
    selected: List[int],
    round_index: int,
    epoch_seed: int,
    pool: Optional[ThreadPoolExecutor],
) -> List[Tuple[LocalUpdate, ClientState]]:
    def train_one(client_id: int) -> Tuple[LocalUpdate, ClientState]:
        epochs = draw_local_epochs(cfg.client_cfg, round_index, client_id, epoch_seed)
        return local_train(
            params,
            federation.clients[client_id],
            states[client_id],
            cfg.client_cfg,
            epochs,
            round_index=round_index,
        )

    if pool is None:
        return [train_one(c) for c in selected]
    # map preserves input order, so results line up with selected
    return list(pool.map(train_one, selected))


def run_federated(cfg: RunConfig, federation: Optional[Federation] = None) -> RunRecord:
    """
    Run the broadcast / local update / cyclic aggregation loop for cfg.horizon rounds.

    Args:
        cfg: Run configuration.
        federation: Prebuilt client data; built from cfg.data when omitted.

    Returns:
        RunRecord with one RoundRecord per evaluated round.

    Raises:
        DivergenceError: If a client's local training diverges (carries round and client).
        DataError, OrchestratorError: On data or configuration problems.
    """
    digest = config_digest(cfg)
    logger.info(
        f"Starting run {digest[:12]}: G={cfg.horizon}, N={cfg.num_clients}, "
        f"M={cfg.server_cfg.clients_per_round}, strategy={cfg.client_cfg.strategy.kind.value}, "
        f"schedule={cfg.server_cfg.schedule.kind.value}, repeat={cfg.repeat}"
    )
    if federation is None:
        federation = build_federation(cfg)
    if len(federation.clients) != cfg.num_clients:
        raise OrchestratorError(
            f"Federation has {len(federation.clients)} clients, expected {cfg.num_clients}"
        )

    root = root_seed(cfg)
    spec = cfg.model_spec
    server_cfg = replace(cfg.server_cfg, seed=derive_seed(root, SAMPLING))
    epoch_seed = derive_seed(root, EPOCHS)
    params = init_params(spec, derive_seed(root, INIT))
    states = {
        c: ClientState(client_id=c, rng_seed=derive_seed(root, CLIENT_STATE, c))
        for c in range(cfg.num_clients)
    }
    logger.debug(f"Initial test accuracy {evaluate(spec, params, federation.test):.4f}")

    pool = ThreadPoolExecutor(max_workers=cfg.client_workers) if cfg.client_workers > 1 else None
    records = []
    try:
        for round_index in range(cfg.horizon):
            started = time.perf_counter()
            selected = sample_clients(cfg.num_clients, server_cfg, round_index)
            results = _train_selected(
                cfg, federation, params, states, selected, round_index, epoch_seed, pool
            )
            updates = []
            for update, new_state in results:
                states[update.client_id] = new_state
                updates.append(update)

            aggregated = aggregate(updates, server_cfg)
            gamma = rate_at(server_cfg.schedule, round_index)
            params = apply_server_rate(params, aggregated, gamma, server_cfg.rate_application)
            mean_loss = float(np.mean([u.final_local_loss for u in updates]))
            logger.debug(f"Round {round_index}: gamma={gamma:.6f}, mean local loss={mean_loss:.4f}")

            if round_index % cfg.eval_every == 0 or round_index == cfg.horizon - 1:
                accuracy = evaluate(spec, params, federation.test)
                wall_ms = int((time.perf_counter() - started) * 1000) if cfg.record_wall_time else 0
                records.append(
                    RoundRecord(
                        round=round_index,
                        gamma=gamma,
                        selected=tuple(selected),
                        test_accuracy=accuracy,
                        mean_train_loss=mean_loss,
                        wall_ms=wall_ms,
                    )
                )
                logger.info(f"Round {round_index}/{cfg.horizon - 1}: accuracy={accuracy:.4f}")
    except ClientError as e:
        if isinstance(e, DivergenceError):
            raise
        raise OrchestratorError(f"Round {round_index}: {e}") from e
    finally:
        if pool is not None:
            pool.shutdown()

    logger.info(f"Finished run {digest[:12]}: max accuracy {max(r.test_accuracy for r in records):.4f}")
    return RunRecord(config_digest=digest, records=tuple(records), final_params=params)


def rounds_to_target(run: RunRecord, target: float) -> Optional[int]:
    """Smallest recorded round whose test accuracy reaches target, or None."""
    for record in run.records:
        if record.test_accuracy >= target:
            return record.round
    return None


def max_accuracy(run: RunRecord) -> float:
    """
    Maximum test accuracy over the recorded rounds.

    Raises:
        OrchestratorError: If the run has no records.
    """
    if not run.records:
        raise OrchestratorError("Run has no records")
    return max(record.test_accuracy for record in run.records)


def accuracy_at(run: RunRecord, round_index: int) -> float:
    """Test accuracy recorded at round_index."""
    for record in run.records:
        if record.round == round_index:
            return record.test_accuracy
    raise OrchestratorError(f"Round {round_index} was not evaluated")


def median_rounds(values: Sequence[Optional[int]]) -> Optional[float]:
    """Median with unreached targets counted as infinitely late; None if the median is unreached."""
    if not values:
        return None
    median = statistics.median(float("inf") if v is None else float(v) for v in values)
    return None if median == float("inf") else median


def speedup_ratio(baseline_rounds: Optional[float], treatment_rounds: Optional[float]) -> Optional[float]:
    """Baseline median rounds over treatment median rounds; None if either is unreached or the treatment is 0."""
    if baseline_rounds is None or treatment_rounds is None or treatment_rounds <= 0:
        return None
    return baseline_rounds / treatment_rounds


def summarize_repeats(
    runs: Sequence[RunRecord],
    target: Optional[float],
    baseline: Optional[Sequence[RunRecord]] = None,
) -> RepeatSummary:
    """
    Mean and unbiased std of the max accuracy, median rounds-to-target and speedup.

    Speedup is the baseline median rounds-to-target over the median of these runs.

    Raises:
        OrchestratorError: With fewer than two runs, or a baseline of a different length.
    """
    if len(runs) < 2:
        raise OrchestratorError(f"summarize_repeats needs at least 2 runs, got {len(runs)}")
    if baseline is not None and len(baseline) != len(runs):
        raise OrchestratorError(f"Baseline has {len(baseline)} runs, expected {len(runs)}")

    maxima = np.array([max_accuracy(run) for run in runs])
    reached: Tuple[Optional[int], ...] = ()
    median = None
    speedup = None
    if target is not None:
        reached = tuple(rounds_to_target(run, target) for run in runs)
        median = median_rounds(reached)
        if baseline is not None:
            base_median = median_rounds([rounds_to_target(run, target) for run in baseline])
            speedup = speedup_ratio(base_median, median)

    return RepeatSummary(
        num_runs=len(runs),
        mean_max_accuracy=float(np.mean(maxima)),
        std_max_accuracy=float(np.std(maxima, ddof=1)),
        rounds_to_target=reached,
        median_rounds_to_target=median,
        speedup=speedup,
    )
