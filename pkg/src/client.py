"""Client-side local training (EdgeOpt): mini-batch SGD from the broadcast model."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from src.data import ClientDataset
from src.logger import get_logger
from src.model import ModelError, ModelSpec, ParamVector, zeros
from src.seeding import EPOCHS, derive_rng
from src.strategies import (
    LossStrategy,
    NonFiniteLossError,
    StrategyContext,
    loss_and_grad,
)

logger = get_logger(__name__)


class ClientError(Exception):
    """Custom exception for client configuration and training errors."""

    pass


class DivergenceError(ClientError):
    """Raised when local training produces a non-finite loss or gradient."""

    def __init__(self, client_id: int, round_index: Optional[int] = None, detail: str = ""):
        self.client_id = client_id
        self.round = round_index
        where = f"client {client_id}" if round_index is None else f"round {round_index}, client {client_id}"
        message = f"Local training diverged at {where}"
        super().__init__(f"{message}: {detail}" if detail else message)


@dataclass(frozen=True)
class ClientConfig:
    """
    Local training settings shared by all clients.

    Attributes:
        batch_size: Mini-batch size; the last batch of an epoch may be short.
        local_lr: Client SGD step size.
        strategy: Local loss strategy.
        epoch_range: Inclusive [lo, hi] range of the per-round epoch budget.
    """

    batch_size: int = 32
    local_lr: float = 0.05
    strategy: LossStrategy = field(default_factory=LossStrategy)
    epoch_range: Tuple[int, int] = (1, 5)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ClientError(f"batch_size must be positive, got {self.batch_size}")
        if not self.local_lr >= 0:
            raise ClientError(f"local_lr must be non-negative, got {self.local_lr}")
        lo, hi = self.epoch_range
        if lo < 1 or lo > hi:
            raise ClientError(f"epoch_range must satisfy 1 <= lo <= hi, got {self.epoch_range}")
        object.__setattr__(self, "epoch_range", (int(lo), int(hi)))


@dataclass(frozen=True)
class ClientState:
    """Per-client state the orchestrator carries between selections."""

    client_id: int
    rng_seed: int
    prev_local_params: Optional[ParamVector] = None


@dataclass(frozen=True)
class LocalUpdate:
    """
    Result of one client's local training.

    Attributes:
        client_id: Training client.
        params: Locally trained parameters.
        num_samples: Size of the client's dataset.
        epochs_used: Local epoch budget of the round.
        final_local_loss: Mean batch loss of the last epoch.
        epoch_losses: Mean batch loss of every epoch.
    """

    client_id: int
    params: ParamVector
    num_samples: int
    epochs_used: int
    final_local_loss: float
    epoch_losses: Tuple[float, ...] = ()


def draw_local_epochs(cfg: ClientConfig, round_index: int, client_id: int, base_seed: int) -> int:
    """Uniform epoch budget in cfg.epoch_range, keyed by (base_seed, round, client)."""
    lo, hi = cfg.epoch_range
    if lo == hi:
        return lo
    rng = derive_rng(base_seed, EPOCHS, round_index, client_id)
    return int(rng.integers(lo, hi + 1))


def local_train(
    global_params: ParamVector,
    dataset: ClientDataset,
    state: ClientState,
    cfg: ClientConfig,
    epochs: int,
    round_index: Optional[int] = None,
) -> Tuple[LocalUpdate, ClientState]:
    """
    Train the broadcast model on one client's data.

    Local parameters start at global_params. Each epoch shuffles the samples
    with the client's generator and steps theta <- theta - local_lr * grad over
    consecutive batches of cfg.batch_size.

    Args:
        global_params: Broadcast global model.
        dataset: The client's data.
        state: Client state; supplies the shuffle seed and MOON's previous model.
        cfg: Local training settings.
        epochs: Number of passes over the data.
        round_index: Global round, used in error messages.

    Returns:
        (LocalUpdate, new ClientState with the trained parameters as previous
        local model and an advanced seed).

    Raises:
        DivergenceError: On a non-finite loss, gradient or parameter.
        ClientError: On invalid epochs, an empty dataset or a layout mismatch.
    """
    spec: ModelSpec = global_params.spec
    if epochs < 1:
        raise ClientError(f"epochs must be at least 1, got {epochs}")
    if dataset.num_samples == 0:
        raise ClientError(f"Client {dataset.client_id} has no samples")
    prev = state.prev_local_params if state.prev_local_params is not None else zeros(spec)
    if prev.spec != spec:
        raise ClientError(f"Client {state.client_id} previous model has a different layout")

    ctx = StrategyContext(
        global_params=global_params,
        prev_local_params=prev,
        present_classes=dataset.present_classes,
    )
    rng = np.random.default_rng(state.rng_seed)
    n = dataset.num_samples
    theta = global_params.values

    def diverged(epoch: int, reason: str) -> DivergenceError:
        logger.error(f"Divergence at round {round_index}, client {dataset.client_id}, epoch {epoch}")
        return DivergenceError(dataset.client_id, round_index, reason)

    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            batch = dataset.data.subset(order[start : start + cfg.batch_size])
            # theta is rebound to a fresh array every step, never written in place
            try:
                loss, grad = loss_and_grad(spec, cfg.strategy, ParamVector.wrap(theta, spec), batch, ctx)
            except NonFiniteLossError as e:
                raise diverged(epoch, str(e)) from e
            except ModelError as e:
                raise ClientError(str(e)) from e
            theta = theta - cfg.local_lr * grad.values
            batch_losses.append(loss)
        # a non-finite step normally surfaces as a non-finite loss on the next batch
        if not np.all(np.isfinite(theta)):
            raise diverged(epoch, "Parameter vector contains non-finite entries")
        epoch_losses.append(float(np.mean(batch_losses)))
    current = ParamVector.wrap(theta, spec)

    update = LocalUpdate(
        client_id=dataset.client_id,
        params=current,
        num_samples=n,
        epochs_used=epochs,
        final_local_loss=epoch_losses[-1],
        epoch_losses=tuple(epoch_losses),
    )
    next_seed = int(rng.integers(0, 2**32))
    new_state = ClientState(state.client_id, next_seed, current)
    logger.debug(
        f"Client {dataset.client_id} trained {epochs} epoch(s) on {n} samples, "
        f"loss {epoch_losses[-1]:.4f}"
    )
    return update, new_state
