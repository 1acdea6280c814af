"""Local loss functions of the supported FL strategies with analytic gradients.

FedAvg is plain cross-entropy. FedProx adds a proximal term towards the global
model, MOON adds a model-contrastive term on the representation layer and
FedRS scales the logits of classes a client never observes.
"""

from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, NamedTuple, Optional, Tuple

import numpy as np

from src.data import LabeledDataset
from src.logger import get_logger
from src.model import (
    Arch,
    LayoutMismatchError,
    ModelError,
    ModelSpec,
    ParamVector,
    forward_batch,
)

logger = get_logger(__name__)

DEFAULT_PROX_MU = 0.01
DEFAULT_MOON_TAU = 0.5
DEFAULT_MOON_WEIGHT = 1.0
DEFAULT_FEDRS_ALPHA = 0.5


class MissingContextError(ModelError):
    """Raised when a strategy needs a context entry the caller did not supply."""

    def __init__(self, entry: str, strategy: "StrategyKind"):
        self.entry = entry
        super().__init__(f"Strategy {strategy.value} requires context entry '{entry}'")


class NonFiniteLossError(ModelError):
    """Raised when the loss or its gradient is not finite."""

    pass


class StrategyKind(Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    MOON = "moon"
    FEDRS = "fedrs"


@dataclass(frozen=True)
class LossStrategy:
    """
    Strategy selection and hyperparameters.

    Only the fields of the selected kind are used: mu (FedProx), tau and weight
    (MOON), alpha (FedRS).
    """

    kind: StrategyKind = StrategyKind.FEDAVG
    mu: float = DEFAULT_PROX_MU
    tau: float = DEFAULT_MOON_TAU
    weight: float = DEFAULT_MOON_WEIGHT
    alpha: float = DEFAULT_FEDRS_ALPHA

    def __post_init__(self) -> None:
        if self.kind is StrategyKind.FEDPROX and not self.mu >= 0:
            raise ModelError(f"FedProx mu must be non-negative, got {self.mu}")
        if self.kind is StrategyKind.MOON:
            if not self.tau > 0:
                raise ModelError(f"MOON tau must be positive, got {self.tau}")
            if not self.weight >= 0:
                raise ModelError(f"MOON weight must be non-negative, got {self.weight}")
        if self.kind is StrategyKind.FEDRS and not 0.0 <= self.alpha <= 1.0:
            raise ModelError(f"FedRS alpha must be in [0, 1], got {self.alpha}")

    def params(self) -> dict:
        """Hyperparameters relevant to the selected kind."""
        if self.kind is StrategyKind.FEDPROX:
            return {"mu": self.mu}
        if self.kind is StrategyKind.MOON:
            return {"tau": self.tau, "weight": self.weight}
        if self.kind is StrategyKind.FEDRS:
            return {"alpha": self.alpha}
        return {}


@dataclass(frozen=True)
class StrategyContext:
    """Per-client inputs a strategy may need besides the batch."""

    global_params: Optional[ParamVector] = None
    prev_local_params: Optional[ParamVector] = None
    present_classes: Optional[FrozenSet[int]] = None


class ContrastiveTerm(NamedTuple):
    """Per-sample contrastive loss and its gradient with respect to the representation."""

    losses: np.ndarray
    grad_representation: np.ndarray


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample cross-entropy of softmax(logits).

    Returns:
        (losses, probabilities).
    """
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_norm[:, None]
    losses = -log_probs[np.arange(labels.size), labels]
    return losses, np.exp(log_probs)


def cosine_with_grad(r: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Row-wise cosine similarity of r and v and its gradient with respect to r.

    Rows where either vector is zero have similarity 0 and zero gradient.
    """
    r_norm = np.linalg.norm(r, axis=1)
    v_norm = np.linalg.norm(v, axis=1)
    valid = (r_norm > 0) & (v_norm > 0)
    safe_r = np.where(valid, r_norm, 1.0)
    safe_v = np.where(valid, v_norm, 1.0)

    cos = np.where(valid, np.sum(r * v, axis=1) / (safe_r * safe_v), 0.0)
    grad = v / (safe_r * safe_v)[:, None] - cos[:, None] * r / (safe_r**2)[:, None]
    grad = np.where(valid[:, None], grad, 0.0)
    return cos, grad


def contrastive_term(
    rep: np.ndarray, rep_global: np.ndarray, rep_prev: np.ndarray, tau: float
) -> ContrastiveTerm:
    """
    Model-contrastive loss -log(e^{s_g/tau} / (e^{s_g/tau} + e^{s_p/tau})).

    s_g is the cosine between the local and global representation, s_p the
    cosine between the local and previous-local representation.
    """
    s_g, ds_g = cosine_with_grad(rep, rep_global)
    s_p, ds_p = cosine_with_grad(rep, rep_prev)
    u = (s_p - s_g) / tau
    losses = np.logaddexp(0.0, u)
    # d softplus(u) / du
    sig = 0.5 * (1.0 + np.tanh(0.5 * u))
    grad = (sig / tau)[:, None] * (ds_p - ds_g)
    return ContrastiveTerm(losses, grad)


def _require(ctx: StrategyContext, entry: str, kind: StrategyKind):
    value = getattr(ctx, entry)
    if value is None:
        raise MissingContextError(entry, kind)
    return value


def restriction_mask(num_classes: int, present: FrozenSet[int], alpha: float) -> np.ndarray:
    """Per-class logit multiplier: 1 for observed classes, alpha otherwise."""
    mask = np.full(num_classes, alpha, dtype=np.float64)
    for cls in present:
        if 0 <= cls < num_classes:
            mask[cls] = 1.0
    return mask


def loss_and_grad(
    spec: ModelSpec,
    strategy: LossStrategy,
    params: ParamVector,
    batch: LabeledDataset,
    ctx: StrategyContext,
) -> Tuple[float, ParamVector]:
    """
    Batch-mean strategy loss and its exact gradient.

    Args:
        spec: Model architecture.
        strategy: Which local loss to use.
        params: Current local parameters.
        batch: Non-empty labeled samples.
        ctx: Global model (FedProx, MOON), previous local model (MOON) and
             the client's class-presence set (FedRS).

    Returns:
        (loss, gradient with the layout of params).

    Raises:
        MissingContextError: If the strategy needs a context entry that is absent.
        NonFiniteLossError: If the loss or gradient is not finite.
        ModelError: On an empty batch or dimension mismatch.
    """
    if params.spec != spec:
        raise LayoutMismatchError(f"Parameters have layout {params.spec}, expected {spec}")
    if len(batch) == 0:
        raise ModelError("Cannot compute a loss on an empty batch")

    kind = strategy.kind
    x = batch.features
    y = batch.labels
    n = y.size

    global_params = None
    if kind in (StrategyKind.FEDPROX, StrategyKind.MOON):
        global_params = _require(ctx, "global_params", kind)
        if global_params.spec != spec:
            raise LayoutMismatchError("global_params layout differs from params")

    activations = forward_batch(spec, params, x)
    logits = activations.logits

    mask = None
    if kind is StrategyKind.FEDRS:
        present = _require(ctx, "present_classes", kind)
        mask = restriction_mask(spec.num_classes, present, strategy.alpha)
        logits = logits * mask

    losses, probs = softmax_cross_entropy(logits, y)
    loss = float(np.mean(losses))

    d_logits = probs
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    if mask is not None:
        d_logits = d_logits * mask

    d_rep = None
    if kind is StrategyKind.MOON and strategy.weight > 0:
        prev = _require(ctx, "prev_local_params", kind)
        rep_global = forward_batch(spec, global_params, x).representation
        rep_prev = forward_batch(spec, prev, x).representation
        term = contrastive_term(activations.representation, rep_global, rep_prev, strategy.tau)
        loss += strategy.weight * float(np.mean(term.losses))
        d_rep = (strategy.weight / n) * term.grad_representation

    if spec.arch is Arch.SOFTMAX_LINEAR:
        # the representation is the input itself, so d_rep has no parameters to reach
        grads = [d_logits.T @ x, d_logits.sum(axis=0)]
    else:
        hidden = activations.representation
        w2 = params.segment("W2")
        d_hidden = d_logits @ w2
        if d_rep is not None:
            d_hidden = d_hidden + d_rep
        d_pre = d_hidden * (activations.pre_activation > 0)
        grads = [d_pre.T @ x, d_pre.sum(axis=0), d_logits.T @ hidden, d_logits.sum(axis=0)]

    grad = np.concatenate([g.reshape(-1) for g in grads])

    if kind is StrategyKind.FEDPROX and strategy.mu > 0:
        diff = params.values - global_params.values
        loss += 0.5 * strategy.mu * float(np.dot(diff, diff))
        grad = grad + strategy.mu * diff

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(f"Non-finite {kind.value} loss or gradient (loss={loss})")

    return loss, ParamVector.wrap(grad, spec)
