"""Parameter vectors and the two desk-scale classifiers."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.logger import get_logger

logger = get_logger(__name__)


class ModelError(Exception):
    """Custom exception for model and parameter-vector errors."""

    pass


class LayoutMismatchError(ModelError):
    """Raised when two parameter vectors (or a vector and a spec) disagree on layout."""

    pass


class Arch(Enum):
    SOFTMAX_LINEAR = "softmax_linear"
    MLP1 = "mlp1"


@dataclass(frozen=True)
class ModelSpec:
    """
    Classifier architecture.

    Attributes:
        arch: SoftmaxLinear (logits = Wx + b) or Mlp1 (one ReLU hidden layer).
        input_dim: Feature dimension.
        num_classes: Number of output classes.
        hidden_dim: Hidden width, required for Mlp1 and ignored otherwise.
    """

    arch: Arch
    input_dim: int
    num_classes: int
    hidden_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ModelError(f"input_dim must be positive, got {self.input_dim}")
        if self.num_classes < 2:
            raise ModelError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.arch is Arch.MLP1 and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ModelError(f"Mlp1 requires a positive hidden_dim, got {self.hidden_dim}")
        if self.arch is Arch.SOFTMAX_LINEAR and self.hidden_dim is not None:
            object.__setattr__(self, "hidden_dim", None)

    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Ordered (segment name, shape) pairs. Weight matrices are (fan_out, fan_in)."""
        if self.arch is Arch.SOFTMAX_LINEAR:
            return [
                ("W", (self.num_classes, self.input_dim)),
                ("b", (self.num_classes,)),
            ]
        hidden = int(self.hidden_dim)  # type: ignore[arg-type]
        return [
            ("W1", (hidden, self.input_dim)),
            ("b1", (hidden,)),
            ("W2", (self.num_classes, hidden)),
            ("b2", (self.num_classes,)),
        ]

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Immutable flat parameter vector with a model layout.

    The array is copied on construction and marked read-only.
    """

    values: np.ndarray
    spec: ModelSpec
    _segments: Dict[str, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.spec.num_params:
            raise LayoutMismatchError(
                f"Expected {self.spec.num_params} parameters, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ModelError("Parameter vector contains non-finite entries")
        self._bind(values)

    def _bind(self, values: np.ndarray) -> None:
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        segments = {}
        offset = 0
        for name, shape in self.spec.layout():
            size = math.prod(shape)
            segments[name] = values[offset : offset + size].reshape(shape)
            offset += size
        object.__setattr__(self, "_segments", segments)

    @classmethod
    def wrap(cls, values: np.ndarray, spec: ModelSpec) -> "ParamVector":
        """
        Take ownership of a fresh float64 array without copying or scanning it.

        The caller must not keep writing to values and is responsible for
        its finiteness. Size is still checked.
        """
        if values.dtype != np.float64 or values.ndim != 1 or values.size != spec.num_params:
            raise LayoutMismatchError(
                f"Expected a flat float64 array of {spec.num_params} parameters, got shape {values.shape}"
            )
        obj = object.__new__(cls)
        object.__setattr__(obj, "spec", spec)
        obj._bind(values)
        return obj

    def segment(self, name: str) -> np.ndarray:
        """Read-only view of a named segment (e.g. "W", "b1")."""
        return self._segments[name]

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.spec, self.values.tobytes()))


class ForwardPass(NamedTuple):
    """Batched activations kept for backpropagation."""

    logits: np.ndarray
    representation: np.ndarray
    pre_activation: Optional[np.ndarray]


def zeros(spec: ModelSpec) -> ParamVector:
    """All-zero parameter vector of the layout."""
    return ParamVector(np.zeros(spec.num_params), spec)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """
    Randomly initialize a model.

    Weights are drawn uniformly from [-s, s] with s = sqrt(6 / (fan_in + fan_out))
    per segment, biases are zero.

    Args:
        spec: Model architecture.
        seed: Initialization seed.

    Returns:
        New ParamVector.
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in spec.layout():
        if len(shape) == 2:
            fan_out, fan_in = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=shape).reshape(-1))
        else:
            chunks.append(np.zeros(shape))
    logger.debug(f"Initialized {spec.arch.value} with {spec.num_params} parameters (seed={seed})")
    return ParamVector(np.concatenate(chunks), spec)


def _check_layout(spec: ModelSpec, params: ParamVector) -> None:
    if params.spec != spec:
        raise LayoutMismatchError(f"Parameters have layout {params.spec}, expected {spec}")


def forward_batch(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> ForwardPass:
    """
    Forward pass for a batch of feature rows.

    Args:
        spec: Model architecture.
        params: Parameters with the spec's layout.
        features: Array of shape (batch, input_dim).

    Returns:
        ForwardPass with logits (batch, num_classes), the representation rows and,
        for Mlp1, the hidden pre-activations.

    Raises:
        LayoutMismatchError: If params do not match spec.
        ModelError: On a feature dimension mismatch.
    """
    _check_layout(spec, params)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelError(f"Expected features of shape (n, {spec.input_dim}), got {x.shape}")

    if spec.arch is Arch.SOFTMAX_LINEAR:
        logits = x @ params.segment("W").T + params.segment("b")
        return ForwardPass(logits, x, None)

    pre = x @ params.segment("W1").T + params.segment("b1")
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.segment("W2").T + params.segment("b2")
    return ForwardPass(logits, hidden, pre)


def forward(
    spec: ModelSpec, params: ParamVector, x: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Forward pass for a single feature vector.

    Returns:
        (logits, representation). The representation is x for SoftmaxLinear and
        the post-ReLU hidden layer for Mlp1.
    """
    vector = np.asarray(x, dtype=np.float64)
    if vector.ndim != 1 or vector.size != spec.input_dim:
        raise ModelError(f"Expected a feature vector of length {spec.input_dim}, got {vector.shape}")
    result = forward_batch(spec, params, vector[None, :])
    return result.logits[0], result.representation[0]


def predict_batch(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Predicted class per row; ties go to the lowest class index."""
    return np.argmax(forward_batch(spec, params, features).logits, axis=1)


def predict(spec: ModelSpec, params: ParamVector, x: Sequence[float]) -> int:
    """Argmax of the logits for one feature vector (ties toward the lowest index)."""
    logits, _ = forward(spec, params, x)
    return int(np.argmax(logits))


def add(p: ParamVector, q: ParamVector) -> ParamVector:
    """Elementwise sum of two vectors with the same layout."""
    _check_layout(p.spec, q)
    return ParamVector(p.values + q.values, p.spec)


def subtract(p: ParamVector, q: ParamVector) -> ParamVector:
    """Elementwise difference p - q."""
    _check_layout(p.spec, q)
    return ParamVector(p.values - q.values, p.spec)


def scale(p: ParamVector, c: float) -> ParamVector:
    """Multiply every coordinate by c."""
    return ParamVector(p.values * c, p.spec)


def weighted_mean(items: Sequence[Tuple[ParamVector, float]]) -> ParamVector:
    """
    Weighted average sum_i w_i p_i / sum_i w_i.

    Weights are normalized first and the terms are accumulated with numpy's
    pairwise summation over the member axis, in list order.

    Args:
        items: (vector, weight) pairs with identical layouts and weights >= 0.

    Returns:
        The weighted mean.

    Raises:
        ModelError: If items is empty, a weight is negative or all weights are zero.
        LayoutMismatchError: If layouts differ.
    """
    if not items:
        raise ModelError("weighted_mean needs at least one vector")
    spec = items[0][0].spec
    for vector, _ in items:
        _check_layout(spec, vector)

    weights = np.array([float(w) for _, w in items], dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ModelError(f"Weights must be finite and non-negative, got {weights.tolist()}")
    total = weights.sum()
    if total <= 0:
        raise ModelError("Weights must have a positive sum")

    normalized = weights / total
    stacked = np.stack([vector.values for vector, _ in items], axis=1)
    # (num_params, members), contiguous along the members axis
    terms = np.ascontiguousarray(stacked * normalized)
    return ParamVector(np.sum(terms, axis=1), spec)
