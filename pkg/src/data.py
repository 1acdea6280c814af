"""Client datasets: synthetic blobs, IDX image files and label-skew partitioning."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, List, Tuple, Union

import numpy as np

from src.logger import get_logger

logger = get_logger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_CENTER_ATTEMPTS = 10_000


class DataError(Exception):
    """Custom exception for dataset construction errors."""

    pass


class IdxFormatError(DataError):
    """Base class for malformed IDX files; names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IdxMagicError(IdxFormatError):
    """Raised when an IDX file starts with an unexpected magic number."""

    pass


class IdxTruncatedError(IdxFormatError):
    """Raised when an IDX file is shorter than its header announces."""

    pass


class IdxCountMismatchError(IdxFormatError):
    """Raised when the image and label files disagree on the item count."""

    pass


class PartitionExhaustedError(DataError):
    """Raised by strict disjoint partitioning when a class pool runs dry."""

    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Feature rows with integer class labels.

    Attributes:
        features: Array of shape (n, dim).
        labels: Integer array of shape (n,) with values in [0, num_classes).
        num_classes: Size of the label space.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise DataError(f"features must be two-dimensional, got shape {features.shape}")
        if features.shape[0] != labels.size:
            raise DataError(f"{features.shape[0]} feature rows but {labels.size} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One client's private data and the classes it observes."""

    client_id: int
    data: LabeledDataset
    present_classes: FrozenSet[int]

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class SkewConfig:
    """
    Label-skew partitioning.

    Attributes:
        num_clients: Number of clients N.
        classes_per_client: Distinct classes each client holds.
        max_per_class: Cap on samples of one class per client.
        seed: Partition seed.
        strict_disjoint: Never reuse a sample across clients.
    """

    num_clients: int
    classes_per_client: int = 4
    max_per_class: int = 100
    seed: int = 0
    strict_disjoint: bool = False


def make_client(client_id: int, data: LabeledDataset) -> ClientDataset:
    """Wrap data for a client, deriving its class-presence set."""
    present = frozenset(int(c) for c in np.unique(data.labels))
    return ClientDataset(client_id, data, present)


def generate_blobs(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
) -> LabeledDataset:
    """
    Gaussian-blob classification data.

    Class centers are drawn uniformly from [-1, 1]^input_dim and rejection-resampled
    until every pair is at least 4 * spread apart; class c's samples are
    center_c + spread * N(0, I).

    Raises:
        DataError: On non-positive counts or spread, or when the centers cannot be
                   separated within the attempt budget.
    """
    if num_classes < 1 or input_dim < 1 or samples_per_class < 1:
        raise DataError("num_classes, input_dim and samples_per_class must be positive")
    if not spread > 0:
        raise DataError(f"spread must be positive, got {spread}")

    rng = np.random.default_rng(seed)
    min_separation = 4.0 * spread
    centers: List[np.ndarray] = []
    attempts = 0
    while len(centers) < num_classes:
        if attempts >= MAX_CENTER_ATTEMPTS:
            raise DataError(
                f"Could not place {num_classes} centers {min_separation:g} apart in "
                f"{MAX_CENTER_ATTEMPTS} attempts; spread {spread} is too large"
            )
        attempts += 1
        candidate = rng.uniform(-1.0, 1.0, size=input_dim)
        if all(np.linalg.norm(candidate - c) >= min_separation for c in centers):
            centers.append(candidate)

    features = np.concatenate(
        [c + spread * rng.standard_normal((samples_per_class, input_dim)) for c in centers]
    )
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    logger.debug(
        f"Generated {labels.size} blob samples ({num_classes} classes, dim {input_dim}, "
        f"{attempts} center draws)"
    )
    return LabeledDataset(features, labels, num_classes)


PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _read_header(raw: bytes, name: str, magic: int, num_dims: int) -> Tuple[int, ...]:
    header_size = 4 * (1 + num_dims)
    if len(raw) < header_size:
        raise IdxTruncatedError(f"{name}.header", f"expected {header_size} header bytes, got {len(raw)}")
    found, *dims = struct.unpack_from(f">{1 + num_dims}I", raw)
    if found != magic:
        raise IdxMagicError(f"{name}.magic", f"expected 0x{magic:08x}, got 0x{found:08x}")
    return tuple(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: int = 10) -> LabeledDataset:
    """
    Load an MNIST-format (IDX) image/label file pair.

    Images: big-endian magic 0x00000803, dims [count, rows, cols], then unsigned
    bytes scaled by 1/255 into flat vectors. Labels: magic 0x00000801, [count],
    then one byte per label. Files ending in ".gz" are decompressed.

    Args:
        images_path: Path of the image file.
        labels_path: Path of the label file.
        num_classes: Size of the label space (raised if a label exceeds it).

    Returns:
        LabeledDataset with features in [0, 1].

    Raises:
        IdxMagicError: Wrong magic number in either file.
        IdxTruncatedError: A file is shorter than its header announces.
        IdxCountMismatchError: The files disagree on the item count.
        OSError: If a file cannot be read.
    """
    logger.info(f"Loading IDX data: images={images_path}, labels={labels_path}")

    image_raw = _read_bytes(images_path)
    label_raw = _read_bytes(labels_path)

    count, rows, cols = _read_header(image_raw, "images", IDX_IMAGES_MAGIC, 3)
    (label_count,) = _read_header(label_raw, "labels", IDX_LABELS_MAGIC, 1)

    pixel_bytes = count * rows * cols
    if len(image_raw) - 16 < pixel_bytes:
        raise IdxTruncatedError(
            "images.pixels", f"expected {pixel_bytes} bytes, got {len(image_raw) - 16}"
        )
    if len(label_raw) - 8 < label_count:
        raise IdxTruncatedError("labels.items", f"expected {label_count} bytes, got {len(label_raw) - 8}")
    if count != label_count:
        raise IdxCountMismatchError("labels.count", f"{count} images but {label_count} labels")

    pixels = np.frombuffer(image_raw, dtype=np.uint8, count=pixel_bytes, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_raw, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)

    if labels.size and labels.max() >= num_classes:
        num_classes = int(labels.max()) + 1
        logger.warning(f"Labels exceed the configured class count, using {num_classes}")

    logger.info(f"Loaded {count} images of {rows}x{cols}")
    return LabeledDataset(features, labels, num_classes)


def partition_label_skew(source: LabeledDataset, cfg: SkewConfig) -> List[ClientDataset]:
    """
    Label-skew partition of a pooled dataset over cfg.num_clients clients.

    Each client draws classes_per_client distinct classes uniformly without
    replacement and receives min(max_per_class, class size) samples of each,
    taken consecutively from that class's shuffled pool. Pools wrap around
    independently, so a sample may reach several clients but never appears twice
    in one client. With strict_disjoint the pools never wrap.

    Raises:
        DataError: If classes_per_client exceeds the number of classes, or a class
                   has no samples.
        PartitionExhaustedError: If strict_disjoint runs a class pool dry.
    """
    num_classes = source.num_classes
    if cfg.num_clients < 1:
        raise DataError(f"num_clients must be positive, got {cfg.num_clients}")
    if cfg.classes_per_client < 1 or cfg.classes_per_client > num_classes:
        raise DataError(
            f"classes_per_client ({cfg.classes_per_client}) must be in [1, {num_classes}]"
        )
    if cfg.max_per_class < 1:
        raise DataError(f"max_per_class must be positive, got {cfg.max_per_class}")

    counts = source.class_counts()
    empty = [c for c in range(num_classes) if counts[c] == 0]
    if empty:
        raise DataError(f"Classes without samples: {empty}")

    rng = np.random.default_rng(cfg.seed)
    pools = [rng.permutation(np.flatnonzero(source.labels == c)) for c in range(num_classes)]
    cursors = [0] * num_classes

    clients = []
    for client_id in range(cfg.num_clients):
        chosen = np.sort(rng.choice(num_classes, size=cfg.classes_per_client, replace=False))
        parts = []
        for cls in chosen:
            pool = pools[cls]
            take = min(cfg.max_per_class, pool.size)
            start = cursors[cls]
            if cfg.strict_disjoint:
                take = min(take, pool.size - start)
                if take == 0:
                    raise PartitionExhaustedError(
                        f"Class {cls} pool exhausted at client {client_id}"
                    )
                parts.append(pool[start : start + take])
                cursors[cls] = start + take
            else:
                parts.append(pool[(start + np.arange(take)) % pool.size])
                cursors[cls] = (start + take) % pool.size
        clients.append(make_client(client_id, source.subset(np.concatenate(parts))))

    sizes = [c.num_samples for c in clients]
    logger.info(
        f"Partitioned {len(source)} samples over {cfg.num_clients} clients "
        f"({cfg.classes_per_client} classes each, {min(sizes)}-{max(sizes)} samples)"
    )
    return clients


def train_test_split(
    source: LabeledDataset, test_fraction: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Stratified, seeded split into disjoint train and test sets.

    Each class sends round(test_fraction * size) samples (at least one, and at
    most size - 1) to the test set. Both outputs keep the source order.

    Raises:
        DataError: If test_fraction is not in (0, 1) or a present class has
                   fewer than two samples.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    test_parts = []
    for cls in range(source.num_classes):
        members = np.flatnonzero(source.labels == cls)
        if members.size == 0:
            continue
        if members.size < 2:
            raise DataError(f"Class {cls} has {members.size} sample; at least 2 are needed to split")
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1)
        test_parts.append(rng.permutation(members)[:n_test])

    test_mask = np.zeros(len(source), dtype=bool)
    test_mask[np.concatenate(test_parts)] = True
    train = source.subset(np.flatnonzero(~test_mask))
    test = source.subset(np.flatnonzero(test_mask))
    logger.debug(f"Split {len(source)} samples into {len(train)} train / {len(test)} test")
    return train, test
