"""Image dataset loaders, preprocessing and subsampling.

All loaders return ``DatasetSplit``s with float32 NHWC images in [0, 1] and int64 labels.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np

from nrflab.errors import CorruptFileError, FormatError, InsufficientExamplesError
from nrflab.rng import DataStream, data_stream
from nrflab.utils import fingerprint_arrays

logger = logging.getLogger(__name__)

CIFAR_IMAGE_BYTES = 32 * 32 * 3
CIFAR_RECORDS_PER_BATCH = 10000
CIFAR10_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_BATCH = "test_batch.bin"
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)  # fmt: skip
CIFAR100_TRAIN_RECORDS = 50000
CIFAR100_TEST_RECORDS = 10000

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

# channels whose std falls below this are left unscaled
STD_EPSILON = 1e-8


@dataclass(frozen=True, slots=True)
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    fingerprint: int = field(init=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")
        object.__setattr__(self, "fingerprint", fingerprint_arrays(self.images, self.labels))

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def flat(self) -> np.ndarray:
        """Images as an (N, H*W*C) matrix, the raw-input baseline representation."""
        return self.images.reshape(len(self), -1)

    def take(self, indices: np.ndarray) -> "DatasetSplit":
        return DatasetSplit(self.images[indices], self.labels[indices], self.class_names)


def _resolve_dir(directory: Path, marker: str, subdirs: tuple[str, ...]) -> Path:
    """Find the directory holding ``marker``, looking inside the archive's usual subdirectories."""
    directory = Path(directory)
    for candidate in (directory, *(directory / sub for sub in subdirs)):
        if (candidate / marker).exists() or (candidate / f"{marker}.gz").exists():
            return candidate
    raise FileNotFoundError(f"{marker} not found in {directory} (or {', '.join(subdirs)})")


def _read_class_names(path: Path, fallback: tuple[str, ...]) -> tuple[str, ...]:
    if not path.is_file():
        return fallback
    names = tuple(line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
    return names or fallback


def read_cifar_records(path: Path, records: int, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR binary file: each record is ``label_bytes`` label bytes then 3072 pixel bytes
    (R, G, B planes of 32x32).

    Returns (images, labels) where labels is ``(records, label_bytes)`` uint8.

    Raises:
        CorruptFileError: the file size isn't ``records * (label_bytes + 3072)``.
    """
    record_size = label_bytes + CIFAR_IMAGE_BYTES
    expected = records * record_size
    data = Path(path).read_bytes()
    if len(data) != expected:
        raise CorruptFileError(
            f"{path} has {len(data)} bytes, expected {expected}", expected=expected, actual=len(data)
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(records, record_size)
    images = raw[:, label_bytes:].reshape(records, 3, 32, 32).transpose(0, 2, 3, 1)
    return (images.astype(np.float32) / 255.0), raw[:, :label_bytes]


def load_cifar10(
    directory: Path, records_per_batch: int = CIFAR_RECORDS_PER_BATCH
) -> tuple[DatasetSplit, DatasetSplit]:
    """Load the binary version of CIFAR-10 (5 train batches and a test batch)."""
    root = _resolve_dir(directory, CIFAR10_TEST_BATCH, ("cifar-10-batches-bin",))
    classes = _read_class_names(root / "batches.meta.txt", CIFAR10_CLASSES)

    parts = [read_cifar_records(root / name, records_per_batch) for name in CIFAR10_TRAIN_BATCHES]
    train_images = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1][:, 0] for p in parts]).astype(np.int64)
    test_images, test_labels = read_cifar_records(root / CIFAR10_TEST_BATCH, records_per_batch)

    train = DatasetSplit(train_images, train_labels, classes)
    test = DatasetSplit(test_images, test_labels[:, 0].astype(np.int64), classes)
    logger.info(f"loaded CIFAR-10 from {root}: {len(train)} train / {len(test)} test")
    return train, test


def load_cifar100(
    directory: Path,
    label_mode: str = "fine",
    train_records: int = CIFAR100_TRAIN_RECORDS,
    test_records: int = CIFAR100_TEST_RECORDS,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Load the binary version of CIFAR-100; records carry a coarse then a fine label byte."""
    if label_mode not in ("fine", "coarse"):
        raise ValueError(f"label_mode must be 'fine' or 'coarse', got {label_mode!r}")
    root = _resolve_dir(directory, "test.bin", ("cifar-100-binary",))
    column = 1 if label_mode == "fine" else 0
    count = 100 if label_mode == "fine" else 20
    classes = _read_class_names(
        root / f"{label_mode}_label_names.txt", tuple(f"{label_mode}_{i:03d}" for i in range(count))
    )
    train_images, train_labels = read_cifar_records(root / "train.bin", train_records, label_bytes=2)
    test_images, test_labels = read_cifar_records(root / "test.bin", test_records, label_bytes=2)
    train = DatasetSplit(train_images, train_labels[:, column].astype(np.int64), classes)
    test = DatasetSplit(test_images, test_labels[:, column].astype(np.int64), classes)
    logger.info(f"loaded CIFAR-100 ({label_mode}) from {root}: {len(train)} train / {len(test)} test")
    return train, test


def _open_idx(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.is_file():
            data = candidate.read_bytes()
            # gzip magic; some mirrors ship compressed files without the suffix
            return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data
    raise FileNotFoundError(f"{path} (or {path.name}.gz) not found")


def read_idx(path: Path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes; dims are big-endian uint32 after the magic."""
    data = _open_idx(Path(path))
    if len(data) < 4:
        raise FormatError(f"{path} is too short to be an IDX file")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(f"{path} has magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise CorruptFileError(f"{path} has {len(data)} bytes, expected {expected}", expected=expected, actual=len(data))
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def _find_mnist_file(root: Path, name: str) -> Path:
    # both the canonical names and the common "train-images.idx3-ubyte" spelling
    for candidate in (name, name.replace("-idx", ".idx")):
        if (root / candidate).exists() or (root / f"{candidate}.gz").exists():
            return root / candidate
    return root / name


def load_mnist_idx(directory: Path) -> tuple[DatasetSplit, DatasetSplit]:
    """Load MNIST-format IDX files (optionally gzip-compressed) as 28x28x1 images."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} does not exist")
    classes = tuple(str(i) for i in range(10))
    splits = []
    for split in ("train", "test"):
        image_name, label_name = MNIST_FILES[split]
        images = read_idx(_find_mnist_file(root, image_name), MNIST_IMAGE_MAGIC)
        labels = read_idx(_find_mnist_file(root, label_name), MNIST_LABEL_MAGIC).astype(np.int64)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and labels.max() > 9:
            raise FormatError(f"{split}: label {labels.max()} outside [0, 9]")
        images = (images.astype(np.float32) / 255.0)[..., np.newaxis]
        splits.append(DatasetSplit(images, labels, classes))
    logger.info(f"loaded MNIST from {root}: {len(splits[0])} train / {len(splits[1])} test")
    return splits[0], splits[1]


def synth_blobs(
    k_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    *,
    image_shape: tuple[int, ...] | None = None,
    test_per_class: int | None = None,
) -> tuple[DatasetSplit, DatasetSplit]:
    """Gaussian blobs: class means at ``separation`` times random unit directions, unit covariance.

    Samples are reshaped to ``image_shape`` (default ``(1, 1, dim)``) so every preset that accepts
    a flat pseudo-image can consume them.
    """
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    image_shape = tuple(image_shape) if image_shape is not None else (1, 1, dim)
    if int(np.prod(image_shape)) != dim:
        raise ValueError(f"image shape {image_shape} doesn't hold {dim} values")
    test_per_class = per_class if test_per_class is None else test_per_class

    directions = data_stream(seed, DataStream.BLOB_MEANS).standard_normal((k_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    classes = tuple(f"blob_{i}" for i in range(k_classes))

    def draw(purpose: DataStream, count: int) -> DatasetSplit:
        noise = data_stream(seed, purpose).standard_normal((k_classes * count, dim))
        labels = np.repeat(np.arange(k_classes, dtype=np.int64), count)
        points = (means[labels] + noise).astype(np.float32)
        return DatasetSplit(points.reshape(-1, *image_shape), labels, classes)

    return draw(DataStream.BLOB_TRAIN, per_class), draw(DataStream.BLOB_TEST, test_per_class)


class NormalizeMode(StrEnum):
    UNIT_RANGE = "unit_range"
    PER_CHANNEL_STANDARDIZE = "per_channel_standardize"
    NONE = "none"


def normalize(
    split: DatasetSplit,
    mode: NormalizeMode | str,
    reference: DatasetSplit | None = None,
) -> DatasetSplit:
    """Preprocess ``split`` using statistics of ``reference`` (the train split; defaults to ``split``).

    ``unit_range`` leaves data untouched when the reference already lies in [0, 1] and otherwise
    min-max rescales with the reference range; ``per_channel_standardize`` subtracts the reference
    channel mean and divides by its channel std.
    """
    mode = NormalizeMode(mode)
    reference = split if reference is None else reference
    if mode == NormalizeMode.NONE:
        return split

    if mode == NormalizeMode.UNIT_RANGE:
        if reference.images.min(initial=0.0) >= 0.0 and reference.images.max(initial=0.0) <= 1.0:
            return split
        low = float(reference.images.min())
        span = float(reference.images.max()) - low
        if span <= 0:
            logger.warning("reference images are constant; unit_range leaves them shifted to 0")
            span = 1.0
        images = ((split.images - low) / span).astype(np.float32)
        return DatasetSplit(images, split.labels, split.class_names)

    axes = tuple(range(reference.images.ndim - 1))
    mean = reference.images.mean(axis=axes, dtype=np.float64)
    std = reference.images.std(axis=axes, dtype=np.float64)
    flat = std < STD_EPSILON
    if flat.any():
        logger.warning(f"channels {np.flatnonzero(flat).tolist()} have zero std; leaving them unscaled")
        std = np.where(flat, 1.0, std)
    images = ((split.images - mean) / std).astype(np.float32)
    return DatasetSplit(images, split.labels, split.class_names)


def normalize_pair(
    train: DatasetSplit, test: DatasetSplit, mode: NormalizeMode | str
) -> tuple[DatasetSplit, DatasetSplit]:
    """Normalize both splits with train statistics."""
    return normalize(train, mode, reference=train), normalize(test, mode, reference=train)


def subsample(split: DatasetSplit, per_class: int, seed: int) -> DatasetSplit:
    """Exactly ``per_class`` examples of every class, chosen by a seeded shuffle.

    The selection keeps the original example order.

    Raises:
        InsufficientExamplesError: some class has fewer than ``per_class`` examples.
    """
    counts = np.bincount(split.labels, minlength=split.num_classes)
    if per_class < 1 or counts.min() < per_class:
        raise InsufficientExamplesError(
            f"cannot take {per_class} per class; smallest class has {int(counts.min())} examples"
        )
    order = data_stream(seed, DataStream.SUBSAMPLE).permutation(len(split))
    chosen = []
    for cls in range(split.num_classes):
        members = order[split.labels[order] == cls]
        chosen.append(members[:per_class])
    return split.take(np.sort(np.concatenate(chosen)))


def split_indices(num_examples: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (fit, holdout) index split with ``fraction`` of examples held out."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    order = data_stream(seed, DataStream.VALIDATION_SPLIT).permutation(num_examples)
    holdout = max(1, round(num_examples * fraction))
    return np.sort(order[holdout:]), np.sort(order[:holdout])
