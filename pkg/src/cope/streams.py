"""Datasets and task-free data streams built from them."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .numerics import DTYPE, make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    def __init__(self, path, found: int, expected: int):
        super().__init__(f"bad-magic: {path} has 0x{found:08x}, expected 0x{expected:08x}")


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class DatasetMissingError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.name)


def _read_header(data: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: file shorter than its magic number")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise BadMagicError(path, found, magic)
    end = 4 + 4 * ndim
    if len(data) < end:
        raise TruncatedFileError(f"{path}: header truncated")
    return struct.unpack(">" + "I" * ndim, data[4:end])


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    n, rows, cols = _read_header(data, path, IMAGES_MAGIC, 3)
    body = data[16:]
    if len(body) < n * rows * cols:
        raise TruncatedFileError(f"{path}: expected {n * rows * cols} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=n * rows * cols)
    return pixels.reshape(n, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,) = _read_header(data, path, LABELS_MAGIC, 1)
    body = data[8:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} labels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n)


def parse_idx(images_path, labels_path, name: str = "") -> Dataset:
    """Load an IDX image/label file pair, pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(DTYPE) / 255.0, labels.astype(np.int64), name or Path(images_path).name)


def data_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get("COPE_DATA_DIR", "data"))


def load_mnist(directory=None) -> tuple[Dataset, Dataset]:
    """Train and test splits from the four standard (uncompressed) MNIST files."""
    d = data_dir(directory)
    names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }
    out = []
    for split, (img, lab) in names.items():
        img_p, lab_p = d / img, d / lab
        for p in (img_p, lab_p):
            if not p.exists():
                raise DatasetMissingError(f"MNIST file not found: {p} (set COPE_DATA_DIR)")
        out.append(parse_idx(img_p, lab_p, f"mnist-{split}"))
    return out[0], out[1]


def synth_gaussians(
    k_classes: int,
    dim: int,
    separation: float,
    n_per_class: int,
    seed: int,
    sigma: float = 1.0,
    name: str = "synth",
) -> Dataset:
    """Isotropic Gaussian clusters whose means are pairwise ``separation`` apart.

    Means sit on scaled basis vectors (``separation / sqrt(2)`` along axis k),
    so ``dim >= k_classes`` is required.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if dim < k_classes:
        raise ValueError("dim must be at least k_classes")
    rng = make_rng(seed, "synth-gaussians")
    means = np.zeros((k_classes, dim))
    means[np.arange(k_classes), np.arange(k_classes)] = separation / np.sqrt(2.0)
    labels = np.repeat(np.arange(k_classes), n_per_class)
    inputs = means[labels] + sigma * rng.standard_normal((len(labels), dim))
    return Dataset(inputs, labels, name)


@dataclass(frozen=True)
class StreamSpec:
    """Declarative data-incremental stream.

    ``task_sizes`` caps the number of samples of each task (None = all).
    With ``iid`` the concatenated stream is shuffled globally instead, and
    ``epochs`` > 1 repeats it (reshuffled per epoch).
    """

    tasks: tuple[tuple[int, ...], ...]
    batch_size: int = 10
    task_sizes: tuple[int | None, ...] | None = None
    shuffle_within_task: bool = True
    iid: bool = False
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(tuple(int(c) for c in t) for t in self.tasks))
        if self.task_sizes is not None:
            object.__setattr__(self, "task_sizes", tuple(self.task_sizes))
            if len(self.task_sizes) != len(self.tasks):
                raise ValueError("one task size per task required")
        seen: set[int] = set()
        for t in self.tasks:
            if seen & set(t):
                raise ValueError("task class subsets must be disjoint")
            seen |= set(t)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def classes(self) -> list[int]:
        return [c for t in self.tasks for c in t]


SPLIT_MNIST_TASKS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


def split_spec(batch_size: int = 10, seed: int = 0, tasks=SPLIT_MNIST_TASKS, **kw) -> StreamSpec:
    return StreamSpec(tasks=tasks, batch_size=batch_size, seed=seed, **kw)


def imbalanced_split_spec(
    big_task: int, big: int = 2000, small: int = 200, batch_size: int = 10, seed: int = 0, tasks=SPLIT_MNIST_TASKS
) -> StreamSpec:
    """Variant where task ``big_task`` (1-based) has ``big`` samples and every other task ``small``."""
    if not 1 <= big_task <= len(tasks):
        raise ValueError(f"big_task must be in 1..{len(tasks)}")
    sizes = tuple(big if t == big_task - 1 else small for t in range(len(tasks)))
    return StreamSpec(tasks=tasks, batch_size=batch_size, task_sizes=sizes, seed=seed)


class StreamBatch(NamedTuple):
    """Inputs and labels only; no task identifier is carried."""

    x: np.ndarray
    y: np.ndarray


@dataclass
class Stream:
    dataset: Dataset
    order: np.ndarray  # dataset row indices in presentation order
    batch_size: int
    eval_set: Dataset
    task_lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return -(-len(self.order) // self.batch_size)

    @property
    def n_samples(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[StreamBatch]:
        for start in range(0, len(self.order), self.batch_size):
            idx = self.order[start : start + self.batch_size]
            yield StreamBatch(self.dataset.inputs[idx], self.dataset.labels[idx])


def build_stream(train: Dataset, spec: StreamSpec, test: Dataset | None = None) -> Stream:
    """Assemble the stream described by ``spec``.

    The evaluation split is ``test`` restricted to the stream's classes.  When
    no test set is given the evaluation split is empty.
    """
    available = set(train.labels.tolist())
    missing = set(spec.classes) - available
    if missing:
        raise ValueError(f"classes {sorted(missing)} not in dataset")
    rng = make_rng(spec.seed, "stream")
    pieces = []
    for t, task in enumerate(spec.tasks):
        idx = np.flatnonzero(np.isin(train.labels, task))
        if spec.shuffle_within_task:
            idx = rng.permutation(idx)
        cap = spec.task_sizes[t] if spec.task_sizes is not None else None
        if cap is not None:
            if cap > len(idx):
                raise ValueError(f"task {t + 1} has {len(idx)} samples, cap {cap} requested")
            idx = idx[:cap]
        pieces.append(idx)
    order = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    task_lengths = [len(p) for p in pieces]
    if spec.iid:
        epoch_orders = [rng.permutation(order) for _ in range(spec.epochs)]
        order = np.concatenate(epoch_orders)
    elif spec.epochs > 1:
        order = np.tile(order, spec.epochs)
    if test is None:
        eval_set = Dataset(np.zeros((0, train.inputs.shape[1])), np.zeros(0, dtype=np.int64), "empty")
    else:
        eval_set = test.subset(np.flatnonzero(np.isin(test.labels, spec.classes)))
    return Stream(train, order, spec.batch_size, eval_set, task_lengths)


def with_seed(spec: StreamSpec, seed: int) -> StreamSpec:
    return replace(spec, seed=seed)


def holdout_split(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``per_class`` samples of every class as an evaluation set."""
    rng = make_rng(seed, "holdout")
    test_idx = []
    for c in ds.classes:
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        test_idx.append(idx[:per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)


def sequence_labels(stream: Stream) -> Sequence[int]:
    return stream.dataset.labels[stream.order]
