"""Dataset ingestion and continual-task construction.

Reads the classic big-endian IDX image/label files, normalizes pixels to
[0, 1], and builds task streams: class-pair splits (labels remapped to
{0, 1}), fixed pixel permutations (task 1 is the identity), and fast 2-d
synthetic blob tasks for tests. Task descriptors are for logging only
and never reach the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

DEFAULT_SPLIT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray   # (n, d) float64 in [0, 1] for image data
    labels: np.ndarray   # (n,) int64
    classes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.labels):
            raise DataError(f"dataset: {len(self.inputs)} inputs vs "
                            f"{len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.classes)


@dataclass
class Task:
    train: LabeledDataset
    test: LabeledDataset
    descriptor: str  # logging only; never an input to the model


@dataclass
class TaskStream:
    tasks: list[Task]
    scenario: str  # split | permuted | synthetic

    def __len__(self) -> int:
        return len(self.tasks)


def _read_exact(f, count: int, path: Path, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise DataError(f"{path}: truncated {what}, expected {count} bytes, "
                        f"got {len(buf)}")
    return buf


def parse_idx(image_path, label_path) -> LabeledDataset:
    """Parse an IDX image/label file pair into a flat, scaled dataset."""
    image_path, label_path = Path(image_path), Path(label_path)
    for p in (image_path, label_path):
        if not p.exists():
            raise DataError(f"{p}: file not found")

    with open(image_path, "rb") as f:
        magic, n_images, n_rows, n_cols = struct.unpack(
            ">IIII", _read_exact(f, 16, image_path, "header"))
        if magic != IMAGE_MAGIC:
            raise DataError(f"{image_path}: bad magic {magic}, expected {IMAGE_MAGIC}")
        payload = _read_exact(f, n_images * n_rows * n_cols, image_path, "pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    inputs = pixels.reshape(n_images, n_rows * n_cols)

    with open(label_path, "rb") as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, label_path, "header"))
        if magic != LABEL_MAGIC:
            raise DataError(f"{label_path}: bad magic {magic}, expected {LABEL_MAGIC}")
        raw = _read_exact(f, n_labels, label_path, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n_images != n_labels:
        raise DataError(f"{image_path}: {n_images} images but {n_labels} labels")
    return LabeledDataset(inputs, labels, classes=tuple(range(10)))


def write_idx(dataset: LabeledDataset, image_path, label_path,
              rows: int | None = None, cols: int | None = None) -> None:
    """Serialize a dataset back to IDX files (inverse of ``parse_idx``)."""
    n, d = dataset.inputs.shape
    if rows is None or cols is None:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise DataError(f"write_idx: cannot infer rows/cols for dim {d}")
        rows = cols = side
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def make_split_tasks(train: LabeledDataset, test: LabeledDataset,
                     pairs=DEFAULT_SPLIT_PAIRS) -> TaskStream:
    """Binary class-pair tasks with labels remapped to {0, 1}.

    The pairs must partition the class universe; train/test splits are
    preserved per task.
    """
    flat = [c for pair in pairs for c in pair]
    if len(set(flat)) != len(flat):
        raise DataError(f"split pairs overlap: {pairs}")
    missing = set(flat) - set(np.unique(train.labels).tolist())
    if missing:
        raise DataError(f"split pairs reference absent classes: {sorted(missing)}")

    tasks = []
    for lo, hi in pairs:
        def remap(ds: LabeledDataset) -> LabeledDataset:
            mask = (ds.labels == lo) | (ds.labels == hi)
            labels = (ds.labels[mask] == hi).astype(np.int64)
            return LabeledDataset(ds.inputs[mask], labels, classes=(0, 1))
        tasks.append(Task(remap(train), remap(test), descriptor=f"split({lo},{hi})"))
    return TaskStream(tasks, scenario="split")


def make_permuted_tasks(train: LabeledDataset, test: LabeledDataset,
                        n_tasks: int = 10, seed: int = 0) -> TaskStream:
    """Fixed-pixel-permutation tasks; task 1 is the identity permutation."""
    if n_tasks < 1:
        raise DataError("make_permuted_tasks: need at least one task")
    rng = np.random.default_rng(seed)
    d = train.dim
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(d) if t == 0 else rng.permutation(d)
        tasks.append(Task(
            LabeledDataset(train.inputs[:, perm], train.labels, train.classes),
            LabeledDataset(test.inputs[:, perm], test.labels, test.classes),
            descriptor=f"permuted#{t}",
        ))
    return TaskStream(tasks, scenario="permuted")


def make_synthetic_stream(n_tasks: int = 2, n_per_task: int = 500,
                          separation: float = 8.0, seed: int = 0,
                          n_test_per_task: int | None = None) -> TaskStream:
    """Binary 2-d Gaussian-blob tasks in rotated, well-separated regions.

    Each task is a pair of unit-variance blobs ``separation`` apart,
    centered on a ring so distinct tasks occupy distinct input regions.
    Labels are exactly balanced (counts are floored to an even total).
    """
    if separation <= 0.0:
        raise DataError("make_synthetic_stream: separation must be positive")
    rng = np.random.default_rng(seed)
    if n_test_per_task is None:
        n_test_per_task = n_per_task
    ring_radius = 2.0 * separation

    def blob_pair(center, axis, n):
        half = n // 2
        offsets = rng.standard_normal((2 * half, 2))
        means = np.vstack([np.tile(center - 0.5 * separation * axis, (half, 1)),
                           np.tile(center + 0.5 * separation * axis, (half, 1))])
        labels = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
        return LabeledDataset(means + offsets, labels, classes=(0, 1))

    tasks = []
    for t in range(n_tasks):
        angle = 2.0 * np.pi * t / n_tasks
        center = ring_radius * np.array([np.cos(angle), np.sin(angle)])
        axis = np.array([-np.sin(angle), np.cos(angle)])  # tangential split
        tasks.append(Task(blob_pair(center, axis, n_per_task),
                          blob_pair(center, axis, n_test_per_task),
                          descriptor=f"synthetic#{t}"))
    return TaskStream(tasks, scenario="synthetic")


def locate_mnist(data_dir) -> dict[str, Path] | None:
    """Find the four standard IDX files under ``data_dir``; None if absent."""
    data_dir = Path(data_dir)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    found = {}
    for key, stem in names.items():
        path = data_dir / stem
        if not path.exists():
            return None
        found[key] = path
    return found


def load_mnist(data_dir) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the standard train/test IDX pairs from ``data_dir``."""
    files = locate_mnist(data_dir)
    if files is None:
        raise DataError(f"{data_dir}: missing IDX files "
                        "(expected train-images-idx3-ubyte and friends)")
    return (parse_idx(files["train_images"], files["train_labels"]),
            parse_idx(files["test_images"], files["test_labels"]))
