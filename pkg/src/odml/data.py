"""Datasets, task splits, and batch sampling.

Synthetic data stands in for image features: each class is a Gaussian
cluster around a center drawn on a sphere, separable enough that retrieval
dynamics (learning, forgetting, distillation) are fully exercised at desk
scale. Task splits follow the class-ordered protocol: the first half of the
class ids forms the initial task and later tasks take even slices of the
rest, so class sets of distinct tasks never intersect.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor_math import as_matrix

TRAIN_FRACTION_NUM = 3  # per-class train split is 3/5 = 0.6, rounded half-up
TRAIN_FRACTION_DEN = 5

CSV_DEFAULTS = {
    "classes": 40,
    "per_class": 30,
    "dim": 64,
    "separation": 10.0,
    "sigma": 1.0,
}


@dataclass
class Dataset:
    """Feature rows with dense class ids 0..C-1."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must be 1-D and aligned with feature rows")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("class ids must be non-negative")
        present = np.unique(self.labels)
        if not np.array_equal(present, np.arange(present.size)):
            raise ValueError(f"class ids must be dense 0..C-1, got {present.tolist()}")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class TaskDataset:
    """One task's classes with per-class train/test splits already applied."""

    task_id: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]


def gen_synthetic(
    n_classes: int = 40,
    per_class: int = 30,
    dim: int = 64,
    separation: float = 10.0,
    noise_sigma: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian clusters around class centers drawn uniformly on a sphere.

    Deterministic per seed. `separation` is the sphere radius, `noise_sigma`
    the isotropic in-class standard deviation.
    """
    if n_classes < 2 or per_class < 4 or dim < 2:
        raise ValueError(
            f"need n_classes >= 2, per_class >= 4, dim >= 2; got "
            f"{n_classes}/{per_class}/{dim}"
        )
    if separation < 0 or noise_sigma < 0:
        raise ValueError("separation and noise_sigma must be >= 0")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    directions = rng.normal(size=(n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions
    features = np.repeat(centers, per_class, axis=0)
    features = features + noise_sigma * rng.normal(size=features.shape)
    labels = np.repeat(np.arange(n_classes), per_class)
    return Dataset(features, labels)


def _train_count(n: int) -> int:
    return (TRAIN_FRACTION_NUM * n + 2) // TRAIN_FRACTION_DEN


def _make_task(dataset: Dataset, task_id: int, classes: list[int]) -> TaskDataset:
    train_idx, test_idx = [], []
    for k in classes:
        rows = np.nonzero(dataset.labels == k)[0]
        n_train = _train_count(rows.size)
        if n_train < 2 or rows.size - n_train < 1:
            raise ValueError(
                f"class {k} has {rows.size} samples; need >= 2 train and "
                f">= 1 test after the 0.6/0.4 split"
            )
        train_idx.extend(rows[:n_train])
        test_idx.extend(rows[n_train:])
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    return TaskDataset(
        task_id,
        tuple(classes),
        dataset.features[train_idx],
        dataset.labels[train_idx],
        dataset.features[test_idx],
        dataset.labels[test_idx],
    )


def split_one_task(dataset: Dataset) -> tuple[TaskDataset, TaskDataset]:
    """Old/new half split: first ceil(C/2) class ids old, the rest new."""
    old, new = split_multi_task(dataset, n_stages=1)
    return old, new


def split_multi_task(dataset: Dataset, n_stages: int) -> list[TaskDataset]:
    """First half of the classes, then `n_stages` even slices of the rest.

    A remainder spreads over the earliest stages. Returns n_stages + 1 tasks
    with ids 1, 2, ...; class sets are pairwise disjoint and cover the
    dataset.
    """
    if n_stages < 1:
        raise ValueError(f"n_stages must be >= 1, got {n_stages}")
    c = dataset.n_classes
    if c < 4:
        raise ValueError(f"need >= 4 classes to split, got {c}")
    n_old = (c + 1) // 2
    rest = c - n_old
    if n_stages > rest:
        raise ValueError(
            f"cannot split {rest} remaining classes into {n_stages} stages"
        )
    base, rem = divmod(rest, n_stages)
    sizes = [n_old] + [base + (1 if s < rem else 0) for s in range(n_stages)]
    tasks, start = [], 0
    for task_id, size in enumerate(sizes, start=1):
        tasks.append(_make_task(dataset, task_id, list(range(start, start + size))))
        start += size
    return tasks


def merge_tasks(tasks: list[TaskDataset], task_id: int = 1) -> TaskDataset:
    """Union of several tasks (joint-training view of the data)."""
    classes: list[int] = []
    for t in tasks:
        classes.extend(t.classes)
    return TaskDataset(
        task_id,
        tuple(classes),
        np.concatenate([t.train_x for t in tasks]),
        np.concatenate([t.train_y for t in tasks]),
        np.concatenate([t.test_x for t in tasks]),
        np.concatenate([t.test_y for t in tasks]),
    )


def pk_batch(
    task: TaskDataset,
    p: int,
    k: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample P distinct classes with K train samples each, no replacement.

    The resulting batch always satisfies the batch-hard triplet
    preconditions (P >= 2 classes, K >= 2 samples per class).
    """
    if p < 2 or k < 2:
        raise ValueError(f"need p >= 2 and k >= 2, got p={p}, k={k}")
    if task.n_classes < p:
        raise ValueError(
            f"task {task.task_id} has {task.n_classes} classes, need >= {p}"
        )
    counts = {c: int((task.train_y == c).sum()) for c in task.classes}
    short = [c for c, n in counts.items() if n < k]
    if short:
        raise ValueError(
            f"class {short[0]} has {counts[short[0]]} train samples, need >= {k}"
        )
    chosen = rng.choice(np.asarray(task.classes), size=p, replace=False)
    rows = []
    for c in chosen:
        idx = np.nonzero(task.train_y == c)[0]
        rows.extend(rng.choice(idx, size=k, replace=False))
    rows = np.asarray(rows)
    return task.train_x[rows], task.train_y[rows]


def save_csv(dataset: Dataset, path) -> None:
    """Write `label,f0,...` rows; floats round-trip losslessly via repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_csv(path) -> Dataset:
    """Parse a feature CSV; labels are re-indexed densely by first occurrence."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        dim = len(header) - 1
        if dim < 1 or header[0] != "label" or header[1:] != [f"f{i}" for i in range(dim)]:
            raise ValueError(
                f"{path}: line 1: header must be label,f0,...,f{{d-1}}, got {header}"
            )
        label_ids: dict[str, int] = {}
        labels, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ValueError(
                    f"{path}: line {line_no}: expected {dim + 1} fields, got {len(row)}"
                )
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {line_no}: {exc}") from None
            labels.append(label_ids.setdefault(row[0], len(label_ids)))
            rows.append(values)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.asarray(rows, dtype=np.float64), np.asarray(labels))
