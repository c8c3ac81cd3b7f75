"""Recall@1 retrieval evaluation.

Each test sample queries the gallery with itself removed; a hit is a nearest
neighbor sharing the query's class. Per-task numbers use that task's test
set as the gallery; the "all" number merges every test set into one gallery,
which is the harder setting.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import TaskDataset
from .model import EmbeddingModel
from .tensor_math import as_matrix


@dataclass
class EvalReport:
    stage: int
    per_task: dict[int, float]
    all_tasks: float
    sizes: dict[int, int] = field(default_factory=dict)
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage": self.stage,
                "per_task": {str(k): v for k, v in sorted(self.per_task.items())},
                "all": self.all_tasks,
                "config_hash": self.config_hash,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            stage=int(raw["stage"]),
            per_task={int(k): float(v) for k, v in raw["per_task"].items()},
            all_tasks=float(raw["all"]),
            config_hash=raw.get("config_hash", ""),
        )


def recall_at_1(embeddings, labels) -> float:
    """Fraction of samples whose nearest other sample shares their label.

    Euclidean distances, self excluded, ties broken by lowest index.
    Classes with a single sample can never score and are flagged with a
    warning rather than an error.
    """
    e = as_matrix(embeddings, "embeddings")
    y = np.asarray(labels)
    n = e.shape[0]
    if n < 2:
        raise ValueError(f"need >= 2 samples to evaluate, got {n}")
    classes, counts = np.unique(y, return_counts=True)
    lonely = classes[counts < 2]
    if lonely.size:
        warnings.warn(
            f"classes {lonely.tolist()} have a single sample; their queries "
            f"cannot succeed",
            stacklevel=2,
        )
    hits = 0
    for i in range(n):
        diff = e - e[i]
        dist = np.sqrt((diff * diff).sum(axis=1))
        dist[i] = np.inf
        hits += int(y[int(np.argmin(dist))] == y[i])
    return hits / n


def evaluate_stages(
    model: EmbeddingModel,
    tasks: list[TaskDataset],
    stage: int = 0,
    config_hash: str = "",
) -> EvalReport:
    """Per-task Recall@1 plus the merged-gallery number over all tasks."""
    if not tasks:
        raise ValueError("no tasks to evaluate")
    per_task: dict[int, float] = {}
    sizes: dict[int, int] = {}
    for task in tasks:
        if task.test_x.shape[0] == 0:
            raise ValueError(f"task {task.task_id} has an empty test split")
        emb, _ = model.forward(task.test_x)
        per_task[task.task_id] = recall_at_1(emb, task.test_y)
        sizes[task.task_id] = task.test_x.shape[0]
    all_x = np.concatenate([t.test_x for t in tasks])
    all_y = np.concatenate([t.test_y for t in tasks])
    emb, _ = model.forward(all_x)
    return EvalReport(stage, per_task, recall_at_1(emb, all_y), sizes, config_hash)
