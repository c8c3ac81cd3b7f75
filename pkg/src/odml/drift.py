"""Prototype drift estimation and virtual features for multi-stage training.

When stage i trains, only the stage i-1 model is loaded. To keep earlier
tasks supervising the current model, each class keeps a prototype (feature
centroid). At every stage boundary the displacement of each old prototype
between its birth model and the just-finished model is estimated as a
similarity-weighted mean of per-sample feature displacements; reversing
that displacement around the teacher feature reconstructs a "virtual"
feature the old model would have produced. Virtual features build Gram
targets for the multi-task correlation loss.

Boundary computations run once, offline, and are persisted; stage training
reads them but never recomputes them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import GramMatrix, corr_loss, gram
from .tensor_math import as_matrix, as_vector, cosine_sim, l2_normalize, l2_normalize_rows

# Similarity weights are clamped at zero and padded so weighted-mean
# denominators can never vanish or flip sign.
WEIGHT_EPS = 1e-8

STATE_MAGIC = b"ODMS"
STATE_VERSION = 1


@dataclass
class Prototype:
    """Centroid of one class of one task, in one stage model's feature space."""

    task_id: int
    class_id: int
    stage_id: int
    centroid: np.ndarray


@dataclass
class DriftTable:
    """Estimated centroid displacements of one task's classes between stages."""

    task_id: int
    target_stage: int
    drifts: dict[int, np.ndarray] = field(default_factory=dict)


def _similarity_weight(feature: np.ndarray, centroid: np.ndarray) -> float:
    return max(cosine_sim(feature, centroid), 0.0) + WEIGHT_EPS


def compute_prototypes(
    features,
    labels,
    task_id: int,
    stage_id: int,
    classes=None,
) -> list[Prototype]:
    """Per-class arithmetic mean of feature rows.

    When `classes` is given, every listed class must appear in `labels`.
    """
    f = as_matrix(features, "features")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != f.shape[0]:
        raise ValueError("labels must be 1-D and aligned with feature rows")
    present = sorted(int(c) for c in np.unique(y))
    wanted = present if classes is None else sorted(int(c) for c in classes)
    protos = []
    for k in wanted:
        rows = f[y == k]
        if rows.shape[0] == 0:
            raise ValueError(f"class {k} has no samples to average")
        protos.append(Prototype(task_id, k, stage_id, rows.mean(axis=0)))
    return protos


def prototype_drift(feats_before, feats_after, proto: Prototype) -> np.ndarray:
    """Weighted mean displacement of one prototype between two stage models.

    Rows of `feats_before`/`feats_after` are the same samples pushed through
    the prototype's birth model and the current model. Each displacement is
    weighted by the sample's (clamped) cosine similarity to the prototype in
    the birth space, so samples resembling the class dominate the estimate.
    """
    fb = as_matrix(feats_before, "feats_before")
    fa = as_matrix(feats_after, "feats_after")
    if fb.shape != fa.shape:
        raise ValueError(f"paired feature shapes differ: {fb.shape} vs {fa.shape}")
    w = np.array([_similarity_weight(row, proto.centroid) for row in fb])
    return ((fa - fb) * w[:, None]).sum(axis=0) / w.sum()


def update_prototype(proto: Prototype, drift, target_stage: int) -> Prototype:
    """Translate a prototype by its estimated drift into a later stage."""
    d = as_vector(drift, "drift")
    if d.shape != proto.centroid.shape:
        raise ValueError(
            f"drift dim {d.shape[0]} != centroid dim {proto.centroid.shape[0]}"
        )
    return Prototype(proto.task_id, proto.class_id, target_stage, proto.centroid + d)


def feature_drift(
    f_teacher,
    protos: list[Prototype],
    table: DriftTable,
) -> np.ndarray:
    """Estimated displacement from the teacher feature back to an old model.

    Weighted mean of the task's prototype drifts (weights: clamped cosine
    similarity of the teacher feature to each updated prototype), negated
    because it runs against the drift direction.
    """
    f = as_vector(f_teacher, "f_teacher")
    if not protos:
        raise ValueError("empty prototype set")
    proto_classes = sorted(p.class_id for p in protos)
    table_classes = sorted(table.drifts)
    if proto_classes != table_classes:
        raise ValueError(
            f"prototype classes {proto_classes} do not match drift table "
            f"classes {table_classes}"
        )
    num = np.zeros_like(f)
    den = 0.0
    for p in sorted(protos, key=lambda p: p.class_id):
        w = _similarity_weight(f, p.centroid)
        num += w * table.drifts[p.class_id]
        den += w
    return -num / den


def virtual_feature(f_teacher, delta) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct the old-model feature for one sample.

    Returns (unit-norm virtual feature, raw pre-normalization sum). The raw
    sum is what drift-exactness checks compare; the normalized copy is what
    Gram construction consumes.
    """
    f = as_vector(f_teacher, "f_teacher")
    d = as_vector(delta, "delta")
    if f.shape != d.shape:
        raise ValueError(f"dim mismatch: {f.shape[0]} vs {d.shape[0]}")
    raw = f + d
    return l2_normalize(raw), raw


def virtual_features_batch(
    teacher_embs,
    protos: list[Prototype],
    table: DriftTable,
) -> np.ndarray:
    """Vectorized feature_drift + virtual_feature over a batch.

    Row i equals l2_normalize(teacher_embs[i] + feature_drift(row_i, ...)).
    """
    t = as_matrix(teacher_embs, "teacher_embs")
    if not protos:
        raise ValueError("empty prototype set")
    order = sorted(protos, key=lambda p: p.class_id)
    if sorted(table.drifts) != [p.class_id for p in order]:
        raise ValueError("prototype classes do not match drift table classes")
    centroids = np.stack([p.centroid for p in order])
    drifts = np.stack([table.drifts[p.class_id] for p in order])
    t_norms = np.linalg.norm(t, axis=1, keepdims=True)
    c_norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    denom = np.maximum(t_norms * c_norms.T, 1e-12)
    weights = np.maximum((t @ centroids.T) / denom, 0.0) + WEIGHT_EPS
    delta = -(weights @ drifts) / weights.sum(axis=1, keepdims=True)
    return l2_normalize_rows(t + delta)


def multi_task_corr(
    target_embs: list[np.ndarray],
    current_emb,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Sum of correlation losses against one Gram target per past task.

    Targets are constants (virtual features for older tasks, real teacher
    features for the latest); the gradient flows only into `current_emb`.
    """
    if not target_embs:
        raise ValueError("need at least one target embedding matrix")
    g_cur = gram(current_emb)
    total = 0.0
    grad = np.zeros_like(g_cur.embeddings)
    for i, target in enumerate(target_embs):
        g_t = gram(target)
        if g_t.n != g_cur.n:
            raise ValueError(
                f"target {i} has batch size {g_t.n}, current has {g_cur.n}"
            )
        value, g = corr_loss(g_t, g_cur, temperature)
        total += value
        grad += g
    return total, grad


@dataclass
class StageState:
    """Everything one finished stage hands to the next stage's training.

    Prototypes cover every (task, class) seen so far, expressed in the
    finished stage's feature space; drift tables cover every strictly
    earlier task, targeting this stage.
    """

    stage: int
    prototypes: dict[tuple[int, int], Prototype] = field(default_factory=dict)
    drift_tables: dict[int, DriftTable] = field(default_factory=dict)

    def task_prototypes(self, task_id: int) -> list[Prototype]:
        return [
            p for (t, _), p in sorted(self.prototypes.items()) if t == task_id
        ]

    def validate_chain(self) -> None:
        tasks = sorted(self.drift_tables)
        if tasks != list(range(1, self.stage)):
            raise ValueError(
                f"drift tables cover tasks {tasks}, expected 1..{self.stage - 1}"
            )
        for b, table in self.drift_tables.items():
            if table.target_stage != self.stage:
                raise ValueError(
                    f"drift table for task {b} targets stage {table.target_stage}, "
                    f"state is stage {self.stage}"
                )

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        keys = sorted(self.prototypes)
        if not keys:
            raise ValueError("refusing to persist a StageState with no prototypes")
        dim = self.prototypes[keys[0]].centroid.shape[0]
        parts = [
            STATE_MAGIC,
            struct.pack("<IIII", STATE_VERSION, self.stage, dim, len(keys)),
        ]
        zero = np.zeros(dim)
        for task_id, class_id in keys:
            proto = self.prototypes[(task_id, class_id)]
            table = self.drift_tables.get(task_id)
            drift = table.drifts[class_id] if table is not None else zero
            parts.append(struct.pack("<II", task_id, class_id))
            parts.append(np.ascontiguousarray(proto.centroid, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(drift, dtype="<f8").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "StageState":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 20 or blob[:4] != STATE_MAGIC:
            raise ValueError(f"{path}: not a stage-state file")
        version, stage, dim, n_entries = struct.unpack_from("<IIII", blob, 4)
        if version != STATE_VERSION:
            raise ValueError(f"{path}: unsupported state version {version}")
        entry_size = 8 + 16 * dim
        if len(blob) - 20 != n_entries * entry_size:
            raise ValueError(f"{path}: truncated stage-state file")
        state = cls(stage=stage)
        offset = 20
        for _ in range(n_entries):
            task_id, class_id = struct.unpack_from("<II", blob, offset)
            offset += 8
            centroid = np.frombuffer(blob, dtype="<f8", count=dim, offset=offset).copy()
            offset += 8 * dim
            drift = np.frombuffer(blob, dtype="<f8", count=dim, offset=offset).copy()
            offset += 8 * dim
            state.prototypes[(task_id, class_id)] = Prototype(
                task_id, class_id, stage, centroid
            )
            if task_id < stage:
                table = state.drift_tables.setdefault(
                    task_id, DriftTable(task_id, stage)
                )
                table.drifts[class_id] = drift
        state.validate_chain()
        return state
