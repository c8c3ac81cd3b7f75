"""Training orchestration: initial stage, online stages, baselines, registry.

A run trains a chain of models F_1..F_n over disjoint-class tasks. Stage 1
is plain triplet training. Every later stage freezes the previous model as
the teacher, clones it into the deployed student F_p, seeds a fresh support
student F_s, and trains both on the new task only with the combined
objective (triplets + teacher correlation + mutual distillation). Between
stages, an offline boundary pass estimates prototype drifts so that stages
beyond the second can rebuild Gram targets for every earlier task from the
teacher's features alone. Old training samples are only touched at the
boundary where they are legitimately still in hand; they never feed
gradient steps of a later stage.

Per-stage RNG streams are derived from (seed, stage, role), so a resumed
run continues bit-identically from persisted artifacts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TaskDataset, merge_tasks, pk_batch
from .drift import (
    DriftTable,
    StageState,
    compute_prototypes,
    multi_task_corr,
    prototype_drift,
    update_prototype,
    virtual_features_batch,
)
from .evaluation import EvalReport, evaluate_stages
from .losses import (
    LossWeights,
    corr_loss,
    gram,
    mutual_loss,
    one_task_objective,
    triplet_batch_hard,
)
from .model import AdamState, EmbeddingModel, adam_step

MODES = ("initial", "fine_tune", "joint", "teacher_only", "mutual_only", "ours")

_ROLE_SAMPLER = 0
_ROLE_MAIN_INIT = 1
_ROLE_SUPPORT_INIT = 2


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one run; defaults are the benchmark settings."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 8.0
    margin: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 60
    p_classes: int = 8
    k_samples: int = 4
    temperature: float = 1.0
    hidden_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("margin", "learning_rate", "temperature"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and > 0, got {val}")
        if self.p_classes < 2 or self.k_samples < 2:
            raise ValueError("need p_classes >= 2 and k_samples >= 2")
        if self.embedding_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer sizes must be positive")
        LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def layer_dims(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden_dims, self.embedding_dim]

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class StageReport:
    """Recall numbers plus the per-epoch mean loss curve for one stage."""

    stage: int
    per_task: dict[int, float]
    all_tasks: float
    loss_history: list[float] = field(default_factory=list)


def _seed_u64(seed: int) -> int:
    return int(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def _stage_rng(config: TrainingConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng((_seed_u64(config.seed), stage, _ROLE_SAMPLER))


def _derived_seed(config: TrainingConfig, stage: int, role: int) -> int:
    ss = np.random.SeedSequence((_seed_u64(config.seed), stage, role))
    return int(ss.generate_state(1, np.uint64)[0])


def _effective_weights(config: TrainingConfig, mode: str) -> LossWeights:
    if mode == "teacher_only":
        return LossWeights(config.lambda1, config.lambda2, 0.0)
    if mode == "mutual_only":
        return LossWeights(config.lambda1, 0.0, config.lambda3)
    return config.weights()


def _drive(task: TaskDataset, config: TrainingConfig, stage: int, step) -> list[float]:
    """Shared epoch/iteration loop; `step(x, y)` trains and returns the loss.

    P is clamped to the task's class count because later tasks can hold
    fewer classes than the configured P.
    """
    rng = _stage_rng(config, stage)
    p_eff = min(config.p_classes, task.n_classes)
    iters = max(1, math.ceil(task.n_train / (p_eff * config.k_samples)))
    history = []
    for _ in range(config.epochs):
        losses = [step(*pk_batch(task, p_eff, config.k_samples, rng))
                  for _ in range(iters)]
        mean = float(np.mean(losses))
        if not np.isfinite(mean):
            raise ValueError(f"stage {stage}: training diverged (non-finite loss)")
        history.append(mean)
    return history


def train_initial(
    task: TaskDataset,
    config: TrainingConfig,
    stage: int = 1,
) -> tuple[EmbeddingModel, list[float]]:
    """Triplet-only training from a fresh seeded initialization."""
    model = EmbeddingModel.init(
        config.layer_dims(task.train_x.shape[1]),
        _derived_seed(config, stage, _ROLE_MAIN_INIT),
    )
    adam = AdamState.for_model(model, config.learning_rate)

    def step(x, y):
        emb, cache = model.forward(x)
        value, grad = triplet_batch_hard(emb, y, config.margin)
        adam_step(model, model.backward(cache, config.lambda1 * grad), adam)
        return config.lambda1 * value

    history = _drive(task, config, stage, step)
    return model, history


def train_fine_tune_stage(
    teacher: EmbeddingModel,
    task: TaskDataset,
    config: TrainingConfig,
    stage: int,
) -> tuple[EmbeddingModel, list[float]]:
    """Continue from the previous weights with the triplet term only."""
    model = teacher.clone()
    adam = AdamState.for_model(model, config.learning_rate)

    def step(x, y):
        emb, cache = model.forward(x)
        value, grad = triplet_batch_hard(emb, y, config.margin)
        adam_step(model, model.backward(cache, config.lambda1 * grad), adam)
        return config.lambda1 * value

    history = _drive(task, config, stage, step)
    return model, history


def train_one_task(
    teacher: EmbeddingModel,
    new_task: TaskDataset,
    config: TrainingConfig,
    stage: int = 2,
    mode: str = "ours",
) -> tuple[EmbeddingModel, EmbeddingModel, list[float]]:
    """Three-branch online stage with the teacher as the only Gram target.

    The teacher stays frozen; F_p starts as its clone and is the deployed
    model, F_s starts from a fresh seed. Each branch updates on its own
    gradient with the counterpart's Gram matrix treated as constant.
    """
    if mode not in ("ours", "mutual_only"):
        raise ValueError(f"train_one_task serves ours/mutual_only, not {mode!r}")
    w = _effective_weights(config, mode)
    p_model = teacher.clone()
    s_model = EmbeddingModel.init(
        teacher.layer_dims, _derived_seed(config, stage, _ROLE_SUPPORT_INIT)
    )
    adam_p = AdamState.for_model(p_model, config.learning_rate)
    adam_s = AdamState.for_model(s_model, config.learning_rate)

    def step(x, y):
        t_emb, _ = teacher.forward(x)
        p_emb, p_cache = p_model.forward(x)
        s_emb, s_cache = s_model.forward(x)
        report = one_task_objective(
            t_emb, p_emb, s_emb, y, w, config.margin, config.temperature
        )
        adam_step(p_model, p_model.backward(p_cache, report.grad_p), adam_p)
        adam_step(s_model, s_model.backward(s_cache, report.grad_s), adam_s)
        return report.total

    history = _drive(new_task, config, stage, step)
    return p_model, s_model, history


def train_teacher_only_stage(
    teacher: EmbeddingModel,
    task: TaskDataset,
    config: TrainingConfig,
    stage: int,
) -> tuple[EmbeddingModel, list[float]]:
    """Two-branch ablation: triplet plus teacher correlation, no support peer.

    The correlation target is always the live teacher's features, even in
    multi-stage runs; earlier tasks get no virtual-feature supervision.
    """
    p_model = teacher.clone()
    adam_p = AdamState.for_model(p_model, config.learning_rate)

    def step(x, y):
        t_emb, _ = teacher.forward(x)
        p_emb, p_cache = p_model.forward(x)
        trip, g_trip = triplet_batch_hard(p_emb, y, config.margin)
        grad = config.lambda1 * g_trip
        corr_val = 0.0
        if config.lambda2 != 0.0:
            corr_val, g_corr = corr_loss(gram(t_emb), gram(p_emb), config.temperature)
            grad += config.lambda2 * g_corr
        adam_step(p_model, p_model.backward(p_cache, grad), adam_p)
        return config.lambda1 * trip + config.lambda2 * corr_val

    history = _drive(task, config, stage, step)
    return p_model, history


def train_stage_multi(
    teacher: EmbeddingModel,
    state: StageState,
    new_task: TaskDataset,
    config: TrainingConfig,
    stage: int,
) -> tuple[EmbeddingModel, EmbeddingModel, list[float]]:
    """Online stage whose correlation term covers every earlier task.

    Per batch, the teacher's features stand in for the latest past task and
    are warped by the persisted drift tables into virtual features for each
    older task; one Gram target per past task feeds the summed correlation
    loss. With no drift tables yet (stage 2) this reduces exactly to
    train_one_task.
    """
    if state.stage != stage - 1:
        raise ValueError(f"stage {stage} needs the stage-{stage - 1} state, "
                         f"got stage-{state.stage}")
    state.validate_chain()
    w = _effective_weights(config, "ours")
    past = [(state.task_prototypes(b), state.drift_tables[b])
            for b in sorted(state.drift_tables)]
    p_model = teacher.clone()
    s_model = EmbeddingModel.init(
        teacher.layer_dims, _derived_seed(config, stage, _ROLE_SUPPORT_INIT)
    )
    adam_p = AdamState.for_model(p_model, config.learning_rate)
    adam_s = AdamState.for_model(s_model, config.learning_rate)

    def step(x, y):
        t_emb, _ = teacher.forward(x)
        p_emb, p_cache = p_model.forward(x)
        s_emb, s_cache = s_model.forward(x)
        trip_p, g_tp = triplet_batch_hard(p_emb, y, config.margin)
        trip_s, g_ts = triplet_batch_hard(s_emb, y, config.margin)
        grad_p = w.lambda1 * g_tp
        grad_s = w.lambda1 * g_ts
        corr_val = 0.0
        if w.lambda2 != 0.0:
            targets = [virtual_features_batch(t_emb, protos, table)
                       for protos, table in past]
            targets.append(t_emb)
            corr_val, g_corr = multi_task_corr(targets, p_emb, config.temperature)
            grad_p += w.lambda2 * g_corr
        mutual_val = 0.0
        if w.lambda3 != 0.0:
            mutual_val, g_mp, g_ms = mutual_loss(
                gram(p_emb), gram(s_emb), config.temperature
            )
            grad_p += w.lambda3 * g_mp
            grad_s += w.lambda3 * g_ms
        adam_step(p_model, p_model.backward(p_cache, grad_p), adam_p)
        adam_step(s_model, s_model.backward(s_cache, grad_s), adam_s)
        return (w.lambda1 * trip_p + w.lambda1 * trip_s
                + w.lambda2 * corr_val + w.lambda3 * mutual_val)

    history = _drive(new_task, config, stage, step)
    return p_model, s_model, history


class ModelRegistry:
    """Directory of persisted stages: model, boundary state, metadata.

    Layout: <root>/stage_<i>/{model.bin, state.bin, meta.json, report.json}.
    meta.json is written last and marks the stage complete.
    """

    def __init__(self, root):
        self.root = Path(root)

    def stage_dir(self, stage: int) -> Path:
        return self.root / f"stage_{stage}"

    def has_stage(self, stage: int) -> bool:
        d = self.stage_dir(stage)
        return (d / "meta.json").is_file() and (d / "model.bin").is_file()

    def save_model(self, stage: int, model: EmbeddingModel) -> None:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        model.save(d / "model.bin")

    def save_state(self, stage: int, state: StageState) -> None:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        state.save(d / "state.bin")

    def save_report(self, stage: int, report: EvalReport) -> None:
        (self.stage_dir(stage) / "report.json").write_text(report.to_json())

    def save_meta(self, stage: int, meta: dict) -> None:
        path = self.stage_dir(stage) / "meta.json"
        path.write_text(json.dumps(meta, indent=2, sort_keys=True))

    def _require(self, stage: int, filename: str) -> Path:
        path = self.stage_dir(stage) / filename
        if not path.is_file():
            raise ValueError(f"missing registry entry: {path}")
        return path

    def load_model(self, stage: int) -> EmbeddingModel:
        return EmbeddingModel.load(self._require(stage, "model.bin"))

    def load_state(self, stage: int) -> StageState:
        return StageState.load(self._require(stage, "state.bin"))

    def load_meta(self, stage: int) -> dict:
        return json.loads(self._require(stage, "meta.json").read_text())

    def load_report(self, stage: int) -> EvalReport:
        return EvalReport.from_json(self._require(stage, "report.json").read_text())

    def completed_stages(self) -> int:
        n = 0
        while self.has_stage(n + 1):
            n += 1
        return n


def post_stage_offline(
    registry: ModelRegistry,
    stage: int,
    task: TaskDataset,
) -> StageState:
    """Boundary pass after `stage` finished training on `task`.

    Computes fresh prototypes for the just-finished task and, for every
    earlier task, the prototype drifts between its birth model and the
    current model, estimated from the current task's train samples (the
    only samples legitimately in hand). Persists and returns the state;
    stage+1 training then needs nothing but the teacher and this state.
    """
    model_cur = registry.load_model(stage)
    f_cur, _ = model_cur.forward(task.train_x)
    state = StageState(stage=stage)
    for proto in compute_prototypes(
        f_cur, task.train_y, task_id=stage, stage_id=stage, classes=task.classes
    ):
        state.prototypes[(stage, proto.class_id)] = proto
    for b in range(1, stage):
        model_b = registry.load_model(b)
        f_b, _ = model_b.forward(task.train_x)
        table = DriftTable(task_id=b, target_stage=stage)
        for proto_b in registry.load_state(b).task_prototypes(b):
            d = prototype_drift(f_b, f_cur, proto_b)
            table.drifts[proto_b.class_id] = d
            state.prototypes[(b, proto_b.class_id)] = update_prototype(
                proto_b, d, stage
            )
        state.drift_tables[b] = table
    registry.save_state(stage, state)
    return state


def _check_disjoint(tasks: list[TaskDataset]) -> None:
    seen: dict[int, int] = {}
    for task in tasks:
        for c in task.classes:
            if c in seen:
                raise ValueError(
                    f"class {c} appears in both task {seen[c]} and task {task.task_id}"
                )
            seen[c] = task.task_id


def run_mode(
    mode: str,
    tasks: list[TaskDataset],
    config: TrainingConfig,
    run_root,
    resume: bool = True,
) -> list[StageReport]:
    """Execute one mode end to end, persisting each stage to the registry.

    Completed stages (matching config hash) are loaded instead of retrained
    when `resume` is set, which reproduces the original run bit-exactly
    because per-stage RNG streams are derived, not consumed sequentially.
    Every stage report evaluates the deployed model on every task's test
    split, mirroring the old/new/all table structure.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not tasks:
        raise ValueError("no tasks given")
    _check_disjoint(tasks)
    registry = ModelRegistry(run_root)
    cfg_hash = config.config_hash()

    def finish_stage(stage, model, history, state_needed):
        registry.save_model(stage, model)
        if state_needed:
            post_stage_offline(registry, stage, tasks[stage - 1])
        report = evaluate_stages(model, tasks, stage=stage, config_hash=cfg_hash)
        registry.save_report(stage, report)
        registry.save_meta(stage, {
            "stage": stage,
            "mode": mode,
            "seed": config.seed,
            "config_hash": cfg_hash,
            "task_classes": [list(t.classes) for t in tasks],
            "loss_history": history,
        })
        return StageReport(stage, report.per_task, report.all_tasks, history)

    def reuse_stage(stage):
        meta = registry.load_meta(stage)
        if meta.get("config_hash") != cfg_hash or meta.get("mode") != mode:
            raise ValueError(
                f"stage {stage} in {registry.stage_dir(stage)} was produced by a "
                f"different run (mode/config mismatch); refusing to resume"
            )
        report = registry.load_report(stage)
        return registry.load_model(stage), StageReport(
            stage, report.per_task, report.all_tasks, meta.get("loss_history", [])
        )

    reports: list[StageReport] = []
    state_needed = mode == "ours"

    if mode == "joint":
        if resume and registry.has_stage(1):
            model, report = reuse_stage(1)
        else:
            model, history = train_initial(merge_tasks(tasks), config, stage=1)
            report = finish_stage(1, model, history, state_needed=False)
        return [report]

    if resume and registry.has_stage(1):
        model, report = reuse_stage(1)
    else:
        model, history = train_initial(tasks[0], config, stage=1)
        report = finish_stage(1, model, history, state_needed)
    reports.append(report)

    n_stages = 1 if mode == "initial" else len(tasks)
    for stage in range(2, n_stages + 1):
        task = tasks[stage - 1]
        if resume and registry.has_stage(stage):
            model, report = reuse_stage(stage)
            reports.append(report)
            continue
        teacher = model
        if mode == "fine_tune":
            model, history = train_fine_tune_stage(teacher, task, config, stage)
        elif mode == "teacher_only":
            model, history = train_teacher_only_stage(teacher, task, config, stage)
        elif mode == "mutual_only":
            model, _, history = train_one_task(teacher, task, config, stage, mode)
        elif stage == 2:
            model, _, history = train_one_task(teacher, task, config, stage, mode)
        else:
            state = registry.load_state(stage - 1)
            model, _, history = train_stage_multi(teacher, state, task, config, stage)
        reports.append(finish_stage(stage, model, history, state_needed))
    return reports
