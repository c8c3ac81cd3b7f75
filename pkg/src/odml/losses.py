"""Loss terms for the three-branch online training objective.

Every loss returns its value together with analytic gradients w.r.t. the
relevant embedding matrices, so training composes them with the model's
backward pass. Distillation losses compare batch Gram matrices (pairwise
inner products of unit-norm embeddings) after row-wise softmax; the mutual
term symmetrizes the KL direction between the two student branches, with
each branch treating the other's Gram matrix as a constant target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_math import KL_LOG_FLOOR, as_matrix, kl_rows, softmax_rows

GRAM_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective: triplet, correlation, mutual."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 8.0

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


@dataclass
class GramMatrix:
    """N x N pairwise-similarity matrix plus the embeddings that built it.

    Keeping the source embeddings lets any scalar function of `g` chain its
    gradient back to them via `chain_to_embeddings`.
    """

    g: np.ndarray
    n: int
    embeddings: np.ndarray

    def chain_to_embeddings(self, grad_g: np.ndarray) -> np.ndarray:
        """d(scalar)/dE for G = E E^T given d(scalar)/dG."""
        return (grad_g + grad_g.T) @ self.embeddings


def gram(embeddings) -> GramMatrix:
    """Build G = E E^T from unit-norm embedding rows."""
    e = as_matrix(embeddings, "embeddings")
    norms = np.linalg.norm(e, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off > GRAM_NORM_TOL):
        i = int(np.argmax(off))
        raise ValueError(f"embedding row {i} has norm {norms[i]!r}, expected 1")
    return GramMatrix(e @ e.T, e.shape[0], e)


def _pairwise_distances(e: np.ndarray) -> np.ndarray:
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def triplet_batch_hard(embeddings, labels, margin: float) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss on Euclidean distances, with exact gradients.

    Per anchor: hardest (farthest) same-class positive minus hardest
    (nearest) other-class negative, hinged at `margin`, averaged over all
    anchors. Ties go to the lowest sample index so runs are reproducible.
    Every class in the batch needs >= 2 samples and at least one other
    class must be present.
    """
    e = as_matrix(embeddings, "embeddings")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != e.shape[0]:
        raise ValueError("labels must be 1-D and aligned with embedding rows")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError(f"batch needs >= 2 classes, got only class {classes[0]}")
    if np.any(counts < 2):
        bad = classes[np.argmax(counts < 2)]
        raise ValueError(f"class {bad} has fewer than 2 samples in the batch")

    n = e.shape[0]
    dist = _pairwise_distances(e)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    # argmax/argmin pick the first (lowest-index) extremum among ties
    hard_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)

    grad = np.zeros_like(e)
    total = 0.0
    for a in range(n):
        p, ng = hard_pos[a], hard_neg[a]
        d_ap, d_an = dist[a, p], dist[a, ng]
        hinge = d_ap - d_an + margin
        if hinge <= 0.0:
            continue
        total += hinge
        if d_ap > 0.0:
            u = (e[a] - e[p]) / d_ap
            grad[a] += u
            grad[p] -= u
        if d_an > 0.0:
            w = (e[a] - e[ng]) / d_an
            grad[a] -= w
            grad[ng] += w
    return total / n, grad / n


def _softmax_backward_rows(s: np.ndarray, grad_s: np.ndarray) -> np.ndarray:
    """Chain a gradient through a row-wise softmax with output s."""
    return s * (grad_s - (grad_s * s).sum(axis=1, keepdims=True))


def _kl_of_softmaxed_grams(
    g_target: np.ndarray,
    g_student: np.ndarray,
    temperature: float,
    need_target_grad: bool,
) -> tuple[float, np.ndarray | None, np.ndarray]:
    """kl_rows(softmax(Gt/T), softmax(Gs/T)) and its Gram-level gradients.

    The student gradient respects the q-floor inside the log (zero where the
    floor is active), so it is exact for the implemented loss everywhere.
    """
    n = g_target.shape[0]
    p = softmax_rows(g_target / temperature)
    q = softmax_rows(g_student / temperature)
    value = kl_rows(p, q)
    q_floored = np.maximum(q, KL_LOG_FLOOR)
    d_q = np.where(q > KL_LOG_FLOOR, -(p / q_floored) / n, 0.0)
    d_gs = _softmax_backward_rows(q, d_q) / temperature
    d_gt = None
    if need_target_grad:
        d_p = (np.log(p) - np.log(q_floored) + 1.0) / n
        d_gt = _softmax_backward_rows(p, d_p) / temperature
    return value, d_gt, d_gs


def corr_loss(
    g_target: GramMatrix,
    g_student: GramMatrix,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Correlation distillation: KL of softmaxed Gram rows, target frozen.

    Returns the loss and its gradient w.r.t. the student embeddings; no
    gradient flows to the target branch.
    """
    if g_target.g.shape != g_student.g.shape:
        raise ValueError(
            f"Gram shape mismatch: {g_target.g.shape} vs {g_student.g.shape}"
        )
    value, _, d_gs = _kl_of_softmaxed_grams(
        g_target.g, g_student.g, temperature, need_target_grad=False
    )
    return value, g_student.chain_to_embeddings(d_gs)


def mutual_loss(
    g_p: GramMatrix,
    g_s: GramMatrix,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric mutual distillation between the two student branches.

    loss = (KL(sm(Gp), sm(Gs)) + KL(sm(Gs), sm(Gp))) / 2. `grad_p` is the
    gradient w.r.t. the p-branch embeddings with Gs held constant; `grad_s`
    mirrors it with Gp held constant.
    """
    if g_p.g.shape != g_s.g.shape:
        raise ValueError(f"Gram shape mismatch: {g_p.g.shape} vs {g_s.g.shape}")
    v_ps, d_p_target, d_s_student = _kl_of_softmaxed_grams(
        g_p.g, g_s.g, temperature, need_target_grad=True
    )
    v_sp, d_s_target, d_p_student = _kl_of_softmaxed_grams(
        g_s.g, g_p.g, temperature, need_target_grad=True
    )
    loss = 0.5 * (v_ps + v_sp)
    grad_p = g_p.chain_to_embeddings(0.5 * (d_p_target + d_p_student))
    grad_s = g_s.chain_to_embeddings(0.5 * (d_s_target + d_s_student))
    return loss, grad_p, grad_s


@dataclass
class LossReport:
    """Value breakdown plus per-branch embedding gradients for one batch."""

    total: float
    triplet_p: float
    triplet_s: float
    corr: float
    mutual: float
    grad_p: np.ndarray
    grad_s: np.ndarray


def one_task_objective(
    teacher_emb,
    p_emb,
    s_emb,
    labels,
    weights: LossWeights,
    margin: float = 0.2,
    temperature: float = 1.0,
) -> LossReport:
    """Combined objective for one online stage.

    total = l1*triplet(p) + l1*triplet(s) + l2*corr(teacher->p)
          + l3*mutual(p, s)

    Teacher embeddings are constants. Zero-weighted terms are skipped
    entirely, so e.g. lambda2 = lambda3 = 0 reproduces plain fine-tuning
    arithmetic bit for bit.
    """
    t = as_matrix(teacher_emb, "teacher_emb")
    p = as_matrix(p_emb, "p_emb")
    s = as_matrix(s_emb, "s_emb")
    if not (t.shape[0] == p.shape[0] == s.shape[0]):
        raise ValueError("teacher/p/s batches must share N")

    trip_p, g_tp = triplet_batch_hard(p, labels, margin)
    trip_s, g_ts = triplet_batch_hard(s, labels, margin)
    grad_p = weights.lambda1 * g_tp
    grad_s = weights.lambda1 * g_ts

    corr_val = 0.0
    if weights.lambda2 != 0.0:
        corr_val, g_corr = corr_loss(gram(t), gram(p), temperature)
        grad_p += weights.lambda2 * g_corr

    mutual_val = 0.0
    if weights.lambda3 != 0.0:
        mutual_val, g_mp, g_ms = mutual_loss(gram(p), gram(s), temperature)
        grad_p += weights.lambda3 * g_mp
        grad_s += weights.lambda3 * g_ms

    total = (
        weights.lambda1 * trip_p
        + weights.lambda1 * trip_s
        + weights.lambda2 * corr_val
        + weights.lambda3 * mutual_val
    )
    return LossReport(total, trip_p, trip_s, corr_val, mutual_val, grad_p, grad_s)
