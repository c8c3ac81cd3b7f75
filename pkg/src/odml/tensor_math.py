"""Dense float64 primitives shared by every other module.

Vectors are 1-D numpy float64 arrays, matrices 2-D row-major float64 arrays.
All functions are pure; none touch shared state, so concurrent callers are
safe.
"""

from __future__ import annotations

import numpy as np

# Floor applied to the second KL argument inside the logarithm: softmax
# outputs can underflow, and the floor keeps losses and gradients finite.
KL_LOG_FLOOR = 1e-12

# Norms below this are treated as degenerate by l2_normalize.
NORM_EPS = 1e-12

ROW_SUM_TOL = 1e-9


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float64 1-D array, validating shape and entries."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite float64 2-D array, validating shape and entries."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    a = as_matrix(m, "softmax input")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_rows_are_distributions(a: np.ndarray, name: str) -> None:
    if np.any(a < 0.0):
        raise ValueError(f"{name} has negative entries; rows must be distributions")
    row_sums = a.sum(axis=1)
    bad = np.nonzero(np.abs(row_sums - 1.0) > ROW_SUM_TOL)[0]
    if bad.size:
        raise ValueError(
            f"{name} row {bad[0]} sums to {row_sums[bad[0]]!r}, not a distribution"
        )


def kl_rows(p, q) -> float:
    """Mean row-wise KL divergence (1/N) sum_i sum_j p_ij ln(p_ij / q_ij).

    Terms with p_ij == 0 contribute zero, and q is floored at KL_LOG_FLOOR
    inside the logarithm. Both arguments must be row-stochastic.
    """
    pa = as_matrix(p, "p")
    qa = as_matrix(q, "q")
    if pa.shape != qa.shape:
        raise ValueError(f"shape mismatch: p {pa.shape} vs q {qa.shape}")
    _check_rows_are_distributions(pa, "p")
    _check_rows_are_distributions(qa, "q")
    terms = np.zeros_like(pa)
    mask = pa > 0.0
    terms[mask] = pa[mask] * (
        np.log(pa[mask]) - np.log(np.maximum(qa[mask], KL_LOG_FLOOR))
    )
    return float(terms.sum() / pa.shape[0])


def l2_normalize(v) -> np.ndarray:
    """Scale to unit L2 norm; near-zero vectors get an epsilon-padded norm."""
    arr = as_vector(v)
    n = float(np.linalg.norm(arr))
    if n < NORM_EPS:
        return arr / (n + NORM_EPS)
    return arr / n


def l2_normalize_rows(m) -> np.ndarray:
    """Row-wise l2_normalize with the same degenerate-norm guard."""
    arr = as_matrix(m)
    norms = np.linalg.norm(arr, axis=1)
    denoms = np.where(norms < NORM_EPS, norms + NORM_EPS, norms)
    return arr / denoms[:, None]


def cosine_sim(a, b) -> float:
    """Cosine similarity with an epsilon-guarded denominator."""
    va = as_vector(a, "a")
    vb = as_vector(b, "b")
    if va.shape != vb.shape:
        raise ValueError(f"dim mismatch: {va.shape[0]} vs {vb.shape[0]}")
    denom = max(float(np.linalg.norm(va)) * float(np.linalg.norm(vb)), NORM_EPS)
    return float(va @ vb) / denom
