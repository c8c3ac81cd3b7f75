"""Trainable MLP embedding network.

A stack of fully connected layers with tanh hidden activations and a linear
final layer whose rows are L2-normalized, so the network maps input vectors
onto the unit sphere. Forward passes record a cache; `backward` consumes it
to produce exact analytic parameter gradients for any upstream gradient on
the normalized embeddings. tanh is used instead of ReLU so finite-difference
gradient checks stay clean (no kinks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor_math import NORM_EPS, as_matrix

MAGIC = b"ODML"
FORMAT_VERSION = 1


@dataclass
class ForwardCache:
    """Per-batch intermediates needed by backward; single use only."""

    inputs: np.ndarray
    hidden_activations: list[np.ndarray]
    pre_norm: np.ndarray
    norm_denoms: np.ndarray
    embeddings: np.ndarray
    consumed: bool = False


class EmbeddingModel:
    """MLP mapping input rows to unit-norm embedding rows.

    `layer_dims` runs input -> hidden... -> embedding. Weight matrices are
    (fan_out x fan_in); the forward contract is

        a_0 = x
        a_l = tanh(a_{l-1} W_l^T + b_l)        hidden layers
        z   = a_{L-1} W_L^T + b_L              final linear layer
        e   = z / ||z||                        per row (epsilon-guarded)
    """

    def __init__(self, layer_dims: list[int], weights: list[np.ndarray],
                 biases: list[np.ndarray]):
        self.layer_dims = list(layer_dims)
        self.weights = weights
        self.biases = biases
        self._validate()

    def _validate(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(int(d) <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive integers, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("parameter count does not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(
                    f"layer {l}: expected shapes {(dims[l + 1], dims[l])} and "
                    f"({dims[l + 1]},), got {w.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")

    @classmethod
    def init(cls, layer_dims: list[int], seed: int) -> "EmbeddingModel":
        """Glorot-uniform weights, zero biases; deterministic per seed."""
        dims = list(layer_dims)
        if len(dims) < 2 or any(int(d) <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive integers, got {dims}")
        rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    def clone(self) -> "EmbeddingModel":
        """Deep copy; updates to the clone never touch the source."""
        return EmbeddingModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W_0, b_0, W_1, b_1, ...] of live parameter arrays."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def equal_parameters(self, other: "EmbeddingModel") -> bool:
        return self.layer_dims == other.layer_dims and all(
            np.array_equal(a, b)
            for a, b in zip(self.parameters(), other.parameters())
        )

    def forward(self, batch) -> tuple[np.ndarray, ForwardCache]:
        """Map a (N x input_dim) batch to unit-norm embeddings plus cache."""
        x = as_matrix(batch, "batch")
        if x.shape[1] != self.input_dim:
            raise ValueError(
                f"batch has {x.shape[1]} columns, model expects {self.input_dim}"
            )
        a = x
        hidden = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ w.T + b)
            hidden.append(a)
        z = a @ self.weights[-1].T + self.biases[-1]
        norms = np.linalg.norm(z, axis=1)
        denoms = np.where(norms < NORM_EPS, norms + NORM_EPS, norms)
        emb = z / denoms[:, None]
        return emb, ForwardCache(x, hidden, z, denoms, emb)

    def backward(self, cache: ForwardCache,
                 grad_embeddings: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Exact gradients of <grad_embeddings, embeddings> per parameter.

        Returns [(dW, db), ...] in layer order. The final normalization
        contributes the per-row Jacobian (I - e e^T) / ||z||.
        """
        if cache.consumed:
            raise ValueError("ForwardCache already consumed by a backward call")
        cache.consumed = True
        g = np.asarray(grad_embeddings, dtype=np.float64)
        if g.shape != cache.embeddings.shape:
            raise ValueError(
                f"grad shape {g.shape} does not match embeddings "
                f"{cache.embeddings.shape}"
            )
        e = cache.embeddings
        radial = (g * e).sum(axis=1, keepdims=True)
        delta = (g - radial * e) / cache.norm_denoms[:, None]

        grads: list[tuple[np.ndarray, np.ndarray]] = []
        acts = [cache.inputs] + cache.hidden_activations
        for l in range(len(self.weights) - 1, -1, -1):
            grads.append((delta.T @ acts[l], delta.sum(axis=0)))
            if l > 0:
                delta = (delta @ self.weights[l]) * (1.0 - acts[l] ** 2)
        grads.reverse()
        return grads

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        """Versioned little-endian binary dump; round-trips bit-exactly."""
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(self.layer_dims))]
        parts.append(struct.pack(f"<{len(self.layer_dims)}I", *self.layer_dims))
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 12:
            raise ValueError(f"{path}: truncated model file")
        if blob[:4] != MAGIC:
            raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
        version, n_dims = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        if n_dims < 2 or len(blob) < 12 + 4 * n_dims:
            raise ValueError(f"{path}: corrupt header")
        dims = list(struct.unpack_from(f"<{n_dims}I", blob, 12))
        if any(d <= 0 for d in dims):
            raise ValueError(f"{path}: non-positive layer dim in header")
        offset = 12 + 4 * n_dims
        expected = sum(
            8 * (dims[l + 1] * dims[l] + dims[l + 1]) for l in range(n_dims - 1)
        )
        if len(blob) - offset != expected:
            raise ValueError(
                f"{path}: payload is {len(blob) - offset} bytes, expected {expected}"
            )
        weights, biases = [], []
        for l in range(n_dims - 1):
            n_w = dims[l + 1] * dims[l]
            w = np.frombuffer(blob, dtype="<f8", count=n_w, offset=offset)
            offset += 8 * n_w
            b = np.frombuffer(blob, dtype="<f8", count=dims[l + 1], offset=offset)
            offset += 8 * dims[l + 1]
            weights.append(w.reshape(dims[l + 1], dims[l]).copy())
            biases.append(b.copy())
        return cls(dims, weights, biases)


def clone_weights(src: EmbeddingModel) -> EmbeddingModel:
    return src.clone()


@dataclass
class AdamState:
    """Adam moments for one model; shapes mirror model.parameters()."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: EmbeddingModel, learning_rate: float) -> "AdamState":
        params = model.parameters()
        return cls(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(model: EmbeddingModel,
              grads: list[tuple[np.ndarray, np.ndarray]],
              state: AdamState) -> None:
    """One in-place Adam update with bias correction.

    Non-finite gradients raise instead of poisoning the parameters; that is
    the divergence signal for the training loops.
    """
    flat: list[np.ndarray] = []
    for dw, db in grads:
        flat.extend((dw, db))
    params = model.parameters()
    if len(flat) != len(params):
        raise ValueError("gradient structure does not match model parameters")
    for g, p in zip(flat, params):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient: training diverged")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for g, p, m, v in zip(flat, params, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
