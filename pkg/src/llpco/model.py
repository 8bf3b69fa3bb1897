"""Encoder, prototype bank, and their analytic gradients.

The encoder is a plain MLP (affine + ReLU hidden layers, affine projection,
row-wise L2 normalization onto the unit sphere). Cluster prototypes are a
K x m matrix of unit-norm rows; scores are their cosine similarities with
the embeddings. Everything is numpy; `backward` returns exact gradients,
including the Jacobian of the normalization, so the whole pipeline can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Rows whose pre-normalization norm falls below this are nudged by a fixed
# unit direction instead of erroring (ReLU dead paths early in training).
DEAD_ROW_NORM = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int = 32
    cluster_count: int = 3
    temperature: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim, self.cluster_count)
        if any(int(d) < 1 for d in dims):
            raise ValueError("all dimensions must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)


@dataclass
class ModelState:
    """Encoder parameters plus the prototype bank.

    weights[i]/biases[i] belong to the i-th affine layer (the last one is
    the projection to the embedding space); prototypes has unit-norm rows.
    """

    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    prototypes: np.ndarray

    @property
    def dtype(self):
        return self.prototypes.dtype

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            prototypes=self.prototypes.copy(),
        )

    def parameter_arrays(self) -> list[np.ndarray]:
        """All trainable arrays in declaration order (layer W, b pairs, then V)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.prototypes)
        return out


@dataclass
class Gradients:
    """Same shapes as the state's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    prototypes: np.ndarray

    def add_(self, other: "Gradients") -> "Gradients":
        for mine, theirs in zip(self.weights, other.weights):
            mine += theirs
        for mine, theirs in zip(self.biases, other.biases):
            mine += theirs
        self.prototypes += other.prototypes
        return self


@dataclass
class ForwardCache:
    """Intermediates of one encode() call, consumed by backward()."""

    layer_inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    norms: np.ndarray | None = None
    embeddings: np.ndarray | None = None


def normalize_rows(M: np.ndarray) -> np.ndarray:
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    """Fresh state: Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))),
    zero biases, Gaussian prototypes normalized to unit rows.

    Deterministic in (config, seed). dtype float32 for training, float64
    for gradient checking.
    """
    rng = np.random.default_rng(seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    prototypes = rng.standard_normal((config.cluster_count, config.embed_dim))
    prototypes = normalize_rows(prototypes).astype(dtype)
    return ModelState(config=config, weights=weights, biases=biases, prototypes=prototypes)


def encode(state: ModelState, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass: hidden ReLU layers, affine projection, unit-sphere rows.

    Returns the n x m embedding matrix (every row L2-normalized) and the
    cache needed by backward(). Rows whose projection is numerically zero
    get a fixed unit nudge in the first coordinate before normalizing.
    """
    X = np.asarray(batch, dtype=state.dtype)
    if X.ndim != 2 or X.shape[1] != state.config.input_dim:
        raise ValueError(
            f"batch has shape {X.shape}, expected (n, {state.config.input_dim})"
        )
    cache = ForwardCache()
    h = X
    n_hidden = len(state.weights) - 1
    for i in range(n_hidden):
        cache.layer_inputs.append(h)
        pre = h @ state.weights[i] + state.biases[i]
        cache.preacts.append(pre)
        h = np.maximum(pre, 0)
    cache.layer_inputs.append(h)
    raw = h @ state.weights[-1] + state.biases[-1]

    norms = np.linalg.norm(raw, axis=1)
    dead = norms < DEAD_ROW_NORM
    if np.any(dead):
        raw = raw.copy()
        raw[dead, 0] += 1.0
        norms = np.linalg.norm(raw, axis=1)
    Z = raw / norms[:, None]
    cache.norms = norms
    cache.embeddings = Z
    return Z, cache


def prototype_scores(state: ModelState, Z: np.ndarray) -> np.ndarray:
    """K x n cosine similarities between prototypes and embeddings."""
    Z = np.asarray(Z)
    if Z.ndim != 2 or Z.shape[1] != state.config.embed_dim:
        raise ValueError(f"embeddings have shape {Z.shape}, expected (n, {state.config.embed_dim})")
    return state.prototypes @ Z.T


def probabilities(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Column-wise softmax of scores/temperature (max-subtracted)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    X = np.asarray(scores) / temperature
    X = X - X.max(axis=0, keepdims=True)
    E = np.exp(X)
    return E / E.sum(axis=0, keepdims=True)


def backward(state: ModelState, cache: ForwardCache, grad_scores: np.ndarray) -> Gradients:
    """Exact gradients of a loss with upstream gradient dL/dS (K x n).

    Propagates through the score product, the row-normalization Jacobian
    (I - z z^T)/|y|, the projection layer, and each hidden ReLU layer.
    """
    G = np.asarray(grad_scores, dtype=state.dtype)
    Z = cache.embeddings
    if G.shape != (state.config.cluster_count, Z.shape[0]):
        raise ValueError(
            f"grad_scores has shape {G.shape}, expected"
            f" ({state.config.cluster_count}, {Z.shape[0]})"
        )

    grad_prototypes = G @ Z
    dZ = G.T @ state.prototypes
    dRaw = (dZ - Z * (Z * dZ).sum(axis=1, keepdims=True)) / cache.norms[:, None]

    grad_weights = [np.empty(0)] * len(state.weights)
    grad_biases = [np.empty(0)] * len(state.biases)
    grad_weights[-1] = cache.layer_inputs[-1].T @ dRaw
    grad_biases[-1] = dRaw.sum(axis=0)
    dH = dRaw @ state.weights[-1].T
    for i in range(len(state.weights) - 2, -1, -1):
        dPre = dH * (cache.preacts[i] > 0)
        grad_weights[i] = cache.layer_inputs[i].T @ dPre
        grad_biases[i] = dPre.sum(axis=0)
        dH = dPre @ state.weights[i].T
    return Gradients(weights=grad_weights, biases=grad_biases, prototypes=grad_prototypes)
