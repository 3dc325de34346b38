"""Fully connected ReLU network used as a reward surrogate.

The network h(x) = W_L relu(W_{L-1} relu(... relu(W_1 x))) is initialized
with paired blocks (hidden layers block-diagonal, output halves exact
negations) so that every augmented input maps to zero output at
initialization. Its parameter gradient at the initial weights, scaled by
1/sqrt(width), doubles as a fixed feature embedding; the log-determinant
of the accumulated Gram of embedding differences measures how much of the
feature space the observed arms have excited.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .glm import log_logistic, logistic

CHECKPOINT_HEADER = "#duelcluster-nn v1"


@dataclass(frozen=True)
class NnConfig:
    """Network and trainer settings.

    width and the (augmented) input dim must be even for the paired
    initialization. eta is the gradient step size; during training it is
    capped by a curvature bound on the width-scaled loss so descent stays
    stable as the history grows. train_tol > 0 stops training early once
    the relative loss improvement falls below it.
    """

    width: int
    depth: int
    dim: int
    eta: float = 0.01
    iters: int = 100
    lam: float = 1.0
    train_tol: float = 0.0

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValueError("width must be an even integer >= 2")
        if self.dim < 2 or self.dim % 2:
            raise ValueError("input dim must be an even integer >= 2")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.eta <= 0 or self.iters < 0 or self.lam <= 0 or self.train_tol < 0:
            raise ValueError("eta > 0, iters >= 0, lam > 0, train_tol >= 0 required")

    @property
    def n_params(self) -> int:
        m, d, L = self.width, self.dim, self.depth
        return d * m + m * m * (L - 2) + m


class NnParams:
    """Layered weights with an exact flatten/unflatten round trip."""

    def __init__(self, layers: list[np.ndarray]):
        self.layers = layers

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].shape[0]

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.layers)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.layers])

    @classmethod
    def from_flat(cls, flat: np.ndarray, cfg: NnConfig) -> "NnParams":
        if flat.shape != (cfg.n_params,):
            raise ValueError(f"flat vector has length {flat.shape}, expected ({cfg.n_params},)")
        shapes = layer_shapes(cfg)
        layers = []
        pos = 0
        for shape in shapes:
            size = shape[0] * shape[1]
            layers.append(flat[pos : pos + size].reshape(shape).copy())
            pos += size
        return cls(layers)

    def copy(self) -> "NnParams":
        return NnParams([w.copy() for w in self.layers])


def layer_shapes(cfg: NnConfig) -> list[tuple[int, int]]:
    m, d, L = cfg.width, cfg.dim, cfg.depth
    return [(m, d)] + [(m, m)] * (L - 2) + [(1, m)]


def augment_input(x: np.ndarray) -> np.ndarray:
    """Normalize, duplicate, and rescale so the output is unit norm with
    matching halves."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ValueError("cannot augment the zero vector")
    z = x / norm
    return np.concatenate([z, z]) / math.sqrt(2.0)


def init_params(rng: np.random.Generator, cfg: NnConfig) -> NnParams:
    """Paired-block initialization.

    Hidden layers are block-diagonal copies of a matrix with N(0, 4/width)
    entries; the output layer is (w, -w) with N(0, 2/width) entries. On
    inputs whose two halves match, the two hidden streams stay identical
    and the output halves cancel, so h(x) = 0 at initialization.
    """
    m, d, L = cfg.width, cfg.dim, cfg.depth
    layers: list[np.ndarray] = []
    half_in = d // 2
    for l in range(1, L):
        rows, cols = (m, d) if l == 1 else (m, m)
        block = rng.normal(0.0, math.sqrt(4.0 / m), size=(rows // 2, cols // 2))
        W = np.zeros((rows, cols))
        W[: rows // 2, : cols // 2] = block
        W[rows // 2 :, cols // 2 :] = block
        layers.append(W)
    w = rng.normal(0.0, math.sqrt(2.0 / m), size=m // 2)
    layers.append(np.concatenate([w, -w])[None, :])
    return NnParams(layers)


def _forward_batch(layers: list[np.ndarray], X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Outputs (n,) and the hidden activations [A_0 .. A_{L-1}]."""
    acts = [X]
    A = X
    for W in layers[:-1]:
        A = np.maximum(A @ W.T, 0.0)
        acts.append(A)
    WL = layers[-1][0]
    half = WL.shape[0] // 2
    # summing the halves separately keeps the paired init's cancellation exact
    out = A[:, :half] @ WL[:half] + A[:, half:] @ WL[half:]
    return out, acts


def forward(params: NnParams, x: np.ndarray) -> float:
    """Scalar network output for one input."""
    out, _ = _forward_batch(params.layers, np.asarray(x, dtype=float)[None, :])
    return float(out[0])


def forward_batch(params: NnParams, X: np.ndarray) -> np.ndarray:
    out, _ = _forward_batch(params.layers, np.asarray(X, dtype=float))
    return out


def _weighted_param_grad(
    layers: list[np.ndarray], acts: list[np.ndarray], weights: np.ndarray
) -> list[np.ndarray]:
    """Gradient of sum_s weights_s * h(x_s) with respect to every layer."""
    grads: list[np.ndarray | None] = [None] * len(layers)
    A_last = acts[-1]
    grads[-1] = (weights @ A_last)[None, :]
    delta = weights[:, None] * layers[-1][0][None, :]
    delta = delta * (A_last > 0.0)
    for l in range(len(layers) - 2, -1, -1):
        grads[l] = delta.T @ acts[l]
        if l > 0:
            delta = (delta @ layers[l]) * (acts[l] > 0.0)
    return grads  # type: ignore[return-value]


def grad_params(params: NnParams, x: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of h(x) in the flat parameter layout.

    The ReLU subgradient at exactly zero is taken as zero.
    """
    x = np.asarray(x, dtype=float)
    _, acts = _forward_batch(params.layers, x[None, :])
    grads = _weighted_param_grad(params.layers, acts, np.ones(1))
    return np.concatenate([g.ravel() for g in grads])


def ntk_feature(params0: NnParams, x: np.ndarray) -> np.ndarray:
    """Feature embedding: the initial-parameter gradient over sqrt(width)."""
    return grad_params(params0, x) / math.sqrt(params0.width)


def ntk_features_batch(params0: NnParams, X: np.ndarray) -> np.ndarray:
    """Embeddings for a batch of inputs, one row per input."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    layers = params0.layers
    _, acts = _forward_batch(layers, X)
    pieces: list[np.ndarray | None] = [None] * len(layers)
    A_last = acts[-1]
    pieces[-1] = A_last  # per-sample gradient of the output layer
    delta = np.broadcast_to(layers[-1][0], A_last.shape) * (A_last > 0.0)
    for l in range(len(layers) - 2, -1, -1):
        pieces[l] = np.einsum("ni,nj->nij", delta, acts[l]).reshape(n, -1)
        if l > 0:
            delta = (delta @ layers[l]) * (acts[l] > 0.0)
    flat = np.concatenate(pieces, axis=1)
    return flat / math.sqrt(params0.width)


@dataclass(frozen=True)
class PairDataset:
    """Preference observations on pairs of (augmented) inputs."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x1 = np.asarray(self.x1, dtype=float)
        x2 = np.asarray(self.x2, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x1.ndim != 2 or x1.shape != x2.shape or y.shape != (x1.shape[0],):
            raise ValueError("need x1, x2 of shape (n, d) and y of shape (n,)")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("outcomes must be 0/1 bits")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, dim: int) -> "PairDataset":
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros(0))

    def __len__(self) -> int:
        return self.x1.shape[0]


@dataclass(frozen=True)
class TrainResult:
    params: NnParams
    diverged: bool
    n_steps: int
    loss: float


def nn_loss(params: NnParams, params0_flat: np.ndarray, dataset: PairDataset, cfg: NnConfig) -> float:
    """Width-scaled preference NLL plus the proximal regularizer.

    loss = -(1/width) sum_s [y_s log mu(h(x1_s)-h(x2_s)) + (1-y_s) log mu(-...)]
           + (lam/2) ||theta - theta0||^2
    """
    diff = params.to_flat() - params0_flat
    reg = 0.5 * cfg.lam * float(diff @ diff)
    if len(dataset) == 0:
        return reg
    margins = forward_batch(params, dataset.x1) - forward_batch(params, dataset.x2)
    ll = dataset.y * log_logistic(margins) + (1.0 - dataset.y) * log_logistic(-margins)
    return float(-ll.sum() / cfg.width + reg)


def _nn_loss_and_grad(
    layers: list[np.ndarray],
    params0_flat: np.ndarray,
    dataset: PairDataset,
    cfg: NnConfig,
) -> tuple[float, np.ndarray]:
    flat = np.concatenate([w.ravel() for w in layers])
    diff = flat - params0_flat
    reg = 0.5 * cfg.lam * float(diff @ diff)
    n = len(dataset)
    # one stacked pass over both arms of every pair
    h, acts = _forward_batch(layers, np.concatenate([dataset.x1, dataset.x2]))
    margins = h[:n] - h[n:]
    ll = dataset.y * log_logistic(margins) + (1.0 - dataset.y) * log_logistic(-margins)
    loss = float(-ll.sum() / cfg.width + reg)
    resid = (logistic(margins) - dataset.y) / cfg.width
    grads = _weighted_param_grad(layers, acts, np.concatenate([resid, -resid]))
    grad = np.concatenate([g.ravel() for g in grads]) + cfg.lam * diff
    return loss, grad


def train(
    params0: NnParams,
    dataset: PairDataset,
    cfg: NnConfig,
    warm_start: NnParams | None = None,
    curvature_hint: float | None = None,
) -> TrainResult:
    """Gradient descent on the preference loss, anchored at params0.

    Runs up to cfg.iters steps from warm_start (params0 by default). The
    step size is cfg.eta capped at the inverse curvature of the loss,
    estimated from the embedding differences of the data at params0 (the
    data term's Hessian is bounded by sum_s ||phi(x1_s)-phi(x2_s)||^2 / 4
    plus the regularizer); callers that track those embeddings can pass
    the precomputed bound as curvature_hint. Tracks the best iterate, so
    the result never has higher loss than the starting point. Ten
    consecutive loss increases count as divergence: training stops and
    the best iterate is returned with the flag set.
    """
    if len(dataset) == 0:
        return TrainResult(params0.copy(), False, 0, nn_loss(params0, params0.to_flat(), dataset, cfg))
    params0_flat = params0.to_flat()
    start = warm_start if warm_start is not None else params0
    layers = [w.copy() for w in start.layers]
    if curvature_hint is None:
        diffs = ntk_features_batch(params0, dataset.x1) - ntk_features_batch(params0, dataset.x2)
        curvature = cfg.lam + 0.25 * float((diffs * diffs).sum())
    else:
        curvature = curvature_hint
    step = min(cfg.eta, 1.0 / curvature)

    loss, grad = _nn_loss_and_grad(layers, params0_flat, dataset, cfg)
    best_flat = np.concatenate([w.ravel() for w in layers])
    best_loss = loss
    prev_loss = loss
    increases = 0
    diverged = False
    n_steps = 0
    for n_steps in range(1, cfg.iters + 1):
        pos = 0
        for w in layers:
            w -= step * grad[pos : pos + w.size].reshape(w.shape)
            pos += w.size
        loss, grad = _nn_loss_and_grad(layers, params0_flat, dataset, cfg)
        if loss < best_loss:
            best_loss = loss
            best_flat = np.concatenate([w.ravel() for w in layers])
        if loss > prev_loss:
            increases += 1
            if increases >= 10:
                diverged = True
                break
        else:
            increases = 0
        if cfg.train_tol > 0 and abs(prev_loss - loss) <= cfg.train_tol * max(1.0, abs(prev_loss)):
            prev_loss = loss
            break
        prev_loss = loss
    return TrainResult(NnParams.from_flat(best_flat, cfg), diverged, n_steps, best_loss)


def effective_dimension(feature_grams: np.ndarray, kappa_mu: float, lam: float) -> float:
    """log det((kappa/lam) G + I) of an accumulated feature-difference Gram.

    Computed through a Cholesky factorization; G must be symmetric PSD
    with finite entries.
    """
    G = np.asarray(feature_grams, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("feature_grams must be a square matrix")
    if not np.all(np.isfinite(G)):
        raise ValueError("feature_grams contains non-finite entries")
    M = (kappa_mu / lam) * G + np.eye(G.shape[0])
    chol = np.linalg.cholesky((M + M.T) / 2.0)
    return float(2.0 * np.log(np.diag(chol)).sum())


def save_params(params: NnParams, path: str | Path) -> None:
    """Checkpoint: one ASCII header line, then little-endian float64 weights."""
    cfg_line = (
        f"{CHECKPOINT_HEADER} d={params.dim} m={params.width} L={params.depth}\n"
    )
    with open(path, "wb") as fh:
        fh.write(cfg_line.encode("ascii"))
        fh.write(params.to_flat().astype("<f8").tobytes())


def load_params(path: str | Path) -> NnParams:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        match = re.fullmatch(
            re.escape(CHECKPOINT_HEADER) + r" d=(\d+) m=(\d+) L=(\d+)", header
        )
        if not match:
            raise ValueError(f"{path}: not a parameter checkpoint")
        d, m, L = (int(g) for g in match.groups())
        cfg = NnConfig(width=m, depth=L, dim=d)
        flat = np.frombuffer(fh.read(), dtype="<f8")
    if flat.shape[0] != cfg.n_params:
        raise ValueError(
            f"{path}: expected {cfg.n_params} weights, found {flat.shape[0]}"
        )
    return NnParams.from_flat(flat.astype(float), cfg)
