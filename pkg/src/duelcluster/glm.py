"""Regularized logistic maximum-likelihood estimation for pairwise preference data.

A preference observation is a difference feature delta = phi(x1) - phi(x2)
together with a bit y (1 iff the first arm won). The estimator minimizes

    -sum_s [ y_s log mu(theta.delta_s) + (1-y_s) log mu(-theta.delta_s) ]
        + (lam/2) ||theta||^2

with mu the logistic link. The regularizer makes the objective strictly
convex, so the minimizer is unique and a damped Newton iteration converges
deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DELTA_NORM = 2.0  # two unit-norm features


def logistic(z):
    """Logistic link mu(z) = 1 / (1 + exp(-z)), overflow-safe for large |z|."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def log_logistic(z):
    """log mu(z), computed in softplus form to avoid cancellation."""
    z = np.asarray(z, dtype=float)
    # log mu(z) = -log(1 + exp(-z)) = min(z, 0) - log1p(exp(-|z|))
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def kappa_mu_bound(reward_gap_bound: float) -> float:
    """Lower bound on the logistic derivative over [-r, r].

    mu'(z) = mu(z)(1 - mu(z)) is symmetric and decreasing in |z|, so its
    minimum over the reachable range is attained at the endpoints.
    """
    if reward_gap_bound < 0:
        raise ValueError("reward_gap_bound must be >= 0")
    p = logistic(reward_gap_bound)
    return p * (1.0 - p)


@dataclass(frozen=True)
class PreferenceDataset:
    """Stacked difference features (n, dim) and outcome bits (n,)."""

    deltas: np.ndarray
    ys: np.ndarray
    dim: int

    def __post_init__(self):
        deltas = np.asarray(self.deltas, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if deltas.ndim != 2 or deltas.shape[1] != self.dim:
            raise ValueError(f"deltas must have shape (n, {self.dim})")
        if ys.shape != (deltas.shape[0],):
            raise ValueError("ys length must match deltas")
        if not np.all((ys == 0.0) | (ys == 1.0)):
            raise ValueError("outcomes must be 0/1 bits")
        if deltas.size:
            norms = np.linalg.norm(deltas, axis=1)
            if norms.max() > MAX_DELTA_NORM + 1e-9:
                raise ValueError(
                    f"difference feature norm {norms.max():.6g} exceeds {MAX_DELTA_NORM}"
                )
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "ys", ys)

    @classmethod
    def empty(cls, dim: int) -> "PreferenceDataset":
        return cls(np.zeros((0, dim)), np.zeros(0), dim)

    def __len__(self) -> int:
        return self.deltas.shape[0]


@dataclass(frozen=True)
class MleConfig:
    lam: float
    tol: float = 1e-6
    max_iters: int = 100

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive for a unique minimizer")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters >= 1")


@dataclass(frozen=True)
class MleResult:
    theta: np.ndarray
    converged: bool
    n_iters: int
    grad_norm: float


def nll_loss(theta: np.ndarray, dataset: PreferenceDataset, lam: float) -> float:
    """Penalized negative log-likelihood of the preference data."""
    theta = np.asarray(theta, dtype=float)
    reg = 0.5 * lam * float(theta @ theta)
    if len(dataset) == 0:
        return reg
    scores = dataset.deltas @ theta
    ll = dataset.ys * log_logistic(scores) + (1.0 - dataset.ys) * log_logistic(-scores)
    return float(-ll.sum() + reg)


def nll_gradient(theta: np.ndarray, dataset: PreferenceDataset, lam: float) -> np.ndarray:
    """Gradient sum_s (mu(theta.delta_s) - y_s) delta_s + lam * theta."""
    theta = np.asarray(theta, dtype=float)
    if len(dataset) == 0:
        return lam * theta
    resid = logistic(dataset.deltas @ theta) - dataset.ys
    return dataset.deltas.T @ resid + lam * theta


def nll_hessian(theta: np.ndarray, dataset: PreferenceDataset, lam: float) -> np.ndarray:
    """Hessian sum_s mu'(theta.delta_s) delta_s delta_s^T + lam * I."""
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    H = lam * np.eye(d)
    if len(dataset):
        p = logistic(dataset.deltas @ theta)
        w = p * (1.0 - p)
        H += (dataset.deltas * w[:, None]).T @ dataset.deltas
    return H


def fit_mle(
    dataset: PreferenceDataset,
    config: MleConfig,
    warm_start: np.ndarray | None = None,
) -> MleResult:
    """Minimize the penalized NLL by damped Newton with backtracking.

    Deterministic given its inputs. If the Newton system cannot be solved
    (degenerate numerics), the step falls back to scaled gradient descent.
    Returns the best iterate with converged=False if the gradient norm is
    still above tol after max_iters.
    """
    d = dataset.dim
    theta = np.zeros(d) if warm_start is None else np.array(warm_start, dtype=float)
    if theta.shape != (d,):
        raise ValueError(f"warm_start must have shape ({d},)")

    loss = nll_loss(theta, dataset, config.lam)
    for it in range(config.max_iters):
        grad = nll_gradient(theta, dataset, config.lam)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= config.tol:
            return MleResult(theta, True, it, gnorm)
        H = nll_hessian(theta, dataset, config.lam)
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            step = -grad / max(config.lam, 1.0)
        # backtracking on the Armijo condition
        alpha = 1.0
        descent = float(grad @ step)
        for _ in range(60):
            cand = theta + alpha * step
            cand_loss = nll_loss(cand, dataset, config.lam)
            if cand_loss <= loss + 1e-4 * alpha * descent:
                break
            alpha *= 0.5
        theta = theta + alpha * step
        loss = nll_loss(theta, dataset, config.lam)

    gnorm = float(np.linalg.norm(nll_gradient(theta, dataset, config.lam)))
    return MleResult(theta, gnorm <= config.tol, config.max_iters, gnorm)
