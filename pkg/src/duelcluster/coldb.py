"""Linear dueling bandits with online user clustering.

Each round: infer the served user's cluster as their connected component,
fit one preference vector on the cluster's pooled history, pick the first
arm greedily and the second by an optimism bonus on the cluster's
information matrix, observe the preference bit, refit only the served
user's own estimate, and cut graph edges whose endpoint estimates drifted
apart. The independent baseline runs the same round with the cluster
pinned to the served user and no graph maintenance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .env import ArmSet, PreferenceRecord
from .errors import ConfigError
from .glm import MleConfig, MleResult, PreferenceDataset, fit_mle
from .graph import (
    ClusterGraph,
    ThresholdConfig,
    complete_graph,
    connected_component,
    maybe_disconnect,
    threshold_linear,
)

FeedbackFn = Callable[[int, int], int]
FeatureMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ColdbConfig:
    """Parameters of the linear algorithm.

    feature_norm_bound is the L in the confidence width; difference
    features of unit-norm arms have norm at most 2. ucb_scale multiplies
    the exploration bonus (1.0 keeps the analytical width, which is far
    too conservative at small horizons). feature_map defaults to the
    identity on arm features.
    """

    dim: int
    n_users: int
    lam: float = 1.0
    delta: float = 0.1
    kappa_mu: float = 0.1
    feature_norm_bound: float = 2.0
    ucb_scale: float = 1.0
    threshold: ThresholdConfig | None = None
    mle: MleConfig | None = None
    feature_map: FeatureMap | None = None

    def __post_init__(self):
        if self.dim < 1 or self.n_users < 1:
            raise ConfigError("dim and n_users must be >= 1")
        if min(self.lam, self.kappa_mu, self.feature_norm_bound, self.ucb_scale) <= 0:
            raise ConfigError("lam, kappa_mu, feature_norm_bound, ucb_scale must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.threshold is None:
            object.__setattr__(
                self,
                "threshold",
                ThresholdConfig(
                    lam=self.lam, kappa_mu=self.kappa_mu, delta=self.delta,
                    dim=self.dim, u=self.n_users,
                ),
            )
        if self.mle is None:
            object.__setattr__(self, "mle", MleConfig(lam=self.lam))


def beta_t(t: int, cfg: ColdbConfig) -> float:
    """Confidence width sqrt(2 log(1/delta) + d log(1 + t L^2 kappa / (d lam)))."""
    if t < 1:
        raise ValueError("t must be >= 1")
    L2 = cfg.feature_norm_bound**2
    return math.sqrt(
        2.0 * math.log(1.0 / cfg.delta)
        + cfg.dim * math.log(1.0 + t * L2 * cfg.kappa_mu / (cfg.dim * cfg.lam))
    )


class ColdbState:
    """Mutable run state: graph, pooled history, and per-user statistics."""

    def __init__(self, config: ColdbConfig):
        self.config = config
        u, d = config.n_users, config.dim
        self.graph: ClusterGraph = complete_graph(u)
        self.theta_hat = np.zeros((u, d))
        self.counts = np.zeros(u, dtype=int)
        self.round = 0
        self.history: list[PreferenceRecord] = []
        self.mle_failures = 0
        # pooled rows in arrival order; capacity-doubled
        self._deltas = np.zeros((64, d))
        self._ys = np.zeros(64)
        self._users = np.zeros(64, dtype=int)
        self._n = 0
        # per-user sums of outer products, for cluster information matrices
        self._outer_sums = np.zeros((u, d, d))
        # warm starts for cluster refits, keyed by component membership
        self._cluster_theta: dict[frozenset[int], np.ndarray] = {}
        # diagnostics, populated when invariant checking is on
        self.check_invariants = False
        self.invariant_violations = {"psd_floor": 0, "foreign_update": 0}
        self._last_refit_round = np.full(u, -1, dtype=int)

    def _append_row(self, delta: np.ndarray, y: int, user: int) -> None:
        if self._n == self._deltas.shape[0]:
            cap = 2 * self._n
            self._deltas = np.vstack([self._deltas, np.zeros_like(self._deltas)])
            self._ys = np.concatenate([self._ys, np.zeros(cap - self._n)])
            self._users = np.concatenate([self._users, np.zeros(cap - self._n, dtype=int)])
        self._deltas[self._n] = delta
        self._ys[self._n] = y
        self._users[self._n] = user
        self._n += 1

    def rows_for(self, members: frozenset[int] | set[int]) -> PreferenceDataset:
        """Pooled history rows of the given users, in arrival order."""
        if self._n == 0:
            return PreferenceDataset.empty(self.config.dim)
        member_mask = np.zeros(self.config.n_users, dtype=bool)
        member_mask[list(members)] = True
        mask = member_mask[self._users[: self._n]]
        return PreferenceDataset(self._deltas[: self._n][mask], self._ys[: self._n][mask], self.config.dim)

    def to_snapshot(self) -> dict:
        """JSON-ready view of the run state for debugging and diagnostics."""
        return {
            "round": self.round,
            "counts": self.counts.tolist(),
            "component_ids": self.graph.component_labels().tolist(),
            "estimates": self.theta_hat.tolist(),
            "n_components": self.graph.n_components(),
            "mle_failures": self.mle_failures,
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.to_snapshot())


def aggregate_cluster(state: ColdbState, cluster: frozenset[int]) -> tuple[MleResult, np.ndarray]:
    """Cluster estimate and information matrix from the pooled history.

    theta_bar minimizes the penalized preference NLL over all rows of the
    cluster's users; V = (lam/kappa) I plus the sum of outer products of
    those rows' difference features.
    """
    if not cluster:
        raise ValueError("cluster must be nonempty")
    cfg = state.config
    dataset = state.rows_for(cluster)
    warm = state._cluster_theta.get(frozenset(cluster))
    result = fit_mle(dataset, cfg.mle, warm_start=warm)
    state._cluster_theta[frozenset(cluster)] = result.theta
    if not result.converged:
        state.mle_failures += 1
    V = (cfg.lam / cfg.kappa_mu) * np.eye(cfg.dim)
    for i in cluster:
        V += state._outer_sums[i]
    return result, V


def select_first_arm(theta_bar: np.ndarray, features: np.ndarray) -> int:
    """Greedy arm: argmax of the predicted score, lowest index on ties."""
    if features.shape[0] == 0:
        raise ValueError("arm set is empty")
    return int(np.argmax(features @ theta_bar))


def select_second_arm(
    theta_bar: np.ndarray,
    V: np.ndarray,
    x1: np.ndarray,
    features: np.ndarray,
    beta: float,
    kappa_mu: float,
    ucb_scale: float = 1.0,
) -> int:
    """Optimistic arm: argmax of score difference plus the V^{-1}-norm bonus.

    The matrix norm comes from a Cholesky solve of V, never an explicit
    inverse. A factorization failure means V lost positive definiteness,
    which points at a lam misconfiguration.
    """
    diffs = features - x1
    try:
        factor = cho_factor(V, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"information matrix is not positive definite ({exc}); check lam > 0"
        ) from exc
    solved = cho_solve(factor, diffs.T, check_finite=False)
    norms = np.sqrt(np.maximum(np.einsum("kd,dk->k", diffs, solved), 0.0))
    scores = diffs @ theta_bar + ucb_scale * (beta / kappa_mu) * norms
    return int(np.argmax(scores))


def _play_round(
    state: ColdbState,
    user: int,
    armset: ArmSet,
    feedback_fn: FeedbackFn,
    cluster: frozenset[int],
    maintain_graph: bool,
) -> PreferenceRecord:
    cfg = state.config
    if not 0 <= user < cfg.n_users:
        raise ValueError(f"user {user} out of range")
    state.round += 1
    t = state.round

    feats = armset.features
    if cfg.feature_map is not None:
        feats = np.stack([cfg.feature_map(x) for x in armset.features])
    if feats.shape[1] != cfg.dim:
        raise ValueError(f"arm features have dimension {feats.shape[1]}, expected {cfg.dim}")

    result, V = aggregate_cluster(state, cluster)
    theta_bar = result.theta
    i1 = select_first_arm(theta_bar, feats)
    i2 = select_second_arm(
        theta_bar, V, feats[i1], feats, beta_t(t, cfg), cfg.kappa_mu, cfg.ucb_scale
    )

    y = int(feedback_fn(i1, i2))
    if y not in (0, 1):
        raise ValueError("feedback must be a 0/1 bit")

    delta = feats[i1] - feats[i2]
    state._append_row(delta, y, user)
    state._outer_sums[user] += np.outer(delta, delta)
    state.counts[user] += 1
    record = PreferenceRecord(
        t=t, user=user, x1=armset.features[i1], x2=armset.features[i2], y=y, arm1=i1, arm2=i2
    )
    state.history.append(record)

    # refit only the served user, on their full history including this round
    own = state.rows_for({user})
    own_fit = fit_mle(own, cfg.mle, warm_start=state.theta_hat[user])
    if not own_fit.converged:
        state.mle_failures += 1
    if state.check_invariants:
        before = state.theta_hat.copy()
    state.theta_hat[user] = own_fit.theta
    state._last_refit_round[user] = t
    if state.check_invariants:
        changed = np.flatnonzero(np.any(before != state.theta_hat, axis=1))
        if not set(changed.tolist()) <= {user}:
            state.invariant_violations["foreign_update"] += 1
        floor = cfg.lam / cfg.kappa_mu - 1e-9
        if np.linalg.eigvalsh(V).min() < floor:
            state.invariant_violations["psd_floor"] += 1

    if maintain_graph:
        maybe_disconnect(
            state.graph,
            user,
            state.theta_hat,
            state.counts,
            lambda T: threshold_linear(T, cfg.threshold),
            t,
        )
    return record


def coldb_round(
    state: ColdbState, user: int, armset: ArmSet, feedback_fn: FeedbackFn
) -> PreferenceRecord:
    """One full clustered round: infer, pool, select, observe, refit, prune."""
    cluster = connected_component(state.graph, user)
    return _play_round(state, user, armset, feedback_fn, cluster, maintain_graph=True)


def ldb_ind_round(
    state: ColdbState, user: int, armset: ArmSet, feedback_fn: FeedbackFn
) -> PreferenceRecord:
    """Independent baseline: the cluster is always the served user alone."""
    return _play_round(state, user, armset, feedback_fn, frozenset({user}), maintain_graph=False)
