"""Neural dueling bandits with online user clustering.

Same skeleton as the linear algorithm, with the reward model swapped for a
ReLU network: the cluster model is a network trained on the component's
pooled preference pairs, exploration geometry comes from the fixed
feature embedding g(x; theta0)/sqrt(width), and edge deletion compares
sqrt(width)-scaled parameter distances. The information matrix lives in
parameter space (p x p), so V^{-1}-norms are computed through an
incrementally grown factorization of the dual Gram matrix instead of ever
forming V.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .env import ArmSet, PreferenceRecord
from .errors import ConfigError
from .graph import (
    ClusterGraph,
    ThresholdConfig,
    complete_graph,
    connected_component,
    maybe_disconnect,
    threshold_neural,
)
from .neural import (
    NnConfig,
    NnParams,
    PairDataset,
    effective_dimension,
    forward_batch,
    init_params,
    ntk_features_batch,
    train,
)

FeedbackFn = Callable[[int, int], int]


@dataclass(frozen=True)
class CondbConfig:
    """Parameters of the neural algorithm.

    B bounds the scaled distance between the anchored optimum and the
    initialization; it is unknowable in practice and defaults to 1.
    dtilde_pairs picks which embedding differences feed the effective-
    dimension surrogate: "all" accumulates every pair of each round's arm
    set, "selected" only the played pair. retrain_every amortizes cluster
    retraining; 1 retrains each round.
    """

    nn: NnConfig
    n_users: int
    lam: float = 1.0
    delta: float = 0.1
    kappa_mu: float = 0.1
    B: float = 1.0
    ucb_scale: float = 1.0
    threshold: ThresholdConfig | None = None
    retrain_every: int = 1
    dtilde_every: int = 25
    dtilde_pairs: str = "all"

    def __post_init__(self):
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if min(self.lam, self.kappa_mu, self.B, self.ucb_scale) <= 0:
            raise ConfigError("lam, kappa_mu, B, ucb_scale must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.retrain_every < 1 or self.dtilde_every < 1:
            raise ConfigError("retrain_every and dtilde_every must be >= 1")
        if self.dtilde_pairs not in ("all", "selected"):
            raise ConfigError("dtilde_pairs must be 'all' or 'selected'")
        if self.nn.lam != self.lam:
            raise ConfigError("nn.lam must equal the algorithm lam")
        if self.threshold is None:
            object.__setattr__(
                self,
                "threshold",
                ThresholdConfig(
                    lam=self.lam, kappa_mu=self.kappa_mu, delta=self.delta,
                    dim=self.nn.dim, u=self.n_users,
                ),
            )


def beta_neural(d_tilde: float, cfg: CondbConfig) -> float:
    """Confidence width (1/kappa) sqrt(d_tilde + 2 log(u/delta))."""
    if d_tilde < 0:
        raise ValueError("d_tilde must be >= 0")
    return math.sqrt(d_tilde + 2.0 * math.log(cfg.n_users / cfg.delta)) / cfg.kappa_mu


def nu_t(beta_T: float, cfg: CondbConfig) -> float:
    """Exploration multiplier beta_T + B sqrt(lam/kappa) + 1."""
    return beta_T + cfg.B * math.sqrt(cfg.lam / cfg.kappa_mu) + 1.0


class _GramIndex:
    """Norms under V^{-1} where V = alpha I_p + Z^T Z, without forming V.

    Keeps the rows Z (n x p) and a growing Cholesky factor of the dual
    matrix alpha I_n + Z Z^T; each appended row extends the factor in
    O(n p + n^2). By the Woodbury identity,
    ||v||^2_{V^{-1}} = (v.v - ||L^{-1} Z v||^2) / alpha.
    """

    def __init__(self, alpha: float, p: int):
        self.alpha = alpha
        self.p = p
        self.n = 0
        self._Z = np.zeros((16, p))
        self._L = np.zeros((16, 16))
        self.floor_violations = 0

    def _grow(self) -> None:
        cap = self._Z.shape[0]
        if self.n < cap:
            return
        Z = np.zeros((2 * cap, self.p))
        Z[:cap] = self._Z
        L = np.zeros((2 * cap, 2 * cap))
        L[:cap, :cap] = self._L
        self._Z, self._L = Z, L

    def append(self, z: np.ndarray) -> None:
        self._grow()
        n = self.n
        if n:
            w = self._Z[:n] @ z
            c = solve_triangular(self._L[:n, :n], w, lower=True, check_finite=False)
        else:
            c = np.zeros(0)
        d2 = self.alpha + float(z @ z) - float(c @ c)
        if d2 < self.alpha - 1e-9:
            self.floor_violations += 1
        self._L[n, :n] = c
        self._L[n, n] = math.sqrt(max(d2, 1e-12))
        self._Z[n] = z
        self.n += 1

    def norms(self, D: np.ndarray) -> np.ndarray:
        """||d_k||_{V^{-1}} for each row d_k of D."""
        base = (D * D).sum(axis=1)
        if self.n:
            W = self._Z[: self.n] @ D.T
            C = solve_triangular(self._L[: self.n, : self.n], W, lower=True, check_finite=False)
            base = base - (C * C).sum(axis=0)
        return np.sqrt(np.maximum(base, 0.0) / self.alpha)


class CondbState:
    """Mutable run state: graph, pooled pair history, per-user networks."""

    def __init__(self, config: CondbConfig, rng: np.random.Generator):
        self.config = config
        u = config.n_users
        p = config.nn.n_params
        d = config.nn.dim
        self.theta0: NnParams = init_params(rng, config.nn)
        self.theta0_flat = self.theta0.to_flat()
        self.graph: ClusterGraph = complete_graph(u)
        self.user_params = np.tile(self.theta0_flat, (u, 1))
        self.counts = np.zeros(u, dtype=int)
        # per-user sums of ||phi(x1)-phi(x2)||^2, the trainer's curvature bound
        self._z_sq_sums = np.zeros(u)
        self.round = 0
        self.history: list[PreferenceRecord] = []
        self.train_diverged = 0
        # pooled rows in arrival order
        self._X1 = np.zeros((64, d))
        self._X2 = np.zeros((64, d))
        self._ys = np.zeros(64)
        self._users = np.zeros(64, dtype=int)
        self._Z = np.zeros((64, p))  # embedding differences of played pairs
        self._n = 0
        # per-component caches
        self._cluster_models: dict[frozenset[int], tuple[np.ndarray, int]] = {}
        self._indexes: dict[frozenset[int], list] = {}  # key -> [index, rows_seen]
        # effective-dimension surrogate
        self._gram = np.zeros((p, p))
        self._gram_updates = 0
        self._dtilde = 0.0
        self._dtilde_round: int | None = None
        self.check_invariants = False
        self.invariant_violations = {"psd_floor": 0, "foreign_update": 0}

    @property
    def alpha(self) -> float:
        return self.config.lam / self.config.kappa_mu

    def _append_row(self, x1, x2, y, user, z) -> None:
        if self._n == self._X1.shape[0]:
            n = self._n
            for name in ("_X1", "_X2", "_Z"):
                old = getattr(self, name)
                new = np.zeros((2 * n, old.shape[1]))
                new[:n] = old
                setattr(self, name, new)
            self._ys = np.concatenate([self._ys, np.zeros(n)])
            self._users = np.concatenate([self._users, np.zeros(n, dtype=int)])
        self._X1[self._n] = x1
        self._X2[self._n] = x2
        self._ys[self._n] = y
        self._users[self._n] = user
        self._Z[self._n] = z
        self._n += 1

    def rows_for(self, members: frozenset[int] | set[int]) -> PairDataset:
        if self._n == 0:
            return PairDataset.empty(self.config.nn.dim)
        member_mask = np.zeros(self.config.n_users, dtype=bool)
        member_mask[list(members)] = True
        mask = member_mask[self._users[: self._n]]
        return PairDataset(
            self._X1[: self._n][mask], self._X2[: self._n][mask], self._ys[: self._n][mask]
        )

    def _curvature_for(self, members: frozenset[int] | set[int]) -> float:
        return self.config.lam + 0.25 * float(self._z_sq_sums[list(members)].sum())

    def _cluster_params_for(self, key: frozenset[int]) -> NnParams:
        entry = self._cluster_models.get(key)
        if entry is not None and self.round - entry[1] < self.config.retrain_every:
            return NnParams.from_flat(entry[0], self.config.nn)
        warm = NnParams.from_flat(entry[0], self.config.nn) if entry else None
        result = train(
            self.theta0, self.rows_for(key), self.config.nn,
            warm_start=warm, curvature_hint=self._curvature_for(key),
        )
        if result.diverged:
            self.train_diverged += 1
        self._cluster_models[key] = (result.params.to_flat(), self.round)
        return result.params

    def _index_for(self, key: frozenset[int]) -> _GramIndex:
        entry = self._indexes.get(key)
        if entry is None:
            entry = [_GramIndex(self.alpha, self.config.nn.n_params), 0]
            self._indexes[key] = entry
        index, seen = entry
        if seen < self._n:
            for ridx in range(seen, self._n):
                if self._users[ridx] in key:
                    index.append(self._Z[ridx])
            entry[1] = self._n
        return index

    def _invalidate_caches(self, touched: set[int]) -> None:
        self._cluster_models = {
            k: v for k, v in self._cluster_models.items() if not (k & touched)
        }
        self._indexes = {k: v for k, v in self._indexes.items() if not (k & touched)}

    def _accumulate_gram(self, phi: np.ndarray, i1: int, i2: int) -> None:
        if self.config.dtilde_pairs == "selected":
            z = phi[i1] - phi[i2]
            self._gram += np.outer(z, z)
        else:
            # sum over all pairs (a, b): sum (phi_a - phi_b)(phi_a - phi_b)^T
            # equals K Phi^T Phi - s s^T with s the column sum
            K = phi.shape[0]
            s = phi.sum(axis=0)
            self._gram += K * (phi.T @ phi)
            self._gram -= np.outer(s, s)
        self._gram_updates += 1

    def dtilde(self) -> float:
        """Running effective-dimension surrogate, refreshed on a cadence."""
        if self._gram_updates == 0:
            return 0.0
        due = (
            self._dtilde_round is None
            or self.round - self._dtilde_round >= self.config.dtilde_every
        )
        if due:
            self._dtilde = effective_dimension(
                self._gram, self.config.kappa_mu, self.config.lam
            )
            self._dtilde_round = self.round
        return self._dtilde

    def to_snapshot(self) -> dict:
        return {
            "round": self.round,
            "counts": self.counts.tolist(),
            "component_ids": self.graph.component_labels().tolist(),
            "n_components": self.graph.n_components(),
            "dtilde": self._dtilde,
            "train_diverged": self.train_diverged,
            "param_distance_from_init": np.linalg.norm(
                self.user_params - self.theta0_flat, axis=1
            ).tolist(),
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.to_snapshot())


def _validate_augmented(feats: np.ndarray, dim: int) -> None:
    if feats.shape[1] != dim:
        raise ValueError(f"arm features have dimension {feats.shape[1]}, expected {dim}")
    half = dim // 2
    if not np.allclose(feats[:, :half], feats[:, half:], atol=1e-9):
        raise ValueError("arm features must be augmented: halves must match")


def _play_round(
    state: CondbState,
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
    _validate_augmented(feats, cfg.nn.dim)

    key = frozenset(cluster)
    cluster_net = state._cluster_params_for(key)
    beta = beta_neural(state.dtilde(), cfg)
    nu = nu_t(beta, cfg)

    phi = ntk_features_batch(state.theta0, feats)
    h = forward_batch(cluster_net, feats)
    i1 = int(np.argmax(h))
    index = state._index_for(key)
    norms = index.norms(phi - phi[i1])
    scores = h + cfg.ucb_scale * nu * norms
    i2 = int(np.argmax(scores))

    y = int(feedback_fn(i1, i2))
    if y not in (0, 1):
        raise ValueError("feedback must be a 0/1 bit")

    z = phi[i1] - phi[i2]
    state._append_row(feats[i1], feats[i2], y, user, z)
    state.counts[user] += 1
    state._z_sq_sums[user] += float(z @ z)
    state._accumulate_gram(phi, i1, i2)
    record = PreferenceRecord(
        t=t, user=user, x1=feats[i1].copy(), x2=feats[i2].copy(), y=y, arm1=i1, arm2=i2
    )
    state.history.append(record)

    # retrain only the served user's network, on their full history
    own = state.rows_for({user})
    warm = NnParams.from_flat(state.user_params[user], cfg.nn)
    own_fit = train(
        state.theta0, own, cfg.nn,
        warm_start=warm, curvature_hint=state._curvature_for({user}),
    )
    if own_fit.diverged:
        state.train_diverged += 1
    if state.check_invariants:
        before = state.user_params.copy()
    state.user_params[user] = own_fit.params.to_flat()
    if state.check_invariants:
        changed = np.flatnonzero(np.any(before != state.user_params, axis=1))
        if not set(changed.tolist()) <= {user}:
            state.invariant_violations["foreign_update"] += 1
        state.invariant_violations["psd_floor"] = sum(
            entry[0].floor_violations for entry in state._indexes.values()
        )

    if maintain_graph:
        removed = maybe_disconnect(
            state.graph,
            user,
            state.user_params,
            state.counts,
            lambda T: threshold_neural(T, cfg.threshold, beta_T=beta, B=cfg.B),
            t,
            distance_scale=math.sqrt(cfg.nn.width),
        )
        if removed:
            state._invalidate_caches({user, *(l for _, l in removed)})
    return record


def condb_round(
    state: CondbState, user: int, armset: ArmSet, feedback_fn: FeedbackFn
) -> PreferenceRecord:
    """One full clustered round with the neural model."""
    cluster = connected_component(state.graph, user)
    return _play_round(state, user, armset, feedback_fn, cluster, maintain_graph=True)


def ndb_ind_round(
    state: CondbState, user: int, armset: ArmSet, feedback_fn: FeedbackFn
) -> PreferenceRecord:
    """Independent baseline: every user trains only on their own data."""
    return _play_round(state, user, armset, feedback_fn, frozenset({user}), maintain_graph=False)
