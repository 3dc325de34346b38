"""Experiment orchestration: seeded trials, regret traces, CSV output.

Each trial derives three independent generator streams from its seed: one
builds the environment, one drives the user/arm/feedback stream, and one
belongs to the algorithm (network initialization). Keeping the streams
separate means switching algorithms never perturbs the sequence of
(user, arm set) draws, so curves from different algorithms are directly
comparable under a shared seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import coldb as coldb_mod
from . import condb as condb_mod
from .coldb import ColdbConfig, ColdbState
from .condb import CondbConfig, CondbState
from .env import (
    ArmSet,
    GroundTruth,
    RewardKind,
    arm_rewards,
    generate_clustered_users,
    load_feature_file,
    sample_arms,
    sample_preference,
    sample_user,
)
from .errors import ConfigError
from .glm import MleConfig, kappa_mu_bound
from .graph import ThresholdConfig
from .neural import NnConfig, augment_input

logger = logging.getLogger("duelcluster")

ALGOS = ("coldb", "ldb_ind", "condb", "ndb_ind")
LINEAR_ALGOS = ("coldb", "ldb_ind")
NEURAL_ALGOS = ("condb", "ndb_ind")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; mirrored one-to-one by the JSON config file."""

    algo: str
    env: str                       # "linear" | "square" | "file:<path>"
    horizon: int
    seeds: tuple[int, ...]
    users: int = 50
    clusters: int = 2
    arms: int = 10
    dim: int = 10
    gamma: float = 0.5
    out: str | None = None
    summary: bool = False
    # shared algorithm parameters
    lam: float = 1.0
    delta: float = 0.1
    kappa_mu: float | None = None  # None: derived from the env's reward range
    feature_norm_bound: float = 2.0
    ucb_scale: float = 1.0
    threshold_scale: float = 1.0
    lambda_x_tilde: float = 0.5
    kappa_exponent: float = -1.0
    mle_tol: float = 1e-6
    mle_max_iters: int = 100
    # neural parameters
    nn_width: int = 64
    nn_depth: int = 2
    nn_eta: float = 0.01
    nn_iters: int = 100
    nn_train_tol: float = 0.0
    B: float = 1.0
    retrain_every: int = 1
    dtilde_every: int = 25
    dtilde_pairs: str = "all"
    # run behavior
    assignment: str = "round_robin"
    allow_misspecified: bool = False
    check_invariants: bool = False
    collect_draws: bool = False

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.env not in ("linear", "square") and not self.env.startswith("file:"):
            raise ConfigError("env must be 'linear', 'square', or 'file:<path>'")
        if self.env == "square" and self.algo in LINEAR_ALGOS and not self.allow_misspecified:
            raise ConfigError(
                "square rewards with a linear-feature algorithm are misspecified; "
                "pass --allow-misspecified to run anyway"
            )
        if self.arms < 2:
            raise ConfigError("need at least two arms per round")
        if not self.env.startswith("file:"):
            if not (self.users >= self.clusters >= 1):
                raise ConfigError("need users >= clusters >= 1")
            if self.dim < 1:
                raise ConfigError("dim must be >= 1")

    def env_kind(self) -> RewardKind | None:
        if self.env == "linear":
            return RewardKind.LINEAR
        if self.env == "square":
            return RewardKind.SQUARE
        return None


@dataclass
class RegretTrace:
    """Per-round instantaneous and cumulative regret for one trial."""

    algo: str
    seed: int
    inst: np.ndarray
    cum: np.ndarray
    rand_index: float = math.nan
    exact_recovery: bool = False
    n_components: int = 0
    invariant_violations: dict = field(default_factory=dict)
    users: np.ndarray | None = None
    arm_checksums: np.ndarray | None = None


def resolve_kappa_mu(config: ExperimentConfig) -> float:
    """Config value, or the logistic-derivative bound for the env's reward range.

    Linear rewards on the unit ball span [-1, 1] (gap up to 2); square
    rewards span [0, 1] (gap up to 1). File-backed values are bounded in
    [-1, 1] by the loader.
    """
    if config.kappa_mu is not None:
        return config.kappa_mu
    gap = 1.0 if config.env == "square" else 2.0
    return kappa_mu_bound(gap)


def _build_ground_truth(config: ExperimentConfig, rng: np.random.Generator) -> GroundTruth:
    if config.env.startswith("file:"):
        return load_feature_file(config.env[len("file:"):])
    return generate_clustered_users(
        rng,
        u=config.users,
        m=config.clusters,
        d=config.dim,
        gamma=config.gamma,
        kind=config.env_kind(),
        assignment=config.assignment,
    )


def _make_state(config: ExperimentConfig, gt: GroundTruth, algo_rng: np.random.Generator):
    kappa = resolve_kappa_mu(config)
    if config.algo in LINEAR_ALGOS:
        threshold = ThresholdConfig(
            lam=config.lam, kappa_mu=kappa, delta=config.delta, dim=gt.d, u=gt.u,
            lambda_x_tilde=config.lambda_x_tilde, scale=config.threshold_scale,
            kappa_exponent=config.kappa_exponent,
        )
        algo_cfg = ColdbConfig(
            dim=gt.d, n_users=gt.u, lam=config.lam, delta=config.delta, kappa_mu=kappa,
            feature_norm_bound=config.feature_norm_bound, ucb_scale=config.ucb_scale,
            threshold=threshold,
            mle=MleConfig(lam=config.lam, tol=config.mle_tol, max_iters=config.mle_max_iters),
        )
        state = ColdbState(algo_cfg)
        round_fn = coldb_mod.coldb_round if config.algo == "coldb" else coldb_mod.ldb_ind_round
        return state, round_fn, False
    nn = NnConfig(
        width=config.nn_width, depth=config.nn_depth, dim=2 * gt.d,
        eta=config.nn_eta, iters=config.nn_iters, lam=config.lam,
        train_tol=config.nn_train_tol,
    )
    threshold = ThresholdConfig(
        lam=config.lam, kappa_mu=kappa, delta=config.delta, dim=2 * gt.d, u=gt.u,
        lambda_x_tilde=config.lambda_x_tilde, scale=config.threshold_scale,
        kappa_exponent=config.kappa_exponent,
    )
    algo_cfg = CondbConfig(
        nn=nn, n_users=gt.u, lam=config.lam, delta=config.delta, kappa_mu=kappa,
        B=config.B, ucb_scale=config.ucb_scale, threshold=threshold,
        retrain_every=config.retrain_every, dtilde_every=config.dtilde_every,
        dtilde_pairs=config.dtilde_pairs,
    )
    state = CondbState(algo_cfg, algo_rng)
    round_fn = condb_mod.condb_round if config.algo == "condb" else condb_mod.ndb_ind_round
    return state, round_fn, True


def clustering_accuracy(state, ground_truth: GroundTruth) -> tuple[float, bool]:
    """Rand index between the inferred components and the true partition.

    Returns (rand_index, exact); exact is True iff the partitions are
    identical. A single user trivially scores (1.0, True).
    """
    labels = state.graph.component_labels()
    truth = ground_truth.assignment
    u = truth.shape[0]
    same_inferred = labels[:, None] == labels[None, :]
    same_true = truth[:, None] == truth[None, :]
    exact = bool(np.array_equal(same_inferred, same_true))
    if u < 2:
        return 1.0, exact
    iu = np.triu_indices(u, k=1)
    agree = same_inferred[iu] == same_true[iu]
    return float(agree.mean()), exact


def _run_trial(config: ExperimentConfig, seed: int) -> RegretTrace:
    env_rng, stream_rng, algo_rng = (
        np.random.default_rng(child)
        for child in np.random.SeedSequence(seed).spawn(3)
    )
    gt = _build_ground_truth(config, env_rng)
    if gt.item_features is not None and config.arms > gt.item_features.shape[0]:
        raise ConfigError(
            f"K={config.arms} arms but the item pool has {gt.item_features.shape[0]}"
        )
    state, round_fn, neural = _make_state(config, gt, algo_rng)
    state.check_invariants = config.check_invariants

    T = config.horizon
    inst = np.zeros(T)
    users = np.zeros(T, dtype=int) if config.collect_draws else None
    checksums = np.zeros(T) if config.collect_draws else None
    prev_components = state.graph.n_components()
    component_violations = 0

    for t in range(T):
        user = sample_user(stream_rng, gt.u)
        armset = sample_arms(gt, stream_rng, config.arms)
        if neural:
            algo_arms = ArmSet(np.stack([augment_input(x) for x in armset.features]))
        else:
            algo_arms = armset

        def feedback(i1: int, i2: int) -> int:
            return sample_preference(
                stream_rng, gt, user, armset.features[i1], armset.features[i2]
            )

        record = round_fn(state, user, algo_arms, feedback)
        rewards = arm_rewards(gt, user, armset)
        inst[t] = 2.0 * rewards.max() - rewards[record.arm1] - rewards[record.arm2]
        if config.collect_draws:
            users[t] = user
            checksums[t] = float(armset.features.sum())
        if config.check_invariants:
            if inst[t] < -1e-12:
                raise AssertionError(f"negative regret {inst[t]} at round {t + 1}")
            cur = state.graph.n_components()
            if cur < prev_components:
                component_violations += 1
            prev_components = cur

    rand_index, exact = clustering_accuracy(state, gt)
    violations = dict(getattr(state, "invariant_violations", {}))
    if config.check_invariants:
        violations["component_monotone"] = component_violations
    return RegretTrace(
        algo=config.algo,
        seed=seed,
        inst=inst,
        cum=np.cumsum(inst),
        rand_index=rand_index,
        exact_recovery=exact,
        n_components=state.graph.n_components(),
        invariant_violations=violations,
        users=users,
        arm_checksums=checksums,
    )


def run_experiment(config: ExperimentConfig) -> list[RegretTrace]:
    """One trace per seed. A failing trial is logged and skipped; if every
    trial fails, the first error propagates."""
    config.validate()
    traces: list[RegretTrace] = []
    first_error: Exception | None = None
    for seed in config.seeds:
        try:
            traces.append(_run_trial(config, seed))
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - trial isolation is the contract
            logger.error("trial with seed %d failed: %s", seed, exc)
            if first_error is None:
                first_error = exc
    if not traces:
        raise RuntimeError(f"all trials failed; first error: {first_error}") from first_error
    return traces


def write_csv(traces: list[RegretTrace], path) -> None:
    """Rows `algo,seed,t,inst_regret,cum_regret`, floats at 17 significant digits."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("algo,seed,t,inst_regret,cum_regret\n")
            for trace in traces:
                for t in range(trace.inst.shape[0]):
                    fh.write(
                        f"{trace.algo},{trace.seed},{t + 1},"
                        f"{trace.inst[t]:.17g},{trace.cum[t]:.17g}\n"
                    )
    except OSError as exc:
        raise OSError(f"cannot write trace CSV to {path}: {exc}") from exc


def write_summary_csv(traces: list[RegretTrace], path) -> None:
    """Across-seed mean and standard error of cumulative regret per round."""
    by_algo: dict[str, list[RegretTrace]] = {}
    for trace in traces:
        by_algo.setdefault(trace.algo, []).append(trace)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("algo,t,mean_cum_regret,stderr_cum_regret\n")
            for algo, group in by_algo.items():
                cum = np.stack([trace.cum for trace in group])
                mean = cum.mean(axis=0)
                if cum.shape[0] > 1:
                    stderr = cum.std(axis=0, ddof=1) / math.sqrt(cum.shape[0])
                else:
                    stderr = np.zeros(cum.shape[1])
                for t in range(cum.shape[1]):
                    fh.write(f"{algo},{t + 1},{mean[t]:.17g},{stderr[t]:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write summary CSV to {path}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from JSON data, rejecting unknown keys."""
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seeds" in raw:
        raw = dict(raw)
        raw["seeds"] = tuple(int(s) for s in raw["seeds"])
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"incomplete config: {exc}") from exc
