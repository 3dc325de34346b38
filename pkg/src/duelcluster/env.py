"""Preference environments: clustered user populations, arm sampling, and feedback.

An environment is a fixed ground truth (cluster partition plus one reward
model per cluster) together with sampling laws for users, arm sets, and
binary preference outcomes. Everything here is immutable after
construction; randomness always flows through an explicit generator so a
seed fully determines the environment and the feedback stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FeatureFileError
from .glm import logistic

ENV_FILE_HEADER = "#duelcluster-env v1"


class RewardKind(str, Enum):
    LINEAR = "linear"
    SQUARE = "square"
    TABLE = "table"


@dataclass(frozen=True)
class RewardModel:
    """One cluster's reward function.

    Linear: f(x) = theta.x, Square: f(x) = (theta.x)^2, both with a
    unit-norm theta so |f| <= 1 on the unit ball. Table: a per-item value
    lookup (the cluster's row over the environment's item pool).
    """

    kind: RewardKind
    theta: np.ndarray | None = None
    item_rewards: np.ndarray | None = None

    def value(self, x: np.ndarray, item: int | None = None) -> float:
        if self.kind is RewardKind.LINEAR:
            return float(self.theta @ x)
        if self.kind is RewardKind.SQUARE:
            return float(self.theta @ x) ** 2
        if item is None:
            raise ValueError("table reward model needs an item id")
        return float(self.item_rewards[item])

    def values(self, features: np.ndarray, items: np.ndarray | None = None) -> np.ndarray:
        if self.kind is RewardKind.LINEAR:
            return features @ self.theta
        if self.kind is RewardKind.SQUARE:
            return (features @ self.theta) ** 2
        if items is None:
            raise ValueError("table reward model needs item ids")
        return self.item_rewards[items]


@dataclass(frozen=True)
class ArmSet:
    """K feature vectors, each with euclidean norm <= 1.

    ids is set for file-backed environments, where arms are rows of the
    item pool and table lookups need the item index.
    """

    features: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2:
            raise ValueError("features must be a (K, d) array")
        norms = np.linalg.norm(feats, axis=1)
        if norms.size and norms.max() > 1.0 + 1e-12:
            raise ValueError(f"arm norm {norms.max():.12g} exceeds 1")
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.features.shape[0]

    def index_of(self, x: np.ndarray) -> int:
        hits = np.flatnonzero((self.features == np.asarray(x, dtype=float)).all(axis=1))
        if hits.size == 0:
            raise ValueError("arm is not a member of this arm set")
        return int(hits[0])


@dataclass(frozen=True)
class PreferenceRecord:
    """One interaction: the unit of the interaction history."""

    t: int
    user: int
    x1: np.ndarray
    x2: np.ndarray
    y: int
    arm1: int = -1  # index of x1 within the round's arm set
    arm2: int = -1

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError("preference outcome must be 0 or 1")


@dataclass(frozen=True)
class GroundTruth:
    """Cluster partition, per-cluster reward models, and the arm-sampling law."""

    u: int
    m: int
    d: int
    assignment: np.ndarray          # user -> cluster index in [0, m)
    models: tuple[RewardModel, ...]
    gamma: float                    # minimum inter-cluster separation
    item_features: np.ndarray | None = None  # file-backed arm pool

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=int)
        if assignment.shape != (self.u,):
            raise ValueError("assignment must map every user")
        if len(np.unique(assignment)) != self.m or assignment.min() < 0 or assignment.max() >= self.m:
            raise ValueError("assignment must be onto {0..m-1}")
        object.__setattr__(self, "assignment", assignment)

    @cached_property
    def _item_index(self) -> dict[bytes, int]:
        if self.item_features is None:
            return {}
        return {row.tobytes(): i for i, row in enumerate(self.item_features)}

    def model_for(self, user: int) -> RewardModel:
        if not 0 <= user < self.u:
            raise ValueError(f"unknown user id {user}")
        return self.models[self.assignment[user]]

    def item_of(self, x: np.ndarray) -> int:
        item = self._item_index.get(np.ascontiguousarray(x, dtype=float).tobytes())
        if item is None:
            raise ValueError("feature vector is not an item of this environment")
        return item


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    vecs = rng.standard_normal((n, d))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    while np.any(norms == 0.0):  # probability-zero guard
        bad = norms[:, 0] == 0.0
        vecs[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs / norms


def _simplex_on_sphere(rng: np.random.Generator, m: int, d: int, gamma: float) -> list[np.ndarray]:
    """m unit vectors with every pairwise distance exactly gamma.

    A regular (m-1)-simplex of side gamma is lifted onto the unit sphere
    and randomly rotated, so each vector is marginally uniform while the
    configuration realizes the requested separation. Needs m <= d and
    gamma below the equilateral maximum sqrt(2m/(m-1)).
    """
    if m == 1:
        return [_unit_rows(rng, 1, d)[0]]
    if m > d:
        raise ConfigError(f"cannot place {m} separated parameters in dimension {d}; need m <= d")
    gap = gamma * (1.0 + 1e-9)  # margin so rounding never lands below gamma
    gamma_max = math.sqrt(2.0 * m / (m - 1))
    if gap >= gamma_max:
        raise ConfigError(
            f"gap {gamma} is infeasible for {m} unit vectors (maximum {gamma_max:.4g})"
        )
    frame, _ = np.linalg.qr(rng.standard_normal((d, m)))
    frame = frame.T  # m orthonormal rows
    center = frame.mean(axis=0)
    side = gap / math.sqrt(2.0)
    height = math.sqrt(1.0 - gap**2 * (m - 1) / (2.0 * m))
    normal = center * math.sqrt(m)  # unit vector orthogonal to the face
    return [side * (frame[j] - center) + height * normal for j in range(m)]


def generate_clustered_users(
    rng: np.random.Generator,
    u: int,
    m: int,
    d: int,
    gamma: float,
    kind: RewardKind | str = RewardKind.LINEAR,
    assignment: str = "round_robin",
) -> GroundTruth:
    """Build a ground truth whose m cluster parameters are separated by gamma.

    Parameters sit at the vertices of a randomly rotated regular simplex on
    the unit sphere, so the pairwise separation equals gamma exactly and
    gamma acts as the true difficulty knob (plain uniform draws would land
    near sqrt(2) apart in any moderate dimension, regardless of gamma).
    For square rewards theta and -theta induce the same function, so the
    separation must also hold under sign flips. Users go to clusters
    round-robin by default so every cluster is non-empty and balanced;
    "random" shuffles that assignment.
    """
    kind = RewardKind(kind)
    if kind is RewardKind.TABLE:
        raise ConfigError("table environments come from feature files")
    if not (u >= m >= 1):
        raise ConfigError(f"need u >= m >= 1, got u={u}, m={m}")
    if d < 1:
        raise ConfigError("d must be >= 1")
    if not (0.0 <= gamma < 2.0):
        raise ConfigError("gamma must lie in [0, 2), the unit sphere's diameter")

    thetas = _simplex_on_sphere(rng, m, d, gamma)
    if kind is RewardKind.SQUARE and m > 1:
        flip = min(
            float(np.linalg.norm(thetas[a] + thetas[b]))
            for a in range(m)
            for b in range(a + 1, m)
        )
        if flip < gamma:
            raise ConfigError(
                f"gap {gamma} is infeasible for square rewards: sign-flipped "
                f"parameters would be {flip:.4g} apart"
            )

    labels = np.arange(u) % m
    if assignment == "random":
        rng.shuffle(labels)
    elif assignment != "round_robin":
        raise ConfigError(f"unknown assignment scheme {assignment!r}")

    models = tuple(RewardModel(kind, theta=t) for t in thetas)
    if m > 1:
        sep = min(
            float(np.linalg.norm(thetas[a] - thetas[b]))
            for a in range(m)
            for b in range(a + 1, m)
        )
    else:
        sep = math.inf
    return GroundTruth(u=u, m=m, d=d, assignment=labels, models=models, gamma=sep)


def sample_arm_set(rng: np.random.Generator, K: int, d: int) -> ArmSet:
    """K independent draws uniform on the unit sphere in R^d."""
    if K < 2:
        raise ValueError("an arm set needs at least two arms")
    return ArmSet(_unit_rows(rng, K, d))


def sample_arms(gt: GroundTruth, rng: np.random.Generator, K: int) -> ArmSet:
    """Arm set for one round: sphere draws, or K distinct items when file-backed."""
    if gt.item_features is None:
        return sample_arm_set(rng, K, gt.d)
    n_items = gt.item_features.shape[0]
    if K > n_items:
        raise ConfigError(f"K={K} arms requested but the item pool has {n_items}")
    ids = rng.choice(n_items, size=K, replace=False)
    return ArmSet(gt.item_features[ids], ids=ids)


def sample_user(rng: np.random.Generator, u: int) -> int:
    """Uniform draw over {0..u-1}."""
    if u < 1:
        raise ValueError("u must be >= 1")
    return int(rng.integers(u))


def true_reward(gt: GroundTruth, user: int, x: np.ndarray) -> float:
    """Latent reward of arm x for the user's cluster."""
    model = gt.model_for(user)
    if model.kind is RewardKind.TABLE:
        return model.value(x, item=gt.item_of(x))
    x = np.asarray(x, dtype=float)
    if x.shape != (gt.d,):
        raise ValueError(f"arm has dimension {x.shape}, expected ({gt.d},)")
    return model.value(x)


def arm_rewards(gt: GroundTruth, user: int, armset: ArmSet) -> np.ndarray:
    """Latent rewards of every arm in the set for the user's cluster."""
    model = gt.model_for(user)
    return model.values(armset.features, items=armset.ids)


def preference_probability(gt: GroundTruth, user: int, x1: np.ndarray, x2: np.ndarray) -> float:
    """P(x1 preferred over x2) = mu(f(x1) - f(x2)) under the logistic link."""
    return float(logistic(true_reward(gt, user, x1) - true_reward(gt, user, x2)))


def sample_preference(
    rng: np.random.Generator,
    gt: GroundTruth,
    user: int,
    x1: np.ndarray,
    x2: np.ndarray,
) -> int:
    """One Bernoulli draw of the preference bit; consumes exactly one uniform."""
    return int(rng.random() < preference_probability(gt, user, x1, x2))


def instantaneous_regret(
    gt: GroundTruth,
    user: int,
    armset: ArmSet,
    x1: np.ndarray,
    x2: np.ndarray,
) -> float:
    """2 max_x f(x) - f(x1) - f(x2) over the arm set; non-negative by construction."""
    i1 = armset.index_of(x1)
    i2 = armset.index_of(x2)
    rewards = arm_rewards(gt, user, armset)
    return float(2.0 * rewards.max() - rewards[i1] - rewards[i2])


# ---------------------------------------------------------------------------
# Feature files
#
# UTF-8 text. First line: "#duelcluster-env v1 d=<int>". Then whitespace-
# separated rows, '#' lines ignored:
#   user <id> <d floats>            linear parameter rows
#   item <id> <d floats>            item feature rows (norm <= 1)
#   reward <user> <item> <float>    table entries (value in [-1, 1])
# A file is either linear (user rows) or table (reward rows); mixing is an
# error. Ids must be contiguous from 0.
# ---------------------------------------------------------------------------


def _parse_floats(parts: list[str], path: Path, lineno: int, expect: int) -> np.ndarray:
    if len(parts) != expect:
        raise FeatureFileError(
            f"{path}:{lineno}: expected {expect} numeric fields, got {len(parts)}"
        )
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise FeatureFileError(f"{path}:{lineno}: malformed number ({exc})") from None


def _collect_rows(rows: dict[int, np.ndarray], what: str, path: Path) -> np.ndarray:
    n = len(rows)
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise FeatureFileError(
            f"{path}: {what} ids must be contiguous from 0; missing id {missing[0]}"
        )
    return np.stack([rows[i] for i in range(n)])


def _group_identical_rows(rows: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Group users by identical rows; returns (assignment, representatives)."""
    reps: list[np.ndarray] = []
    keys: dict[bytes, int] = {}
    labels = np.zeros(rows.shape[0], dtype=int)
    for i, row in enumerate(rows):
        key = row.tobytes()
        if key not in keys:
            keys[key] = len(reps)
            reps.append(row)
        labels[i] = keys[key]
    return labels, reps


def load_feature_file(path: str | Path) -> GroundTruth:
    """Build a ground truth from a preprocessed feature file."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FeatureFileError(f"{path}: cannot read ({exc})") from exc
    if not lines or not lines[0].startswith(ENV_FILE_HEADER):
        raise FeatureFileError(f"{path}:1: missing header '{ENV_FILE_HEADER} d=<int>'")
    header = lines[0].split()
    if len(header) != 3 or not header[2].startswith("d="):
        raise FeatureFileError(f"{path}:1: header must be '{ENV_FILE_HEADER} d=<int>'")
    try:
        d = int(header[2][2:])
    except ValueError:
        raise FeatureFileError(f"{path}:1: bad dimension in header") from None
    if d < 1:
        raise FeatureFileError(f"{path}:1: dimension must be >= 1")

    users: dict[int, np.ndarray] = {}
    items: dict[int, np.ndarray] = {}
    rewards: dict[tuple[int, int], float] = {}

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        row_kind, rest = parts[0], parts[1:]
        if row_kind in ("user", "item"):
            if len(rest) < 1:
                raise FeatureFileError(f"{path}:{lineno}: missing id")
            try:
                rid = int(rest[0])
            except ValueError:
                raise FeatureFileError(f"{path}:{lineno}: id must be an integer") from None
            vec = _parse_floats(rest[1:], path, lineno, d)
            target = users if row_kind == "user" else items
            if rid in target:
                raise FeatureFileError(f"{path}:{lineno}: duplicate {row_kind} id {rid}")
            if row_kind == "item" and np.linalg.norm(vec) > 1.0 + 1e-9:
                raise FeatureFileError(
                    f"{path}:{lineno}: item norm {np.linalg.norm(vec):.6g} exceeds 1"
                )
            if row_kind == "user" and np.linalg.norm(vec) > 1.0 + 1e-9:
                raise FeatureFileError(
                    f"{path}:{lineno}: user parameter norm {np.linalg.norm(vec):.6g} exceeds 1"
                )
            target[rid] = vec
        elif row_kind == "reward":
            if len(rest) != 3:
                raise FeatureFileError(
                    f"{path}:{lineno}: reward rows are 'reward <user> <item> <value>'"
                )
            try:
                uid, iid = int(rest[0]), int(rest[1])
                val = float(rest[2])
            except ValueError:
                raise FeatureFileError(f"{path}:{lineno}: malformed reward row") from None
            if abs(val) > 1.0 + 1e-9:
                raise FeatureFileError(f"{path}:{lineno}: reward {val} outside [-1, 1]")
            if (uid, iid) in rewards:
                raise FeatureFileError(f"{path}:{lineno}: duplicate reward for ({uid}, {iid})")
            rewards[(uid, iid)] = val
        else:
            raise FeatureFileError(f"{path}:{lineno}: unknown row kind {row_kind!r}")

    if users and rewards:
        raise FeatureFileError(f"{path}: mixing user-parameter rows and reward rows")
    if not items:
        raise FeatureFileError(f"{path}: no item rows")
    item_features = _collect_rows(items, "item", path)

    if users:
        params = _collect_rows(users, "user", path)
        labels, reps = _group_identical_rows(params)
        models = tuple(RewardModel(RewardKind.LINEAR, theta=r) for r in reps)
        m = len(reps)
        gamma = (
            min(
                float(np.linalg.norm(reps[a] - reps[b]))
                for a in range(m)
                for b in range(a + 1, m)
            )
            if m > 1
            else math.inf
        )
        return GroundTruth(
            u=params.shape[0], m=m, d=d, assignment=labels, models=models,
            gamma=gamma, item_features=item_features,
        )

    if not rewards:
        raise FeatureFileError(f"{path}: no user or reward rows")
    uids = sorted({uid for uid, _ in rewards})
    if uids != list(range(len(uids))):
        raise FeatureFileError(f"{path}: reward user ids must be contiguous from 0")
    n_items = item_features.shape[0]
    table = np.zeros((len(uids), n_items))
    for uid in uids:
        for iid in range(n_items):
            if (uid, iid) not in rewards:
                raise FeatureFileError(f"{path}: missing reward for user {uid}, item {iid}")
            table[uid, iid] = rewards[(uid, iid)]
    labels, reps = _group_identical_rows(table)
    models = tuple(RewardModel(RewardKind.TABLE, item_rewards=r) for r in reps)
    m = len(reps)
    gamma = (
        min(
            float(np.linalg.norm(reps[a] - reps[b]))
            for a in range(m)
            for b in range(a + 1, m)
        )
        if m > 1
        else math.inf
    )
    return GroundTruth(
        u=len(uids), m=m, d=d, assignment=labels, models=models,
        gamma=gamma, item_features=item_features,
    )
