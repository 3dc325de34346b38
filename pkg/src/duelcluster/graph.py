"""Dynamic user graph with monotone edge deletion.

The graph starts complete; edges are only ever removed, so connected
components can only split over time. Components are the inferred user
clusters. Thresholds decide when two users' estimates are far enough
apart to cut their edge.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ClusterGraph:
    """Undirected graph over users 0..u-1 supporting deletion only."""

    def __init__(self, u: int, complete: bool = True):
        if u < 1:
            raise ValueError("u must be >= 1")
        self.u = u
        self.adj = np.full((u, u), complete, dtype=bool)
        np.fill_diagonal(self.adj, False)
        self.deletion_log: list[tuple[int, int, int]] = []  # (round, i, l)
        self._labels: np.ndarray | None = None

    def n_edges(self) -> int:
        return int(self.adj.sum()) // 2

    def has_edge(self, i: int, l: int) -> bool:
        return bool(self.adj[i, l])

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def remove_edge(self, i: int, l: int, round_index: int) -> None:
        if i == l or not self.adj[i, l]:
            raise ValueError(f"no edge ({i}, {l}) to remove")
        self.adj[i, l] = self.adj[l, i] = False
        self.deletion_log.append((round_index, i, l))
        self._labels = None

    def component_labels(self) -> np.ndarray:
        """Component id per user; ids are the smallest member index."""
        if self._labels is None:
            labels = np.full(self.u, -1, dtype=int)
            for start in range(self.u):
                if labels[start] >= 0:
                    continue
                stack = [start]
                labels[start] = start
                while stack:
                    node = stack.pop()
                    for nb in np.flatnonzero(self.adj[node]):
                        if labels[nb] < 0:
                            labels[nb] = start
                            stack.append(int(nb))
            self._labels = labels
        return self._labels

    def component_mask(self, i: int) -> np.ndarray:
        labels = self.component_labels()
        return labels == labels[i]

    def n_components(self) -> int:
        return len(np.unique(self.component_labels()))

    def write_deletion_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "i", "l"])
            writer.writerows(self.deletion_log)


def complete_graph(u: int) -> ClusterGraph:
    return ClusterGraph(u, complete=True)


def edgeless_graph(u: int) -> ClusterGraph:
    return ClusterGraph(u, complete=False)


def connected_component(graph: ClusterGraph, i: int) -> frozenset[int]:
    """Maximal connected user set containing i; always contains i."""
    if not 0 <= i < graph.u:
        raise ValueError(f"user {i} out of range")
    return frozenset(np.flatnonzero(graph.component_mask(i)).tolist())


@dataclass(frozen=True)
class ThresholdConfig:
    """Inputs of the edge-deletion threshold f(T).

    lambda_x_tilde is a problem-instance constant that cannot be known in
    advance; it and the overall scale multiplier are the tuning surface.
    kappa_exponent sets the kappa power inside the sqrt(lam * kappa^e)
    leading term of the linear threshold (-1 gives sqrt(lam/kappa), +1
    gives sqrt(lam*kappa)); only the product with scale matters in practice.
    """

    lam: float
    kappa_mu: float
    delta: float
    dim: int
    u: int
    lambda_x_tilde: float = 0.5
    scale: float = 1.0
    kappa_exponent: float = -1.0

    def __post_init__(self):
        if min(self.lam, self.kappa_mu, self.dim, self.u, self.lambda_x_tilde, self.scale) <= 0:
            raise ValueError("threshold parameters must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


def threshold_linear(T_count: int, cfg: ThresholdConfig) -> float:
    """Count-dependent deletion threshold for the linear algorithm.

    f(T) = [sqrt(lam * kappa^e) + sqrt(2 log(u/delta)
            + d log(1 + 4 T kappa / (d lam)))] / (kappa sqrt(2 lx T)),
    times the configured scale. Unobserved users get +inf so they are
    never disconnected.
    """
    if T_count < 0:
        raise ValueError("T_count must be >= 0")
    if T_count == 0:
        return math.inf
    lead = math.sqrt(cfg.lam * cfg.kappa_mu**cfg.kappa_exponent)
    width = math.sqrt(
        2.0 * math.log(cfg.u / cfg.delta)
        + cfg.dim * math.log(1.0 + 4.0 * T_count * cfg.kappa_mu / (cfg.dim * cfg.lam))
    )
    denom = cfg.kappa_mu * math.sqrt(2.0 * cfg.lambda_x_tilde * T_count)
    return cfg.scale * (lead + width) / denom


def threshold_neural(T_count: int, cfg: ThresholdConfig, beta_T: float, B: float) -> float:
    """f(T) = (beta_T + B sqrt(lam/kappa) + 1) / sqrt(2 lx T), scaled."""
    if T_count < 0:
        raise ValueError("T_count must be >= 0")
    if T_count == 0:
        return math.inf
    numer = beta_T + B * math.sqrt(cfg.lam / cfg.kappa_mu) + 1.0
    return cfg.scale * numer / math.sqrt(2.0 * cfg.lambda_x_tilde * T_count)


def maybe_disconnect(
    graph: ClusterGraph,
    user: int,
    estimates: np.ndarray,
    counts: np.ndarray,
    threshold_fn: Callable[[int], float],
    round_index: int,
    distance_scale: float = 1.0,
) -> list[tuple[int, int]]:
    """Remove every edge (user, l) with scaled estimate distance above f(T_user)+f(T_l).

    estimates is (u, dim) with one row per user; counts the per-user
    observation totals. Returns the removed edges. Users with zero counts
    have infinite thresholds, so their edges are never cut.
    """
    f_user = threshold_fn(int(counts[user]))
    removed: list[tuple[int, int]] = []
    for other in graph.neighbors(user):
        other = int(other)
        dist = float(np.linalg.norm(estimates[user] - estimates[other]))
        if distance_scale * dist > f_user + threshold_fn(int(counts[other])):
            graph.remove_edge(user, other, round_index)
            removed.append((user, other))
    return removed
