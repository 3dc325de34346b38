import math

import numpy as np
import pytest

from duelcluster.graph import (
    ClusterGraph,
    ThresholdConfig,
    complete_graph,
    connected_component,
    edgeless_graph,
    maybe_disconnect,
    threshold_linear,
    threshold_neural,
)


def bfs_component(adj, start):
    """Independent breadth-first search used as the component oracle."""
    seen = {start}
    queue = [start]
    while queue:
        node = queue.pop(0)
        for nb in range(adj.shape[0]):
            if adj[node, nb] and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return frozenset(seen)


class TestCompleteGraph:
    def test_single_user(self):
        g = complete_graph(1)
        assert g.n_edges() == 0
        assert g.n_components() == 1

    def test_four_users(self):
        g = complete_graph(4)
        assert g.n_edges() == 6
        assert g.n_components() == 1

    def test_paper_scale_edge_count(self):
        assert complete_graph(200).n_edges() == 19900


class TestConnectedComponent:
    def test_complete_graph_is_one_component(self):
        g = complete_graph(5)
        assert connected_component(g, 2) == frozenset(range(5))

    def test_edgeless_graph_is_singletons(self):
        g = edgeless_graph(5)
        assert connected_component(g, 3) == frozenset({3})

    def test_matches_bfs_oracle_on_random_graph(self):
        rng = np.random.default_rng(0)
        g = complete_graph(50)
        # random deletions, then compare every user's component to BFS
        for _ in range(500):
            i, l = rng.integers(50, size=2)
            if i != l and g.has_edge(i, l):
                g.remove_edge(int(i), int(l), 0)
        for i in range(50):
            assert connected_component(g, i) == bfs_component(g.adj, i)

    def test_component_membership_is_an_equivalence(self):
        rng = np.random.default_rng(1)
        g = complete_graph(20)
        for _ in range(80):
            i, l = rng.integers(20, size=2)
            if i != l and g.has_edge(i, l):
                g.remove_edge(int(i), int(l), 0)
        labels = g.component_labels()
        for i in range(20):
            comp = connected_component(g, i)
            assert i in comp
            for j in comp:
                assert labels[j] == labels[i]
                assert connected_component(g, j) == comp


class TestThresholds:
    @pytest.fixture()
    def cfg(self):
        return ThresholdConfig(
            lam=1.0, kappa_mu=0.1, delta=0.1, dim=20, u=200, lambda_x_tilde=0.5, scale=1.0
        )

    def test_unobserved_user_infinite(self, cfg):
        assert threshold_linear(0, cfg) == math.inf
        assert threshold_neural(0, cfg, beta_T=2.0, B=1.0) == math.inf

    def test_linear_hand_evaluation(self, cfg):
        # independent evaluation of the formula with plain math calls
        T = 100
        lead = math.sqrt(1.0 / 0.1)
        width = math.sqrt(2 * math.log(200 / 0.1) + 20 * math.log(1 + 4 * T * 0.1 / (20 * 1.0)))
        expected = (lead + width) / (0.1 * math.sqrt(2 * 0.5 * T))
        assert threshold_linear(T, cfg) == pytest.approx(expected, rel=1e-12)

    def test_linear_strictly_decreasing(self, cfg):
        counts = np.unique(np.geomspace(1, 10**6, 200).astype(int))
        vals = [threshold_linear(int(T), cfg) for T in counts]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert all(0.0 < v < math.inf for v in vals)

    def test_scale_multiplies(self, cfg):
        scaled = ThresholdConfig(
            lam=1.0, kappa_mu=0.1, delta=0.1, dim=20, u=200, lambda_x_tilde=0.5, scale=0.25
        )
        assert threshold_linear(50, scaled) == pytest.approx(0.25 * threshold_linear(50, cfg))

    def test_kappa_exponent_switches_leading_term(self, cfg):
        alt = ThresholdConfig(
            lam=1.0, kappa_mu=0.1, delta=0.1, dim=20, u=200,
            lambda_x_tilde=0.5, scale=1.0, kappa_exponent=1.0,
        )
        diff = threshold_linear(10, cfg) - threshold_linear(10, alt)
        expected = (math.sqrt(1.0 / 0.1) - math.sqrt(1.0 * 0.1)) / (0.1 * math.sqrt(2 * 0.5 * 10))
        assert diff == pytest.approx(expected, rel=1e-12)

    def test_neural_hand_evaluation(self):
        cfg = ThresholdConfig(
            lam=1.0, kappa_mu=0.1, delta=0.1, dim=20, u=200, lambda_x_tilde=0.5
        )
        expected = (2.0 + 1.0 * math.sqrt(1.0 / 0.1) + 1.0) / math.sqrt(2 * 0.5 * 64)
        assert threshold_neural(64, cfg, beta_T=2.0, B=1.0) == pytest.approx(expected, rel=1e-12)

    def test_neural_quadrupling_count_halves(self):
        cfg = ThresholdConfig(lam=1.0, kappa_mu=0.1, delta=0.1, dim=20, u=200)
        one = threshold_neural(16, cfg, beta_T=2.0, B=1.0)
        four = threshold_neural(64, cfg, beta_T=2.0, B=1.0)
        assert four == pytest.approx(one / 2.0)


class TestMaybeDisconnect:
    def setup_method(self):
        self.cfg = ThresholdConfig(
            lam=1.0, kappa_mu=0.25, delta=0.1, dim=2, u=3, lambda_x_tilde=0.5, scale=1.0
        )
        self.fn = lambda T: threshold_linear(T, self.cfg)

    def test_identical_estimates_remove_nothing(self):
        g = complete_graph(3)
        est = np.ones((3, 2))
        removed = maybe_disconnect(g, 0, est, np.array([50, 50, 50]), self.fn, 1)
        assert removed == [] and g.n_edges() == 3

    def test_unobserved_user_keeps_all_edges(self):
        g = complete_graph(3)
        est = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        removed = maybe_disconnect(g, 0, est, np.array([0, 999, 999]), self.fn, 1)
        assert removed == [] and g.n_edges() == 3

    def test_matches_per_edge_oracle(self):
        g = complete_graph(3)
        est = np.array([[0.0, 0.0], [3.0, 0.0], [0.1, 0.0]])
        counts = np.array([400, 400, 2])
        expected = []
        for other in (1, 2):
            dist = np.linalg.norm(est[0] - est[other])
            if dist > self.fn(400) + self.fn(counts[other]):
                expected.append((0, other))
        removed = maybe_disconnect(g, 0, est, counts, self.fn, round_index=7, distance_scale=1.0)
        assert removed == expected
        assert expected == [(0, 1)]  # far user with data cut, near/low-count kept
        assert g.deletion_log == [(7, 0, 1)]

    def test_distance_scale_applies(self):
        g = complete_graph(2)
        est = np.array([[0.0, 0.0], [0.5, 0.0]])
        counts = np.array([400, 400])
        assert maybe_disconnect(g, 0, est, counts, self.fn, 1, distance_scale=1.0) == []
        assert maybe_disconnect(g, 0, est, counts, self.fn, 1, distance_scale=8.0) == [(0, 1)]

    def test_component_count_never_decreases(self):
        rng = np.random.default_rng(2)
        g = complete_graph(12)
        est = rng.standard_normal((12, 2)) * 2.0
        counts = rng.integers(0, 500, size=12)
        prev = g.n_components()
        for t in range(1, 40):
            maybe_disconnect(g, int(rng.integers(12)), est, counts, self.fn, t)
            cur = g.n_components()
            assert cur >= prev
            prev = cur


class TestDeletionLog:
    def test_csv_export(self, tmp_path):
        g = complete_graph(3)
        g.remove_edge(0, 1, 5)
        g.remove_edge(1, 2, 9)
        out = tmp_path / "log.csv"
        g.write_deletion_log(out)
        lines = out.read_text().strip().splitlines()
        assert lines == ["round,i,l", "5,0,1", "9,1,2"]
