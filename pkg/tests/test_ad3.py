import numpy as np
import pytest

from structckn.ad3 import ad3_map
from structckn.graph import FactorGraphModel, LogicFactor

from oracles import enumerate_graph_map


def random_tree_model(rng, n_nodes, n_labels):
    """Random tree: node i > 0 attaches to a random earlier node."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n_nodes)]
    feats = [np.ones(1)] * n_nodes
    model = FactorGraphModel(feats, [n_labels] * n_nodes, edges=edges,
                             pairwise="none", topology="general")
    nt = [rng.normal(size=n_labels) for _ in range(n_nodes)]
    et = [rng.normal(size=(n_labels, n_labels)) for _ in edges]
    return model, nt, et


def random_amo_model(rng, n_nodes, n_labels):
    """Random at-most-one instances with disjoint member sets (each indicator
    belongs to at most one logic factor), mirroring the flight-graph pattern."""
    feats = [np.ones(1)] * n_nodes
    slots = [(v, l) for v in range(n_nodes) for l in range(n_labels)]
    rng.shuffle(slots)
    factors = []
    pos = 0
    n_factors = int(rng.integers(1, max(2, n_nodes // 2 + 1)))
    for _ in range(n_factors):
        size = int(rng.integers(2, 4))
        members = slots[pos: pos + size]
        pos += size
        if len(members) >= 2:
            factors.append(LogicFactor("at_most_one", members))
    model = FactorGraphModel(feats, [n_labels] * n_nodes, logic_factors=factors,
                             pairwise="none", topology="general")
    nt = [rng.normal(size=n_labels) for _ in range(n_nodes)]
    return model, nt


def test_exactly_one_three_binary_indicators():
    # three binary nodes, the "on" labels tied by an exactly-one factor,
    # on-scores (0.1, 0.7, 0.3): brute force over the 3 feasible outcomes
    # picks the second node
    feats = [np.ones(1)] * 3
    fac = LogicFactor("exactly_one", [(0, 1), (1, 1), (2, 1)])
    model = FactorGraphModel(feats, [2, 2, 2], logic_factors=[fac],
                             pairwise="none", topology="general")
    nt = [np.array([0.0, s]) for s in (0.1, 0.7, 0.3)]
    res = ad3_map(model, nt, [])
    assert res.converged
    assert res.map_labeling.tolist() == [0, 1, 0]
    best, _ = enumerate_graph_map(model, nt, [])
    assert res.bound >= best - 1e-6


def test_single_node_no_edges_argmax():
    model = FactorGraphModel([np.ones(1)], [4], pairwise="none", topology="general")
    nt = [np.array([0.3, -0.2, 1.5, 0.0])]
    res = ad3_map(model, nt, [])
    assert res.map_labeling.tolist() == [2]
    assert res.converged


@pytest.mark.parametrize("seed", range(12))
def test_tree_tightness(seed):
    rng = np.random.default_rng(1000 + seed)
    n_nodes = int(rng.integers(2, 8))
    n_labels = int(rng.integers(2, 5))
    model, nt, et = random_tree_model(rng, n_nodes, n_labels)
    res = ad3_map(model, nt, et, max_iters=3000)
    best_score, best_y = enumerate_graph_map(model, nt, et)
    got = sum(nt[v][res.map_labeling[v]] for v in range(n_nodes))
    got += sum(et[e][res.map_labeling[u], res.map_labeling[v]]
               for e, (u, v) in enumerate(model.edges))
    assert got == pytest.approx(best_score, abs=1e-6)
    assert res.bound >= best_score - 1e-6


@pytest.mark.parametrize("seed", range(12))
def test_at_most_one_bound_and_enforcement(seed):
    rng = np.random.default_rng(2000 + seed)
    n_nodes = int(rng.integers(2, 7))
    n_labels = int(rng.integers(2, 4))
    model, nt = random_amo_model(rng, n_nodes, n_labels)
    res = ad3_map(model, nt, [], max_iters=3000)
    best_score, _ = enumerate_graph_map(model, nt, [])
    assert res.bound >= best_score - 1e-7
    if res.converged:
        assert model.logic_ok(res.map_labeling), "converged output violates a factor"
        got = sum(nt[v][res.map_labeling[v]] for v in range(n_nodes))
        assert got == pytest.approx(best_score, abs=1e-5)


def test_iteration_budget_returns_unconverged():
    rng = np.random.default_rng(3)
    model, nt, et = random_tree_model(rng, 6, 3)
    res = ad3_map(model, nt, et, max_iters=2)
    assert res.iterations == 2
    assert not res.converged
    assert res.map_labeling.shape == (6,)


def test_residual_log_written(tmp_path):
    rng = np.random.default_rng(4)
    model, nt, et = random_tree_model(rng, 4, 3)
    path = tmp_path / "residuals.csv"
    ad3_map(model, nt, et, max_iters=50, residual_log=str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,primal_residual,dual_residual,eta"
    assert len(lines) > 1


def test_mixed_logic_and_edges():
    rng = np.random.default_rng(5)
    feats = [np.ones(1)] * 4
    fac = LogicFactor("at_most_one", [(0, 1), (2, 1), (3, 0)])
    model = FactorGraphModel(feats, [2, 2, 2, 2], edges=[(0, 1), (1, 2)],
                             logic_factors=[fac], pairwise="none",
                             topology="general")
    nt = [rng.normal(size=2) for _ in range(4)]
    et = [rng.normal(size=(2, 2)) for _ in range(2)]
    res = ad3_map(model, nt, et, max_iters=4000)
    best_score, best_y = enumerate_graph_map(model, nt, et)
    assert res.bound >= best_score - 1e-6
    if res.converged:
        assert model.logic_ok(res.map_labeling)
