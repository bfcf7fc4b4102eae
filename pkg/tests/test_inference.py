import numpy as np
import pytest

from structckn.errors import ConfigurationError, ContractError, NoFeasibleLabelingError
from structckn.graph import NEG_INF, CliqueMarginals, FactorGraphModel
from structckn.inference import (entropy_marginals, kl_marginals, loss_augmented_map,
                                 max_product_chain, peaked_marginals, sum_product_chain)

from oracles import (enumerate_chain, entropy_of_joint, joint_from_marginals,
                     kl_of_joints)


def random_chain(rng, n_nodes, n_labels, scale=1.0):
    nt = [scale * rng.normal(size=n_labels) for _ in range(n_nodes)]
    et = [scale * rng.normal(size=(n_labels, n_labels)) for _ in range(n_nodes - 1)]
    return nt, et


def random_consistent_marginals(rng, n_nodes, n_labels):
    """Draw a random chain CRF and take its exact marginals (hence consistent)."""
    nt, et = random_chain(rng, n_nodes, n_labels)
    _, mu = sum_product_chain(nt, et)
    return mu


# ---------------------------------------------------------------------------
# sum-product
# ---------------------------------------------------------------------------

def test_sum_product_zero_potentials():
    log_z, mu = sum_product_chain([np.zeros(2), np.zeros(2)], [np.zeros((2, 2))])
    assert log_z == pytest.approx(np.log(4), abs=1e-12)
    np.testing.assert_allclose(mu.edge[0], 0.25, atol=1e-12)
    np.testing.assert_allclose(mu.node[0], 0.5, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_sum_product_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    nt, et = random_chain(rng, 5, 3)
    log_z, mu = sum_product_chain(nt, et)
    e_log_z, e_node, e_edge, _, _ = enumerate_chain(nt, et)
    assert log_z == pytest.approx(e_log_z, abs=1e-10)
    for a, b in zip(mu.node, e_node):
        np.testing.assert_allclose(a, b, atol=1e-10)
    for a, b in zip(mu.edge, e_edge):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_sum_product_forced_label():
    nt = [np.array([0.0, NEG_INF, NEG_INF]), np.zeros(3)]
    et = [np.zeros((3, 3))]
    _, mu = sum_product_chain(nt, et)
    np.testing.assert_allclose(mu.node[0], [1.0, 0.0, 0.0], atol=1e-12)


def test_sum_product_single_node():
    log_z, mu = sum_product_chain([np.array([1.0, 0.0])], [])
    assert log_z == pytest.approx(np.log(np.e + 1))
    np.testing.assert_allclose(mu.node[0], [np.e / (np.e + 1), 1 / (np.e + 1)])


def test_sum_product_map_consistency_invariant():
    rng = np.random.default_rng(42)
    for _ in range(20):
        nt, et = random_chain(rng, 4, 3)
        log_z, _ = sum_product_chain(nt, et)
        labels, score = max_product_chain(nt, et)
        assert np.exp(score - log_z) <= 1 + 1e-9


# ---------------------------------------------------------------------------
# max-product
# ---------------------------------------------------------------------------

def test_viterbi_single_node_tie_to_lowest():
    labels, score = max_product_chain([np.array([0.5, 0.5, 0.1])], [])
    assert labels.tolist() == [0]
    assert score == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(8))
def test_viterbi_matches_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    nt, et = random_chain(rng, 6, 4)
    labels, score = max_product_chain(nt, et)
    _, _, _, e_labels, e_score = enumerate_chain(nt, et)
    assert score == pytest.approx(e_score, abs=1e-10)
    assert labels.tolist() == e_labels.tolist()


def test_viterbi_zero_potentials_all_zeros():
    nt = [np.zeros(3)] * 4
    et = [np.zeros((3, 3))] * 3
    labels, _ = max_product_chain(nt, et)
    assert labels.tolist() == [0, 0, 0, 0]


def test_viterbi_all_infeasible_raises():
    nt = [np.full(2, NEG_INF), np.zeros(2)]
    et = [np.zeros((2, 2))]
    with pytest.raises(NoFeasibleLabelingError):
        max_product_chain(nt, et)


# ---------------------------------------------------------------------------
# loss-augmented MAP
# ---------------------------------------------------------------------------

def test_loss_augmented_zero_weight_is_viterbi():
    rng = np.random.default_rng(1)
    nt, et = random_chain(rng, 4, 3)
    y = np.array([0, 1, 2, 0])
    plain = max_product_chain(nt, et)[0]
    aug = loss_augmented_map(nt, et, y, loss_weight=0.0)[0]
    assert plain.tolist() == aug.tolist()


def test_loss_augmented_huge_weight_maximizes_hamming():
    rng = np.random.default_rng(2)
    nt, et = random_chain(rng, 3, 3)
    y = np.array([1, 1, 1])
    labels, _ = loss_augmented_map(nt, et, y, loss_weight=1e9)
    assert np.all(labels != y)


@pytest.mark.parametrize("seed", range(5))
def test_loss_augmented_matches_enumeration(seed):
    rng = np.random.default_rng(200 + seed)
    nt, et = random_chain(rng, 4, 3)
    y = rng.integers(0, 3, size=4)
    w = 0.7
    aug_nt = [t + w * (np.arange(3) != y[i]) for i, t in enumerate(nt)]
    _, _, _, e_labels, _ = enumerate_chain(aug_nt, et)
    labels, _ = loss_augmented_map(nt, et, y, loss_weight=w)
    assert labels.tolist() == e_labels.tolist()


# ---------------------------------------------------------------------------
# entropy and KL over marginals
# ---------------------------------------------------------------------------

def chain_edges(n):
    return [(i, i + 1) for i in range(n - 1)]


def test_entropy_uniform_chain_closed_form():
    node = [np.full(2, 0.5)] * 3
    edge = [np.full((2, 2), 0.25)] * 2
    mu = CliqueMarginals(node, edge)
    h = entropy_marginals(mu, chain_edges(3))
    assert h == pytest.approx(3 * np.log(2), abs=1e-12)
    assert h == pytest.approx(2 * np.log(4) - np.log(2), abs=1e-12)


def test_entropy_peaked_tends_to_zero():
    model = FactorGraphModel([np.ones(1)] * 3, [2, 2, 2], edges=chain_edges(3))
    prev = np.inf
    for eps in (1e-2, 1e-4, 1e-8):
        mu = peaked_marginals(np.array([1, 0, 1]), model, epsilon=eps)
        h = entropy_marginals(mu, model.edges)
        assert 0 < h < prev
        prev = h
    assert prev < 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_entropy_matches_joint_reconstruction(seed):
    rng = np.random.default_rng(300 + seed)
    mu = random_consistent_marginals(rng, 4, 3)
    h = entropy_marginals(mu, chain_edges(4))
    joint = joint_from_marginals(mu, chain_edges(4), 4)
    assert h == pytest.approx(entropy_of_joint(joint), abs=1e-8)


def test_kl_of_identical_marginals_is_zero():
    rng = np.random.default_rng(5)
    mu = random_consistent_marginals(rng, 3, 2)
    assert kl_marginals(mu, mu, chain_edges(3)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_kl_matches_joint_reconstruction(seed):
    rng = np.random.default_rng(400 + seed)
    mu = random_consistent_marginals(rng, 4, 2)
    nu = random_consistent_marginals(rng, 4, 2)
    d = kl_marginals(mu, nu, chain_edges(4))
    pj = joint_from_marginals(mu, chain_edges(4), 4)
    qj = joint_from_marginals(nu, chain_edges(4), 4)
    assert d == pytest.approx(kl_of_joints(pj, qj), abs=1e-8)


def test_kl_peaked_against_smooth_equals_neg_log_prob():
    rng = np.random.default_rng(6)
    nt, et = random_chain(rng, 3, 2)
    _, nu = sum_product_chain(nt, et)
    model = FactorGraphModel([np.ones(1)] * 3, [2, 2, 2], edges=chain_edges(3))
    y, _ = max_product_chain(nt, et)
    eps = 1e-9
    mu = peaked_marginals(y, model, epsilon=eps)
    d = kl_marginals(mu, nu, chain_edges(3))
    qj = joint_from_marginals(nu, chain_edges(3), 3)
    assert d == pytest.approx(-np.log(qj[tuple(y)]), abs=1e-5)


def test_kl_absolute_continuity_violation_is_infinite():
    node_mu = [np.array([0.5, 0.5])]
    node_nu = [np.array([1.0, 0.0])]
    mu = CliqueMarginals(node_mu, [])
    nu = CliqueMarginals(node_nu, [])
    assert kl_marginals(mu, nu, []) == np.inf


def test_entropy_rejects_negative_probabilities():
    mu = CliqueMarginals([np.array([1.1, -0.1])], [])
    with pytest.raises(ContractError):
        entropy_marginals(mu, [])


# ---------------------------------------------------------------------------
# peaked marginals
# ---------------------------------------------------------------------------

def test_peaked_epsilon_zero_forbidden():
    model = FactorGraphModel([np.ones(1)], [2])
    with pytest.raises(ConfigurationError):
        peaked_marginals(np.array([0]), model, epsilon=0.0)


def test_peaked_two_label_distribution():
    model = FactorGraphModel([np.ones(1)], [2])
    mu = peaked_marginals(np.array([0]), model, epsilon=0.1)
    np.testing.assert_allclose(mu.node[0], [0.9, 0.1], atol=1e-12)


def test_peaked_entropy_below_uniform_above_zero():
    model = FactorGraphModel([np.ones(1)] * 2, [3, 3], edges=[(0, 1)])
    mu = peaked_marginals(np.array([2, 1]), model, epsilon=1e-3)
    h = entropy_marginals(mu, model.edges)
    uniform = CliqueMarginals.uniform(model)
    assert 0 < h < entropy_marginals(uniform, model.edges)


def test_peaked_single_label_node_gets_unit_mass():
    model = FactorGraphModel([np.ones(1)], [1])
    mu = peaked_marginals(np.array([0]), model, epsilon=1e-6)
    np.testing.assert_allclose(mu.node[0], [1.0])
