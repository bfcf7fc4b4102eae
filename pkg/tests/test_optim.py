import numpy as np
import pytest

from structckn.errors import ConfigurationError
from structckn.graph import CliqueMarginals, FactorGraphModel, primal_objective
from structckn.inference import max_product_chain
from structckn.optim import (BcfwState, bcfw_init, bcfw_step, bcfw_train, chain_oracle,
                             duality_gap, newton_linesearch, sdca_epoch, sdca_init,
                             sdca_sample, sdca_step, sdca_train)


def chain_example(rng, n_nodes=3, n_labels=3, p=4, scale=1.0, w_true=None):
    feats = [scale * rng.normal(size=p) for _ in range(n_nodes)]
    model = FactorGraphModel(feats, [n_labels] * n_nodes,
                             edges=[(i, i + 1) for i in range(n_nodes - 1)])
    if w_true is None:
        y = rng.integers(0, n_labels, size=n_nodes)
    else:
        nt, et = model.potentials(w_true)
        y, _ = max_product_chain(nt, et)
    return model, y


def toy_dataset(rng, n=6, planted=False, **kw):
    w_true = None
    if planted:
        probe, _ = chain_example(rng, **kw)
        w_true = rng.normal(size=probe.weight_dim)
    return [chain_example(rng, w_true=w_true, **kw) for _ in range(n)]


# ---------------------------------------------------------------------------
# Newton line search
# ---------------------------------------------------------------------------

def test_linesearch_linear_derivative():
    res = newton_linesearch(lambda g: 1 - 2 * g, lambda g: -2.0)
    assert res.gamma == pytest.approx(0.5, abs=1e-10)
    assert res.converged


def test_linesearch_positive_derivative_returns_one():
    res = newton_linesearch(lambda g: 0.3, lambda g: -1e-6)
    assert res.gamma == 1.0


def test_linesearch_negative_derivative_returns_zero():
    res = newton_linesearch(lambda g: -0.3, lambda g: -1e-6)
    assert res.gamma == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_linesearch_concave_quadratic_analytic_root(seed):
    rng = np.random.default_rng(seed)
    a = -np.exp(rng.normal())            # negative curvature
    root = rng.uniform(0.05, 0.95)
    b = -a * root                        # dphi = a * g + b has root at `root`
    res = newton_linesearch(lambda g: a * g + b, lambda g: a)
    assert res.gamma == pytest.approx(root, abs=1e-8)


def test_linesearch_budget_exhaustion_flags():
    # derivative with a kink the Newton model can't resolve in one iteration
    res = newton_linesearch(lambda g: 1e-3 if g < 0.5 else -1e-3,
                            lambda g: -1e-12, max_iter=3)
    assert not res.converged
    assert 0.0 < res.gamma < 1.0


# ---------------------------------------------------------------------------
# SDCA
# ---------------------------------------------------------------------------

def test_init_uniform_marginals_and_default_lambda():
    rng = np.random.default_rng(0)
    data = toy_dataset(rng, n=4)
    state = sdca_init(data, seed=1)
    assert state.lam == pytest.approx(1.0 / 4)
    for m, (model, _) in zip(state.mu, data):
        for v in range(model.n_nodes):
            np.testing.assert_allclose(m.node[v], 1.0 / model.n_labels[v])
    np.testing.assert_array_equal(state.gaps, 100.0)


def test_init_conjugate_invariant():
    rng = np.random.default_rng(1)
    state = sdca_init(toy_dataset(rng), seed=2)
    np.testing.assert_allclose(state.w, state.conjugate_weights(), atol=1e-6)


def test_init_empty_dataset_raises():
    with pytest.raises(ConfigurationError):
        sdca_init([], lam=1.0)


def test_sample_closed_form_probability():
    rng = np.random.default_rng(2)
    state = sdca_init(toy_dataset(rng, n=5), seed=3)
    state.gaps = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
    hits = sum(sdca_sample(state) == 1 for _ in range(200000))
    expected = 0.8 * (1 / 5) + 0.2 * 1.0
    se = np.sqrt(expected * (1 - expected) / 200000)
    assert abs(hits / 200000 - expected) < 3 * se


def test_sample_zero_gaps_fall_back_to_uniform():
    rng = np.random.default_rng(3)
    state = sdca_init(toy_dataset(rng, n=4), seed=4)
    state.gaps = np.zeros(4)
    counts = np.bincount([sdca_sample(state) for _ in range(40000)], minlength=4)
    assert counts.min() > 40000 / 4 * 0.9


def test_step_fixed_point_when_marginals_match():
    rng = np.random.default_rng(4)
    data = toy_dataset(rng, n=2)
    state = sdca_init(data, seed=5)
    # move example 0's marginals to the oracle's output, conjugate the weights
    state.mu[0] = chain_oracle(state.w, data[0][0])
    w_before = state.w.copy()
    # oracle at the NEW w differs; instead test the true fixed point: a state
    # whose mu equals nu(w(mu)) is found at the optimum, so run to a tiny gap
    state = sdca_train(data, lam=0.5, epochs=400, seed=6, target_gap=1e-12)
    mu_prev = [m.copy() for m in state.mu]
    w_prev = state.w.copy()
    gamma, gap = sdca_step(state, 0)
    assert gap < 1e-9
    np.testing.assert_allclose(state.w, w_prev, atol=1e-7)
    for a, b in zip(state.mu[0].node, mu_prev[0].node):
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_step_gamma_matches_grid_search():
    rng = np.random.default_rng(5)
    model = FactorGraphModel([rng.normal(size=3)], [4], pairwise="none")
    y = np.array([1])
    data = [(model, y)]
    state = sdca_init(data, lam=0.7, seed=7)
    # replicate the line-search objective by hand on a grid
    from structckn.inference import entropy_marginals
    mu = state.mu[0]
    nu = chain_oracle(state.w, model)
    delta = nu.combine(mu, 1.0, -1.0)
    v = -model.feature_expectation(delta) / (state.lam * 1)
    grid = np.linspace(0.0, 1.0, 10001)
    vals = []
    for g in grid:
        node = [mu.node[0] + g * delta.node[0]]
        h = entropy_marginals(CliqueMarginals(node, []), [])
        w = state.w + g * v
        vals.append(h - 0.5 * state.lam * 1 * float(w @ w))
    g_star = grid[int(np.argmax(vals))]
    gamma, _ = sdca_step(state, 0)
    assert abs(gamma - g_star) < 1e-3


def test_dual_objective_monotone_and_gap_shrinks():
    rng = np.random.default_rng(6)
    data = toy_dataset(rng, n=8, n_nodes=4, n_labels=3)
    state = sdca_init(data, lam=1.0 / 8, seed=8)
    duals = [state.dual_objective()]
    for _ in range(40):
        sdca_epoch(state, check_monotone=True)
        duals.append(state.dual_objective())
    assert all(b >= a - 1e-9 for a, b in zip(duals, duals[1:]))
    assert duality_gap(state) < 1e-4


def test_duality_gap_zero_on_symmetric_featureless_problem():
    model = FactorGraphModel([np.zeros(2)], [3], pairwise="none")
    data = [(model, np.array([0]))]
    state = sdca_init(data, lam=1.0, seed=9)
    assert duality_gap(state) == pytest.approx(0.0, abs=1e-12)


def test_duality_gap_bounds_primal_suboptimality():
    rng = np.random.default_rng(7)
    data = toy_dataset(rng, n=5, n_nodes=3, n_labels=2)
    lam = 0.2
    ref = sdca_train(data, lam=lam, epochs=2000, seed=10, target_gap=1e-12)
    p_best = primal_objective(ref.w, data, lam)
    state = sdca_init(data, lam=lam, seed=11)
    for _ in range(30):
        sdca_epoch(state)
        gap = duality_gap(state)
        subopt = primal_objective(state.w, data, lam) - p_best
        assert gap >= subopt - 1e-9
        assert gap >= -1e-7


def test_conjugacy_invariant_after_steps():
    rng = np.random.default_rng(8)
    data = toy_dataset(rng, n=5)
    state = sdca_init(data, seed=12)
    for _ in range(5):
        sdca_epoch(state)
    np.testing.assert_allclose(state.w, state.conjugate_weights(), atol=1e-6)


def test_gap_nonnegativity_of_recomputed_gaps():
    rng = np.random.default_rng(9)
    data = toy_dataset(rng, n=4)
    state = sdca_init(data, seed=13)
    for _ in range(3):
        sdca_epoch(state)
    assert np.all(state.gaps >= -1e-9)


# ---------------------------------------------------------------------------
# BCFW
# ---------------------------------------------------------------------------

def test_bcfw_truthful_oracle_keeps_init():
    # at the fresh init (w_i = 0, ell_i = 0) with zero weights, the
    # loss-augmented MAP never returns y_true unless everything ties; with a
    # zero-loss atom the step is a no-op and never increases the dual
    rng = np.random.default_rng(10)
    data = toy_dataset(rng, n=3)
    state = bcfw_init(data, lam=1.0, seed=14)
    before = state.dual_objective()
    bcfw_step(state, 0, loss_weight=0.0)   # zero loss: oracle returns plain MAP
    # zero weights, zero loss: psi against the MAP of an all-zero score table
    assert state.dual_objective() >= before - 1e-12


def test_bcfw_single_example_closed_form_step():
    # one example, one node, two labels, hand-computable first step
    feats = np.array([1.0])
    model = FactorGraphModel([feats], [2], pairwise="none")
    y = np.array([0])
    lam = 0.5
    state = bcfw_init([(model, y)], lam=lam, seed=15)
    gamma = bcfw_step(state, 0, loss_weight=1.0)
    # oracle at w=0: augmented scores (0, 1) -> y_hat = 1
    # psi = F(0) - F(1) = [1, -1]; w_s = psi / (lam*1) = [2, -2]; ell_s = 1
    # gamma* = (lam (0 - w_s) . 0 - 0 + 1) / (lam ||w_s||^2) = 1 / (0.5 * 8) = 0.25
    assert gamma == pytest.approx(0.25)
    np.testing.assert_allclose(state.w, [0.5, -0.5])
    assert state.ell == pytest.approx(0.25)


def test_bcfw_invariants_weights_sum_and_step_range():
    rng = np.random.default_rng(11)
    data = toy_dataset(rng, n=6)
    state = bcfw_init(data, seed=16)
    for _ in range(60):
        i = int(state.rng.integers(state.n))
        gamma = bcfw_step(state, i)
        assert 0.0 <= gamma <= 1.0
    np.testing.assert_allclose(state.w, state.w_blocks.sum(axis=0), atol=1e-8)


def test_bcfw_dual_non_decreasing():
    rng = np.random.default_rng(12)
    data = toy_dataset(rng, n=5)
    state = bcfw_init(data, seed=17)
    prev = state.dual_objective()
    for _ in range(50):
        i = int(state.rng.integers(state.n))
        bcfw_step(state, i)
        cur = state.dual_objective()
        assert cur >= prev - 1e-9
        prev = cur


def test_bcfw_training_reduces_error():
    rng = np.random.default_rng(13)
    data = toy_dataset(rng, n=10, n_nodes=4, n_labels=3, scale=2.0, planted=True)

    def error(w):
        wrong = total = 0
        for model, y in data:
            nt, et = model.potentials(w)
            pred, _ = max_product_chain(nt, et)
            wrong += int(np.sum(pred != y))
            total += len(y)
        return wrong / total

    state = bcfw_train(data, lam=0.01, epochs=60, seed=18)
    assert error(state.w) < 0.5
