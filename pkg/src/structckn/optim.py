"""Structured learners: stochastic dual coordinate ascent over clique
marginals (with duality-gap sampling and a Newton-Raphson exact line search)
and block-coordinate Frank-Wolfe for the margin-based alternative.

A dataset is a list of (FactorGraphModel, y_true) pairs sharing one weight
layout. A marginalization oracle maps (w, model) to fresh clique marginals.
"""

import time
from collections import namedtuple

import numpy as np

from .ad3 import ad3_map
from .errors import ConfigurationError, NumericError
from .graph import CliqueMarginals
from .inference import (entropy_marginals, kl_marginals, loss_augmented_map,
                        peaked_marginals, sum_product_chain)

LOG_FLOOR = 1e-300

LineSearchResult = namedtuple("LineSearchResult", "gamma converged iterations")


# ---------------------------------------------------------------------------
# marginalization oracles
# ---------------------------------------------------------------------------

def chain_oracle(w, model):
    """Exact chain marginals of p(y | x; w)."""
    node_tables, edge_tables = model.potentials(w)
    _, mu = sum_product_chain(node_tables, edge_tables)
    return mu


def make_peaked_oracle(epsilon=1e-6, max_iters=1000, eta=0.1, residual_tol=1e-6):
    """Approximate oracle for general graphs: AD3 MAP, then peaked marginals."""

    def oracle(w, model):
        node_tables, edge_tables = model.potentials(w)
        res = ad3_map(model, node_tables, edge_tables, max_iters=max_iters,
                      eta=eta, residual_tol=residual_tol)
        return peaked_marginals(res.map_labeling, model, epsilon=epsilon)

    return oracle


def oracle_for(model):
    return chain_oracle if model.topology == "chain" and not model.logic_factors \
        else make_peaked_oracle()


# ---------------------------------------------------------------------------
# Newton-Raphson line search
# ---------------------------------------------------------------------------

def newton_linesearch(dphi, d2phi, gamma0=0.5, tol=1e-10, max_iter=50):
    """Root of a decreasing derivative on [0, 1].

    Boundary cases return 0 or 1 outright; Newton steps that leave the current
    bracket fall back to bisection; an exhausted budget returns the bracket
    midpoint with converged=False.
    """
    d0 = dphi(0.0)
    if d0 <= tol:
        return LineSearchResult(0.0, True, 0)
    d1 = dphi(1.0)
    if d1 >= -tol:
        return LineSearchResult(1.0, True, 0)
    lo, hi = 0.0, 1.0
    gamma = min(max(gamma0, 1e-12), 1.0 - 1e-12)
    for it in range(1, max_iter + 1):
        d = dphi(gamma)
        if abs(d) < tol:
            return LineSearchResult(gamma, True, it)
        if d > 0:
            lo = gamma
        else:
            hi = gamma
        dd = d2phi(gamma)
        if dd > 1e-9:
            raise NumericError(f"line search is not concave (phi''={dd})")
        step = gamma - d / dd if dd < -1e-300 else None
        gamma = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15:
            return LineSearchResult(0.5 * (lo + hi), True, it)
    return LineSearchResult(0.5 * (lo + hi), False, max_iter)


# ---------------------------------------------------------------------------
# SDCA
# ---------------------------------------------------------------------------

class SdcaState:
    """Per-example clique marginals (with explicit logs), the conjugate
    weights they induce, and per-example duality-gap estimates."""

    def __init__(self, dataset, lam, rng, mu, w, gaps):
        self.dataset = dataset
        self.n = len(dataset)
        self.lam = float(lam)
        self.rng = rng
        self.mu = mu
        self.log_mu = [m.logs(LOG_FLOOR) for m in mu]
        self.w = w
        self.gaps = gaps
        self.step_count = 0
        self._entropies = np.array([
            entropy_marginals(m, ex[0].edges) for m, ex in zip(mu, dataset)])

    def conjugate_weights(self):
        """Recompute w = (1/(lam n)) sum_i (F(x_i, y_i) - E_mu_i[F]) from scratch."""
        d = self.dataset[0][0].weight_dim
        acc = np.zeros(d)
        for (model, y), m in zip(self.dataset, self.mu):
            acc += model.feature_map(y) - model.feature_expectation(m)
        return acc / (self.lam * self.n)

    def dual_objective(self):
        """(1/n) sum_i H~(mu_i) - (lam/2) ||w||^2, the objective SDCA ascends."""
        return float(self._entropies.mean() - 0.5 * self.lam * (self.w @ self.w))


def sdca_init(dataset, lam=None, seed=0):
    """Uniform marginals, conjugate weights, gap estimates seeded at 100.

    lam defaults to 1/n.
    """
    if not dataset:
        raise ConfigurationError("cannot initialize SDCA on an empty dataset")
    n = len(dataset)
    lam = 1.0 / n if lam is None else float(lam)
    if not lam > 0:
        raise ConfigurationError("lambda must be positive")
    mu = [CliqueMarginals.uniform(model) for model, _ in dataset]
    state = SdcaState(dataset, lam, np.random.default_rng(seed), mu,
                      np.zeros(dataset[0][0].weight_dim), np.full(n, 100.0))
    state.w = state.conjugate_weights()
    return state


def sdca_sample(state, uniform_frac=0.8):
    """Uniform with probability uniform_frac, else proportional to the gaps."""
    n = state.n
    if state.rng.random() < uniform_frac:
        return int(state.rng.integers(n))
    total = state.gaps.sum()
    if total <= 0:
        return int(state.rng.integers(n))
    return int(state.rng.choice(n, p=state.gaps / total))


def _counting_sum(values_edge, values_node, deg):
    """sum over edge cliques minus (deg - 1)-weighted node separators."""
    total = sum(float(t.sum()) for t in values_edge)
    for v, tab in enumerate(values_node):
        if deg[v] != 1:
            total -= (deg[v] - 1) * float(tab.sum())
    return total


def sdca_step(state, i, oracle=None):
    """One block update: oracle marginals, ascent direction, Newton line
    search on the dual, in-place state update. Returns (gamma, gap_i) where
    gap_i is the divergence measured before the update."""
    model, _ = state.dataset[i]
    if oracle is None:
        oracle = oracle_for(model)
    mu = state.mu[i]
    nu = oracle(state.w, model)
    gap_i = kl_marginals(mu, nu, model.edges)
    state.gaps[i] = gap_i
    if not np.isfinite(gap_i):
        raise NumericError(f"infinite divergence gap at example {i}")

    delta = nu.combine(mu, 1.0, -1.0)
    v_dir = -model.feature_expectation(delta) / (state.lam * state.n)
    lam_n = state.lam * state.n
    w_dot_v = float(state.w @ v_dir)
    v_dot_v = float(v_dir @ v_dir)
    deg = model.degrees()

    if gap_i < 1e-14 and v_dot_v < 1e-30:
        state.step_count += 1
        return 0.0, gap_i

    def blend(gamma):
        node = [m + gamma * d for m, d in zip(mu.node, delta.node)]
        edge = [m + gamma * d for m, d in zip(mu.edge, delta.edge)]
        return node, edge

    def dphi(gamma):
        node, edge = blend(gamma)
        ent = -_counting_sum(
            [d * np.log(np.maximum(e, LOG_FLOOR)) for d, e in zip(delta.edge, edge)],
            [d * np.log(np.maximum(n_, LOG_FLOOR)) for d, n_ in zip(delta.node, node)],
            deg)
        return ent - lam_n * (w_dot_v + gamma * v_dot_v)

    def d2phi(gamma):
        node, edge = blend(gamma)
        ent = -_counting_sum(
            [d * d / np.maximum(e, LOG_FLOOR) for d, e in zip(delta.edge, edge)],
            [d * d / np.maximum(n_, LOG_FLOOR) for d, n_ in zip(delta.node, node)],
            deg)
        return ent - lam_n * v_dot_v

    def phi(gamma):
        node, edge = blend(gamma)
        h = entropy_marginals(CliqueMarginals(node, edge), model.edges)
        wnorm = (state.w @ state.w) + 2 * gamma * w_dot_v + gamma * gamma * v_dot_v
        return h - 0.5 * lam_n * wnorm

    result = newton_linesearch(dphi, d2phi)
    gamma = result.gamma
    if gamma > 0 and phi(gamma) < phi(0.0) - 1e-9:
        gamma = 0.0

    if gamma > 0:
        node, edge = blend(gamma)
        state.mu[i] = CliqueMarginals(node, edge)
        state.log_mu[i] = state.mu[i].logs(LOG_FLOOR)
        state.w = state.w + gamma * v_dir
        state._entropies[i] = entropy_marginals(state.mu[i], model.edges)
    state.step_count += 1
    return gamma, gap_i


def duality_gap(state, dataset=None, oracle=None):
    """Certified optimality gap P(w) - D(mu) from one oracle sweep:

        (1/n) sum_i D~(mu_i || nu_i(w))  +  (lam/2) ||w - w_hat(mu)||^2

    The correction term guards against a stale w and vanishes under the
    conjugacy invariant; the result is non-negative, zero only at the optimum,
    and upper-bounds the primal sub-optimality P(w) - P(w*).
    """
    dataset = dataset if dataset is not None else state.dataset
    kl_sum = 0.0
    for i, (model, _) in enumerate(dataset):
        orc = oracle or oracle_for(model)
        nu = orc(state.w, model)
        kl_sum += kl_marginals(state.mu[i], nu, model.edges)
    drift = state.w - state.conjugate_weights()
    gap = kl_sum / len(dataset) + 0.5 * state.lam * float(drift @ drift)
    if gap < -1e-7:
        raise NumericError(f"duality gap {gap} fell below tolerance")
    return gap


def sdca_epoch(state, oracle=None, uniform_frac=0.8, check_monotone=False):
    """n sampled steps; returns the mean sampled gap estimate."""
    gaps = []
    for _ in range(state.n):
        i = sdca_sample(state, uniform_frac)
        before = state.dual_objective() if check_monotone else None
        _, g = sdca_step(state, i, oracle)
        if check_monotone and state.dual_objective() < before - 1e-9:
            raise NumericError("dual objective decreased during an SDCA step")
        gaps.append(g)
    return float(np.mean(gaps))


def sdca_train(dataset, lam=None, epochs=50, seed=0, oracle=None, uniform_frac=0.8,
               target_gap=None, gap_check_every=1, eval_fn=None, log_rows=None,
               check_monotone=False, state=None):
    """Run SDCA for a number of epochs, optionally until a duality-gap target.

    log_rows, when given a list, receives a dict per epoch with the columns of
    the training-log CSV.
    """
    if state is None:
        state = sdca_init(dataset, lam, seed)
    start = time.time()
    for epoch in range(1, epochs + 1):
        sdca_epoch(state, oracle, uniform_frac, check_monotone)
        row = {"epoch": epoch, "step": state.step_count, "primal": "",
               "dual": state.dual_objective(), "gap": "", "test_error": "",
               "wall_seconds": time.time() - start}
        if epoch % gap_check_every == 0 or epoch == epochs:
            gap = duality_gap(state, dataset, oracle)
            row["gap"] = gap
            row["primal"] = state.dual_objective() + gap
            if eval_fn is not None:
                row["test_error"] = eval_fn(state.w)
            if log_rows is not None:
                log_rows.append(row)
            if target_gap is not None and gap < target_gap:
                break
        elif log_rows is not None:
            log_rows.append(row)
    return state


TRAINING_LOG_COLUMNS = ["epoch", "step", "primal", "dual", "gap", "test_error",
                        "wall_seconds"]


def write_training_log(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(TRAINING_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in TRAINING_LOG_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# BCFW for the structured SVM
# ---------------------------------------------------------------------------

class BcfwState:
    """Weights w = sum_i w_i with per-example blocks and loss accumulators."""

    def __init__(self, dataset, lam, rng, averaging=False):
        self.dataset = dataset
        self.n = len(dataset)
        self.lam = float(lam)
        self.rng = rng
        d = dataset[0][0].weight_dim
        self.w = np.zeros(d)
        self.w_blocks = np.zeros((self.n, d))
        self.ell = 0.0
        self.ell_blocks = np.zeros(self.n)
        self.averaging = averaging
        self.w_avg = np.zeros(d) if averaging else None
        self.k = 0

    def dual_objective(self):
        return self.ell - 0.5 * self.lam * float(self.w @ self.w)


def bcfw_init(dataset, lam=None, seed=0, averaging=False):
    if not dataset:
        raise ConfigurationError("cannot initialize BCFW on an empty dataset")
    lam = 1.0 / len(dataset) if lam is None else float(lam)
    return BcfwState(dataset, lam, np.random.default_rng(seed), averaging)


def bcfw_step(state, i, loss_weight=1.0):
    """One block update from the loss-augmented MAP oracle; closed-form line
    search clipped to [0, 1]. Returns gamma."""
    model, y_true = state.dataset[i]
    node_tables, edge_tables = model.potentials(state.w)
    y_hat, _ = loss_augmented_map(node_tables, edge_tables, y_true, loss_weight)

    psi = model.feature_map(y_true) - model.feature_map(y_hat)
    w_s = psi / (state.lam * state.n)
    ell_s = loss_weight * float(np.sum(np.asarray(y_true) != y_hat)) / state.n

    w_diff = state.w_blocks[i] - w_s
    denom = state.lam * float(w_diff @ w_diff)
    if denom <= 1e-30:
        gamma = 0.0
    else:
        gamma = (state.lam * float(w_diff @ state.w)
                 - state.ell_blocks[i] + ell_s) / denom
        gamma = min(max(gamma, 0.0), 1.0)

    new_block = (1 - gamma) * state.w_blocks[i] + gamma * w_s
    state.w = state.w + (new_block - state.w_blocks[i])
    state.w_blocks[i] = new_block
    new_ell = (1 - gamma) * state.ell_blocks[i] + gamma * ell_s
    state.ell = state.ell + (new_ell - state.ell_blocks[i])
    state.ell_blocks[i] = new_ell
    state.k += 1
    if state.averaging:
        state.w_avg = (state.w_avg * (state.k - 1) + state.w) / state.k
    return gamma


def bcfw_train(dataset, lam=None, epochs=50, seed=0, loss_weight=1.0,
               averaging=False, eval_fn=None, log_rows=None, state=None):
    if state is None:
        state = bcfw_init(dataset, lam, seed, averaging)
    start = time.time()
    for epoch in range(1, epochs + 1):
        for _ in range(state.n):
            i = int(state.rng.integers(state.n))
            bcfw_step(state, i, loss_weight)
        if log_rows is not None:
            row = {"epoch": epoch, "step": state.k, "primal": "",
                   "dual": state.dual_objective(), "gap": "",
                   "test_error": eval_fn(state.w) if eval_fn else "",
                   "wall_seconds": time.time() - start}
            log_rows.append(row)
    return state
