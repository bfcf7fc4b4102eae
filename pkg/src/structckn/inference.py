"""Exact chain inference (sum-product / max-product), tree-entropy and
tree-KL of clique marginals, and the peaked-marginal stand-in used when only
an approximate MAP is available."""

import numpy as np

from .errors import ConfigurationError, ContractError, NoFeasibleLabelingError, TopologyError
from .graph import NEG_INF, CliqueMarginals

_IMPOSSIBLE = NEG_INF / 10  # anything below this is treated as -infinity


class InferenceResult:
    """Outcome of a MAP / marginalization call."""

    __slots__ = ("map_labeling", "log_partition", "marginals", "bound",
                 "converged", "iterations")

    def __init__(self, map_labeling=None, log_partition=None, marginals=None,
                 bound=None, converged=True, iterations=0):
        self.map_labeling = map_labeling
        self.log_partition = log_partition
        self.marginals = marginals
        self.bound = bound
        self.converged = converged
        self.iterations = iterations


def _logsumexp(arr, axis=None):
    """Stable log-sum-exp that maps all-impossible slices to the sentinel."""
    arr = np.asarray(arr, dtype=np.float64)
    m = np.max(arr, axis=axis, keepdims=True)
    safe = np.where(m > _IMPOSSIBLE, m, 0.0)
    total = np.maximum(np.sum(np.exp(arr - safe), axis=axis, keepdims=True), 1e-320)
    out = np.where(m > _IMPOSSIBLE, safe + np.log(total), NEG_INF)
    if axis is None:
        return float(out.item())
    return np.squeeze(out, axis=axis)


def _check_chain_potentials(node_tables, edge_tables):
    if len(edge_tables) != max(len(node_tables) - 1, 0):
        raise TopologyError(
            f"chain with {len(node_tables)} nodes needs {len(node_tables) - 1} "
            f"edge tables, got {len(edge_tables)}")
    for t, tab in enumerate(edge_tables):
        if tab.shape != (len(node_tables[t]), len(node_tables[t + 1])):
            raise TopologyError(f"edge table {t} has shape {tab.shape}")


def sum_product_chain(node_tables, edge_tables):
    """Exact forward-backward in log space.

    Returns (log_partition, CliqueMarginals); potentials at or below the
    -infinity sentinel are absorbing.
    """
    _check_chain_potentials(node_tables, edge_tables)
    n = len(node_tables)
    alphas = [np.asarray(node_tables[0], dtype=np.float64)]
    for t in range(1, n):
        prev = alphas[-1][:, None] + edge_tables[t - 1]
        alphas.append(np.asarray(node_tables[t]) + _logsumexp(prev, axis=0))
    log_z = _logsumexp(alphas[-1])
    if log_z <= _IMPOSSIBLE:
        raise NoFeasibleLabelingError("all labelings have -infinity potential")

    betas = [np.zeros(len(node_tables[-1]))]
    for t in range(n - 2, -1, -1):
        nxt = edge_tables[t] + (node_tables[t + 1] + betas[0])[None, :]
        betas.insert(0, _logsumexp(nxt, axis=1))

    node_marg = []
    for t in range(n):
        log_m = alphas[t] + betas[t] - log_z
        m = np.exp(np.where(log_m > _IMPOSSIBLE, log_m, -np.inf))
        node_marg.append(m / m.sum())
    edge_marg = []
    for t in range(n - 1):
        log_m = (alphas[t][:, None] + edge_tables[t]
                 + (node_tables[t + 1] + betas[t + 1])[None, :] - log_z)
        m = np.exp(np.where(log_m > _IMPOSSIBLE, log_m, -np.inf))
        edge_marg.append(m / m.sum())
    return log_z, CliqueMarginals(node_marg, edge_marg)


def max_product_chain(node_tables, edge_tables):
    """Viterbi decoding; ties resolve to the lowest label index at every
    backtrack step. Returns (labels, score)."""
    _check_chain_potentials(node_tables, edge_tables)
    n = len(node_tables)
    delta = np.asarray(node_tables[0], dtype=np.float64).copy()
    back = []
    for t in range(1, n):
        cand = delta[:, None] + edge_tables[t - 1]
        best_prev = np.argmax(cand, axis=0)          # first max = lowest index
        delta = np.asarray(node_tables[t]) + cand[best_prev, np.arange(cand.shape[1])]
        back.append(best_prev)
    best_last = int(np.argmax(delta))
    score = float(delta[best_last])
    if score <= _IMPOSSIBLE:
        raise NoFeasibleLabelingError("every labeling is forbidden")
    labels = [best_last]
    for t in range(n - 2, -1, -1):
        labels.insert(0, int(back[t][labels[0]]))
    return np.array(labels, dtype=int), score


def loss_augmented_map(node_tables, edge_tables, y_true, loss_weight=1.0):
    """Viterbi over Hamming-augmented potentials: +loss_weight on every unary
    entry whose label differs from y_true."""
    augmented = []
    for t, tab in enumerate(node_tables):
        aug = np.asarray(tab, dtype=np.float64) + loss_weight
        aug[y_true[t]] -= loss_weight
        augmented.append(aug)
    return max_product_chain(augmented, edge_tables)


# ---------------------------------------------------------------------------
# tree entropy / KL from clique marginals
# ---------------------------------------------------------------------------

def _degrees(n_nodes, edges):
    deg = np.zeros(n_nodes, dtype=int)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    return deg

def _entropy_table(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12):
        raise ContractError("negative probability in marginals")
    p = np.maximum(p, 0.0)
    nz = p > 0
    return -float(np.sum(p[nz] * np.log(p[nz])))


def entropy_marginals(mu, edges, n_nodes=None):
    """Junction-tree entropy sum_C H(mu_C) - sum_S H(mu_S), with edge cliques
    and internal-node separators (Bethe counting, exact on trees)."""
    if n_nodes is None:
        n_nodes = len(mu.node)
    deg = _degrees(n_nodes, edges)
    h = sum(_entropy_table(tab) for tab in mu.edge)
    h -= sum((deg[v] - 1) * _entropy_table(mu.node[v]) for v in range(n_nodes))
    return h


def _kl_table(p, q):
    p = np.maximum(np.asarray(p, dtype=np.float64), 0.0)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return np.inf
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def kl_marginals(mu, nu, edges, n_nodes=None):
    """KL divergence of the joints reconstructed from consistent marginals,
    with the same clique/separator counting as entropy_marginals. Returns
    +inf when absolute continuity fails."""
    if n_nodes is None:
        n_nodes = len(mu.node)
    deg = _degrees(n_nodes, edges)
    parts = [_kl_table(pe, qe) for pe, qe in zip(mu.edge, nu.edge)]
    if any(np.isinf(x) for x in parts):
        return np.inf
    d = sum(parts)
    for v in range(n_nodes):
        if deg[v] != 1:
            term = _kl_table(mu.node[v], nu.node[v])
            if np.isinf(term):
                return np.inf
            d -= (deg[v] - 1) * term
    if d < -1e-9:
        raise ContractError(f"tree KL came out {d} < 0; marginals inconsistent?")
    return max(d, 0.0)


def peaked_marginals(map_labeling, model, epsilon=1e-6):
    """Smoothed point-mass marginals at an (approximate) MAP labeling.

    Each node puts 1 - epsilon on its MAP label and epsilon / (M - 1)
    elsewhere; edge marginals are the corresponding products. epsilon must be
    strictly positive so downstream entropy terms stay finite.
    """
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be strictly positive")
    if epsilon >= 1:
        raise ConfigurationError("epsilon must be below 1")
    return CliqueMarginals.dirac(model, map_labeling, epsilon=epsilon)
