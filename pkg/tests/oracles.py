"""Independent brute-force oracles used to freeze expected values.

Everything here is deliberately naive (enumeration, double loops, dense
tableaus) and shares no code with the implementation under test.
"""

import itertools

import numpy as np

IMPOSSIBLE = -1e29


def enumerate_chain(node_tables, edge_tables):
    """Exhaustive log-partition, marginals and MAP of a chain.

    The MAP tie policy mirrors backtracking Viterbi: among maximizers, prefer
    the labeling whose REVERSED label tuple is lexicographically smallest.
    """
    sizes = [len(t) for t in node_tables]
    n = len(sizes)
    scores = {}
    for yy in itertools.product(*(range(m) for m in sizes)):
        s = sum(node_tables[t][yy[t]] for t in range(n))
        s += sum(edge_tables[t][yy[t], yy[t + 1]] for t in range(n - 1))
        scores[yy] = s
    smax = max(scores.values())
    log_z = smax + np.log(sum(np.exp(s - smax) for s in scores.values()))

    node_marg = [np.zeros(m) for m in sizes]
    edge_marg = [np.zeros((sizes[t], sizes[t + 1])) for t in range(n - 1)]
    for yy, s in scores.items():
        pr = np.exp(s - log_z)
        for t in range(n):
            node_marg[t][yy[t]] += pr
        for t in range(n - 1):
            edge_marg[t][yy[t], yy[t + 1]] += pr

    best = None
    for yy, s in scores.items():
        if s <= IMPOSSIBLE:
            continue
        key = (-s, tuple(reversed(yy)))
        if best is None or key < best[0]:
            best = (key, yy, s)
    map_y = np.array(best[1]) if best else None
    map_score = best[2] if best else None
    return log_z, node_marg, edge_marg, map_y, map_score


def enumerate_graph_map(model, node_tables, edge_tables):
    """Best feasible labeling (score and labels) of a general factor graph."""
    sizes = model.n_labels
    best_s, best_y = -np.inf, None
    for yy in itertools.product(*(range(m) for m in sizes)):
        if not model.logic_ok(np.array(yy)):
            continue
        s = sum(node_tables[v][yy[v]] for v in range(len(sizes)))
        for e, (u, v) in enumerate(model.edges):
            s += edge_tables[e][yy[u], yy[v]]
        if s > best_s:
            best_s, best_y = s, np.array(yy)
    return best_s, best_y


def joint_from_marginals(mu, edges, n_nodes):
    """Reconstruct the tree joint prod_C mu_C / prod_S mu_S as a dict."""
    sizes = [len(m) for m in mu.node]
    deg = np.zeros(n_nodes, dtype=int)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    joint = {}
    for yy in itertools.product(*(range(m) for m in sizes)):
        p = 1.0
        for e, (u, v) in enumerate(edges):
            p *= mu.edge[e][yy[u], yy[v]]
        for v in range(n_nodes):
            if deg[v] == 0:
                p *= mu.node[v][yy[v]]
            elif deg[v] > 1:
                denom = mu.node[v][yy[v]] ** (deg[v] - 1)
                p = p / denom if denom > 0 else 0.0
        joint[yy] = p
    return joint


def entropy_of_joint(joint):
    return -sum(p * np.log(p) for p in joint.values() if p > 1e-300)


def kl_of_joints(pj, qj):
    out = 0.0
    for yy, p in pj.items():
        if p <= 1e-300:
            continue
        q = qj.get(yy, 0.0)
        if q <= 0:
            return np.inf
        out += p * np.log(p / q)
    return out


def finite_difference(f, x, step=1e-6):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.abs(numeric), np.maximum(np.abs(analytic), floor))
    return float(np.max(np.abs(analytic - numeric) / denom))


def tableau_simplex(a_dense, b, c, initial_basis=None, max_iter=200000):
    """Dense primal simplex with Bland's rule on min c'x, Ax=b, x>=0.

    When initial_basis is omitted, fresh big-M artificial columns build the
    starting identity. Completely independent of the revised implementation.
    """
    a_dense = np.asarray(a_dense, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).copy()
    c = np.asarray(c, dtype=np.float64)
    m, n = a_dense.shape
    if initial_basis is None:
        sign = np.where(b < 0, -1.0, 1.0)
        tab = np.hstack([a_dense * sign[:, None], np.eye(m)])
        b_work = b * sign
        big_m = 1e7 * max(1.0, np.abs(c).max() if n else 1.0)
        cost = np.concatenate([c, np.full(m, big_m)])
        basis = list(range(n, n + m))
        n_total = n + m
    else:
        tab = a_dense
        b_work = b
        cost = c
        basis = list(initial_basis)
        n_total = n

    binv = np.linalg.inv(tab[:, basis])
    x_b = binv @ b_work
    if x_b.min() < -1e-9:
        raise RuntimeError("tableau oracle: infeasible start")
    for _ in range(max_iter):
        y = cost[basis] @ binv
        reduced = cost - y @ tab
        in_basis = np.zeros(n_total, dtype=bool)
        in_basis[basis] = True
        enter = next((j for j in range(n_total)
                      if not in_basis[j] and reduced[j] < -1e-9), None)
        if enter is None:
            break
        d = binv @ tab[:, enter]
        ratios = [(x_b[i] / d[i], basis[i], i) for i in range(m) if d[i] > 1e-10]
        if not ratios:
            raise RuntimeError("unbounded LP in tableau oracle")
        theta = min(r[0] for r in ratios)
        # Bland: among minimal ratios, leave the smallest variable index
        leave_row = min((var, i) for r, var, i in ratios if r <= theta + 1e-12)[1]
        x_b = x_b - theta * d
        x_b[leave_row] = theta
        np.maximum(x_b, 0.0, out=x_b)
        basis[leave_row] = enter
        binv = np.linalg.inv(tab[:, basis])
    x = np.zeros(n_total)
    x[basis] = x_b
    if initial_basis is None and np.any(x[n:] > 1e-6):
        raise RuntimeError("tableau oracle: infeasible (artificials remain)")
    return x[:n], float(c @ x[:n])
