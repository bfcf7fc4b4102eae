"""Alternating-directions dual decomposition for MAP on general factor graphs.

Solves the LP relaxation with per-factor quadratic subproblems: batched
closed-form projections for node simplexes and logic factors, an active-set
method over configurations for dense pairwise factors. Tracks a Lagrangian
dual bound that upper-bounds the LP (hence every feasible labeling's score).
"""

import numpy as np

from .errors import ConfigurationError
from .inference import InferenceResult

_PAD = -1e20


def _project_rows_simplex(v, out=None):
    """Euclidean projection of each row onto the probability simplex.

    Padded entries must already sit at a hugely negative value; they project
    to zero and never enter the threshold.
    """
    n, m = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    ks = np.arange(1, m + 1)
    cond = u - (css - 1.0) / ks > 0
    rho = np.maximum(cond.sum(axis=1), 1)
    theta = (css[np.arange(n), rho - 1] - 1.0) / rho
    res = np.maximum(v - theta[:, None], 0.0)
    if out is not None:
        out[:] = res
        return out
    return res


def _project_rows_capped(v):
    """Projection onto {z >= 0, sum z <= 1} per row (at-most-one polytope)."""
    clipped = np.maximum(v, 0.0)
    over = clipped.sum(axis=1) > 1.0
    if np.any(over):
        clipped[over] = _project_rows_simplex(v[over])
    return clipped


class _IndexedGroup:
    """A batch of factors over flat indicator indices, padded to equal width."""

    def __init__(self, member_lists, total):
        self.n = len(member_lists)
        self.width = max((len(m) for m in member_lists), default=0)
        self.idx = np.zeros((self.n, self.width), dtype=int)
        self.mask = np.zeros((self.n, self.width), dtype=bool)
        for r, members in enumerate(member_lists):
            self.idx[r, : len(members)] = members
            self.mask[r, : len(members)] = True
        self.flat_idx = self.idx[self.mask]
        self.lam = np.zeros((self.n, self.width))
        self.mu = np.zeros((self.n, self.width))
        self.total = total

    def gather(self, p):
        out = p[self.idx]
        out[~self.mask] = 0.0
        return out

    def scatter_mu(self, accum):
        np.add.at(accum, self.flat_idx, self.mu[self.mask])

    def targets(self, p, share, eta):
        t = p[self.idx] + (share + self.lam) / eta
        t[~self.mask] = _PAD
        return t

    def update_lam(self, p, eta):
        diff = self.mu - p[self.idx]
        diff[~self.mask] = 0.0
        self.lam -= eta * diff

    def primal_residual_sq(self, p):
        diff = self.mu - p[self.idx]
        return float(np.sum(diff[self.mask] ** 2))


class _DenseFactor:
    """One pairwise factor solved with an active set over configurations."""

    def __init__(self, u, v, table, u_slots, v_slots):
        self.u, self.v = u, v
        self.table = np.asarray(table, dtype=np.float64)
        self.u_slots = u_slots          # flat indicator indices of u's labels
        self.v_slots = v_slots
        self.mu_u = np.zeros(len(u_slots))
        self.mu_v = np.zeros(len(v_slots))
        self.lam_u = np.zeros(len(u_slots))
        self.lam_v = np.zeros(len(v_slots))
        self.active = None              # [(i, j), ...]
        self.weights = None

    def solve(self, a_u, a_v, eta, tol=1e-10, max_inner=None):
        mu_len, mv_len = self.table.shape
        if max_inner is None:
            max_inner = 4 * (mu_len + mv_len) + 10
        if self.active is None:
            lin = self.table + eta * (a_u[:, None] + a_v[None, :])
            flat = int(np.argmax(lin))
            self.active = [divmod(flat, mv_len)]
            self.weights = np.array([1.0])

        active, alpha = list(self.active), np.asarray(self.weights, dtype=np.float64)
        alpha = np.maximum(alpha, 0.0)
        s = alpha.sum()
        alpha = alpha / s if s > 0 else np.full(len(active), 1.0 / len(active))

        for _ in range(max_inner):
            k = len(active)
            ii = np.array([c[0] for c in active])
            jj = np.array([c[1] for c in active])
            gram = (ii[:, None] == ii[None, :]).astype(float) \
                + (jj[:, None] == jj[None, :]).astype(float)
            rhs = self.table[ii, jj] + eta * (a_u[ii] + a_v[jj])
            sys_a = np.zeros((k + 1, k + 1))
            sys_a[:k, :k] = eta * gram
            sys_a[:k, k] = 1.0
            sys_a[k, :k] = 1.0
            sys_b = np.concatenate([rhs, [1.0]])
            sol = np.linalg.lstsq(sys_a, sys_b, rcond=None)[0]
            new_alpha, tau = sol[:k], sol[k]

            if new_alpha.min() < -1e-12:
                # step toward the solution until a weight hits zero, drop it
                delta = new_alpha - alpha
                neg = delta < -1e-15
                steps = -alpha[neg] / delta[neg]
                t = min(1.0, steps.min())
                alpha = np.maximum(alpha + t * delta, 0.0)
                drop_order = np.where(neg)[0][np.argsort(steps, kind="stable")]
                drop = next((d for d in drop_order if alpha[d] <= 1e-15), None)
                if drop is None:
                    drop = int(np.argmin(alpha))
                del active[drop]
                alpha = np.delete(alpha, drop)
                s = alpha.sum()
                alpha = alpha / s if s > 0 else np.full(len(active), 1.0 / len(active))
                continue

            alpha = new_alpha
            mu_u = np.bincount(ii, weights=alpha, minlength=mu_len)
            mu_v = np.bincount(jj, weights=alpha, minlength=mv_len)
            grad = self.table - eta * (mu_u - a_u)[:, None] - eta * (mu_v - a_v)[None, :]
            flat = int(np.argmax(grad))
            best = divmod(flat, mv_len)
            if grad[best] <= tau + 1e-9 or best in active:
                break
            active.append(best)
            alpha = np.concatenate([alpha, [0.0]])

        self.active, self.weights = active, alpha
        ii = np.array([c[0] for c in active])
        jj = np.array([c[1] for c in active])
        self.mu_u = np.bincount(ii, weights=alpha, minlength=mu_len)
        self.mu_v = np.bincount(jj, weights=alpha, minlength=mv_len)


def ad3_map(model, node_tables=None, edge_tables=None, *, max_iters=1000,
            eta=0.1, residual_tol=1e-6, adapt_eta=True, weights=None,
            residual_log=None):
    """Approximate MAP for a FactorGraphModel via the AD3 LP relaxation.

    Potential tables may be passed directly or derived from a weight vector.
    Returns an InferenceResult whose labeling is the per-node argmax of the
    consensus variables (ties to the lowest index), whose bound is the best
    Lagrangian dual value seen, and whose converged flag reports whether both
    residuals fell below residual_tol.
    """
    if node_tables is None:
        if weights is None:
            raise ConfigurationError("ad3_map needs node_tables or weights")
        node_tables, edge_tables = model.potentials(weights)
    edge_tables = edge_tables or []
    if not eta > 0:
        raise ConfigurationError("eta must be positive")
    eta0 = eta

    n_nodes = model.n_nodes
    offsets = np.zeros(n_nodes + 1, dtype=int)
    for v in range(n_nodes):
        offsets[v + 1] = offsets[v] + model.n_labels[v]
    total = offsets[-1]
    theta = np.zeros(total)
    for v in range(n_nodes):
        theta[offsets[v]: offsets[v + 1]] = node_tables[v]

    # the MAP is invariant to positive rescaling; normalizing keeps the
    # proximal subproblems and residual tests well conditioned when learned
    # potentials grow large
    scale = max(1.0, float(np.abs(theta).max()) if total else 1.0,
                max((float(np.abs(t).max()) for t in edge_tables), default=1.0))
    theta = theta / scale
    edge_tables = [np.asarray(t, dtype=np.float64) / scale for t in edge_tables]

    deg = np.ones(total)                       # every indicator sits in its node factor
    for u, v in model.edges:
        deg[offsets[u]: offsets[u + 1]] += 1
        deg[offsets[v]: offsets[v + 1]] += 1
    logic_members = [[offsets[n] + l for n, l in fac.members]
                     for fac in model.logic_factors]
    for members in logic_members:
        for i in members:
            deg[i] += 1
    share = theta / deg

    nodes = _IndexedGroup([list(range(offsets[v], offsets[v + 1]))
                           for v in range(n_nodes)], total)
    logic = _IndexedGroup(logic_members, total) if logic_members else None
    logic_kinds = np.array([fac.kind == "at_most_one" for fac in model.logic_factors]) \
        if logic_members else None
    dense = [_DenseFactor(u, v, edge_tables[e],
                          list(range(offsets[u], offsets[u + 1])),
                          list(range(offsets[v], offsets[v + 1])))
             for e, (u, v) in enumerate(model.edges)]

    p = np.concatenate([np.full(m, 1.0 / m) for m in model.n_labels]) \
        if n_nodes else np.zeros(0)
    node_share = share[nodes.idx]
    node_share[~nodes.mask] = 0.0
    logic_share = None
    if logic is not None:
        logic_share = share[logic.idx]
        logic_share[~logic.mask] = 0.0

    best_bound = np.inf
    converged = False
    it = 0
    log_rows = []
    for it in range(1, max_iters + 1):
        # factor subproblems
        targets = nodes.targets(p, node_share, eta)
        _project_rows_simplex(targets, out=nodes.mu)
        nodes.mu[~nodes.mask] = 0.0
        if logic is not None:
            lt = logic.targets(p, logic_share, eta)
            amo = _project_rows_capped(np.where(logic_kinds[:, None], lt, _PAD))
            xor = _project_rows_simplex(np.where(logic_kinds[:, None], _PAD, lt))
            logic.mu = np.where(logic_kinds[:, None], amo, xor)
            logic.mu[~logic.mask] = 0.0
        for fac in dense:
            a_u = p[fac.u_slots] + (share[fac.u_slots] + fac.lam_u) / eta
            a_v = p[fac.v_slots] + (share[fac.v_slots] + fac.lam_v) / eta
            fac.solve(a_u, a_v, eta)

        # consensus and multipliers
        p_old = p
        accum = np.zeros(total)
        nodes.scatter_mu(accum)
        if logic is not None:
            logic.scatter_mu(accum)
        for fac in dense:
            accum[fac.u_slots] += fac.mu_u
            accum[fac.v_slots] += fac.mu_v
        p = accum / deg

        nodes.update_lam(p, eta)
        if logic is not None:
            logic.update_lam(p, eta)
        for fac in dense:
            fac.lam_u -= eta * (fac.mu_u - p[fac.u_slots])
            fac.lam_v -= eta * (fac.mu_v - p[fac.v_slots])

        # residuals
        sq = nodes.primal_residual_sq(p)
        if logic is not None:
            sq += logic.primal_residual_sq(p)
        for fac in dense:
            sq += float(np.sum((fac.mu_u - p[fac.u_slots]) ** 2))
            sq += float(np.sum((fac.mu_v - p[fac.v_slots]) ** 2))
        n_local = float(nodes.mask.sum()
                        + (logic.mask.sum() if logic is not None else 0)
                        + sum(len(f.u_slots) + len(f.v_slots) for f in dense))
        r_primal = np.sqrt(sq / max(n_local, 1.0))
        r_dual = eta * np.sqrt(float(np.sum(deg * (p - p_old) ** 2)) / max(n_local, 1.0))

        if it % 10 == 0 or it == 1 or (r_primal < residual_tol and r_dual < residual_tol):
            best_bound = min(best_bound, _dual_bound(
                model, offsets, share, nodes, logic, logic_kinds, dense))
        if residual_log is not None:
            log_rows.append((it, r_primal, r_dual, eta))
        if r_primal < residual_tol and r_dual < residual_tol:
            converged = True
            break
        if adapt_eta:
            if r_primal > 10.0 * r_dual:
                eta = min(eta * 2.0, 1e6 * eta0)
            elif r_dual > 10.0 * r_primal:
                eta = max(eta * 0.5, 1e-6 * eta0)

    best_bound = min(best_bound, _dual_bound(
        model, offsets, share, nodes, logic, logic_kinds, dense))
    best_bound *= scale
    labeling = np.array([int(np.argmax(p[offsets[v]: offsets[v + 1]]))
                         for v in range(n_nodes)], dtype=int)
    if residual_log is not None:
        with open(residual_log, "w") as fh:
            fh.write("iteration,primal_residual,dual_residual,eta\n")
            for row in log_rows:
                fh.write("%d,%.12g,%.12g,%.12g\n" % row)
    return InferenceResult(map_labeling=labeling, bound=best_bound,
                           converged=converged, iterations=it)


def _dual_bound(model, offsets, share, nodes, logic, logic_kinds, dense):
    """Lagrangian dual value at the current multipliers: a valid upper bound
    on the LP relaxation and on every feasible labeling's score."""
    scores = share[nodes.idx] + nodes.lam
    scores[~nodes.mask] = -np.inf
    bound = float(scores.max(axis=1).sum()) if nodes.n else 0.0
    if logic is not None:
        ls = share[logic.idx] + logic.lam
        ls[~logic.mask] = -np.inf
        best = ls.max(axis=1)
        amo = np.maximum(best, 0.0)            # the all-zeros configuration
        bound += float(np.where(logic_kinds, amo, best).sum())
    for fac in dense:
        w_u = share[fac.u_slots] + fac.lam_u
        w_v = share[fac.v_slots] + fac.lam_v
        bound += float(np.max(fac.table + w_u[:, None] + w_v[None, :]))
    return bound
