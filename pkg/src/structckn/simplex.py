"""Revised simplex for min c'x s.t. Ax = b, x >= 0 with sparse columns.

Degenerate masters (set partitioning is pathologically so) are handled by a
deterministic right-hand-side perturbation: the perturbed problem is solved
with Dantzig pricing, the true b is restored through the final basis, and the
certificate is verified; if verification fails the solve reruns unperturbed
under Bland's anti-cycling rule (slow but sure). All ties break toward the
lowest variable index, so results are deterministic.
"""

import numpy as np

from .errors import NumericError

_EPS = 1e-9
_PIVOT_EPS = 1e-10
_STALL_LIMIT = 60
_REFACTOR_EVERY = 150
_RESIDUAL_TOL = 1e-7


class SparseColumns:
    """Column-major storage of the constraint matrix."""

    def __init__(self, n_rows):
        self.n_rows = n_rows
        self.indices = []       # per column: int array of row indices
        self.values = []        # per column: float array

    def add(self, rows, vals):
        rows = np.asarray(rows, dtype=int)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_rows):
            raise NumericError("column entry outside the row range")
        self.indices.append(rows)
        self.values.append(vals)
        return len(self.indices) - 1

    @property
    def n_cols(self):
        return len(self.indices)

    def dense_column(self, j, out=None):
        if out is None:
            out = np.zeros(self.n_rows)
        else:
            out[:] = 0.0
        out[self.indices[j]] = self.values[j]
        return out

    def build_flat(self):
        """Precomputed flat arrays for vectorized pricing."""
        if not self.indices:
            return np.zeros(0, dtype=int), np.zeros(0), np.zeros(1, dtype=int)
        flat_idx = np.concatenate(self.indices)
        flat_val = np.concatenate(self.values)
        ptr = np.zeros(self.n_cols + 1, dtype=int)
        np.cumsum([len(v) for v in self.values], out=ptr[1:])
        return flat_idx, flat_val, ptr


class SimplexResult:
    __slots__ = ("x", "duals", "objective", "basis", "n_pivots")

    def __init__(self, x, duals, objective, basis, n_pivots):
        self.x = x
        self.duals = duals
        self.objective = objective
        self.basis = basis
        self.n_pivots = n_pivots


def _price(cols_flat, y, costs, lo=0, hi=None):
    """Reduced costs of columns lo:hi (full range by default)."""
    flat_idx, flat_val, ptr = cols_flat
    if hi is None:
        hi = len(ptr) - 1
    a, z = ptr[lo], ptr[hi]
    prods = flat_val[a:z] * y[flat_idx[a:z]]
    cum = np.concatenate([[0.0], np.cumsum(prods)])
    return costs[lo:hi] - (cum[ptr[lo + 1: hi + 1] - a] - cum[ptr[lo:hi] - a])


def revised_simplex(cols, costs, b, basis, active=None, max_pivots=500_000,
                    perturb=1e-8):
    """Solve from a starting basis whose solution is primal feasible.

    cols is a SparseColumns over m rows, basis a length-m index list; active
    masks columns available for pricing (fixed-out columns stay inactive).
    Returns primal values, duals, objective, the final basis, and the pivot
    count; primal and dual residuals are verified to 1e-7.
    """
    costs = np.asarray(costs, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if active is None:
        active = np.ones(cols.n_cols, dtype=bool)
    active = active.copy()
    for j in basis:
        active[j] = True

    result = _solve(cols, costs, b, list(basis), active, max_pivots,
                    perturb=perturb, bland_only=False)
    if result is None and perturb > 0:
        result = _solve(cols, costs, b, list(basis), active, max_pivots,
                        perturb=0.0, bland_only=True)
    if result is None:
        raise NumericError("simplex failed residual verification twice")
    return result


def _solve(cols, costs, b, basis, active, max_pivots, perturb, bland_only):
    m = cols.n_rows
    b_work = b.copy()
    if perturb > 0:
        scale = perturb * max(1.0, float(np.abs(b).max()) if m else 1.0)
        b_work = b + scale * (np.arange(m) + 1.0) / max(m, 1)
    cols_flat = cols.build_flat()
    inactive = ~active

    bmat = np.zeros((m, m))
    for k, j in enumerate(basis):
        cols.dense_column(j, out=bmat[:, k])
    try:
        inv_b = np.linalg.inv(bmat)
    except np.linalg.LinAlgError as exc:
        raise NumericError("starting basis is singular") from exc
    x_b = inv_b @ b_work
    if x_b.min() < -_RESIDUAL_TOL:
        raise NumericError(f"starting basis infeasible (min {x_b.min()})")
    np.maximum(x_b, 0.0, out=x_b)

    basis_arr = np.asarray(basis, dtype=int)
    n_pivots = 0
    stall = 0
    bland = bland_only
    since_refactor = 0
    col_buf = np.zeros(m)
    n_cols = cols.n_cols
    block = n_cols  # full pricing; partial blocks lengthen degenerate paths
    block_start = 0
    in_basis = np.zeros(n_cols, dtype=bool)
    in_basis[basis_arr] = True
    # cost-relative optimality tolerance: penalty columns at 1e6 carry
    # rounding noise far above an absolute 1e-9 in their reduced costs
    enter_tol = _EPS * (1.0 + np.abs(costs))
    while n_pivots < max_pivots:
        y = costs[basis_arr] @ inv_b
        if bland:
            reduced = _price(cols_flat, y, costs)
            reduced[inactive] = np.inf
            reduced[in_basis] = np.inf
            improving = np.flatnonzero(reduced < -enter_tol)
            if improving.size == 0:
                break
            enter = int(improving[0])
        else:
            # partial pricing: scan rotating blocks, confirm with a full pass
            enter = None
            for probe in range(0, n_cols, block):
                lo = (block_start + probe) % n_cols
                hi = min(lo + block, n_cols)
                if hi <= lo:
                    continue
                reduced = _price(cols_flat, y, costs, lo, hi) + enter_tol[lo:hi]
                reduced[inactive[lo:hi]] = np.inf
                reduced[in_basis[lo:hi]] = np.inf
                cand = int(np.argmin(reduced))
                if reduced[cand] < 0:
                    enter = lo + cand
                    block_start = lo
                    break
            if enter is None:
                break
        d = inv_b @ cols.dense_column(enter, out=col_buf)
        pos = d > _PIVOT_EPS
        if not np.any(pos):
            raise NumericError("LP is unbounded; the master must bound it")
        ratios = np.full(m, np.inf)
        ratios[pos] = x_b[pos] / d[pos]
        theta = ratios.min()
        tied = np.flatnonzero(ratios <= theta + 1e-12)
        leave_pos = int(tied[np.argmin(basis_arr[tied])])

        x_b -= theta * d
        x_b[leave_pos] = theta
        np.maximum(x_b, 0.0, out=x_b)
        row = inv_b[leave_pos].copy()
        inv_b -= np.outer(d, row) / d[leave_pos]
        inv_b[leave_pos] = row / d[leave_pos]
        in_basis[basis_arr[leave_pos]] = False
        in_basis[enter] = True
        basis_arr[leave_pos] = enter
        n_pivots += 1
        since_refactor += 1

        if not bland_only and perturb <= 0:
            # without perturbation, fall back to Bland under stalling; the
            # perturbed solve is already cycle-free
            if theta <= 1e-12:
                stall += 1
                if stall >= _STALL_LIMIT:
                    bland = True
            else:
                stall = 0
                bland = False
        if since_refactor >= _REFACTOR_EVERY:
            for k, j in enumerate(basis_arr):
                cols.dense_column(j, out=bmat[:, k])
            inv_b = np.linalg.inv(bmat)
            x_b = inv_b @ b_work
            np.maximum(x_b, 0.0, out=x_b)
            since_refactor = 0
    else:
        raise NumericError("pivot limit exceeded")

    # restore the true right-hand side through the final basis and verify
    for k, j in enumerate(basis_arr):
        cols.dense_column(j, out=bmat[:, k])
    inv_b = np.linalg.inv(bmat)
    x_b = inv_b @ b
    y = costs[basis_arr] @ inv_b
    if x_b.min() < -_RESIDUAL_TOL:
        return None
    reduced = _price(cols_flat, y, costs) / (1.0 + np.abs(costs))
    reduced[inactive] = 0.0
    reduced[basis_arr] = 0.0
    if reduced.min() < -_RESIDUAL_TOL:
        return None
    x = np.zeros(cols.n_cols)
    x[basis_arr] = np.maximum(x_b, 0.0)
    objective = float(costs @ x)
    return SimplexResult(x, y, objective, basis_arr.tolist(), n_pivots)
