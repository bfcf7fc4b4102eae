"""Desk-scale set-partitioning solver for crew pairing.

Bounded enumeration builds the column pool; the LP relaxation is solved by
revised simplex over flight-coverage rows (plus soft base-balance rows), and
branch-and-bound fixes fractional pairing variables. Warm starts inject an
initial solution and/or solve a cluster-aggregated master first. A rolling
window driver freezes pairings wholly inside committed windows.
"""

import heapq
import json
import time

import numpy as np

from .crew import (MINUTES_PER_DAY, CostConfig, Pairing, check_pairing_feasibility,
                   pairing_cost)
from .errors import ConfigurationError, ContractError, ModelingError, NumericError
from .simplex import SparseColumns, revised_simplex

UNDERCOVER_PENALTY = 1e6
OVERCOVER_PENALTY = 500.0


# ---------------------------------------------------------------------------
# column enumeration
# ---------------------------------------------------------------------------

class EnumLimits:
    def __init__(self, max_columns=50000, max_days=None, ensure_coverage=True,
                 max_expansions=None):
        self.max_columns = max_columns
        self.max_days = max_days
        self.ensure_coverage = ensure_coverage
        # search-effort budget: DFS extensions explored before giving up;
        # sized so small instances always enumerate exhaustively
        self.max_expansions = max_expansions if max_expansions is not None \
            else max(40 * max_columns, 2_000_000)


class ColumnPool:
    """Feasible pairings with costs and provenance tags."""

    def __init__(self, cost_cfg=None):
        self.pairings = []
        self.provenance = []
        self.truncated = False
        self.cost_cfg = cost_cfg or CostConfig()
        self._keys = {}

    def add(self, pairing, instance, provenance):
        key = pairing.key()
        if key in self._keys:
            return self._keys[key]
        pairing.cost = pairing_cost(pairing, self.cost_cfg, instance)
        self.pairings.append(pairing)
        self.provenance.append(provenance)
        self._keys[key] = len(self.pairings) - 1
        return self._keys[key]

    def __len__(self):
        return len(self.pairings)


def enumerate_pairings(instance, rules=None, limits=None, cost_cfg=None):
    """Depth-first search over the candidate graph from every base-departing
    flight, pruned by the duty and pairing rules; a pairing is emitted at
    every return to the start base. The column budget is spread across start
    flights (round-robin quotas) and stops at max_columns with the truncation
    flag set; a best-effort pass then covers any flight the search missed."""
    rules = rules or instance.rules
    limits = limits or EnumLimits()
    max_days = limits.max_days or rules.max_days_per_pairing
    pool = ColumnPool(cost_cfg)
    cand = instance.candidates()

    starts = sorted((f for f in instance.flights if f.origin in instance.bases),
                    key=lambda f: (f.departure, f.id))
    budget = [limits.max_expansions]
    stop = [False]

    def dfs(base, seq, breaks, duty_start, duty_count, flying, quota):
        if stop[0] or quota[0] <= 0:
            return
        budget[0] -= 1
        if budget[0] < 0:
            pool.truncated = True
            stop[0] = True
            return
        cur = seq[-1]
        if cur.destination == base:
            before = len(pool)
            pool.add(Pairing(base, [f.id for f in seq], breaks), instance,
                     "enumerated")
            if len(pool) > before:
                quota[0] -= 1
            if len(pool) >= limits.max_columns:
                pool.truncated = True
                stop[0] = True
                return
        if len(seq) >= rules.max_landings_per_pairing:
            return
        for nxt in cand[cur.id]:
            days = (nxt.arrival // MINUTES_PER_DAY
                    - seq[0].departure // MINUTES_PER_DAY + 1)
            if days > max_days:
                continue
            if flying + nxt.duration > rules.max_flying_per_pairing:
                continue
            gap = nxt.departure - cur.arrival
            if (gap >= rules.min_connection
                    and duty_count + 1 <= rules.max_flights_per_duty
                    and nxt.arrival - duty_start <= rules.max_duty_span):
                dfs(base, seq + [nxt], breaks, duty_start, duty_count + 1,
                    flying + nxt.duration, quota)
            if (gap >= rules.min_rest
                    and len(breaks) + 2 <= rules.max_duties_per_pairing):
                dfs(base, seq + [nxt], breaks + [len(seq)], nxt.departure, 1,
                    flying + nxt.duration, quota)
            if stop[0] or quota[0] <= 0:
                return

    if starts:
        per_start = max(limits.max_columns // len(starts), 25)
        for start in starts:
            dfs(start.origin, [start], [], start.departure, 1, start.duration,
                [per_start])
            if stop[0]:
                break
        # spend any remaining column budget on unthrottled passes
        if not stop[0] and len(pool) < limits.max_columns:
            for start in starts:
                dfs(start.origin, [start], [], start.departure, 1,
                    start.duration, [limits.max_columns - len(pool)])
                if stop[0] or len(pool) >= limits.max_columns:
                    break

    if limits.ensure_coverage:
        _coverage_fill(instance, rules, pool, max_days)
    if not len(pool):
        raise ModelingError("enumeration produced zero feasible pairings")
    return pool


def _coverage_fill(instance, rules, pool, max_days):
    """Best-effort single pairing through every otherwise uncovered flight."""
    covered = set()
    for p in pool.pairings:
        covered.update(p.flights)
    missing = [f for f in instance.flights if f.id not in covered]
    if not missing:
        return
    cand = instance.candidates()
    preds = {f.id: [] for f in instance.flights}
    for f in instance.flights:
        for c in cand[f.id]:
            preds[c.id].append(f)

    for flight in missing:
        chain = _chain_to_base_backward(flight, preds, instance, depth=4)
        if chain is None:
            continue
        full = _extend_to_base_forward(chain, cand, instance, rules, max_days)
        if full is None:
            continue
        pairing = _pairing_with_duties(full, instance, rules)
        if pairing is None:
            continue
        ok, _ = check_pairing_feasibility(pairing, rules, instance)
        if ok:
            pool.add(pairing, instance, "enumerated")


def _chain_to_base_backward(flight, preds, instance, depth):
    frontier = [[flight]]
    for _ in range(depth + 1):
        nxt = []
        for chain in frontier:
            head = chain[0]
            if head.origin in instance.bases:
                return chain
            for p in sorted(preds[head.id], key=lambda f: (-f.departure, f.id)):
                nxt.append([p] + chain)
        frontier = nxt[:16]
        if not frontier:
            return None
    return None


def _extend_to_base_forward(chain, cand, instance, rules, max_days):
    base = chain[0].origin
    seq = list(chain)
    for _ in range(rules.max_landings_per_pairing - len(seq) + 1):
        if seq[-1].destination == base:
            return seq
        if len(seq) >= rules.max_landings_per_pairing:
            return None
        options = cand[seq[-1].id]
        if not options:
            return None
        home = [c for c in options if c.destination == base]
        pick = home[0] if home else options[0]
        days = (pick.arrival // MINUTES_PER_DAY
                - seq[0].departure // MINUTES_PER_DAY + 1)
        if days > max_days:
            return None
        seq.append(pick)
    return None


def _pairing_with_duties(seq, instance, rules):
    """Greedy duty assignment: stay in the duty when legal, rest otherwise."""
    breaks = []
    duty_start = seq[0].departure
    duty_count = 1
    for pos, (a, b) in enumerate(zip(seq, seq[1:]), start=1):
        gap = b.departure - a.arrival
        if (gap >= rules.min_connection
                and duty_count + 1 <= rules.max_flights_per_duty
                and b.arrival - duty_start <= rules.max_duty_span):
            duty_count += 1
        elif gap >= rules.min_rest:
            breaks.append(pos)
            duty_start = b.departure
            duty_count = 1
        else:
            return None
    return Pairing(seq[0].origin, [f.id for f in seq], breaks)


# ---------------------------------------------------------------------------
# master problem
# ---------------------------------------------------------------------------

class MasterProblem:
    """Flight-coverage rows (exactly-once with over/under slacks) plus
    optional soft base-balance rows, over an explicit column pool."""

    def __init__(self, instance, pool, undercover_penalty=UNDERCOVER_PENALTY,
                 overcover_penalty=OVERCOVER_PENALTY):
        self.instance = instance
        self.pool = pool
        self.flight_ids = [f.id for f in instance.flights]
        self.row_of = {fid: i for i, fid in enumerate(self.flight_ids)}
        self.undercover_penalty = undercover_penalty
        self.overcover_penalty = overcover_penalty
        if not (undercover_penalty > max((p.cost for p in pool.pairings), default=0)
                and overcover_penalty > 0):
            raise ConfigurationError("slack penalties must dominate pairing costs")
        self.base_targets = None
        self.base_penalty = 0.0
        self.initial_incumbent = None
        self.clusters = None

    @property
    def n_flights(self):
        return len(self.flight_ids)

    def pairing_work(self, pairing):
        return float(sum(self.instance.by_id[fid].duration for fid in pairing.flights))

    def coverage_rows(self, pairing):
        return [self.row_of[fid] for fid in pairing.flights]

    # base-row work is expressed in scaled units inside the LP so the
    # coverage rows (coefficients 1) and balance rows share a magnitude;
    # deviation costs are scaled back so the objective stays in penalty
    # units per minute
    BASE_ROW_SCALE = 1.0 / 480.0

    def column_base_coeffs(self, pairing):
        """Coefficients of a pairing in the base-balance rows."""
        if self.base_targets is None:
            return []
        work = self.pairing_work(pairing) * self.BASE_ROW_SCALE
        out = []
        for k, (base, rho) in enumerate(sorted(self.base_targets.items())):
            out.append(work * ((1.0 if pairing.base == base else 0.0) - rho))
        return out

    def evaluate_solution(self, pairing_indices):
        """Cost and slack usage of selecting exactly these pool columns."""
        cover = np.zeros(self.n_flights)
        cost = 0.0
        for j in pairing_indices:
            p = self.pool.pairings[j]
            for fid in p.flights:
                cover[self.row_of[fid]] += 1
            cost += p.cost
        over_ids, under_ids = [], []
        for i, fid in enumerate(self.flight_ids):
            if cover[i] > 1:
                over_ids.extend([fid] * int(cover[i] - 1))
            elif cover[i] < 1:
                under_ids.append(fid)
        cost += self.overcover_penalty * len(over_ids)
        cost += self.undercover_penalty * len(under_ids)
        global_cost = self.global_constraint_cost(pairing_indices)
        return cost + global_cost, over_ids, under_ids, global_cost

    def global_constraint_cost(self, pairing_indices):
        if self.base_targets is None:
            return 0.0
        total = sum(self.pairing_work(self.pool.pairings[j]) for j in pairing_indices)
        cost = 0.0
        for base, rho in sorted(self.base_targets.items()):
            worked = sum(self.pairing_work(self.pool.pairings[j])
                         for j in pairing_indices
                         if self.pool.pairings[j].base == base)
            cost += self.base_penalty * abs(worked - rho * total)
        return cost


def add_base_constraints(master, targets, penalty):
    """Soft workload-balance rows: worked_b - rho_b * total = dev+ - dev-,
    with penalty * (dev+ + dev-) in the objective."""
    if abs(sum(targets.values()) - 1.0) > 1e-9:
        raise ConfigurationError("base shares must sum to 1")
    if penalty < 0:
        raise ConfigurationError("penalty must be non-negative")
    master.base_targets = dict(targets)
    master.base_penalty = float(penalty)
    return master


def warm_start(master, plan, mode):
    """Attach warm-start information from a (feasible) pairing plan.

    solution: inject the plan's pairings as columns and use them as the
    initial incumbent. clusters: solve an aggregated master first, whose rows
    are the plan's pairings (plus singletons for uncovered flights). both:
    both effects.
    """
    if mode not in ("clusters", "solution", "both"):
        raise ConfigurationError(f"unknown warm-start mode {mode!r}")
    seen = set()
    for p in plan.pairings:
        for fid in p.flights:
            if fid in seen:
                raise ContractError(
                    f"plan covers flight {fid} twice; deadheads must be explicit")
            seen.add(fid)
    for fid in seen:
        if fid not in master.row_of:
            raise ContractError(f"plan flight {fid} is not in the master")

    indices = [master.pool.add(p, master.instance, "initial-solution")
               for p in plan.pairings]
    if mode in ("solution", "both"):
        cost, over, under, _ = master.evaluate_solution(indices)
        master.initial_incumbent = {"columns": indices, "cost": cost}
    if mode in ("clusters", "both"):
        clusters = [list(p.flights) for p in plan.pairings]
        clustered = set(seen)
        for fid in master.flight_ids:
            if fid not in clustered:
                clusters.append([fid])
        master.clusters = clusters
    return master


# ---------------------------------------------------------------------------
# LP assembly and solve
# ---------------------------------------------------------------------------

def _assemble(master):
    """SparseColumns + costs for [pairings | over | under | dev+ | dev-]."""
    n_f = master.n_flights
    bases = sorted(master.base_targets.items()) if master.base_targets else []
    n_rows = n_f + len(bases)
    cols = SparseColumns(n_rows)
    costs = []
    for p in master.pool.pairings:
        rows = [master.row_of[fid] for fid in p.flights]
        vals = [1.0] * len(rows)
        for k, coeff in enumerate(master.column_base_coeffs(p)):
            if coeff != 0.0:
                rows.append(n_f + k)
                vals.append(coeff)
        cols.add(rows, vals)
        costs.append(p.cost)
    over0 = cols.n_cols
    for i in range(n_f):
        cols.add([i], [-1.0])
        costs.append(master.overcover_penalty)
    under0 = cols.n_cols
    for i in range(n_f):
        cols.add([i], [1.0])
        costs.append(master.undercover_penalty)
    devp0 = cols.n_cols
    for k in range(len(bases)):
        cols.add([n_f + k], [-1.0])
        costs.append(master.base_penalty / MasterProblem.BASE_ROW_SCALE)
    devm0 = cols.n_cols
    for k in range(len(bases)):
        cols.add([n_f + k], [1.0])
        costs.append(master.base_penalty / MasterProblem.BASE_ROW_SCALE)
    layout = {"over0": over0, "under0": under0, "devp0": devp0, "devm0": devm0,
              "n_pairings": over0, "n_rows": n_rows, "n_flights": n_f,
              "n_bases": len(bases)}
    return cols, np.array(costs), layout


def _node_rhs_and_const(master, layout, fixed_one):
    b = np.zeros(layout["n_rows"])
    b[: layout["n_flights"]] = 1.0
    const = 0.0
    for j in fixed_one:
        p = master.pool.pairings[j]
        const += p.cost
        for row in master.coverage_rows(p):
            b[row] -= 1.0
        for k, coeff in enumerate(master.column_base_coeffs(p)):
            b[layout["n_flights"] + k] -= coeff
    return b, const


def _start_basis(layout, b):
    basis = []
    for i in range(layout["n_flights"]):
        basis.append(layout["under0"] + i if b[i] >= 0 else layout["over0"] + i)
    for k in range(layout["n_bases"]):
        row = layout["n_flights"] + k
        basis.append(layout["devm0"] + k if b[row] >= 0 else layout["devp0"] + k)
    return basis


def _repair_basis(basis, active, layout, b):
    """Swap banned basic columns for their row's slack; None when the swap
    would duplicate a basis column (caller then falls back to the crash
    basis)."""
    out = list(basis)
    used = set(out)
    for pos, j in enumerate(out):
        if j < layout["n_pairings"] and not active[j]:
            # best-effort: the slack of the basis position's original row;
            # singular or infeasible repairs are caught by the caller
            if pos < layout["n_flights"]:
                repl = (layout["under0"] + pos) if b[pos] >= 0 \
                    else (layout["over0"] + pos)
            else:
                k = pos - layout["n_flights"]
                repl = (layout["devm0"] + k) if b[pos] >= 0 \
                    else (layout["devp0"] + k)
            if repl in used:
                return None
            used.discard(j)
            used.add(repl)
            out[pos] = repl
    return out


def _crash_basis(master, layout, b, active, assembled):
    """Greedy disjoint cover as the starting basis: much closer to an optimum
    than the all-undercover identity, which set-partitioning degeneracy makes
    painfully slow to escape. Basic columns: each chosen pairing (leading its
    first row), slacks everywhere else; the construction is block-triangular,
    hence nonsingular, and primal feasible by the sign choices."""
    cols, costs, _ = assembled
    n_f = layout["n_flights"]
    n_p = layout["n_pairings"]
    open_row = np.zeros(layout["n_rows"], dtype=bool)
    open_row[:n_f] = np.abs(b[:n_f] - 1.0) < 1e-12
    order = sorted(
        (j for j in range(n_p) if active[j]),
        key=lambda j: (costs[j] / max(len(master.pool.pairings[j].flights), 1), j))
    lead = {}
    for j in order:
        rows = master.coverage_rows(master.pool.pairings[j])
        if all(open_row[r] for r in rows):
            for r in rows:
                open_row[r] = False
            lead[rows[0]] = j
    basis = []
    for i in range(n_f):
        if i in lead:
            basis.append(lead[i])
        elif b[i] >= 0:
            basis.append(layout["under0"] + i)
        else:
            basis.append(layout["over0"] + i)
    for k in range(layout["n_bases"]):
        row = n_f + k
        resid = b[row] - sum(
            dict(zip(cols.indices[j], cols.values[j])).get(row, 0.0)
            for j in lead.values())
        basis.append(layout["devm0"] + k if resid >= 0 else layout["devp0"] + k)
    return basis


def solve_lp(master, fixed_zero=frozenset(), fixed_one=frozenset(),
             _assembled=None, start_basis=None):
    """LP relaxation of the (possibly fixing-restricted) master.

    Returns a dict with x over pool columns, slack values, duals, and the
    objective including the fixed-column constant. start_basis (e.g. a parent
    node's) is repaired and tried first, the greedy crash basis on failure.
    """
    cols, costs, layout = _assembled if _assembled is not None else _assemble(master)
    active = np.ones(cols.n_cols, dtype=bool)
    for j in fixed_zero:
        active[j] = False
    for j in fixed_one:
        active[j] = False
    b, const = _node_rhs_and_const(master, layout, fixed_one)
    res = None
    if start_basis is not None:
        repaired = _repair_basis(start_basis, active, layout, b)
        if repaired is not None:
            try:
                res = revised_simplex(cols, costs, b, repaired, active=active)
            except NumericError:
                res = None
    if res is None:
        basis = _crash_basis(master, layout, b, active, (cols, costs, layout))
        res = revised_simplex(cols, costs, b, basis, active=active)
    n_p = layout["n_pairings"]
    x = res.x[:n_p].copy()
    for j in fixed_one:
        x[j] = 1.0
    over = res.x[layout["over0"]: layout["over0"] + layout["n_flights"]]
    under = res.x[layout["under0"]: layout["under0"] + layout["n_flights"]]
    return {"x": x, "over": over, "under": under,
            "duals": res.duals, "objective": res.objective + const,
            "n_pivots": res.n_pivots, "basis": res.basis}


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------

class BnbConfig:
    def __init__(self, gap_tol=1e-6, node_limit=5000, branch_rule="most_fractional"):
        if branch_rule != "most_fractional":
            raise ConfigurationError(f"unknown branch rule {branch_rule!r}")
        self.gap_tol = gap_tol
        self.node_limit = node_limit
        self.branch_rule = branch_rule


class BnbResult:
    def __init__(self, selected, cost, over, under, stats, global_cost):
        self.selected = selected          # pool column indices at value 1
        self.cost = cost
        self.over = over                  # over-covered (deadhead) flight ids
        self.under = under                # uncovered flight ids
        self.stats = stats
        self.global_cost = global_cost


def _fractional_pairings(x, tol=1e-6):
    return np.flatnonzero((x > tol) & (x < 1 - tol))


def _bnb_loop(master, cfg, assembled, forced_zero=frozenset(), incumbent=None):
    """Best-bound search core; branches on the most fractional pairing
    variable, ties to the lowest index. Returns the loop summary."""
    root = solve_lp(master, fixed_zero=forced_zero, _assembled=assembled)
    lp_root = root["objective"]
    n_frac_root = len(_fractional_pairings(root["x"]))
    counter = 0
    heap = [(lp_root, counter, forced_zero, frozenset(), root)]
    n_nodes = 1
    best_lp = lp_root
    optimal = True

    while heap:
        bound, _, fixed0, fixed1, sol = heapq.heappop(heap)
        best_lp = bound
        if incumbent is not None and bound >= incumbent[0] - cfg.gap_tol:
            best_lp = min(bound, incumbent[0])
            break
        frac = _fractional_pairings(sol["x"])
        if frac.size == 0:
            selected = tuple(sorted(
                set(np.flatnonzero(sol["x"] > 0.5).tolist()) | set(fixed1)))
            cost = sol["objective"]
            if incumbent is None or cost < incumbent[0] - 1e-9:
                incumbent = (cost, selected)
            continue
        if n_nodes >= cfg.node_limit:
            optimal = False
            break
        j = int(frac[np.argmin(np.abs(sol["x"][frac] - 0.5))])
        for child_fixed0, child_fixed1 in (
                (fixed0 | {j}, fixed1), (fixed0, fixed1 | {j})):
            child = solve_lp(master, child_fixed0, child_fixed1,
                             _assembled=assembled, start_basis=sol["basis"])
            n_nodes += 1
            child_bound = child["objective"]
            if incumbent is not None and child_bound >= incumbent[0] - cfg.gap_tol:
                continue
            counter += 1
            heapq.heappush(heap, (child_bound, counter, child_fixed0,
                                  child_fixed1, child))
        if n_nodes >= cfg.node_limit:
            optimal = False
    if not heap and optimal and incumbent is not None:
        best_lp = incumbent[0]
    return {"incumbent": incumbent, "lp_root": lp_root,
            "n_fractional_root": n_frac_root, "n_nodes": n_nodes,
            "best_lp": best_lp, "optimal": optimal}


def _greedy_incumbent(master):
    """Deterministic disjoint greedy cover: a valid (slack-completed) integer
    solution that seeds the search when no warm start is given."""
    chosen = []
    covered = set()
    order = sorted(range(len(master.pool.pairings)),
                   key=lambda j: (master.pool.pairings[j].cost
                                  / max(len(master.pool.pairings[j].flights), 1), j))
    for j in order:
        flights = master.pool.pairings[j].flights
        if all(fid not in covered for fid in flights):
            chosen.append(j)
            covered.update(flights)
    cost, _, _, _ = master.evaluate_solution(chosen)
    return cost, tuple(sorted(chosen))


def branch_and_bound(master, cfg=None):
    """Solve the master to (tolerance-bounded) optimality.

    Honors master.initial_incumbent (warm-start solution) and, when
    master.clusters is set, solves the cluster-aggregated master first; the
    aggregate phase's statistics are reported under stats["aggregated"].
    Without a warm start, a greedy cover seeds the incumbent so a node-limited
    search still returns an integral solution.
    """
    cfg = cfg or BnbConfig()
    t0 = time.time()
    agg_stats = None
    if master.clusters is not None:
        agg_stats = _solve_aggregated(master, cfg)

    assembled = _assemble(master)
    incumbent = _greedy_incumbent(master)
    if master.initial_incumbent is not None:
        injected = (master.initial_incumbent["cost"],
                    tuple(master.initial_incumbent["columns"]))
        if injected[0] <= incumbent[0]:
            incumbent = injected
    out = _bnb_loop(master, cfg, assembled, incumbent=incumbent)
    if out["incumbent"] is None:
        raise ModelingError("branch and bound found no integral solution")
    cost, selected = out["incumbent"]
    total, over_ids, under_ids, global_cost = master.evaluate_solution(selected)
    stats = {"lp_root": out["lp_root"],
             "n_fractional_root": out["n_fractional_root"],
             "n_nodes": out["n_nodes"],
             "best_lp": min(out["best_lp"], total),
             "best_int": total, "optimal": out["optimal"],
             "wall_seconds": time.time() - t0}
    if agg_stats is not None:
        stats["aggregated"] = agg_stats
    return BnbResult(list(selected), total, over_ids, under_ids, stats, global_cost)


def _solve_aggregated(master, cfg):
    """Solve the cluster-aggregated restriction of the master."""
    agg = _AggregatedMaster(master)
    out = _bnb_loop(agg, cfg, agg.assembled, forced_zero=agg.forced_zero)
    if out["incumbent"] is None:
        return {"skipped": True}
    return {"lp_root": out["lp_root"], "best_int": out["incumbent"][0],
            "n_nodes": out["n_nodes"]}


class _AggregatedMaster:
    """A master whose coverage rows are flight clusters; only columns covering
    each cluster all-or-nothing may enter. Shares the pool with its parent so
    column indices line up across the two phases."""

    def __init__(self, master):
        self.instance = master.instance
        self.pool = master.pool
        self.undercover_penalty = master.undercover_penalty
        self.overcover_penalty = master.overcover_penalty
        self.base_targets = master.base_targets
        self.base_penalty = master.base_penalty
        self.parent = master

        clusters = master.clusters
        cluster_of = {}
        for c, members in enumerate(clusters):
            for fid in members:
                cluster_of[fid] = c
        self._clusters = clusters
        self._cluster_of = cluster_of

        n_c = len(clusters)
        n_b = len(master.base_targets) if master.base_targets else 0
        cols = SparseColumns(n_c + n_b)
        costs = []
        forced_zero = set()
        for j, p in enumerate(master.pool.pairings):
            rows = self._pairing_clusters(p)
            if rows is None:
                cols.add([], [])
                costs.append(master.undercover_penalty * 10)
                forced_zero.add(j)
                continue
            vals = [1.0] * len(rows)
            for k, coeff in enumerate(master.column_base_coeffs(p)):
                if coeff != 0.0:
                    rows = rows + [n_c + k]
                    vals.append(coeff)
            cols.add(rows, vals)
            costs.append(p.cost)
        sizes = [len(m) for m in clusters]
        over0 = cols.n_cols
        for c in range(n_c):
            cols.add([c], [-1.0])
            costs.append(master.overcover_penalty * sizes[c])
        under0 = cols.n_cols
        for c in range(n_c):
            cols.add([c], [1.0])
            costs.append(master.undercover_penalty * sizes[c])
        devp0 = cols.n_cols
        for k in range(n_b):
            cols.add([n_c + k], [-1.0])
            costs.append(master.base_penalty / MasterProblem.BASE_ROW_SCALE)
        devm0 = cols.n_cols
        for k in range(n_b):
            cols.add([n_c + k], [1.0])
            costs.append(master.base_penalty / MasterProblem.BASE_ROW_SCALE)
        layout = {"over0": over0, "under0": under0, "devp0": devp0,
                  "devm0": devm0, "n_pairings": over0, "n_rows": cols.n_rows,
                  "n_flights": n_c, "n_bases": n_b}
        self.assembled = (cols, np.array(costs), layout)
        self.forced_zero = frozenset(forced_zero)

    def _pairing_clusters(self, pairing):
        """Sorted cluster rows fully covered, or None when incompatible."""
        touched = {}
        for fid in pairing.flights:
            c = self._cluster_of.get(fid)
            if c is None:
                return None
            touched[c] = touched.get(c, 0) + 1
        for c, cnt in touched.items():
            if cnt != len(self._clusters[c]):
                return None
        return sorted(touched)

    def coverage_rows(self, pairing):
        rows = self._pairing_clusters(pairing)
        if rows is None:
            raise ContractError("fixed pairing incompatible with the clusters")
        return rows

    def pairing_work(self, pairing):
        return self.parent.pairing_work(pairing)

    def column_base_coeffs(self, pairing):
        return self.parent.column_base_coeffs(pairing)

    def evaluate_solution(self, idxs):
        return self.parent.evaluate_solution(idxs)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

class WindowConfig:
    def __init__(self, window_days, overlap_days=0):
        if not window_days > overlap_days >= 0:
            raise ConfigurationError("need window_days > overlap_days >= 0")
        self.window_days = window_days
        self.overlap_days = overlap_days


def solve_windows(instance, window_cfg, plan=None, warm_mode=None, bnb_cfg=None,
                  enum_limits=None, base_targets=None, base_penalty=1.0,
                  cost_cfg=None):
    """Sequential window solves over the horizon; pairings wholly inside the
    committed region are frozen. Returns (solution dict, per-window stats)."""
    from .crew import Instance, PairingPlan
    bnb_cfg = bnb_cfg or BnbConfig()
    t0 = time.time()
    step = window_cfg.window_days - window_cfg.overlap_days
    committed = []
    covered = set()
    window_stats = []
    w = 0
    start_day = 0
    while start_day < instance.horizon_days:
        end_day = min(start_day + window_cfg.window_days, instance.horizon_days)
        last = end_day >= instance.horizon_days
        end_min = end_day * MINUTES_PER_DAY if not last else float("inf")
        active = [f for f in instance.flights
                  if f.departure < end_min and f.id not in covered]
        if not active:
            start_day += step
            w += 1
            continue
        sub = Instance(instance.cities, instance.bases, active, [],
                       instance.rules, instance.horizon_days)
        pool = enumerate_pairings(sub, limits=enum_limits, cost_cfg=cost_cfg)
        master = MasterProblem(sub, pool)
        if base_targets:
            add_base_constraints(master, base_targets, base_penalty)
        if plan is not None and warm_mode is not None:
            active_ids = {f.id for f in active}
            usable = [p for p in plan.pairings
                      if all(fid in active_ids for fid in p.flights)]
            if usable:
                warm_start(master, PairingPlan(usable), warm_mode)
        res = branch_and_bound(master, bnb_cfg)
        row = {"window": w, **{k: res.stats[k] for k in
                               ("lp_root", "n_fractional_root", "n_nodes",
                                "best_lp", "best_int", "wall_seconds")}}
        window_stats.append(row)

        commit_before = (start_day + step) * MINUTES_PER_DAY if not last \
            else float("inf")
        for j in res.selected:
            p = master.pool.pairings[j]
            arr_last = instance.by_id[p.flights[-1]].arrival
            if last or arr_last < commit_before:
                committed.append(p)
                covered.update(p.flights)
        if last:
            break
        start_day += step
        w += 1

    # stitched coverage: extras become deadheads, gaps become undercover
    counts = {}
    for p in committed:
        for fid in p.flights:
            counts[fid] = counts.get(fid, 0) + 1
    final_over = [fid for fid, c in sorted(counts.items()) for _ in range(c - 1)]
    final_under = [f.id for f in instance.flights if f.id not in counts]
    solution_cost = sum(p.cost for p in committed)
    solution_cost += OVERCOVER_PENALTY * len(final_over)
    solution_cost += UNDERCOVER_PENALTY * len(final_under)
    global_cost = 0.0
    if base_targets:
        total = sum(sum(instance.by_id[fid].duration for fid in p.flights)
                    for p in committed)
        for base, rho in sorted(base_targets.items()):
            worked = sum(sum(instance.by_id[fid].duration for fid in p.flights)
                         for p in committed if p.base == base)
            global_cost += base_penalty * abs(worked - rho * total)
    solution = {
        "pairings": [{"base": p.base, "flights": list(p.flights),
                      "duty_breaks": list(p.duty_breaks), "cost": p.cost}
                     for p in committed],
        "deadheads": list(final_over),
        "undercovered": list(final_under),
        "metrics": {
            "solution_cost": solution_cost + global_cost,
            "global_cost": global_cost,
            "n_deadheads": len(final_over),
            "n_nodes": int(sum(r["n_nodes"] for r in window_stats)),
            "lp_root": window_stats[0]["lp_root"] if window_stats else 0.0,
            "wall_seconds": time.time() - t0,
        },
    }
    return solution, window_stats


def write_solution(path, solution):
    with open(path, "w") as fh:
        json.dump(solution, fh, sort_keys=True)


METRICS_COLUMNS = ["window", "lp_root", "n_fractional_root", "n_nodes",
                   "best_lp", "best_int", "wall_seconds"]


def write_window_metrics(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(c, "")) for c in METRICS_COLUMNS) + "\n")
