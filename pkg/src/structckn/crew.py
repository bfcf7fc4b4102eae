"""Crew-pairing domain: synthetic instance generation, next-flight candidate
masking, encoding for the predictor, flight-graph CRF construction, greedy
pairing construction with its corrections, feasibility checking, and the
break-and-freeze filter."""

import json

import numpy as np

from .errors import ConfigurationError, ContractError, GenerationError
from .featmap import FeatureMap
from .graph import LogicFactor
from .trainer import StructuredExample

MINUTES_PER_DAY = 1440
TOD_BINS = 96            # 15-minute time-of-day bins
DURATION_BINS = 32       # 15-minute duration bins, capped


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

class Flight:
    __slots__ = ("id", "origin", "destination", "aircraft_type", "departure",
                 "arrival", "duration")

    def __init__(self, id, origin, destination, aircraft_type, departure, duration):
        if duration <= 0:
            raise ConfigurationError(f"flight {id}: duration must be positive")
        self.id = int(id)
        self.origin = origin
        self.destination = destination
        self.aircraft_type = int(aircraft_type)
        self.departure = int(departure)
        self.duration = int(duration)
        self.arrival = self.departure + self.duration

    def to_json(self):
        return {"id": self.id, "origin": self.origin, "destination": self.destination,
                "aircraft": self.aircraft_type, "dep": self.departure,
                "arr": self.arrival}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["id"], doc["origin"], doc["destination"], doc["aircraft"],
                   doc["dep"], doc["arr"] - doc["dep"])

    def __repr__(self):
        return (f"Flight({self.id}: {self.origin}->{self.destination} "
                f"t{self.aircraft_type} {self.departure}+{self.duration})")


class RuleSet:
    """Feasibility limits plus the candidate-masking parameters."""

    FIELDS = ("min_connection", "min_rest", "max_flights_per_duty", "max_duty_span",
              "max_landings_per_pairing", "max_flying_per_pairing",
              "max_days_per_pairing", "max_duties_per_pairing", "candidate_window",
              "max_candidates", "layover_threshold")

    def __init__(self, min_connection=30, min_rest=540, max_flights_per_duty=6,
                 max_duty_span=780, max_landings_per_pairing=8,
                 max_flying_per_pairing=1800, max_days_per_pairing=4,
                 max_duties_per_pairing=4, candidate_window=2880,
                 max_candidates=20, layover_threshold=360):
        vals = dict(locals())
        for name in self.FIELDS:
            value = vals[name]
            if not value > 0:
                raise ConfigurationError(f"{name} must be positive")
            setattr(self, name, value)
        if not self.min_rest > self.min_connection:
            raise ConfigurationError("min_rest must exceed min_connection")

    def to_json(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


class Pairing:
    """A crew's flight sequence with duty boundaries.

    duty_breaks holds the positions p (1 <= p < len) at which a new duty
    starts, i.e. there is a rest between flights[p - 1] and flights[p].
    """

    def __init__(self, base, flights, duty_breaks=(), cost=None, feasible=None,
                 violated=()):
        self.base = base
        self.flights = list(flights)
        self.duty_breaks = sorted(set(int(p) for p in duty_breaks))
        self.cost = cost
        self.feasible = feasible
        self.violated = list(violated)

    @property
    def n_duties(self):
        return len(self.duty_breaks) + 1

    def duties(self):
        bounds = [0] + self.duty_breaks + [len(self.flights)]
        return [self.flights[a:b] for a, b in zip(bounds, bounds[1:])]

    def key(self):
        return (tuple(self.flights), tuple(self.duty_breaks))

    def to_json(self):
        return {"base": self.base, "flights": list(self.flights),
                "duty_breaks": list(self.duty_breaks)}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["base"], doc["flights"], doc.get("duty_breaks", ()))


class Instance:
    def __init__(self, cities, bases, flights, ground_truth, rules, horizon_days):
        self.cities = list(cities)
        self.bases = list(bases)
        self.flights = sorted(flights, key=lambda f: f.id)
        self.ground_truth = list(ground_truth)
        self.rules = rules
        self.horizon_days = int(horizon_days)
        self.by_id = {f.id: f for f in self.flights}
        self._candidates = None

    @property
    def n_flights(self):
        return len(self.flights)

    def candidates(self, mask_min_connection=True):
        """Per-flight candidate lists (cached for the default mask variant)."""
        if mask_min_connection and self._candidates is not None:
            return self._candidates
        cand = {f.id: build_connection_candidates(f, self, mask_min_connection)
                for f in self.flights}
        if mask_min_connection:
            self._candidates = cand
        return cand

    def to_json(self):
        return {"cities": self.cities, "bases": self.bases,
                "rules": self.rules.to_json(),
                "horizon_days": self.horizon_days,
                "flights": [f.to_json() for f in self.flights],
                "ground_truth": [p.to_json() for p in self.ground_truth]}

    @classmethod
    def from_json(cls, doc):
        return cls(doc["cities"], doc["bases"],
                   [Flight.from_json(f) for f in doc["flights"]],
                   [Pairing.from_json(p) for p in doc["ground_truth"]],
                   RuleSet.from_json(doc["rules"]), doc["horizon_days"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


class PairingPlan:
    def __init__(self, pairings, uncovered=()):
        self.pairings = list(pairings)
        self.uncovered = sorted(uncovered)

    def covered_flights(self):
        out = []
        for p in self.pairings:
            out.extend(p.flights)
        return out


# ---------------------------------------------------------------------------
# candidate masking and encoding
# ---------------------------------------------------------------------------

def build_connection_candidates(prev, instance, mask_min_connection=True):
    """Next-flight candidates for prev under the four masks: departs after the
    arrival (plus the minimum connection, under the default variant), departs
    within the candidate window, departs from prev's destination, same
    aircraft type. Sorted by departure time, truncated to max_candidates."""
    if prev.id not in instance.by_id:
        raise ContractError(f"flight {prev.id} does not belong to the instance")
    rules = instance.rules
    earliest = prev.arrival + (rules.min_connection if mask_min_connection else 1)
    latest = prev.arrival + rules.candidate_window
    out = [f for f in instance.flights
           if f.id != prev.id
           and f.departure >= earliest
           and f.departure <= latest
           and f.origin == prev.destination
           and f.aircraft_type == prev.aircraft_type]
    out.sort(key=lambda f: (f.departure, f.id))
    return out[: rules.max_candidates]


GAP_BINS = 96            # 30-minute connection-gap bins, capped at two days


def flight_fields(flight, instance, prev=None):
    """Categorical feature tuple (origin, destination, aircraft, departure
    time-of-day bin, duration bin, connection-gap bin)."""
    city_index = {c: i for i, c in enumerate(instance.cities)}
    gap_bin = 0
    if prev is not None:
        gap_bin = min(max(flight.departure - prev.arrival, 0) // 30, GAP_BINS - 1)
    return (city_index[flight.origin], city_index[flight.destination],
            flight.aircraft_type,
            (flight.departure % MINUTES_PER_DAY) // 15,
            min(flight.duration // 15, DURATION_BINS - 1),
            gap_bin)


def candidate_grid(prev, candidates, instance):
    """(max_candidates, 6) int grid plus a 0/1 column mask; missing slots
    are zero rows masked out."""
    rules = instance.rules
    grid = np.zeros((rules.max_candidates, 6), dtype=int)
    mask = np.zeros(rules.max_candidates)
    for j, f in enumerate(candidates):
        grid[j] = flight_fields(f, instance, prev)
        mask[j] = 1.0
    return grid, mask


def embedding_vocab(instance):
    return [len(instance.cities), len(instance.cities),
            max(f.aircraft_type for f in instance.flights) + 1,
            TOD_BINS, DURATION_BINS, GAP_BINS]


def encode_example(prev, candidates, embedding, instance):
    """FeatureMap of shape (embedding dim, max_candidates, 1): column j is the
    embedded feature vector of candidate j, missing candidates zero."""
    grid, mask = candidate_grid(prev, candidates, instance)
    vecs = embedding.forward(grid) * mask[:, None]
    return FeatureMap(vecs.T[:, :, None])


# ---------------------------------------------------------------------------
# flight-graph CRF
# ---------------------------------------------------------------------------

def successor_map(instance):
    """flight id -> (successor id or None, begins pairing, begins duty) from
    the ground truth."""
    out = {}
    for pairing in instance.ground_truth:
        for pos, fid in enumerate(pairing.flights):
            succ = pairing.flights[pos + 1] if pos + 1 < len(pairing.flights) else None
            out[fid] = (succ, pos == 0, pos in pairing.duty_breaks)
    return out


def instance_to_example(instance, pairwise="none", mask_min_connection=True):
    """One StructuredExample: a node per flight, labels = candidate ranks plus
    an explicit end-pairing label, AT-MOST-ONE predecessor factors."""
    cand = instance.candidates(mask_min_connection)
    flights = instance.flights
    index = {f.id: i for i, f in enumerate(flights)}
    succ = successor_map(instance)

    labels, n_labels, grids, masks = [], [], [], []
    begin, layover = [], []
    succ_index = []
    for f in flights:
        cands = cand[f.id]
        succ_index.append(np.array([index[c.id] for c in cands], dtype=int))
        n_labels.append(len(cands) + 1)
        true_succ, is_begin, is_layover = succ.get(f.id, (None, False, False))
        if true_succ is None:
            labels.append(len(cands))                    # end-pairing label
        else:
            ranks = [j for j, c in enumerate(cands) if c.id == true_succ]
            if not ranks:
                raise GenerationError(
                    f"true successor of flight {f.id} is not among its candidates")
            labels.append(ranks[0])
        begin.append(1.0 if is_begin else 0.0)
        layover.append(1.0 if is_layover else 0.0)
        g, m = candidate_grid(f, cands, instance)
        grids.append(g)
        masks.append(m)

    factors = []
    members_by_target = {}
    for f in flights:
        for k, c in enumerate(cand[f.id]):
            members_by_target.setdefault(c.id, []).append((index[f.id], k))
    for fid in sorted(members_by_target):
        factors.append(LogicFactor("at_most_one", members_by_target[fid]))

    edges = []
    if pairwise == "transitions":
        for f in flights:
            for c in cand[f.id]:
                edges.append((index[f.id], index[c.id]))

    return StructuredExample(
        labels=np.array(labels), n_labels=n_labels, edges=edges,
        logic_factors=factors, pairwise=pairwise, node_categoricals=grids,
        slot_masks=masks, begin_labels=np.array(begin),
        layover_labels=np.array(layover),
        weight_labels=instance.rules.max_candidates + 1, tag="flight-graph",
        successor_index=succ_index)


def build_flight_graph_crf(instance, model, pairwise="none"):
    """FactorGraphModel with unary potentials from the trained predictor."""
    example = instance_to_example(instance, pairwise=pairwise)
    return model.build_graph(example), example


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

def check_pairing_feasibility(pairing, rules, lookup):
    """Evaluate every rule limit plus connectivity and base start/end.

    lookup maps flight id to Flight (an Instance works too). Returns
    (feasible, violated-rule names). Flights out of chronological order are a
    caller error, not a rule violation.
    """
    if hasattr(lookup, "by_id"):
        lookup = lookup.by_id
    flights = [lookup[fid] for fid in pairing.flights]
    violated = []
    if not flights:
        return False, ["base_start"]
    for a, b in zip(flights, flights[1:]):
        if b.departure < a.departure:
            raise ContractError("pairing flights are not chronologically ordered")

    if flights[0].origin != pairing.base:
        violated.append("base_start")
    if flights[-1].destination != pairing.base:
        violated.append("base_end")

    breaks = set(pairing.duty_breaks)
    for pos, (a, b) in enumerate(zip(flights, flights[1:]), start=1):
        if a.destination != b.origin:
            if "connectivity" not in violated:
                violated.append("connectivity")
        gap = b.departure - a.arrival
        if pos in breaks:
            if gap < rules.min_rest and "min_rest" not in violated:
                violated.append("min_rest")
        else:
            if gap < rules.min_connection and "min_connection" not in violated:
                violated.append("min_connection")

    bounds = [0] + sorted(breaks) + [len(flights)]
    for a, b in zip(bounds, bounds[1:]):
        duty = flights[a:b]
        if len(duty) > rules.max_flights_per_duty:
            if "max_flights_per_duty" not in violated:
                violated.append("max_flights_per_duty")
        span = duty[-1].arrival - duty[0].departure
        if span > rules.max_duty_span and "max_duty_span" not in violated:
            violated.append("max_duty_span")

    if len(flights) > rules.max_landings_per_pairing:
        violated.append("max_landings_per_pairing")
    if sum(f.duration for f in flights) > rules.max_flying_per_pairing:
        violated.append("max_flying_per_pairing")
    days = flights[-1].arrival // MINUTES_PER_DAY - flights[0].departure // MINUTES_PER_DAY + 1
    if days > rules.max_days_per_pairing:
        violated.append("max_days_per_pairing")
    if pairing.n_duties > rules.max_duties_per_pairing:
        violated.append("max_duties_per_pairing")
    return not violated, violated


class CostConfig:
    def __init__(self, tafb_weight=0.5, duty_guarantee=60.0, per_duty_cost=100.0):
        self.tafb_weight = tafb_weight
        self.duty_guarantee = duty_guarantee
        self.per_duty_cost = per_duty_cost


def pairing_cost(pairing, cost_cfg, lookup):
    """max(flying minutes, tafb_weight * time-away-from-base, guarantee per
    duty) plus a fixed per-duty cost; monotone in flying time and TAFB."""
    if hasattr(lookup, "by_id"):
        lookup = lookup.by_id
    if not pairing.flights:
        raise ContractError("cannot cost an empty pairing")
    flights = [lookup[fid] for fid in pairing.flights]
    flying = sum(f.duration for f in flights)
    tafb = flights[-1].arrival - flights[0].departure
    n_duties = pairing.n_duties
    credit = max(flying, cost_cfg.tafb_weight * tafb,
                 cost_cfg.duty_guarantee * n_duties)
    return float(credit + cost_cfg.per_duty_cost * n_duties)


# ---------------------------------------------------------------------------
# greedy construction and corrections
# ---------------------------------------------------------------------------

class PredictionBundle:
    """Per-flight predictions driving the greedy builder: the chosen next
    label (candidate rank or the end label), and the begin / layover flags."""

    def __init__(self, next_label, begin, layover):
        self.next_label = np.asarray(next_label, dtype=int)
        self.begin = np.asarray(begin, dtype=bool)
        self.layover = np.asarray(layover, dtype=bool)


def oracle_predictions(instance):
    """Perfect predictions read off the ground truth."""
    example = instance_to_example(instance)
    return PredictionBundle(example.labels,
                            example.begin_labels > 0.5,
                            example.layover_labels > 0.5)


def model_predictions(model, instance, constrained=True, **infer_kw):
    """Predictions from a trained stack: AD3 decode (or per-node argmax when
    constrained=False), the begin head on pooled features, and the layover
    head evaluated on each decoded transition's slot-local features."""
    from .trainer import infer_labels
    example = instance_to_example(instance)
    if constrained:
        next_label, _ = infer_labels(model, example, **infer_kw)
    else:
        graph = model.build_graph(example)
        node_tables, _ = graph.potentials(model.weights)
        next_label = np.array([int(np.argmax(t)) for t in node_tables])
    n = len(next_label)
    _, pooled = model.node_rows(example)
    if model.begin_head is None:
        return PredictionBundle(next_label, np.ones(n, dtype=bool),
                                np.zeros(n, dtype=bool))
    begin = model.head_probability(model.begin_head, pooled) >= 0.5
    layover = np.zeros(n, dtype=bool)
    slot_feats = model.slot_pooled(example)
    for v in range(n):
        k = next_label[v]
        if k >= len(example.successor_index[v]):
            continue
        succ = example.successor_index[v][k]
        if succ < 0 or layover[succ]:
            continue
        p = model.head_probability(model.layover_head, slot_feats[v, k])
        layover[succ] = bool(p >= 0.5)
    return PredictionBundle(next_label, begin, layover)


def greedy_build_pairings(source, instance, rules=None):
    """Follow next-flight predictions from every predicted pairing start.

    Corrections applied: only flights departing a base may start a pairing; a
    predicted layover inserts a duty break only when the gap reaches
    layover_threshold; construction stops before exceeding the maximum days;
    pairings not ending at the base are cut back to the last base arrival.
    Returns a PairingPlan whose uncovered list is data, not an error.
    """
    rules = rules or instance.rules
    if isinstance(source, PredictionBundle):
        preds = source
    else:
        preds = model_predictions(source, instance)
    cand = instance.candidates()
    flights = instance.flights
    index = {f.id: i for i, f in enumerate(flights)}

    starts = [f for f in flights
              if preds.begin[index[f.id]] and f.origin in instance.bases]
    starts.sort(key=lambda f: (f.departure, f.id))

    consumed = set()
    pairings = []
    for start in starts:
        if start.id in consumed:
            continue
        base = start.origin
        seq = [start]
        breaks = []
        consumed.add(start.id)
        cur = start
        while True:
            k = preds.next_label[index[cur.id]]
            cands = cand[cur.id]
            if k >= len(cands):
                break                                    # end-pairing label
            nxt = cands[k]
            if nxt.id in consumed:
                break
            days = nxt.arrival // MINUTES_PER_DAY - start.departure // MINUTES_PER_DAY + 1
            if days > rules.max_days_per_pairing:
                break
            gap = nxt.departure - cur.arrival
            if preds.layover[index[nxt.id]] and gap >= rules.layover_threshold:
                breaks.append(len(seq))
            seq.append(nxt)
            consumed.add(nxt.id)
            cur = nxt

        # away-from-base tail deletion
        if seq[-1].destination != base:
            last_ok = max((i for i, f in enumerate(seq) if f.destination == base),
                          default=None)
            if last_ok is None:
                continue                                 # whole pairing deleted
            seq = seq[: last_ok + 1]
            breaks = [p for p in breaks if p <= last_ok]
        pairings.append(Pairing(base, [f.id for f in seq], breaks))

    in_plan = {fid for p in pairings for fid in p.flights}
    uncovered = [f.id for f in flights if f.id not in in_plan]
    cost_cfg = CostConfig()
    for p in pairings:
        p.feasible, p.violated = check_pairing_feasibility(p, rules, instance)
        p.cost = pairing_cost(p, cost_cfg, instance)
    return PairingPlan(pairings, uncovered)


def break_illegal(plan, rules, instance, bid_period=None):
    """Remove infeasible pairings, keeping the longest feasible prefix ending
    at the base when one exists; pairings starting before the bid period are
    removed outright. Returns (feasible plan, stats)."""
    bid_start = bid_period[0] if bid_period else None
    kept = []
    uncovered = set(plan.uncovered)
    n_bad = 0
    cost_cfg = CostConfig()
    for pairing in plan.pairings:
        first = instance.by_id[pairing.flights[0]]
        pre_bid = bid_start is not None and first.departure < bid_start
        feasible, _ = check_pairing_feasibility(pairing, rules, instance)
        if feasible and not pre_bid:
            kept.append(pairing)
            continue
        n_bad += 1
        salvaged = None
        if not pre_bid:
            for cut in range(len(pairing.flights) - 1, 0, -1):
                prefix = Pairing(pairing.base, pairing.flights[:cut],
                                 [p for p in pairing.duty_breaks if p < cut])
                ok, _ = check_pairing_feasibility(prefix, rules, instance)
                if ok:
                    salvaged = prefix
                    break
        if salvaged is not None:
            kept.append(salvaged)
            uncovered.update(pairing.flights[len(salvaged.flights):])
        else:
            uncovered.update(pairing.flights)
    for p in kept:
        p.feasible, p.violated = True, []
        p.cost = pairing_cost(p, cost_cfg, instance)
    n_orig = len(plan.pairings)
    stats = {
        "n_pairings": len(kept),
        "cost": float(sum(p.cost for p in kept)),
        "percent_infeasible": 100.0 * n_bad / n_orig if n_orig else 0.0,
        "covered_flights": sum(len(p.flights) for p in kept),
    }
    return PairingPlan(kept, sorted(uncovered)), stats


# ---------------------------------------------------------------------------
# real flight-connection schema
# ---------------------------------------------------------------------------

def load_flight_connection_npz(path, pairwise="none", max_candidates=20):
    """Load a flight-connection file in the released schema: per-flight
    pre-embedded candidate matrices plus labels.

    Expected arrays: features (n_flights, n_d, max_candidates) float, labels
    (n_flights,) int (candidate rank, or max_candidates for end-of-pairing),
    and optionally successors (n_flights, max_candidates) int, the flight
    index each candidate rank points at (-1 for an empty slot), from which the
    predecessor constraints are rebuilt. Returns a StructuredExample behind
    the same interface the synthetic encoder feeds.
    """
    with np.load(path) as doc:
        feats = np.asarray(doc["features"], dtype=np.float64)
        labels = np.asarray(doc["labels"], dtype=int)
        successors = np.asarray(doc["successors"], dtype=int) \
            if "successors" in doc else None
    if feats.ndim != 3 or feats.shape[2] != max_candidates:
        raise ConfigurationError(
            f"features must be (n, n_d, {max_candidates}), got {feats.shape}")
    n = feats.shape[0]
    if labels.shape != (n,):
        raise ConfigurationError("labels length does not match features")

    factors = []
    n_labels = [max_candidates + 1] * n
    if successors is not None:
        members = {}
        for i in range(n):
            for k in range(max_candidates):
                target = successors[i, k]
                if target >= 0:
                    members.setdefault(int(target), []).append((i, k))
        for target in sorted(members):
            factors.append(LogicFactor("at_most_one", members[target]))
    edges = []
    if pairwise == "transitions" and successors is not None:
        for i in range(n):
            for k in range(max_candidates):
                if successors[i, k] >= 0:
                    edges.append((i, int(successors[i, k])))
    return StructuredExample(
        labels=labels, n_labels=n_labels, edges=edges, logic_factors=factors,
        pairwise=pairwise,
        node_maps=[FeatureMap(feats[i][:, :, None]) for i in range(n)],
        weight_labels=max_candidates + 1, tag="flight-connection-npz")


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

class GenParams:
    def __init__(self, n_cities=20, n_bases=3, n_flights=200, horizon_days=7,
                 aircraft_types=3, seed=0):
        if n_bases > n_cities:
            raise ConfigurationError("n_bases cannot exceed n_cities")
        if n_flights < 1:
            raise ConfigurationError("need at least one flight")
        self.n_cities = n_cities
        self.n_bases = n_bases
        self.n_flights = n_flights
        self.horizon_days = horizon_days
        self.aircraft_types = aircraft_types
        self.seed = seed

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _duration_table(rng, n_cities):
    coords = rng.random(size=(n_cities, 2)) * 1.2
    table = np.zeros((n_cities, n_cities), dtype=int)
    for i in range(n_cities):
        for j in range(n_cities):
            if i != j:
                dist = np.linalg.norm(coords[i] - coords[j]) + 0.15
                table[i, j] = int(5 * round((45 + 110 * dist) / 5))
    return table


def _make_loop(rng, base_idx, cities, durations, rules, start):
    """A closed walk base -> ... -> base whose span fits inside one duty."""
    n_cities = len(cities)
    others = [c for c in range(n_cities) if c != base_idx]
    budget = int(0.9 * rules.max_duty_span)
    for n_legs in ([3, 2] if rng.random() < 0.45 and n_cities > 2 else [2]):
        for _ in range(6):
            mids = list(rng.choice(others, size=n_legs - 1, replace=False))
            path = [base_idx] + mids + [base_idx]
            legs, t, ok = [], start, True
            for a, b in zip(path, path[1:]):
                dur = int(durations[a, b])
                legs.append((a, b, t, dur))
                t += dur
                if t - start > budget:
                    ok = False
                    break
                t += int(rules.min_connection + 5 * rng.integers(0, 10))
            if ok and len(legs) >= 2:
                return legs
    return None


class _Crew:
    def __init__(self, crew_id, base, aircraft_type):
        self.id = crew_id
        self.base = base
        self.type = aircraft_type
        self.flights = []
        self.breaks = []
        self.first_dep = None
        self.last_arr = None
        self.duty_start = None
        self.duty_flights = 0
        self.n_duties = 1
        self.flying = 0

    def can_take(self, loop_flights, rules):
        """'duty' to extend the current duty, 'rest' to start a new one,
        None when neither is legal."""
        first, last = loop_flights[0], loop_flights[-1]
        add_fly = sum(f.duration for f in loop_flights)
        if self.flying + add_fly > rules.max_flying_per_pairing:
            return None
        if len(self.flights) + len(loop_flights) > rules.max_landings_per_pairing:
            return None
        days = last.arrival // MINUTES_PER_DAY - self.first_dep // MINUTES_PER_DAY + 1
        if days > rules.max_days_per_pairing:
            return None
        gap = first.departure - self.last_arr
        if gap > rules.candidate_window:
            return None
        if (gap >= rules.min_connection
                and self.duty_flights + len(loop_flights) <= rules.max_flights_per_duty
                and last.arrival - self.duty_start <= rules.max_duty_span):
            return "duty"
        if gap >= rules.min_rest and self.n_duties + 1 <= rules.max_duties_per_pairing:
            return "rest"
        return None

    def take(self, loop_flights, mode):
        if mode == "rest":
            self.breaks.append(len(self.flights))
            self.n_duties += 1
            self.duty_start = loop_flights[0].departure
            self.duty_flights = 0
        if self.first_dep is None:
            self.first_dep = loop_flights[0].departure
            self.duty_start = loop_flights[0].departure
        self.flights.extend(loop_flights)
        self.duty_flights += len(loop_flights)
        self.flying += sum(f.duration for f in loop_flights)
        self.last_arr = loop_flights[-1].arrival


def _generate_once(params, rules, seed):
    rng = np.random.default_rng(seed)
    cities = [f"C{i:02d}" for i in range(params.n_cities)]
    bases = cities[: params.n_bases]
    durations = _duration_table(rng, params.n_cities)

    flights = []
    loops = []
    fid = 0
    aircraft = 0
    while len(flights) < params.n_flights:
        base_idx = aircraft % params.n_bases
        ac_type = int(rng.integers(0, params.aircraft_types))
        for day in range(params.horizon_days):
            if len(flights) >= params.n_flights:
                break
            t = day * MINUTES_PER_DAY + 390 + 5 * int(rng.integers(0, 31))
            n_loops_today = 1 + (rng.random() < 0.5)
            for _ in range(n_loops_today):
                legs = _make_loop(rng, base_idx, cities, durations, rules, t)
                if legs is None:
                    break
                loop_flights = []
                for a, b, dep, dur in legs:
                    loop_flights.append(Flight(fid, cities[a], cities[b], ac_type,
                                               dep, dur))
                    fid += 1
                flights.extend(loop_flights)
                loops.append((cities[base_idx], ac_type, loop_flights))
                t = loop_flights[-1].arrival + rules.min_connection \
                    + 5 * int(rng.integers(3, 24))
                if t % MINUTES_PER_DAY > 1140:           # past 19:00, stop the day
                    break
                if len(flights) >= params.n_flights:
                    break
        aircraft += 1
        if aircraft > 4 * params.n_flights:
            raise GenerationError("could not schedule the requested flight count")

    # cover the loops with rule-obeying crews
    loops.sort(key=lambda item: (item[2][0].departure, item[2][0].id))
    crews = []
    active = []
    for base, ac_type, loop_flights in loops:
        options = []
        for crew in active:
            if crew.base != base or crew.type != ac_type:
                continue
            mode = crew.can_take(loop_flights, rules)
            if mode is not None:
                options.append((crew.last_arr, crew.id, crew, mode))
        options.sort(key=lambda o: (o[0], o[1]))
        if options and rng.random() >= 0.15:
            _, _, crew, mode = options[0]
            crew.take(loop_flights, mode)
        else:
            crew = _Crew(len(crews), base, ac_type)
            crew.take(loop_flights, "duty")
            crews.append(crew)
            active.append(crew)

    ground_truth = [Pairing(c.base, [f.id for f in c.flights], c.breaks)
                    for c in crews if c.flights]
    instance = Instance(cities, bases, flights, ground_truth, rules,
                        params.horizon_days)

    # self-audit: exact cover, feasibility, and mask-consistency
    covered = [fid for p in ground_truth for fid in p.flights]
    if sorted(covered) != [f.id for f in instance.flights]:
        raise GenerationError("ground truth does not cover every flight exactly once")
    for p in ground_truth:
        ok, bad = check_pairing_feasibility(p, rules, instance)
        if not ok:
            raise GenerationError(f"ground-truth pairing violates {bad}")
    cand = instance.candidates()
    for p in ground_truth:
        for a, b in zip(p.flights, p.flights[1:]):
            if b not in [c.id for c in cand[a]]:
                raise GenerationError(
                    f"ground-truth successor {b} of {a} missing from candidates")
    return instance


def generate_instance(params, rules=None, max_retries=20):
    """Synthetic instance: aircraft fly closed base-anchored loops, crews that
    obey the rules cover every flight exactly once. Deterministic per seed."""
    rules = rules or RuleSet()
    seeds = np.random.SeedSequence(params.seed).spawn(max_retries)
    last_error = None
    for seq in seeds:
        try:
            return _generate_once(params, rules, seq)
        except GenerationError as exc:
            last_error = exc
    raise GenerationError(f"no feasible instance after {max_retries} attempts: "
                          f"{last_error}")
