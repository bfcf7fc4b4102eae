"""CRF factor graphs: node features, shared transition weights, hard logic
factors, joint feature maps and likelihood quantities.

The joint feature map decomposes as

    F(x, y) = sum_v e_{y_v} (x) phi_v   (+)   sum_{(u,v) in E} e_{y_u} (x) e_{y_v}

so the weight vector has one (max_labels x feature_dim) unary block and,
when pairwise transitions are enabled, one (max_labels x max_labels) shared
transition block. Labelings violating a logic factor score the absorbing
sentinel NEG_INF.
"""

import json

import numpy as np

from .errors import ConfigurationError, ContractError, TopologyError

NEG_INF = -1e30

LOGIC_KINDS = ("at_most_one", "exactly_one")


class LogicFactor:
    """A hard AT-MOST-ONE / EXACTLY-ONE factor over (node, label) indicators."""

    __slots__ = ("kind", "members")

    def __init__(self, kind, members):
        if kind not in LOGIC_KINDS:
            raise ConfigurationError(f"unknown logic factor kind {kind!r}")
        self.kind = kind
        self.members = tuple((int(n), int(l)) for n, l in members)
        if not self.members:
            raise ConfigurationError("logic factor needs at least one member")

    def satisfied(self, labeling):
        active = sum(1 for node, label in self.members if labeling[node] == label)
        return active <= 1 if self.kind == "at_most_one" else active == 1

    def __repr__(self):
        return f"LogicFactor({self.kind}, {list(self.members)})"


class FactorGraphModel:
    """One structured example: per-node features and label counts, edges,
    logic factors, and the weight-vector layout they induce."""

    def __init__(self, node_features, n_labels, edges=(), logic_factors=(),
                 pairwise="transitions", topology=None, weight_labels=None):
        self.node_features = [np.asarray(f, dtype=np.float64) for f in node_features]
        if not self.node_features:
            raise ConfigurationError("a factor graph needs at least one node")
        dims = {f.shape for f in self.node_features}
        if len(dims) != 1 or self.node_features[0].ndim != 1:
            raise ConfigurationError("all node feature vectors must share one length")
        self.n_labels = [int(m) for m in n_labels]
        if len(self.n_labels) != len(self.node_features):
            raise ConfigurationError("n_labels and node_features lengths differ")
        if any(m < 1 for m in self.n_labels):
            raise ConfigurationError("every node needs at least one label")
        self.edges = [(int(u), int(v)) for u, v in edges]
        n = self.n_nodes
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise ConfigurationError(f"edge ({u}, {v}) references a missing node")
        self.logic_factors = list(logic_factors)
        for fac in self.logic_factors:
            for node, label in fac.members:
                if not (0 <= node < n) or not (0 <= label < self.n_labels[node]):
                    raise ConfigurationError(
                        f"logic factor member ({node}, {label}) out of range")
        if pairwise not in ("transitions", "none"):
            raise ConfigurationError(f"unknown pairwise mode {pairwise!r}")
        self.pairwise = pairwise
        if topology is None:
            topology = "chain" if self._is_chain() else "general"
        if topology == "chain" and not self._is_chain():
            raise TopologyError("topology tagged chain but edges are not a path in order")
        self.topology = topology
        # number of label rows in the shared weight tables; letting callers fix
        # it lets one weight vector serve examples with unequal label counts
        self.weight_labels = int(weight_labels) if weight_labels is not None \
            else max(self.n_labels)
        if self.weight_labels < max(self.n_labels):
            raise ConfigurationError("weight_labels smaller than a node's label count")

    def _is_chain(self):
        return self.edges == [(i, i + 1) for i in range(self.n_nodes - 1)]

    # -- layout ------------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.node_features)

    @property
    def feature_dim(self):
        return self.node_features[0].shape[0]

    @property
    def max_labels(self):
        return self.weight_labels

    @property
    def weight_dim(self):
        d = self.weight_labels * self.feature_dim
        if self.pairwise == "transitions":
            d += self.weight_labels * self.weight_labels
        return d

    def unary_block(self, w):
        m, p = self.weight_labels, self.feature_dim
        return w[: m * p].reshape(m, p)

    def transition_block(self, w):
        if self.pairwise != "transitions":
            return None
        m, p = self.weight_labels, self.feature_dim
        return w[m * p: m * p + m * m].reshape(m, m)

    def degrees(self):
        deg = np.zeros(self.n_nodes, dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def unary_feature_matrix(self, v):
        """Explicit (weight_dim x M_v) unary feature matrix of node v
        (column y is the joint-feature contribution of assigning label y)."""
        m_v = self.n_labels[v]
        out = np.zeros((self.weight_dim, m_v))
        p = self.feature_dim
        for y in range(m_v):
            out[y * p:(y + 1) * p, y] = self.node_features[v]
        return out

    # -- scores and features -------------------------------------------------

    def check_labeling(self, y):
        y = np.asarray(y, dtype=int)
        if y.shape != (self.n_nodes,):
            raise ContractError(f"labeling must assign one label to each of "
                                f"{self.n_nodes} nodes")
        for v, label in enumerate(y):
            if not (0 <= label < self.n_labels[v]):
                raise ContractError(f"label {label} out of range at node {v}")
        return y

    def logic_ok(self, y):
        return all(fac.satisfied(y) for fac in self.logic_factors)

    def score_labeling(self, w, y):
        y = self.check_labeling(y)
        if not self.logic_ok(y):
            return NEG_INF
        unary = self.unary_block(w)
        score = sum(float(unary[y[v]] @ self.node_features[v])
                    for v in range(self.n_nodes))
        trans = self.transition_block(w)
        if trans is not None:
            score += float(sum(trans[y[u], y[v]] for u, v in self.edges))
        return score

    @property
    def stacked_features(self):
        cached = getattr(self, "_stacked", None)
        if cached is None:
            cached = np.stack(self.node_features, axis=0)
            self._stacked = cached
        return cached

    def potentials(self, w):
        """Log-potential tables: per-node (M_v,) unaries and per-edge
        (M_u, M_v) tables; table sums reproduce score_labeling for feasible y."""
        unary = self.unary_block(w)
        full = self.stacked_features @ unary.T                 # (n_nodes, weight_labels)
        node_tables = [full[v, : self.n_labels[v]] for v in range(self.n_nodes)]
        trans = self.transition_block(w)
        edge_tables = []
        for u, v in self.edges:
            if trans is None:
                edge_tables.append(np.zeros((self.n_labels[u], self.n_labels[v])))
            else:
                edge_tables.append(trans[: self.n_labels[u], : self.n_labels[v]].copy())
        return node_tables, edge_tables

    def feature_map(self, y):
        """F(x, y) as a flat weight-dimension vector; y must be feasible."""
        y = self.check_labeling(y)
        if not self.logic_ok(y):
            raise ContractError("labeling violates a logic factor")
        m, p = self.max_labels, self.feature_dim
        out = np.zeros(self.weight_dim)
        unary = out[: m * p].reshape(m, p)
        for v, label in enumerate(y):
            unary[label] += self.node_features[v]
        if self.pairwise == "transitions":
            trans = out[m * p:].reshape(m, m)
            for u, v in self.edges:
                trans[y[u], y[v]] += 1.0
        return out

    def feature_expectation(self, marginals):
        """E_mu[F(x, .)] under clique marginals, same layout as feature_map."""
        m, p = self.max_labels, self.feature_dim
        out = np.zeros(self.weight_dim)
        unary = out[: m * p].reshape(m, p)
        if len(set(self.n_labels)) == 1:
            mv = self.n_labels[0]
            node_mat = np.stack(marginals.node, axis=0)        # (n_nodes, mv)
            unary[:mv] = node_mat.T @ self.stacked_features
        else:
            for v in range(self.n_nodes):
                unary[: self.n_labels[v]] += np.outer(marginals.node[v],
                                                      self.node_features[v])
        if self.pairwise == "transitions":
            trans = out[m * p:].reshape(m, m)
            for e, (u, v) in enumerate(self.edges):
                trans[: self.n_labels[u], : self.n_labels[v]] += marginals.edge[e]
        return out

    # -- serialization -------------------------------------------------------

    def to_json(self):
        return {
            "nodes": [
                {"labels": self.n_labels[v],
                 "unary_features": {"dims": [self.feature_dim],
                                    "values": self.node_features[v].tolist()}}
                for v in range(self.n_nodes)
            ],
            "edges": [list(e) for e in self.edges],
            "logic_factors": [
                {"kind": fac.kind, "members": [list(m) for m in fac.members]}
                for fac in self.logic_factors
            ],
            "pairwise": self.pairwise,
            "weight_labels": self.weight_labels,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            node_features=[np.array(nd["unary_features"]["values"]).reshape(
                nd["unary_features"]["dims"]) for nd in doc["nodes"]],
            n_labels=[nd["labels"] for nd in doc["nodes"]],
            edges=[tuple(e) for e in doc["edges"]],
            logic_factors=[LogicFactor(f["kind"], f["members"])
                           for f in doc["logic_factors"]],
            pairwise=doc.get("pairwise", "transitions"),
            weight_labels=doc.get("weight_labels"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# clique marginals
# ---------------------------------------------------------------------------

class CliqueMarginals:
    """Per-node label distributions plus per-edge joint distributions,
    aligned with a model's node order and edge list."""

    __slots__ = ("node", "edge")

    def __init__(self, node, edge):
        self.node = [np.asarray(a, dtype=np.float64) for a in node]
        self.edge = [np.asarray(a, dtype=np.float64) for a in edge]

    @classmethod
    def uniform(cls, model):
        node = [np.full(m, 1.0 / m) for m in model.n_labels]
        edge = [np.full((model.n_labels[u], model.n_labels[v]),
                        1.0 / (model.n_labels[u] * model.n_labels[v]))
                for u, v in model.edges]
        return cls(node, edge)

    @classmethod
    def dirac(cls, model, y, epsilon=0.0):
        """Point mass at y, optionally smoothed by epsilon spread off the peak."""
        y = model.check_labeling(y)
        node = []
        for v, m in enumerate(model.n_labels):
            d = np.full(m, epsilon / (m - 1) if m > 1 else 0.0)
            d[y[v]] = 1.0 - epsilon if m > 1 else 1.0
            node.append(d)
        edge = [np.outer(node[u], node[v]) for u, v in model.edges]
        return cls(node, edge)

    def validate(self, model, sum_tol=1e-8, cons_tol=1e-6):
        for v, d in enumerate(self.node):
            if np.any(d < -1e-12):
                raise ContractError(f"negative node marginal at node {v}")
            if abs(d.sum() - 1.0) > sum_tol:
                raise ContractError(f"node marginal at {v} sums to {d.sum()}")
        for e, (u, v) in enumerate(model.edges):
            tab = self.edge[e]
            if np.any(tab < -1e-12):
                raise ContractError(f"negative edge marginal on edge {e}")
            if abs(tab.sum() - 1.0) > sum_tol:
                raise ContractError(f"edge marginal {e} sums to {tab.sum()}")
            if (np.abs(tab.sum(axis=1) - self.node[u]).max() > cons_tol
                    or np.abs(tab.sum(axis=0) - self.node[v]).max() > cons_tol):
                raise ContractError(f"edge marginal {e} inconsistent with its nodes")
        return self

    def combine(self, other, a=1.0, b=1.0):
        return CliqueMarginals(
            [a * x + b * y for x, y in zip(self.node, other.node)],
            [a * x + b * y for x, y in zip(self.edge, other.edge)])

    def copy(self):
        return CliqueMarginals([a.copy() for a in self.node],
                               [a.copy() for a in self.edge])

    def logs(self, floor=1e-300):
        return ([np.log(np.maximum(a, floor)) for a in self.node],
                [np.log(np.maximum(a, floor)) for a in self.edge])


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------

def score_labeling(w, model, y):
    return model.score_labeling(w, y)


def potentials(w, model):
    return model.potentials(w)


def neg_log_likelihood(w, model, y_true):
    """-log p(y_true | x; w) on a chain (log-partition minus the score)."""
    from .inference import sum_product_chain
    if model.logic_factors:
        raise TopologyError("neg_log_likelihood requires a model without logic factors")
    if model.topology != "chain" and model.edges:
        raise TopologyError("neg_log_likelihood needs exact inference (chain topology)")
    y_true = model.check_labeling(y_true)
    node_tables, edge_tables = model.potentials(w)
    log_z, _ = sum_product_chain(node_tables, edge_tables)
    nll = log_z - model.score_labeling(w, y_true)
    if nll < -1e-9:
        raise ContractError(f"negative log-likelihood came out {nll} < 0")
    return nll


def primal_objective(w, dataset, lam):
    """lam/2 ||w||^2 + mean negative log-likelihood over (model, y) pairs."""
    if not lam > 0:
        raise ConfigurationError("lambda must be positive")
    total = sum(neg_log_likelihood(w, model, y) for model, y in dataset)
    return 0.5 * lam * float(w @ w) + total / len(dataset)
