"""End-to-end training of the CKN + structured predictor stack.

The outer loop alternates: CKN forward over every node input, optional
rescaling, structured-predictor epochs (SDCA or BCFW) on the resulting
features, then a chain-rule gradient step on the CKN filters (and the
embedding tables, when one is used) from freshly inferred probabilities.
"""

import json
import time

import numpy as np

from .ckn import CknModel, LayerSpec, ckn_backward, ckn_forward, unsupervised_init
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .featmap import FeatureMap
from .graph import FactorGraphModel, primal_objective
from .inference import max_product_chain, peaked_marginals, sum_product_chain
from .optim import (bcfw_init, bcfw_step, chain_oracle, duality_gap, make_peaked_oracle,
                    sdca_epoch, sdca_init)
from .scaling import Scaler
from .ad3 import ad3_map


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35.0, 35.0)))


# ---------------------------------------------------------------------------
# embedding layer
# ---------------------------------------------------------------------------

class Embedding:
    """Per-field lookup tables for categorical node inputs; the concatenated
    row vectors feed the CKN."""

    def __init__(self, vocab_sizes, dim, seed=0, trainable=True, ordinal=()):
        if dim <= 0:
            raise ConfigurationError("embedding dimension must be positive")
        self.vocab_sizes = list(vocab_sizes)
        self.dim = int(dim)
        self.trainable = bool(trainable)
        n_fields = len(self.vocab_sizes)
        base, extra = divmod(self.dim, n_fields)
        self.field_dims = [base + (1 if f < extra else 0) for f in range(n_fields)]
        rng = np.random.default_rng(seed)
        self.tables = [rng.normal(scale=0.3 / np.sqrt(max(d, 1)), size=(v, d))
                       for v, d in zip(self.vocab_sizes, self.field_dims)]
        # ordinal fields (binned times, durations, gaps) get a monotone ramp
        # in their first coordinate so magnitude comparisons stay linear
        for f in ordinal:
            if f >= n_fields:
                continue
            v = self.vocab_sizes[f]
            if v > 1 and self.field_dims[f] > 0:
                self.tables[f][:, 0] = np.linspace(-1.0, 1.0, v)

    def forward(self, cats):
        """(n_items, n_fields) int indices -> (n_items, dim) vectors."""
        cats = np.asarray(cats, dtype=int)
        for f, vocab in enumerate(self.vocab_sizes):
            if np.any((cats[:, f] < 0) | (cats[:, f] >= vocab)):
                raise ContractError(f"categorical index out of range in field {f}")
        return np.concatenate([self.tables[f][cats[:, f]]
                               for f in range(len(self.tables))], axis=1)

    def zero_grads(self):
        return [np.zeros_like(t) for t in self.tables]

    def to_json(self):
        return {"vocab_sizes": self.vocab_sizes, "dim": self.dim,
                "trainable": self.trainable,
                "tables": [t.tolist() for t in self.tables]}

    ORDINAL_DEFAULT = ()

    @classmethod
    def from_json(cls, doc):
        emb = cls(doc["vocab_sizes"], doc["dim"], trainable=doc["trainable"])
        emb.tables = [np.array(t) for t in doc["tables"]]
        return emb


def embedding_forward_backward(embedding, cats, upstream=None):
    """Lookup plus gradient accumulation into the looked-up rows only.

    Returns (vectors, table_grads); table_grads is None when no upstream
    gradient is given.
    """
    vectors = embedding.forward(cats)
    if upstream is None:
        return vectors, None
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != vectors.shape:
        raise ContractError("upstream gradient shape does not match the lookups")
    grads = embedding.zero_grads()
    cats = np.asarray(cats, dtype=int)
    offset = 0
    for f, d in enumerate(embedding.field_dims):
        np.add.at(grads[f], cats[:, f], upstream[:, offset: offset + d])
        offset += d
    return vectors, grads


# ---------------------------------------------------------------------------
# structured examples
# ---------------------------------------------------------------------------

class StructuredExample:
    """One training example: per-node inputs plus the output structure.

    node_maps carries ready feature maps (image tasks); node_categoricals
    carries (n_slots, n_fields) integer grids that an embedding turns into
    maps (one column per slot). Exactly one of the two is set.
    """

    def __init__(self, labels, n_labels, edges=(), logic_factors=(),
                 pairwise="transitions", node_maps=None, node_categoricals=None,
                 slot_masks=None, begin_labels=None, layover_labels=None,
                 weight_labels=None, tag=None, successor_index=None):
        self.labels = np.asarray(labels, dtype=int)
        self.n_labels = list(n_labels)
        self.edges = list(edges)
        self.logic_factors = list(logic_factors)
        self.pairwise = pairwise
        self.node_maps = node_maps
        self.node_categoricals = node_categoricals
        self.slot_masks = slot_masks
        self.begin_labels = begin_labels
        self.layover_labels = layover_labels
        self.weight_labels = weight_labels
        self.tag = tag
        # (n_slots,) int array per node: the node index each candidate rank
        # selects, -1 for empty slots (crew task only)
        self.successor_index = successor_index
        if (node_maps is None) == (node_categoricals is None):
            raise ConfigurationError("set exactly one of node_maps / node_categoricals")

    @property
    def n_nodes(self):
        return len(self.labels)

    @property
    def is_chain(self):
        return (not self.logic_factors
                and self.edges == [(i, i + 1) for i in range(self.n_nodes - 1)])


def node_input_maps(example, embedding):
    """Per-node FeatureMaps, embedding categorical grids when needed."""
    if example.node_maps is not None:
        return example.node_maps
    maps = []
    for v in range(example.n_nodes):
        grid = example.node_categoricals[v]
        vecs = embedding.forward(grid)                  # (n_slots, dim)
        if example.slot_masks is not None:
            vecs = vecs * example.slot_masks[v][:, None]
        maps.append(FeatureMap(vecs.T[:, :, None]))     # (dim, n_slots, 1)
    return maps


# ---------------------------------------------------------------------------
# configuration and model container
# ---------------------------------------------------------------------------

class TrainConfig:
    """Everything the outer training loop needs; mirrors the JSON config."""

    def __init__(self, layers, optimizer="sdca", n_ep=10, outer_iters=30, lam=None,
                 scaler="average_unit_norm", patches_per_image=40, seed=0,
                 ckn_lr=0.1, ckn_decay_every=20, ckn_decay=0.5,
                 freeze_inv_sqrt=False, uniform_frac=0.8, loss_weight=1.0,
                 batch_size=None, embedding_dim=16, embedding_trainable=True,
                 head_lr=0.5, head_epochs=40, position_bias=True,
                 peaked_epsilon=1e-6, ad3_max_iters=400, ad3_eta=0.1,
                 ad3_residual_tol=1e-6, divergence_patience=5,
                 divergence_factor=1.10, ordinal_fields=(3, 4, 5)):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l)
                       for l in layers]
        if optimizer not in ("sdca", "bcfw"):
            raise ConfigurationError(f"unknown optimizer {optimizer!r}")
        self.optimizer = optimizer
        self.n_ep = n_ep
        self.outer_iters = outer_iters
        self.lam = lam
        self.scaler = scaler
        self.patches_per_image = patches_per_image
        self.seed = seed
        self.ckn_lr = ckn_lr
        self.ckn_decay_every = ckn_decay_every
        self.ckn_decay = ckn_decay
        self.freeze_inv_sqrt = freeze_inv_sqrt
        self.uniform_frac = uniform_frac
        self.loss_weight = loss_weight
        self.batch_size = batch_size
        self.embedding_dim = embedding_dim
        self.embedding_trainable = embedding_trainable
        self.head_lr = head_lr
        self.head_epochs = head_epochs
        self.position_bias = position_bias
        self.peaked_epsilon = peaked_epsilon
        self.ad3_max_iters = ad3_max_iters
        self.ad3_eta = ad3_eta
        self.ad3_residual_tol = ad3_residual_tol
        self.divergence_patience = divergence_patience
        self.divergence_factor = divergence_factor
        self.ordinal_fields = tuple(ordinal_fields)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class StructCknModel:
    """The trained stack: optional embedding, CKN, scaler, structured-predictor
    weights, and the two auxiliary binary heads for the crew task."""

    FORMAT_VERSION = 1

    def __init__(self, ckn, scaler=None, embedding=None, weights=None,
                 weight_labels=None, pairwise="transitions", position_bias=True,
                 begin_head=None, layover_head=None, config_snapshot=None):
        self.ckn = ckn
        self.scaler = scaler
        self.embedding = embedding
        self.weights = weights
        self.weight_labels = weight_labels
        self.pairwise = pairwise
        self.position_bias = position_bias
        self.begin_head = begin_head
        self.layover_head = layover_head
        self.config_snapshot = config_snapshot or {}

    # -- feature pipeline ----------------------------------------------------

    def node_rows(self, example):
        """Raw flattened CKN features per node, plus pooled channel vectors."""
        maps = node_input_maps(example, self.embedding)
        rows, pooled = [], []
        for m in maps:
            out, _ = ckn_forward(m, self.ckn, keep_cache=False)
            rows.append(out.flatten())
            pooled.append(out.data.mean(axis=(0, 1)))
        return np.stack(rows, axis=0), np.stack(pooled, axis=0)

    def slot_pooled(self, example):
        """Per-(node, slot) channel vectors: the output columns whose patches
        contain the slot, height-averaged. Feeds the transition-conditioned
        layover head (a slot's column embeds its connection features)."""
        maps = node_input_maps(example, self.embedding)
        n_slots = maps[0].width
        pw = self.ckn.layers[0].patch_w if self.ckn.layers else 1
        out_all = []
        for m in maps:
            out, _ = ckn_forward(m, self.ckn, keep_cache=False)
            data = out.data.mean(axis=0)                 # (w_out, channels)
            sub = self.ckn.layers[-1].subsample if self.ckn.layers else 1
            per_slot = np.zeros((n_slots, data.shape[1]))
            for k in range(n_slots):
                lo = max(0, (k - pw + 1)) // sub
                hi = max(lo + 1, min(k, (data.shape[0] * sub) - 1) // sub + 1)
                hi = min(hi, data.shape[0])
                per_slot[k] = data[lo:hi].mean(axis=0)
            out_all.append(per_slot)
        return np.stack(out_all, axis=0)                 # (n_nodes, n_slots, c)

    def build_graph(self, example, rows=None):
        """FactorGraphModel for one example from (scaled) CKN features."""
        if rows is None:
            rows, _ = self.node_rows(example)
        if self.scaler is not None:
            rows = self.scaler.transform(rows)
        feats = assemble_node_features(rows, example, self.position_bias)
        return FactorGraphModel(
            feats, example.n_labels, example.edges, example.logic_factors,
            pairwise=example.pairwise,
            topology="chain" if example.is_chain else "general",
            weight_labels=self.weight_labels)

    def head_probability(self, head, pooled):
        return _sigmoid(pooled @ head[:-1] + head[-1])

    def save(self, path):
        doc = {
            "format_version": self.FORMAT_VERSION,
            "ckn": self.ckn.to_json(),
            "scaler": self.scaler.to_json() if self.scaler else None,
            "embedding": self.embedding.to_json() if self.embedding else None,
            "weights": None if self.weights is None else self.weights.tolist(),
            "weight_labels": self.weight_labels,
            "pairwise": self.pairwise,
            "position_bias": self.position_bias,
            "begin_head": None if self.begin_head is None else self.begin_head.tolist(),
            "layover_head": None if self.layover_head is None else self.layover_head.tolist(),
            "config": self.config_snapshot,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format_version") != cls.FORMAT_VERSION:
            raise ConfigurationError("unsupported model container version")
        return cls(
            ckn=CknModel.from_json(doc["ckn"]),
            scaler=Scaler.from_json(doc["scaler"]) if doc["scaler"] else None,
            embedding=Embedding.from_json(doc["embedding"]) if doc["embedding"] else None,
            weights=None if doc["weights"] is None else np.array(doc["weights"]),
            weight_labels=doc["weight_labels"],
            pairwise=doc["pairwise"],
            position_bias=doc["position_bias"],
            begin_head=None if doc["begin_head"] is None else np.array(doc["begin_head"]),
            layover_head=None if doc["layover_head"] is None else np.array(doc["layover_head"]),
            config_snapshot=doc.get("config", {}),
        )


def assemble_node_features(scaled_rows, example, position_bias):
    """Append the bias features ([1] or [1, first, last]) to scaled rows."""
    n = example.n_nodes
    feats = []
    for v in range(n):
        if position_bias and example.is_chain:
            extra = [1.0, 1.0 if v == 0 else 0.0, 1.0 if v == n - 1 else 0.0]
        else:
            extra = [1.0]
        feats.append(np.concatenate([scaled_rows[v], extra]))
    return feats


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _infer_weight_labels(examples):
    return max(max(ex.n_labels) for ex in examples)


def _surrogate_objective(weights, dataset, lam, chains):
    """Divergence-detector objective: the primal objective on chains, a mean
    per-node unary cross-entropy on general graphs (where the true
    log-partition is intractable)."""
    if chains:
        return primal_objective(weights, dataset, lam)
    total = cnt = 0.0
    for model, y in dataset:
        node_tables, _ = model.potentials(weights)
        for v, tab in enumerate(node_tables):
            z = tab - tab.max()
            total += -(z[y[v]] - np.log(np.exp(z).sum()))
            cnt += 1
    return 0.5 * lam * float(weights @ weights) + total / cnt


def train_struct_ckn(examples, config, eval_examples=None, log_rows=None):
    """Full pipeline on a list of structured examples (one CKN update per
    outer iteration from all nodes)."""
    return _train(examples, config, batch_size=None, eval_examples=eval_examples,
                  log_rows=log_rows)


def batch_train_struct_ckn(instances, config, eval_examples=None, log_rows=None):
    """Batch variant: each instance is one CRF example; CKN updates are driven
    by mini-batches of node feature maps (default 128)."""
    if not instances:
        raise ConfigurationError("need at least one instance")
    batch = config.batch_size if config.batch_size is not None else 128
    return _train(instances, config, batch_size=batch, eval_examples=eval_examples,
                  log_rows=log_rows)


def _train(examples, config, batch_size, eval_examples=None, log_rows=None):
    if not examples:
        raise ConfigurationError("training needs at least one example")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    seed_emb, seed_ckn, seed_opt, _ = [s.generate_state(1)[0] for s in seeds]

    embedding = None
    if examples[0].node_categoricals is not None:
        n_fields = examples[0].node_categoricals[0].shape[1]
        vocab = np.zeros(n_fields, dtype=int)
        for ex in examples:
            for grid in ex.node_categoricals:
                vocab = np.maximum(vocab, np.asarray(grid).max(axis=0) + 1)
        embedding = Embedding(vocab.tolist(), config.embedding_dim, seed=seed_emb,
                              trainable=config.embedding_trainable,
                              ordinal=config.ordinal_fields)

    init_maps = []
    for ex in examples:
        init_maps.extend(node_input_maps(ex, embedding))
    ckn = unsupervised_init(init_maps, config.layers,
                            patches_per_image=config.patches_per_image,
                            seed=seed_ckn)

    weight_labels = _infer_weight_labels(examples)
    model = StructCknModel(ckn=ckn, scaler=None, embedding=embedding,
                           weights=None, weight_labels=weight_labels,
                           pairwise=examples[0].pairwise,
                           position_bias=config.position_bias,
                           config_snapshot=_snapshot(config))
    if config.outer_iters == 0:
        return model

    chains = all(ex.is_chain for ex in examples)
    oracle = chain_oracle if chains else make_peaked_oracle(
        config.peaked_epsilon, config.ad3_max_iters, config.ad3_eta,
        config.ad3_residual_tol)
    lam = config.lam if config.lam is not None else 1.0 / len(examples)
    has_heads = any(ex.begin_labels is not None for ex in examples)
    opt_state = None
    lr = config.ckn_lr
    objective_history = []
    worse_streak = 0
    start = time.time()

    for outer in range(1, config.outer_iters + 1):
        if outer > 1 and (outer - 1) % config.ckn_decay_every == 0:
            lr *= config.ckn_decay

        # step 4-5: CKN features for every node, then center/rescale
        raw_rows, pooled_rows, offsets = _forward_all(model, examples)
        if config.scaler is not None:
            model.scaler = Scaler(config.scaler).fit(raw_rows)
            scaled = model.scaler.transform(raw_rows)
        else:
            model.scaler = None
            scaled = raw_rows
        dataset = []
        for k, ex in enumerate(examples):
            rows = scaled[offsets[k]: offsets[k + 1]]
            feats = assemble_node_features(rows, ex, config.position_bias)
            dataset.append((FactorGraphModel(
                feats, ex.n_labels, ex.edges, ex.logic_factors,
                pairwise=ex.pairwise,
                topology="chain" if ex.is_chain else "general",
                weight_labels=weight_labels), ex.labels))

        # step 7: structured predictor epochs (dual state warm-started, the
        # weights reconjugated against the new features)
        if config.optimizer == "sdca":
            if opt_state is None:
                opt_state = sdca_init(dataset, lam, seed=seed_opt)
            else:
                opt_state.dataset = dataset
                opt_state.w = opt_state.conjugate_weights()
            for _ in range(config.n_ep):
                sdca_epoch(opt_state, oracle, config.uniform_frac)
            weights = opt_state.w
        else:
            if opt_state is None:
                opt_state = bcfw_init(dataset, lam, seed=seed_opt)
            else:
                opt_state.dataset = dataset
            for _ in range(config.n_ep):
                for _ in range(opt_state.n):
                    i = int(opt_state.rng.integers(opt_state.n))
                    bcfw_step(opt_state, i, config.loss_weight)
            weights = opt_state.w
        model.weights = weights

        # auxiliary heads on pooled features (summed cross-entropies)
        head_grads_rows = np.zeros_like(pooled_rows) if has_heads else None
        if has_heads:
            head_grads_rows = _train_heads(model, examples, pooled_rows, offsets,
                                           config)

        # steps 6 and 8: fresh probabilities, chain-rule gradient on filters
        grad_rows = _feature_gradient(model, dataset, examples, oracle)
        if model.scaler is not None:
            grad_rows = model.scaler.transform_grad(grad_rows, raw_rows)
        _apply_ckn_updates(model, examples, grad_rows, head_grads_rows, offsets,
                           lr, config, batch_size)

        obj = _surrogate_objective(weights, dataset, lam, chains)
        if objective_history and obj > objective_history[-1] * config.divergence_factor:
            worse_streak += 1
            if worse_streak >= config.divergence_patience:
                raise TrainingDivergedError(
                    f"objective grew >{ (config.divergence_factor - 1) * 100:.0f}% for "
                    f"{worse_streak} consecutive outer iterations",
                    history=objective_history + [obj])
        else:
            worse_streak = 0
        objective_history.append(obj)
        if log_rows is not None:
            row = {"epoch": outer, "step": getattr(opt_state, "step_count",
                                                   getattr(opt_state, "k", 0)),
                   "primal": obj, "dual": "", "gap": "", "test_error": "",
                   "wall_seconds": time.time() - start}
            if config.optimizer == "sdca":
                row["dual"] = opt_state.dual_objective()
            if eval_examples is not None:
                row["test_error"] = evaluate_error(model, eval_examples)
            log_rows.append(row)
    return model


def _snapshot(config):
    doc = dict(config.__dict__)
    doc["layers"] = [dict(patch_h=l.patch_h, patch_w=l.patch_w, n_filters=l.n_filters,
                          alpha=l.kernel.alpha, eigen_floor=l.kernel.eigen_floor,
                          pool_beta=l.pool_beta, subsample=l.subsample,
                          kmeans_iters=l.kmeans_iters)
                     for l in config.layers]
    return doc


def _forward_all(model, examples):
    rows, pooled, offsets = [], [], [0]
    for ex in examples:
        r, p = model.node_rows(ex)
        rows.append(r)
        pooled.append(p)
        offsets.append(offsets[-1] + len(r))
    return np.concatenate(rows, axis=0), np.concatenate(pooled, axis=0), offsets


def _feature_gradient(model, dataset, examples, oracle):
    """d(NLL)/d(scaled features), normalized per node so the filter-step size
    is comparable across tasks (many short chains vs one large graph)."""
    total_nodes = sum(graph.n_nodes for graph, _ in dataset)
    p_core_rows = []
    for k, (graph, y) in enumerate(dataset):
        nu = oracle(model.weights, graph)
        unary = graph.unary_block(model.weights)
        p_core = graph.feature_dim - (3 if (model.position_bias
                                            and examples[k].is_chain) else 1)
        for v in range(graph.n_nodes):
            resid = nu.node[v].copy()
            resid[y[v]] -= 1.0
            p_core_rows.append(
                resid @ unary[: graph.n_labels[v], :p_core] / total_nodes)
    return np.stack(p_core_rows, axis=0)


def _train_heads(model, examples, pooled_rows, offsets, config):
    """Logistic heads trained alongside the structured predictor.

    The begin head reads whole-map pooled features per node. The layover head
    is transition-conditioned: it reads the slot-local pooled features of the
    predecessor's map at the chosen candidate, where the connection's own
    embedded features (including its gap) live. Returns the begin head's
    cross-entropy gradient on the pooled rows."""
    p_pool = pooled_rows.shape[1]
    if model.begin_head is None:
        model.begin_head = np.zeros(p_pool + 1)
        model.layover_head = np.zeros(p_pool + 1)
    begin_y = np.concatenate([np.asarray(ex.begin_labels, dtype=np.float64)
                              for ex in examples])
    model.begin_head, grads = _fit_logistic(model.begin_head, pooled_rows,
                                            begin_y, config, want_grad=True)

    # transition samples for the layover head
    xs, ys = [], []
    for k_ex, ex in enumerate(examples):
        if ex.successor_index is None:
            continue
        slot_feats = model.slot_pooled(ex)
        for v in range(ex.n_nodes):
            lab = ex.labels[v]
            if lab >= len(ex.successor_index[v]):
                continue
            succ = ex.successor_index[v][lab]
            if succ < 0:
                continue
            xs.append(slot_feats[v, lab])
            ys.append(float(ex.layover_labels[succ]))
    if xs:
        x = np.stack(xs, axis=0)
        y = np.array(ys)
        if model.layover_head.shape[0] != x.shape[1] + 1:
            model.layover_head = np.zeros(x.shape[1] + 1)
        model.layover_head, _ = _fit_logistic(model.layover_head, x, y, config)
    return grads


def _fit_logistic(head, x, y, config, want_grad=False):
    """Class-balanced logistic regression on norm-standardized features, the
    scale folded back so inference uses raw features."""
    n = len(x)
    n_pos = max(float(y.sum()), 1.0)
    n_neg = max(float(n - y.sum()), 1.0)
    sample_w = np.where(y > 0.5, n / (2 * n_pos), n / (2 * n_neg))
    scale = float(np.linalg.norm(x, axis=1).mean())
    scale = scale if scale > 0 else 1.0
    xs = x / scale
    fit = np.concatenate([head[:-1] * scale, [head[-1]]])
    for _ in range(config.head_epochs):
        p = _sigmoid(xs @ fit[:-1] + fit[-1])
        resid = sample_w * (p - y) / n
        fit = fit - config.head_lr * np.concatenate([xs.T @ resid, [resid.sum()]])
    head = np.concatenate([fit[:-1] / scale, [fit[-1]]])
    grad = None
    if want_grad:
        p = _sigmoid(x @ head[:-1] + head[-1])
        grad = np.outer(sample_w * (p - y) / n, head[:-1])
    return head, grad


def _apply_ckn_updates(model, examples, grad_rows, head_grad_rows, offsets, lr,
                       config, batch_size):
    """Backpropagate feature-row gradients through the CKN in mini-batches,
    taking one projected gradient step per batch."""
    node_index = []
    for k, ex in enumerate(examples):
        for v in range(ex.n_nodes):
            node_index.append((k, v))
    order = np.arange(len(node_index))
    chunks = [order] if batch_size is None else \
        [order[i:i + batch_size] for i in range(0, len(order), batch_size)]

    out_channels = model.ckn.output_channels
    for chunk in chunks:
        filter_grads = [np.zeros_like(l.filters) for l in model.ckn.layers]
        emb_grads = model.embedding.zero_grads() \
            if (model.embedding is not None and model.embedding.trainable) else None
        maps_cache = {}
        for idx in chunk:
            k, v = node_index[idx]
            ex = examples[k]
            if k not in maps_cache:
                maps_cache[k] = node_input_maps(ex, model.embedding)
            fmap = maps_cache[k][v]
            out, cache = ckn_forward(fmap, model.ckn)
            g_map = grad_rows[idx].reshape(out.data.shape).copy()
            if head_grad_rows is not None:
                n_loc = out.data.shape[0] * out.data.shape[1]
                g_map += head_grad_rows[idx][None, None, :] / n_loc
            fg, g_in = ckn_backward(g_map, cache, model.ckn,
                                    freeze_inv_sqrt=config.freeze_inv_sqrt)
            for a, b in zip(filter_grads, fg):
                a += b
            if emb_grads is not None:
                g_vecs = g_in[:, :, 0].T                     # (n_slots, dim)
                if ex.slot_masks is not None:
                    g_vecs = g_vecs * ex.slot_masks[v][:, None]
                _, tg = embedding_forward_backward(
                    model.embedding, ex.node_categoricals[v], g_vecs)
                for a, b in zip(emb_grads, tg):
                    a += b
        for layer, g in zip(model.ckn.layers, filter_grads):
            layer.set_filters(layer.filters - lr * g, renormalize=True)
        if emb_grads is not None:
            for t, g in zip(model.embedding.tables, emb_grads):
                t -= lr * g


# ---------------------------------------------------------------------------
# inference with a trained model
# ---------------------------------------------------------------------------

def infer_labels(model, example, ad3_max_iters=1000, ad3_eta=0.1,
                 ad3_residual_tol=1e-6, peaked_epsilon=1e-6):
    """Labeling plus per-node probabilities.

    Chains get exact marginals and the Viterbi labeling; general graphs use
    AD3 MAP and peaked marginals.
    """
    if model.weights is None:
        raise ConfigurationError("model has no trained predictor weights")
    graph = model.build_graph(example)
    node_tables, edge_tables = graph.potentials(model.weights)
    if example.is_chain:
        labels, _ = max_product_chain(node_tables, edge_tables)
        _, mu = sum_product_chain(node_tables, edge_tables)
        return labels, mu.node
    res = ad3_map(graph, node_tables, edge_tables, max_iters=ad3_max_iters,
                  eta=ad3_eta, residual_tol=ad3_residual_tol)
    mu = peaked_marginals(res.map_labeling, graph, epsilon=peaked_epsilon)
    return res.map_labeling, mu.node


def evaluate_error(model, examples, **kw):
    """Per-node error rate of the MAP labeling over a list of examples."""
    wrong = total = 0
    for ex in examples:
        labels, _ = infer_labels(model, ex, **kw)
        wrong += int(np.sum(labels != ex.labels))
        total += ex.n_nodes
    return wrong / total
