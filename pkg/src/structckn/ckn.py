"""Multilayer convolutional kernel networks.

Forward evaluation, unsupervised initialization (patch sampling + spherical
K-means + kernel inverse square root), and the backward pass used to train
filters with a structured loss on top.
"""

import json

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .featmap import FeatureMap, as_feature_map

MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# dot-product kernel on the sphere
# ---------------------------------------------------------------------------

class KernelConfig:
    """Parameters of the dot-product kernel kappa(t) = exp(alpha * (t - 1)).

    alpha sets the sharpness; eigen_floor regularizes the inverse square root
    of the filter Gram matrix.
    """

    __slots__ = ("alpha", "eigen_floor")

    def __init__(self, alpha=1.0, eigen_floor=1e-6):
        if not alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {alpha}")
        if not eigen_floor > 0:
            raise ConfigurationError(f"eigen_floor must be positive, got {eigen_floor}")
        self.alpha = float(alpha)
        self.eigen_floor = float(eigen_floor)

    def __eq__(self, other):
        return (isinstance(other, KernelConfig)
                and self.alpha == other.alpha and self.eigen_floor == other.eigen_floor)

    def __repr__(self):
        return f"KernelConfig(alpha={self.alpha}, eigen_floor={self.eigen_floor})"


def kappa(t, cfg):
    """Evaluate kappa on cosines in [-1, 1]; inputs are clamped, never rejected."""
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    return np.exp(cfg.alpha * (t - 1.0))


def kappa_prime(t, cfg):
    """Derivative of kappa at t (same clamping as kappa)."""
    return cfg.alpha * kappa(t, cfg)


def inv_sqrt_kernel(filters, cfg):
    """Eigenvalue-floored inverse square root of kappa(Z^T Z).

    Returns (A, eigvecs, eigvals) so the backward pass can reuse the
    decomposition; A is symmetric and A @ kappa(Z^T Z) @ A ~ I whenever no
    eigenvalue hits the floor.
    """
    gram = filters.T @ filters
    # columns are unit norm, so the Gram lives in [-1, 1] up to rounding and
    # kappa may be applied without clamping (clamping would kink the gradient)
    kgram = np.exp(cfg.alpha * (gram - 1.0))
    if not np.all(np.isfinite(kgram)):
        raise NumericError("kernel Gram matrix has non-finite entries")
    eigvals, eigvecs = np.linalg.eigh(kgram)
    floored = np.maximum(eigvals, cfg.eigen_floor)
    a = (eigvecs * floored ** -0.5) @ eigvecs.T
    a = 0.5 * (a + a.T)
    if not np.all(np.isfinite(a)):
        raise NumericError("inverse square root has non-finite entries")
    return a, eigvecs, eigvals


# ---------------------------------------------------------------------------
# patches and pooling
# ---------------------------------------------------------------------------

def patch_grid_shape(height, width, patch_h, patch_w):
    if patch_h > height or patch_w > width:
        raise DimensionError(
            f"patch {patch_h}x{patch_w} larger than map {height}x{width}")
    return height - patch_h + 1, width - patch_w + 1


def extract_patches(fmap, patch_h, patch_w):
    """All valid (no padding) patches of a map as columns.

    Column order is row-major over patch centers; within a column the layout
    is row-major over (dy, dx, channel).
    """
    fmap = as_feature_map(fmap)
    out_h, out_w = patch_grid_shape(fmap.height, fmap.width, patch_h, patch_w)
    windows = np.lib.stride_tricks.sliding_window_view(
        fmap.data, (patch_h, patch_w), axis=(0, 1))
    # windows: (out_h, out_w, c, patch_h, patch_w) -> (dy, dx, c) per patch
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, -1).T
    return np.ascontiguousarray(cols)


def scatter_patches(grad_cols, height, width, channels, patch_h, patch_w):
    """Transpose of extract_patches: accumulate per-patch gradients into a map."""
    out_h, out_w = patch_grid_shape(height, width, patch_h, patch_w)
    grads = grad_cols.T.reshape(out_h, out_w, patch_h, patch_w, channels)
    out = np.zeros((height, width, channels))
    for dy in range(patch_h):
        for dx in range(patch_w):
            out[dy:dy + out_h, dx:dx + out_w, :] += grads[:, :, dy, dx, :]
    return out


def _pool_matrix(n_in, pool_beta, subsample):
    centers = np.arange(0, n_in, subsample)
    grid = np.arange(n_in)
    return np.exp(-pool_beta * (centers[:, None] - grid[None, :]) ** 2)


def gaussian_pool(fmap, pool_beta, subsample=1):
    """Gaussian-weighted pooling evaluated on the subsampled grid.

    out(z) = sum_{z'} m(z') exp(-pool_beta * ||z' - z||^2); separable over
    rows and columns, linear in the input map.
    """
    if subsample < 1:
        raise ConfigurationError("subsample stride must be >= 1")
    fmap = as_feature_map(fmap)
    pr = _pool_matrix(fmap.height, pool_beta, subsample)
    pc = _pool_matrix(fmap.width, pool_beta, subsample)
    pooled = np.einsum("ar,rqc,bq->abc", pr, fmap.data, pc, optimize=True)
    return FeatureMap(pooled)


def gaussian_pool_backward(grad_out, in_h, in_w, pool_beta, subsample):
    pr = _pool_matrix(in_h, pool_beta, subsample)
    pc = _pool_matrix(in_w, pool_beta, subsample)
    return np.einsum("ar,abc,bq->rqc", pr, grad_out, pc, optimize=True)


# ---------------------------------------------------------------------------
# spherical K-means
# ---------------------------------------------------------------------------

def spherical_kmeans(patches, k, iters=30, seed=0):
    """Cluster unit-norm columns on the sphere, maximizing the cosine objective.

    Returns a (dim, k) matrix of unit-norm centroids. Deterministic for a
    fixed seed; empty clusters are reseeded with the patch farthest (lowest
    cosine) from its current centroid.
    """
    patches = np.asarray(patches, dtype=np.float64)
    dim, n = patches.shape
    unique_cols = np.unique(patches, axis=1)
    n_distinct = unique_cols.shape[1]
    if k > n_distinct:
        raise ConfigurationError(
            f"k={k} exceeds the number of distinct patches ({n_distinct})")
    rng = np.random.default_rng(seed)
    centroids = unique_cols[:, rng.choice(n_distinct, size=k, replace=False)].copy()

    assign = None
    for _ in range(iters):
        sims = patches.T @ centroids                       # (n, k)
        new_assign = np.argmax(sims, axis=1)
        best = sims[np.arange(n), new_assign]
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign

        order = np.argsort(best, kind="stable")            # farthest first
        reseed_pos = 0
        for j in range(k):
            members = patches[:, assign == j]
            if members.shape[1] == 0:
                centroids[:, j] = patches[:, order[reseed_pos]]
                reseed_pos += 1
                continue
            mean = members.sum(axis=1)
            norm = np.linalg.norm(mean)
            if norm < 1e-12:
                centroids[:, j] = patches[:, order[reseed_pos]]
                reseed_pos += 1
            else:
                centroids[:, j] = mean / norm
    return centroids


# ---------------------------------------------------------------------------
# layers and models
# ---------------------------------------------------------------------------

class CknLayer:
    """One CKN layer: unit-norm filters, cached kernel inverse square root,
    Gaussian pooling parameters."""

    def __init__(self, patch_h, patch_w, filters, pool_beta, subsample, kernel=None):
        self.patch_h = int(patch_h)
        self.patch_w = int(patch_w)
        self.pool_beta = float(pool_beta)
        self.subsample = int(subsample)
        self.kernel = kernel or KernelConfig()
        if self.pool_beta <= 0:
            raise ConfigurationError("pool_beta must be positive")
        if self.subsample < 1:
            raise ConfigurationError("subsample stride must be >= 1")
        self.set_filters(filters, renormalize=False)

    def set_filters(self, filters, renormalize=True):
        filters = np.array(filters, dtype=np.float64)
        if filters.ndim != 2:
            raise DimensionError("filters must be a 2-D (patch_dim, n_filters) matrix")
        if filters.shape[0] % (self.patch_h * self.patch_w) != 0:
            raise DimensionError("filter rows not divisible by patch size")
        norms = np.linalg.norm(filters, axis=0)
        if renormalize:
            if np.any(norms < 1e-12):
                raise NumericError("cannot renormalize a zero filter column")
            filters = filters / norms
        elif np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("filter columns must have unit Euclidean norm")
        self.filters = filters
        self.inv_sqrt, self._eigvecs, self._eigvals = inv_sqrt_kernel(filters, self.kernel)

    @property
    def n_filters(self):
        return self.filters.shape[1]

    @property
    def in_channels(self):
        return self.filters.shape[0] // (self.patch_h * self.patch_w)


class CknModel:
    """A stack of CKN layers applied with valid patches and Gaussian pooling."""

    def __init__(self, layers, input_channels):
        self.layers = list(layers)
        self.input_channels = int(input_channels)
        prev = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != prev:
                raise DimensionError(
                    f"layer {i} expects {layer.in_channels} channels, got {prev}")
            prev = layer.n_filters

    @property
    def output_channels(self):
        return self.layers[-1].n_filters if self.layers else self.input_channels

    def output_shape(self, height, width):
        """Spatial output shape for a given input; raises if a layer underflows."""
        for i, layer in enumerate(self.layers):
            try:
                height, width = patch_grid_shape(height, width, layer.patch_h, layer.patch_w)
            except DimensionError as exc:
                raise DimensionError(f"layer {i}: {exc}") from exc
            height = (height - 1) // layer.subsample + 1
            width = (width - 1) // layer.subsample + 1
        return height, width

    def to_json(self):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "input_channels": self.input_channels,
            "layers": [
                {
                    "patch_h": layer.patch_h,
                    "patch_w": layer.patch_w,
                    "alpha": layer.kernel.alpha,
                    "eigen_floor": layer.kernel.eigen_floor,
                    "pool_beta": layer.pool_beta,
                    "subsample": layer.subsample,
                    "filters": layer.filters.reshape(-1).tolist(),
                    "dims": list(layer.filters.shape),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported model format version {doc.get('format_version')!r}")
        layers = []
        for spec in doc["layers"]:
            filters = np.array(spec["filters"], dtype=np.float64).reshape(spec["dims"])
            layers.append(CknLayer(
                spec["patch_h"], spec["patch_w"], filters,
                spec["pool_beta"], spec["subsample"],
                KernelConfig(spec["alpha"], spec.get("eigen_floor", 1e-6))))
        return cls(layers, doc["input_channels"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# projection, forward, backward
# ---------------------------------------------------------------------------

def project_patches(patch_cols, layer):
    """Nystrom features for a batch of patch columns.

    Returns (features (n_filters, n), norms, unit_cols, cosines) where the
    extras feed the backward pass.
    """
    norms = np.linalg.norm(patch_cols, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    unit = patch_cols / safe
    cosines = layer.filters.T @ unit
    kcos = np.exp(layer.kernel.alpha * (np.clip(cosines, -1.0, 1.0) - 1.0))
    feats = (layer.inv_sqrt @ kcos) * norms
    return feats, norms, unit, kcos


def nystrom_project(x, layer):
    """Feature vector Gamma(x) = ||x|| kappa(Z'Z)^{-1/2} kappa(Z'x/||x||); Gamma(0)=0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.filters.shape[0],):
        raise DimensionError(
            f"patch length {x.shape} does not match filter rows {layer.filters.shape[0]}")
    feats, _, _, _ = project_patches(x[:, None], layer)
    return feats[:, 0]


def ckn_forward(image, model, keep_cache=True):
    """Apply every layer (patches -> Nystrom projection -> Gaussian pooling).

    Returns (final FeatureMap, cache); the cache carries per-layer
    intermediates for ckn_backward and is None when keep_cache is False.
    """
    fmap = as_feature_map(image)
    if fmap.channels != model.input_channels:
        raise DimensionError(
            f"image has {fmap.channels} channels, model expects {model.input_channels}")
    cache = [] if keep_cache else None
    for i, layer in enumerate(model.layers):
        h, w = fmap.height, fmap.width
        try:
            out_h, out_w = patch_grid_shape(h, w, layer.patch_h, layer.patch_w)
        except DimensionError as exc:
            raise DimensionError(f"layer {i}: {exc}") from exc
        cols = extract_patches(fmap, layer.patch_h, layer.patch_w)
        feats, norms, unit, kcos = project_patches(cols, layer)
        pre_pool = feats.T.reshape(out_h, out_w, layer.n_filters)
        pooled = gaussian_pool(FeatureMap(pre_pool), layer.pool_beta, layer.subsample)
        if keep_cache:
            cache.append({
                "in_shape": (h, w, fmap.channels),
                "grid": (out_h, out_w),
                "cols": cols, "norms": norms, "unit": unit, "kcos": kcos,
            })
        fmap = pooled
    return fmap, cache


def _inv_sqrt_grad(layer, grad_wrt_a):
    """Gradient through A = f(kappa(Z^T Z)) with f the floored inverse square root."""
    eigvals, eigvecs = layer._eigvals, layer._eigvecs
    floor = layer.kernel.eigen_floor
    fvals = np.maximum(eigvals, floor) ** -0.5
    fprime = np.where(eigvals > floor, -0.5 * np.maximum(eigvals, floor) ** -1.5, 0.0)
    diff = eigvals[:, None] - eigvals[None, :]
    close = np.abs(diff) < 1e-12 * np.maximum(1.0, np.abs(eigvals[:, None]))
    denom = np.where(close, 1.0, diff)
    w = np.where(close, 0.5 * (fprime[:, None] + fprime[None, :]),
                 (fvals[:, None] - fvals[None, :]) / denom)
    sym = 0.5 * (grad_wrt_a + grad_wrt_a.T)
    grad_k = eigvecs @ (w * (eigvecs.T @ sym @ eigvecs)) @ eigvecs.T
    # through kappa applied entrywise to the Gram, then the Gram itself
    gram = layer.filters.T @ layer.filters
    kp = layer.kernel.alpha * np.exp(layer.kernel.alpha * (gram - 1.0))
    return 2.0 * layer.filters @ (grad_k * kp)


def ckn_backward(grad_final, cache, model, freeze_inv_sqrt=False):
    """Backpropagate a gradient on the final map.

    Returns (filter_grads, input_grad): one gradient per layer's filter matrix
    plus the gradient on the input map (used to train an embedding below the
    network). freeze_inv_sqrt skips differentiating through the cached
    kappa(Z^T Z)^{-1/2} factor.
    """
    if cache is None or len(cache) != len(model.layers):
        raise ContractError("cache does not match the model's layers")
    grad = as_feature_map(grad_final).data
    filter_grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer, ctx = model.layers[i], cache[i]
        out_h, out_w = ctx["grid"]
        exp_out = (out_h - 1) // layer.subsample + 1, (out_w - 1) // layer.subsample + 1
        if grad.shape != (exp_out[0], exp_out[1], layer.n_filters):
            raise ContractError(
                f"layer {i}: upstream gradient shape {grad.shape} does not match cache")
        g_pre = gaussian_pool_backward(grad, out_h, out_w, layer.pool_beta, layer.subsample)
        g_cols = g_pre.reshape(out_h * out_w, layer.n_filters).T      # (p, n_loc)

        norms, unit, kcos = ctx["norms"], ctx["unit"], ctx["kcos"]
        alpha = layer.kernel.alpha
        b = layer.inv_sqrt @ g_cols                                   # (p, n_loc)
        e_mat = b * (alpha * kcos)                                    # b .* kappa'(S)
        d_z = ctx["cols"] @ e_mat.T                                   # (in_dim, p)
        if not freeze_inv_sqrt:
            grad_a = (g_cols * norms) @ kcos.T                        # dL/dA
            d_z = d_z + _inv_sqrt_grad(layer, grad_a)
        filter_grads[i] = d_z

        # gradient on the layer input, through ||x|| and the normalization
        scal = np.sum(b * kcos, axis=0)                               # b_j . kappa(s_j)
        zd = layer.filters @ e_mat                                    # (in_dim, n_loc)
        proj = np.sum(unit * zd, axis=0)
        d_cols = unit * (scal - proj) + zd
        d_cols[:, norms == 0] = 0.0
        h, w, c = ctx["in_shape"]
        grad = scatter_patches(d_cols, h, w, c, layer.patch_h, layer.patch_w)
    return filter_grads, grad


# ---------------------------------------------------------------------------
# unsupervised initialization
# ---------------------------------------------------------------------------

class LayerSpec:
    """Configuration of one layer for unsupervised initialization."""

    def __init__(self, patch_h, patch_w, n_filters, alpha=1.0, eigen_floor=1e-6,
                 pool_beta=0.5, subsample=2, kmeans_iters=30):
        self.patch_h = patch_h
        self.patch_w = patch_w
        self.n_filters = n_filters
        self.kernel = KernelConfig(alpha, eigen_floor)
        self.pool_beta = pool_beta
        self.subsample = subsample
        self.kmeans_iters = kmeans_iters

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sample_normalized_patches(maps, patch_h, patch_w, per_image, rng):
    """Random unit-norm patch columns drawn from every map; zero patches dropped."""
    collected = []
    for fmap in maps:
        cols = extract_patches(fmap, patch_h, patch_w)
        n = cols.shape[1]
        take = min(per_image, n)
        idx = rng.choice(n, size=take, replace=False)
        collected.append(cols[:, np.sort(idx)])
    cols = np.concatenate(collected, axis=1)
    norms = np.linalg.norm(cols, axis=0)
    cols = cols[:, norms > 1e-12]
    if cols.shape[1] == 0:
        raise ConfigurationError("all sampled patches are zero; cannot initialize")
    return cols / np.linalg.norm(cols, axis=0)


def unsupervised_init(images, layer_specs, patches_per_image=40, seed=0):
    """Initialize a CknModel layer by layer with spherical K-means on sampled patches."""
    maps = [as_feature_map(im) for im in images]
    if not maps:
        raise ConfigurationError("need at least one image to initialize")
    input_channels = maps[0].channels
    seeds = np.random.SeedSequence(seed).spawn(len(layer_specs))
    layers = []
    for spec, seq in zip(layer_specs, seeds):
        rng = np.random.default_rng(seq)
        patches = sample_normalized_patches(
            maps, spec.patch_h, spec.patch_w, patches_per_image, rng)
        k = min(spec.n_filters, np.unique(patches, axis=1).shape[1])
        centroids = spherical_kmeans(
            patches, k, iters=spec.kmeans_iters,
            seed=np.random.default_rng(seq.spawn(1)[0]).integers(2 ** 32))
        layer = CknLayer(spec.patch_h, spec.patch_w, centroids,
                         spec.pool_beta, spec.subsample, spec.kernel)
        layers.append(layer)
        maps = [ckn_one_layer(m, layer) for m in maps]
    return CknModel(layers, input_channels)


def ckn_one_layer(fmap, layer):
    """Forward a single layer (no cache); used while stacking during init."""
    model = CknModel.__new__(CknModel)
    model.layers = [layer]
    model.input_channels = layer.in_channels
    out, _ = ckn_forward(fmap, model, keep_cache=False)
    return out
