"""Feature scalers applied between the CKN output and the structured layer.

Five kinds: min_max, per_sample_unit_norm, standardize, robust, and the
default average_unit_norm (rescale so the mean sample norm is 1). Statistics
are fit once on training rows and frozen afterwards.
"""

import numpy as np

from .errors import ConfigurationError
from .featmap import FeatureMap, as_feature_map

SCALER_KINDS = ("min_max", "per_sample_unit_norm", "standardize", "robust",
                "average_unit_norm")

_FLOOR = 1e-8


class Scaler:
    """A fitted feature scaler; apply-after-fit is deterministic."""

    def __init__(self, kind):
        if kind not in SCALER_KINDS:
            raise ConfigurationError(f"unknown scaler kind {kind!r}")
        self.kind = kind
        self.stats = None

    def fit(self, rows):
        x = np.asarray(rows, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ConfigurationError("scaler needs a non-empty (samples, features) array")
        if self.kind == "min_max":
            lo, hi = x.min(axis=0), x.max(axis=0)
            self.stats = {"lo": lo, "scale": 1.0 / np.maximum(hi - lo, _FLOOR)}
        elif self.kind == "standardize":
            mean = x.mean(axis=0)
            std = np.maximum(x.std(axis=0), _FLOOR)
            self.stats = {"lo": mean, "scale": 1.0 / std}
        elif self.kind == "robust":
            med = np.median(x, axis=0)
            q1, q3 = np.percentile(x, 25, axis=0), np.percentile(x, 75, axis=0)
            self.stats = {"lo": med, "scale": 1.0 / np.maximum(q3 - q1, _FLOOR)}
        elif self.kind == "average_unit_norm":
            mean_norm = np.linalg.norm(x, axis=1).mean()
            self.stats = {"scale": 1.0 / mean_norm if mean_norm > 0 else 1.0}
        else:  # per_sample_unit_norm has no statistics
            self.stats = {}
        return self

    def transform(self, rows):
        x = np.asarray(rows, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if self.kind == "per_sample_unit_norm":
            norms = np.linalg.norm(x, axis=1, keepdims=True)
            out = np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), x)
        elif self.kind == "average_unit_norm":
            out = x * self.stats["scale"]
        else:
            out = (x - self.stats["lo"]) * self.stats["scale"]
        return out[0] if squeeze else out

    def transform_grad(self, grad_rows, raw_rows):
        """Pull a gradient on scaled rows back to the raw rows (statistics
        treated as constants)."""
        g = np.asarray(grad_rows, dtype=np.float64)
        squeeze = g.ndim == 1
        if squeeze:
            g, raw_rows = g[None, :], np.asarray(raw_rows)[None, :]
        if self.kind == "per_sample_unit_norm":
            x = np.asarray(raw_rows, dtype=np.float64)
            norms = np.linalg.norm(x, axis=1, keepdims=True)
            safe = np.where(norms > 0, norms, 1.0)
            unit = x / safe
            out = (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / safe
            out[norms[:, 0] == 0] = g[norms[:, 0] == 0]
        elif self.kind == "average_unit_norm":
            out = g * self.stats["scale"]
        else:
            out = g * self.stats["scale"]
        return out[0] if squeeze else out

    def to_json(self):
        return {"kind": self.kind,
                "stats": {k: np.asarray(v).tolist() for k, v in (self.stats or {}).items()}}

    @classmethod
    def from_json(cls, doc):
        scaler = cls(doc["kind"])
        scaler.stats = {k: (np.array(v) if isinstance(v, list) else float(v))
                        for k, v in doc["stats"].items()}
        return scaler


def scaler_fit_apply(kind, maps):
    """Fit a scaler of the given kind on flattened maps and rescale them.

    Returns (scaler, scaled maps); map shapes are preserved.
    """
    maps = [as_feature_map(m) for m in maps]
    if not maps:
        raise ConfigurationError("scaler_fit_apply needs at least one map")
    rows = np.stack([m.flatten() for m in maps], axis=0)
    scaler = Scaler(kind).fit(rows)
    scaled = scaler.transform(rows)
    return scaler, [FeatureMap(scaled[i].reshape(m.shape))
                    for i, m in enumerate(maps)]
