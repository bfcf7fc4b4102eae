"""Spatial feature maps: the basic value passed between CKN layers."""

import numpy as np

from .errors import NumericError


class FeatureMap:
    """A height x width grid of feature vectors, stored as a (h, w, c) float array.

    Instances are treated as immutable: operations return new maps and never
    write into ``data``.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise NumericError(f"feature map needs a (h, w, c) array, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("feature map contains non-finite values")
        self.data = arr

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def flatten(self):
        """Row-major per-location flattening to a 1-D vector."""
        return self.data.reshape(-1).copy()

    def __repr__(self):
        return f"FeatureMap(h={self.height}, w={self.width}, c={self.channels})"


def as_feature_map(x):
    return x if isinstance(x, FeatureMap) else FeatureMap(x)
