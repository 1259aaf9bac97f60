"""Network building blocks with explicit reverse-mode backward passes.

Layers are parameter containers. forward(x) returns (y, cache) and
backward(cache, dy) returns dx while accumulating parameter gradients
into the layer's grad arrays. Caches travel with the call rather than
living on the layer, because one layer instance is applied to many
per-node feature blocks inside a single forward pass (weight sharing
across graph nodes).

All math is float64. Gradient formulas follow the usual identities; the
normalization backward is

    dx = (g - mean(g) - xhat * mean(g * xhat)) / std,   g = dy * gamma

with means over the normalized axis (per group for group norm).
"""

from __future__ import annotations

import numpy as np

from defreg.errors import ValidationError

__all__ = ["Linear", "GroupNorm", "LayerNorm", "LeakyRelu", "softmax_rows", "softmax_backward", "sigmoid"]


class Linear:
    """y = x @ w + b, init uniform in +-sqrt(1/fan_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = np.sqrt(1.0 / n_in)
        self.w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.b = rng.uniform(-bound, bound, size=n_out) if bias else None
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b) if bias else None

    def forward(self, x):
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y, x

    def backward(self, cache, dy):
        x = cache
        self.gw += x.T @ dy
        if self.gb is not None:
            self.gb += dy.sum(axis=0)
        return dy @ self.w.T

    def params(self):
        items = [("w", self.w, self.gw)]
        if self.b is not None:
            items.append(("b", self.b, self.gb))
        return items


class LeakyRelu:
    """max(x, slope*x); stateless apart from the slope."""

    def __init__(self, slope: float = 0.01):
        self.slope = float(slope)

    def forward(self, x):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, cache, dy):
        return np.where(cache, dy, self.slope * dy)

    def params(self):
        return []


class GroupNorm:
    """Per-row group normalization over channel groups, affine per channel."""

    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if channels % groups != 0:
            raise ValidationError(f"groups {groups} must divide channels {channels}")
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def forward(self, x):
        n, c = x.shape
        g = self.groups
        xg = x.reshape(n, g, c // g)
        mu = xg.mean(axis=2, keepdims=True)
        var = ((xg - mu) ** 2).mean(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xg - mu) * inv_std
        y = xhat.reshape(n, c) * self.gamma + self.beta
        return y, (xhat, inv_std)

    def backward(self, cache, dy):
        xhat, inv_std = cache
        n, c = dy.shape
        g = self.groups
        xhat_flat = xhat.reshape(n, c)
        self.ggamma += (dy * xhat_flat).sum(axis=0)
        self.gbeta += dy.sum(axis=0)
        gg = (dy * self.gamma).reshape(n, g, c // g)
        mean_g = gg.mean(axis=2, keepdims=True)
        mean_gx = (gg * xhat).mean(axis=2, keepdims=True)
        dx = (gg - mean_g - xhat * mean_gx) * inv_std
        return dx.reshape(n, c)

    def params(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]


class LayerNorm:
    """Row-wise normalization over the full feature axis, affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def forward(self, x):
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        return xhat * self.gamma + self.beta, (xhat, inv_std)

    def backward(self, cache, dy):
        xhat, inv_std = cache
        self.ggamma += (dy * xhat).sum(axis=0)
        self.gbeta += dy.sum(axis=0)
        gg = dy * self.gamma
        mean_g = gg.mean(axis=1, keepdims=True)
        mean_gx = (gg * xhat).mean(axis=1, keepdims=True)
        return (gg - mean_g - xhat * mean_gx) * inv_std

    def params(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(softmax_out: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = softmax_out
    return s * (dy - (dy * s).sum(axis=1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
