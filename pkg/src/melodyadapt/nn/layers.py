"""The fixed layer vocabulary: forward and hand-derived backward passes.

Conventions:
  * conv-stage activations are (channels, freq, time) arrays
  * dense-stage activations are (features, time) arrays, one column per frame
  * every layer is stateless; parameters live in a ParameterSet keyed by
    layer name, batch-norm running statistics included (as non-gradient
    entries updated during train-mode forwards)
  * backward returns (d_input, {param_name: gradient}) given the cache
    produced by the matching forward
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class; subclasses define kind, params and the two passes."""

    kind = "abstract"

    def hyperparams(self) -> dict:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, rng: np.random.Generator, in_shape: tuple, dtype=np.float32) -> dict:
        return {}

    def forward(self, x: np.ndarray, params: dict, train: bool) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache, params: dict, *, need_dx: bool = True):
        raise NotImplementedError


def _im2col(x: np.ndarray, kf: int, kt: int) -> np.ndarray:
    """Unfold padded (C, F, T) into (C*kf*kt, F_out*T_out) patch columns."""
    c, f, t = x.shape
    fo, to = f - kf + 1, t - kt + 1
    sc, sf, st = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(c, kf, kt, fo, to), strides=(sc, sf, st, sf, st)
    )
    return np.ascontiguousarray(patches.reshape(c * kf * kt, fo * to))


def _col2im(cols: np.ndarray, shape: tuple, kf: int, kt: int) -> np.ndarray:
    """Scatter-add patch columns back into a padded (C, F, T) buffer."""
    c, f, t = shape
    fo, to = f - kf + 1, t - kt + 1
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, kf, kt, fo, to)
    for u in range(kf):
        for v in range(kt):
            out[:, u : u + fo, v : v + to] += cols[:, u, v]
    return out


class Conv2D(Layer):
    """2-D convolution, stride 1, zero 'same' padding on both axes."""

    kind = "conv2d"

    def __init__(self, filters: int, kernel: tuple[int, int] = (5, 5)):
        if filters <= 0:
            raise ValueError("filters must be positive")
        self.filters = filters
        self.kernel = tuple(kernel)

    def hyperparams(self):
        return {"filters": self.filters, "kernel": list(self.kernel)}

    def out_shape(self, in_shape):
        c, f, t = in_shape
        return (self.filters, f, t)

    def init_params(self, rng, in_shape, dtype=np.float32):
        c_in = in_shape[0]
        kf, kt = self.kernel
        fan_in = c_in * kf * kt
        return {
            "weight": _he_uniform(rng, (self.filters, c_in, kf, kt), fan_in, dtype),
            "bias": np.zeros(self.filters, dtype=dtype),
        }

    def _pad(self):
        kf, kt = self.kernel
        return (kf - 1) // 2, kf - 1 - (kf - 1) // 2, (kt - 1) // 2, kt - 1 - (kt - 1) // 2

    def forward(self, x, params, train):
        if x.ndim != 3:
            raise ValueError(f"conv2d expects (channels, freq, time), got {x.shape}")
        w, b = params["weight"], params["bias"]
        if x.shape[0] != w.shape[1]:
            raise ValueError(f"conv2d channel mismatch: input {x.shape[0]}, weight {w.shape[1]}")
        kf, kt = self.kernel
        pf0, pf1, pt0, pt1 = self._pad()
        xp = np.pad(x, ((0, 0), (pf0, pf1), (pt0, pt1)))
        cols = _im2col(xp, kf, kt)
        y = (w.reshape(self.filters, -1) @ cols).reshape(self.filters, x.shape[1], x.shape[2])
        y += b[:, None, None]
        return y, (cols, x.shape)

    def backward(self, dy, cache, params, *, need_dx=True):
        cols, x_shape = cache
        w = params["weight"]
        kf, kt = self.kernel
        dy_mat = dy.reshape(self.filters, -1)
        dw = (dy_mat @ cols.T).reshape(w.shape)
        db = dy_mat.sum(axis=1)
        if not need_dx:
            return None, {"weight": dw, "bias": db}
        # d_input is the correlation of dy with the flipped kernels; as a
        # matmul: pad dy by (k - 1 - p) and unfold, multiply the transposed
        # weight with in/out channels swapped and both spatial axes reversed.
        pf0, pf1, pt0, pt1 = self._pad()
        dyp = np.pad(dy, ((0, 0), (kf - 1 - pf0, kf - 1 - pf1), (kt - 1 - pt0, kt - 1 - pt1)))
        dy_cols = _im2col(dyp, kf, kt)
        w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(x_shape[0], -1)
        dx = (w_flip @ dy_cols).reshape(x_shape)
        return dx, {"weight": dw, "bias": db}


class BatchNorm(Layer):
    """Per-channel normalization over (freq, time) of the single sample.

    Train mode normalizes with batch statistics and updates the running
    mean/variance stored in the ParameterSet; eval mode uses the stored
    statistics only.
    """

    kind = "batch_norm"

    def out_shape(self, in_shape):
        return in_shape

    def init_params(self, rng, in_shape, dtype=np.float32):
        c = in_shape[0]
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }

    def forward(self, x, params, train):
        if x.ndim != 3:
            raise ValueError(f"batch_norm expects (channels, freq, time), got {x.shape}")
        gamma, beta = params["gamma"], params["beta"]
        if train:
            mean = x.mean(axis=(1, 2))
            var = x.var(axis=(1, 2))
            params["running_mean"] *= 1.0 - BN_MOMENTUM
            params["running_mean"] += BN_MOMENTUM * mean.astype(params["running_mean"].dtype)
            params["running_var"] *= 1.0 - BN_MOMENTUM
            params["running_var"] += BN_MOMENTUM * var.astype(params["running_var"].dtype)
        else:
            mean = params["running_mean"]
            var = params["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        y = gamma[:, None, None] * xhat + beta[:, None, None]
        return y, (xhat, inv_std, train)

    def backward(self, dy, cache, params, *, need_dx=True):
        xhat, inv_std, train = cache
        gamma = params["gamma"]
        dgamma = (dy * xhat).sum(axis=(1, 2))
        dbeta = dy.sum(axis=(1, 2))
        grads = {"gamma": dgamma, "beta": dbeta}
        if not need_dx:
            return None, grads
        dxhat = dy * gamma[:, None, None]
        if not train:
            return dxhat * inv_std[:, None, None], grads
        n = xhat.shape[1] * xhat.shape[2]
        sum_dxhat = dxhat.sum(axis=(1, 2), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        dx = (inv_std[:, None, None] / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, params, train):
        mask = x > 0
        return np.where(mask, x, 0), mask

    def backward(self, dy, cache, params, *, need_dx=True):
        return dy * cache, {}


class FreqPool(Layer):
    """Max pooling along the frequency axis.

    factor >= 2 pools non-overlapping groups (remainder bins dropped);
    factor == 0 pools the whole axis to a single bin.
    """

    kind = "freq_pool"

    def __init__(self, factor: int):
        if factor < 0 or factor == 1:
            raise ValueError("factor must be 0 (global) or >= 2")
        self.factor = factor

    def hyperparams(self):
        return {"factor": self.factor}

    def out_shape(self, in_shape):
        c, f, t = in_shape
        fo = 1 if self.factor == 0 else f // self.factor
        if fo == 0:
            raise ValueError(f"pool factor {self.factor} larger than freq axis {f}")
        return (c, fo, t)

    def forward(self, x, params, train):
        c, f, t = x.shape
        factor = f if self.factor == 0 else self.factor
        fo = f // factor
        if fo == 0:
            raise ValueError(f"pool factor {factor} larger than freq axis {f}")
        groups = x[:, : fo * factor].reshape(c, fo, factor, t)
        idx = groups.argmax(axis=2)
        y = np.take_along_axis(groups, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return y, (idx, x.shape, factor)

    def backward(self, dy, cache, params, *, need_dx=True):
        idx, x_shape, factor = cache
        if not need_dx:
            return None, {}
        c, f, t = x_shape
        fo = f // factor
        dgroups = np.zeros((c, fo, factor, t), dtype=dy.dtype)
        np.put_along_axis(dgroups, idx[:, :, None, :], dy[:, :, None, :], axis=2)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, : fo * factor] = dgroups.reshape(c, fo * factor, t)
        return dx, {}


class DensePerFrame(Layer):
    """Affine map applied independently to every time frame.

    3-D input (channels, freq, time) is flattened to (channels*freq, time)
    first, so this layer also bridges the conv stage to the dense stage.
    """

    kind = "dense_per_frame"

    def __init__(self, nodes: int):
        if nodes <= 0:
            raise ValueError("nodes must be positive")
        self.nodes = nodes

    def hyperparams(self):
        return {"nodes": self.nodes}

    def out_shape(self, in_shape):
        t = in_shape[-1]
        return (self.nodes, t)

    @staticmethod
    def _flatten(x):
        return x.reshape(-1, x.shape[-1]) if x.ndim == 3 else x

    def init_params(self, rng, in_shape, dtype=np.float32):
        fan_in = int(np.prod(in_shape[:-1]))
        return {
            "weight": _he_uniform(rng, (self.nodes, fan_in), fan_in, dtype),
            "bias": np.zeros(self.nodes, dtype=dtype),
        }

    def forward(self, x, params, train):
        flat = self._flatten(x)
        w, b = params["weight"], params["bias"]
        if flat.shape[0] != w.shape[1]:
            raise ValueError(f"dense expects {w.shape[1]} features per frame, got {flat.shape[0]}")
        y = w @ flat + b[:, None]
        return y, (flat, x.shape)

    def backward(self, dy, cache, params, *, need_dx=True):
        flat, x_shape = cache
        w = params["weight"]
        dw = dy @ flat.T
        db = dy.sum(axis=1)
        if not need_dx:
            return None, {"weight": dw, "bias": db}
        dx = (w.T @ dy).reshape(x_shape)
        return dx, {"weight": dw, "bias": db}


class SoftmaxPerFrame(Layer):
    """Column-wise softmax over the class axis."""

    kind = "softmax_per_frame"

    def forward(self, x, params, train):
        shifted = x - x.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=0, keepdims=True)
        return y, y

    def backward(self, dy, cache, params, *, need_dx=True):
        y = cache
        return y * (dy - (dy * y).sum(axis=0, keepdims=True)), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, params, train):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, dy, cache, params, *, need_dx=True):
        y = cache
        return dy * y * (1.0 - y), {}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2D, BatchNorm, ReLU, FreqPool, DensePerFrame, SoftmaxPerFrame, Sigmoid)
}
