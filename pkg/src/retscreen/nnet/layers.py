"""Primitive differentiable ops for the CNN engine.

Each op's forward returns (output, cache); backward takes (grad_out, cache)
and returns (grad_in, {param_name: grad}). Ops never keep activations on the
instance, so parameters can be shared read-only across threads while each
forward call carries its own cache. All math runs in the dtype of the inputs
(float32 in production, float64 for gradient-check reference runs).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ConvSame3x3:
    """2-D convolution with stride 1 and zero same-padding.

    Implemented as a sum over the k*k kernel taps, each a (B*H*W, C_in) x
    (C_in, C_out) matrix product on a shifted slice of the padded input;
    this keeps peak memory at one input-sized buffer per tap instead of a
    k^2-unrolled im2col copy.
    """

    def __init__(self, name, weight, bias):
        self.name = name
        self.weight = weight  # (out, in, k, k)
        self.bias = bias  # (out,)

    def params(self):
        return {f"{self.name}.w": self.weight, f"{self.name}.b": self.bias}

    def forward(self, x, train, rng):
        k = self.weight.shape[2]
        p = (k - 1) // 2
        b, c_in, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        y = np.zeros((b, h, w, self.weight.shape[0]), dtype=x.dtype)
        for kh in range(k):
            for kw in range(k):
                xs = xp[:, :, kh : kh + h, kw : kw + w]
                y += np.tensordot(xs, self.weight[:, :, kh, kw], axes=([1], [1]))
        y += self.bias
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (xp, x.shape)

    def backward(self, dy, cache):
        xp, x_shape = cache
        k = self.weight.shape[2]
        p = (k - 1) // 2
        b, c_in, h, w = x_shape
        db = dy.sum(axis=(0, 2, 3))
        dyt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))  # (B, H, W, out)
        dw = np.empty_like(self.weight)
        dxp = np.zeros_like(xp)
        for kh in range(k):
            for kw in range(k):
                xs = xp[:, :, kh : kh + h, kw : kw + w]
                dw[:, :, kh, kw] = np.tensordot(dyt, xs, axes=([0, 1, 2], [0, 2, 3]))
                g = np.tensordot(dyt, self.weight[:, :, kh, kw], axes=([3], [0]))
                dxp[:, :, kh : kh + h, kw : kw + w] += g.transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w]
        return np.ascontiguousarray(dx), {f"{self.name}.w": dw, f"{self.name}.b": db}


class Relu:
    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class BatchNorm:
    """Per-channel normalization: batch statistics in train mode (also
    updating the running estimates), running statistics in infer mode.
    Handles (B, C, H, W) conv maps and (B, C) feature vectors."""

    def __init__(self, name, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.9):
        self.name = name
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {
            f"{self.name}.gamma": self.gamma,
            f"{self.name}.beta": self.beta,
            f"{self.name}.mean": self.running_mean,
            f"{self.name}.var": self.running_var,
        }

    def _shape(self, ndim):
        return (1, -1) if ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train, rng):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        shape = self._shape(x.ndim)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mu
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        y = self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
        return y, (xhat, inv, axes, shape, train)

    def backward(self, dy, cache):
        xhat, inv, axes, shape, train = cache
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * self.gamma.reshape(shape)
        if train:
            n = dy.size // dy.shape[1] if dy.ndim == 4 else dy.shape[0]
            dx = (
                inv.reshape(shape)
                / n
                * (
                    n * dxhat
                    - dxhat.sum(axis=axes).reshape(shape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
                )
            )
        else:
            dx = dxhat * inv.reshape(shape)
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}


class MaxPool3x3Stride2:
    """Overlapping 3x3/stride-2 max pooling recording flat argmax indices.

    The backward pass scatters gradients to the recorded positions with
    bincount (overlapping windows can route to the same input pixel, so the
    scatter must accumulate)."""

    WINDOW = 3
    STRIDE = 2

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    @staticmethod
    def out_size(n):
        return (n - MaxPool3x3Stride2.WINDOW) // MaxPool3x3Stride2.STRIDE + 1

    def forward(self, x, train, rng):
        b, c, h, w = x.shape
        ho, wo = self.out_size(h), self.out_size(w)
        s0, s1, s2, s3 = x.strides
        win = as_strided(
            x,
            shape=(b, c, ho, wo, self.WINDOW, self.WINDOW),
            strides=(s0, s1, self.STRIDE * s2, self.STRIDE * s3, s2, s3),
        )
        flat = win.reshape(b, c, ho, wo, self.WINDOW * self.WINDOW)
        arg = flat.argmax(axis=-1)
        y = flat.max(axis=-1)
        return y, (arg.astype(np.int32), x.shape)

    def backward(self, dy, cache):
        arg, x_shape = cache
        b, c, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        oh = arg // self.WINDOW
        ow = arg % self.WINDOW
        rows = np.arange(ho, dtype=np.int64)[None, None, :, None] * self.STRIDE + oh
        cols = np.arange(wo, dtype=np.int64)[None, None, None, :] * self.STRIDE + ow
        bi = np.arange(b, dtype=np.int64)[:, None, None, None]
        ci = np.arange(c, dtype=np.int64)[None, :, None, None]
        flat_idx = (((bi * c + ci) * h + rows) * w + cols).ravel()
        dx = np.bincount(flat_idx, weights=dy.ravel(), minlength=b * c * h * w)
        return dx.reshape(x_shape).astype(dy.dtype), {}


class Dropout:
    """Inverted dropout: zero with the configured rate and rescale survivors
    by 1/(1-rate) in train mode; identity in infer mode."""

    def __init__(self, name, rate):
        self.name = name
        self.rate = rate

    def params(self):
        return {}

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        keep = rng.random(x.shape) >= self.rate
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        return x * keep * scale, (keep, scale)

    def backward(self, dy, cache):
        if cache is None:
            return dy, {}
        keep, scale = cache
        return dy * keep * scale, {}


class Flatten:
    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense:
    def __init__(self, name, weight, bias, l2=0.0):
        self.name = name
        self.weight = weight  # (in, out)
        self.bias = bias  # (out,)
        self.l2 = l2

    def params(self):
        return {f"{self.name}.w": self.weight, f"{self.name}.b": self.bias}

    def forward(self, x, train, rng):
        return x @ self.weight + self.bias, x

    def backward(self, dy, cache):
        x = cache
        dw = x.T @ dy
        if self.l2 > 0.0:
            dw += np.asarray(self.l2, dtype=dw.dtype) * self.weight
        db = dy.sum(axis=0)
        dx = dy @ self.weight.T
        return dx, {f"{self.name}.w": dw, f"{self.name}.b": db}


class Softmax:
    """Row softmax with max-subtraction; caches both probabilities and
    log-probabilities (the latter keeps the loss finite even when a
    probability underflows)."""

    def __init__(self, name):
        self.name = name

    def params(self):
        return {}

    def forward(self, x, train, rng):
        shifted = x - x.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        total = ex.sum(axis=1, keepdims=True)
        probs = ex / total
        logp = shifted - np.log(total)
        return probs, (probs, logp)

    def backward(self, dy, cache):
        # The network backward starts at the pre-softmax logits with the
        # fused softmax + cross-entropy gradient, so this is never reached.
        raise NotImplementedError("softmax gradient is fused with the loss")
