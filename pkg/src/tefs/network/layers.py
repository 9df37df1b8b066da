"""Layers with hand-written forward and backward passes.

Activations use NHWC layout: ``(batch, height, width, channels)`` where
height runs over frequency bands and width over time frames.  Every layer
caches what its backward pass needs during a training-mode forward call.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _bias_uniform(rng, n, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, n).astype(dtype)


class Conv2D(Layer):
    """Valid (unpadded) 2-D cross-correlation.  Weight layout is (out, in, kh, kw)."""

    def __init__(self, name, in_ch, out_ch, kernel, stride=(1, 1), rng=None, dtype=np.float32):
        super().__init__()
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        # the first layer of a branch sees raw data and needs no input gradient
        self.input_grad = True
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        kh, kw = self.kernel
        fan_in = in_ch * kh * kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _he_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, dtype)
        self.params["bias"] = _bias_uniform(rng, out_ch, fan_in, dtype)

    def output_shape(self, shape):
        h, w, c = shape
        kh, kw = self.kernel
        sh, sw = self.stride
        if c != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        if h < kh or w < kw:
            raise ValueError(f"{self.name}: kernel {self.kernel} larger than input {(h, w)}")
        return ((h - kh) // sh + 1, (w - kw) // sw + 1, self.out_ch)

    def _wmat(self):
        # rows ordered (kh, kw, in) to match the im2col column layout
        return self.params["weight"].transpose(2, 3, 1, 0).reshape(-1, self.out_ch)

    def forward(self, x, train=False, rng=None):
        n, h, w, _ = x.shape
        ho, wo, _ = self.output_shape(x.shape[1:])
        kh, kw = self.kernel
        sh, sw = self.stride
        win = sliding_window_view(x, self.kernel, axis=(1, 2))[:, ::sh, ::sw]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * self.in_ch)
        y = cols @ self._wmat() + self.params["bias"]
        if train:
            self._cache = (cols, x.shape)
        return y.reshape(n, ho, wo, self.out_ch)

    def backward(self, dy):
        cols, xshape = self._cache
        n, ho, wo, _ = dy.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        d2 = dy.reshape(-1, self.out_ch)
        self.grads["weight"] = (
            (cols.T @ d2).reshape(kh, kw, self.in_ch, self.out_ch).transpose(3, 2, 0, 1)
        )
        self.grads["bias"] = d2.sum(axis=0)
        self._cache = None
        if not self.input_grad:
            return None
        dcols = (d2 @ self._wmat().T).reshape(n, ho, wo, kh, kw, self.in_ch)
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :] += dcols[:, :, :, i, j, :]
        return dx


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name

    def forward(self, x, train=False, rng=None):
        # in place: callers hand over freshly computed activations
        y = np.maximum(x, 0, out=x)
        if train:
            self._y = y
        return y

    def backward(self, dy):
        dy = dy * (self._y > 0)
        self._y = None
        return dy


class BatchNorm2D(Layer):
    """Per-channel batch normalisation; running variance tracks the unbiased estimate."""

    def __init__(self, name, channels, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.name = name
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x, train=False, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            scale = gamma / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - self.buffers["running_mean"]) * scale + beta
        if x.shape[0] < 2:
            raise ValueError(f"{self.name}: training-mode batch normalisation needs a batch of at least 2")
        c = x.shape[-1]
        x2 = x.reshape(-1, c)
        m = x2.shape[0]
        mean = x2.mean(axis=0)
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat *= inv_std
        mo = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = (1 - mo) * rm + mo * mean
        rv[...] = (1 - mo) * rv + mo * var * (m / max(m - 1, 1))
        self._cache = (xhat, inv_std)
        y = xhat * gamma
        y += beta
        return y.reshape(x.shape)

    def backward(self, dy):
        xhat, inv_std = self._cache
        shape = dy.shape
        dy = dy.reshape(xhat.shape)
        m = xhat.shape[0]
        gamma = self.params["gamma"]
        dbeta = dy.sum(axis=0)
        dgamma = np.einsum("ij,ij->j", dy, xhat)
        self.grads["gamma"], self.grads["beta"] = dgamma, dbeta
        # dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
        dx = xhat * (-dgamma / m)
        dx += dy
        dx -= dbeta / m
        dx *= gamma * inv_std
        self._cache = None
        return dx.reshape(shape)


class MaxPool2D(Layer):
    """Non-overlapping max pooling in floor mode (trailing rows/columns dropped)."""

    def __init__(self, name, kernel=(2, 2), stride=None):
        super().__init__()
        self.name = name
        self.kernel = tuple(kernel)
        self.stride = tuple(stride) if stride is not None else self.kernel
        if self.stride != self.kernel:
            raise ValueError("only non-overlapping pooling (stride == kernel) is supported")

    def output_shape(self, shape):
        h, w, c = shape
        kh, kw = self.kernel
        if h < kh or w < kw:
            raise ValueError(f"{self.name}: pooling window {self.kernel} larger than input {(h, w)}")
        return (h // kh, w // kw, c)

    def forward(self, x, train=False, rng=None):
        if self.kernel != (2, 2):
            return self._forward_generic(x, train)
        ho, wo, _ = self.output_shape(x.shape[1:])
        a = x[:, 0 : 2 * ho : 2, 0 : 2 * wo : 2]
        b = x[:, 0 : 2 * ho : 2, 1 : 2 * wo : 2]
        c = x[:, 1 : 2 * ho : 2, 0 : 2 * wo : 2]
        d = x[:, 1 : 2 * ho : 2, 1 : 2 * wo : 2]
        # ties resolve to the first element in row-major window order
        ab_first = a >= b
        cd_first = c >= d
        ab = np.where(ab_first, a, b)
        cd = np.where(cd_first, c, d)
        top = ab >= cd
        y = np.where(top, ab, cd)
        if train:
            self._cache = ("fast", (ab_first, cd_first, top), x.shape)
        return y

    def _forward_generic(self, x, train):
        n, h, w, c = x.shape
        ho, wo, _ = self.output_shape(x.shape[1:])
        kh, kw = self.kernel
        win = (
            x[:, : ho * kh, : wo * kw, :]
            .reshape(n, ho, kh, wo, kw, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, ho, wo, c, kh * kw)
        )
        idx = win.argmax(axis=-1)
        if train:
            self._cache = ("generic", idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        mode, saved, xshape = self._cache
        self._cache = None
        n, h, w, c = xshape
        ho, wo = dy.shape[1:3]
        kh, kw = self.kernel
        dx = np.zeros(xshape, dtype=dy.dtype)
        if mode == "fast":
            ab_first, cd_first, top = saved
            d_ab = dy * top
            d_cd = dy - d_ab
            dx[:, 0 : 2 * ho : 2, 0 : 2 * wo : 2] = d_ab * ab_first
            dx[:, 0 : 2 * ho : 2, 1 : 2 * wo : 2] = d_ab - dx[:, 0 : 2 * ho : 2, 0 : 2 * wo : 2]
            dx[:, 1 : 2 * ho : 2, 0 : 2 * wo : 2] = d_cd * cd_first
            dx[:, 1 : 2 * ho : 2, 1 : 2 * wo : 2] = d_cd - dx[:, 1 : 2 * ho : 2, 0 : 2 * wo : 2]
            return dx
        dwin = np.zeros((n, ho, wo, c, kh * kw), dtype=dy.dtype)
        np.put_along_axis(dwin, saved[..., None], dy[..., None], axis=-1)
        dx[:, : ho * kh, : wo * kw, :] = (
            dwin.reshape(n, ho, wo, c, kh, kw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * kh, wo * kw, c)
        )
        return dx


class Dropout(Layer):
    """Inverted dropout: scaled at train time, identity at inference."""

    def __init__(self, name, p=0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.name = name
        self.p = p

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs a random generator")
        self._mask = (rng.random(x.shape) >= self.p).astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def __init__(self, name="flatten"):
        super().__init__()
        self.name = name

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Dense(Layer):
    """Fully connected layer, weight layout (out, in)."""

    def __init__(self, name, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = _bias_uniform(rng, out_features, in_features, dtype)

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"{self.name}: expected input ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, train=False, rng=None):
        if train:
            self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        self.grads["weight"] = dy.T @ self._x
        self.grads["bias"] = dy.sum(axis=0)
        dx = dy @ self.params["weight"]
        self._x = None
        return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits); returns (loss, probs, dlogits)."""
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= n_classes)):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    labels = labels.astype(np.intp)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(n), labels].mean()
    probs = np.exp(log_p)
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), probs, d / n
