"""Named architectures: the single-input baselines A1/A2 and the two-branch TEFS net."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import kernels
from .layers import BatchNorm2D, Conv2D, Dense, Dropout, Flatten, MaxPool2D, ReLU, softmax, softmax_cross_entropy

ARCHITECTURES = ("A1", "A2", "TEFS")
N_CLASSES = 2
CHANNELS = 64
DROPOUT = 0.5

# flatten sizes at K=32, B=50; checked whenever a model is built at that size
EXPECTED_FLATTEN = {"A1": 4224, "A2": 256, "TEFS": 8448}


class FusedReluBNPool:
    """Runs a ReLU, BatchNorm2D, 2x2 MaxPool2D triple through compiled kernels.

    Parameters, buffers and gradients stay on the wrapped layer objects.
    """

    def __init__(self, relu, bn, pool):
        self.relu, self.bn, self.pool = relu, bn, pool
        self.layers = (relu, bn, pool)

    def forward(self, z, train=False, rng=None):
        bn = self.bn
        n, h, w, c = z.shape
        ho, wo, _ = self.pool.output_shape(z.shape[1:])
        gamma = bn.params["gamma"].astype(np.float64)
        beta = bn.params["beta"].astype(np.float64)
        y = np.empty((n, ho, wo, c), dtype=z.dtype)
        idx = np.empty((n, ho, wo, c), dtype=np.uint8)
        if not train:
            scale = gamma / np.sqrt(bn.buffers["running_var"].astype(np.float64) + bn.eps)
            shift = beta - bn.buffers["running_mean"] * scale
            kernels.affine_pool_forward(z, scale, shift, y, idx, True)
            return y
        if n < 2:
            raise ValueError(f"{bn.name}: training-mode batch normalisation needs a batch of at least 2")
        z = np.ascontiguousarray(z)
        s, ss = kernels.relu_channel_stats(z.reshape(-1, c))
        m = n * h * w
        mean = s / m
        var = np.maximum(ss / m - mean * mean, 0.0)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        mo = bn.momentum
        rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
        rm[...] = (1 - mo) * rm + mo * mean
        rv[...] = (1 - mo) * rv + mo * var * (m / max(m - 1, 1))
        scale = gamma * inv_std
        kernels.affine_pool_forward(z, scale, beta - mean * scale, y, idx, False)
        self._cache = (z, idx, mean, inv_std, gamma)
        return y

    def backward(self, dy):
        r, idx, mean, inv_std, gamma = self._cache
        self._cache = None
        dy = np.ascontiguousarray(dy)
        dbeta, dgamma = kernels.pooled_bn_sums(r, idx, dy, mean, inv_std)
        dtype = self.bn.params["gamma"].dtype
        self.bn.grads["gamma"] = dgamma.astype(dtype)
        self.bn.grads["beta"] = dbeta.astype(dtype)
        dz = np.empty_like(r)
        kernels.relu_bn_pool_backward(r, idx, dy, mean, inv_std, gamma, dbeta, dgamma, dz)
        return dz


def _fuse(layers):
    steps = []
    i = 0
    while i < len(layers):
        trio = layers[i : i + 3]
        if (
            len(trio) == 3
            and isinstance(trio[0], ReLU)
            and isinstance(trio[1], BatchNorm2D)
            and isinstance(trio[2], MaxPool2D)
            and trio[2].kernel == (2, 2)
        ):
            steps.append(FusedReluBNPool(*trio))
            i += 3
        else:
            steps.append(layers[i])
            i += 1
    return steps


class Sequential:
    """Layer stack.  With ``fused`` set, ReLU/BN/pool triples use the compiled kernels."""

    def __init__(self, name, layers, fused=True):
        self.name = name
        self.layers = list(layers)
        self.fused = fused
        self._steps = _fuse(self.layers)

    def _plan(self):
        return self._steps if self.fused else self.layers

    def forward(self, x, train=False, rng=None):
        for step in self._plan():
            x = step.forward(x, train=train, rng=rng)
        return x

    def backward(self, dy):
        for step in reversed(self._plan()):
            dy = step.backward(dy)
            if dy is None:
                break
        return dy

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


def conv_branch(name, n_blocks, rng, dtype):
    """Conv+ReLU+BN / MaxPool blocks with kernels 2, 3, 4, ... followed by dropout."""
    layers = []
    in_ch = 1
    for b in range(n_blocks):
        k = b + 2
        layers += [
            Conv2D(f"conv{b + 1}", in_ch, CHANNELS, (k, k), (1, 1), rng=rng, dtype=dtype),
            ReLU(f"relu{b + 1}"),
            BatchNorm2D(f"bn{b + 1}", CHANNELS, dtype=dtype),
            MaxPool2D(f"pool{b + 1}", (2, 2), (2, 2)),
        ]
        in_ch = CHANNELS
    layers[0].input_grad = False
    layers += [Dropout("dropout", DROPOUT), Flatten()]
    return Sequential(name, layers)


class Network:
    """A classifier made of one or more convolutional branches and a dense head.

    Branch outputs are flattened and concatenated before the head.  Inputs
    are ``(N, K, B)`` arrays, one per branch.
    """

    def __init__(self, tag, branches, head, input_shape, seed, dtype):
        self.tag = tag
        self.branches = branches
        self.head = head
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.flatten_sizes = [b.output_shape(self.input_shape + (1,))[0] for b in branches]
        self.head.output_shape((sum(self.flatten_sizes),))
        self._probs = None

    # -- parameter access -------------------------------------------------
    def _modules(self):
        for i, branch in enumerate(self.branches):
            for layer in branch.layers:
                yield f"branch{i}.{layer.name}", layer
        for layer in self.head.layers:
            yield f"head.{layer.name}", layer

    def params(self) -> "OrderedDict[str, np.ndarray]":
        """Trainable arrays keyed ``<module>.<layer>.<param>``; these are live references."""
        return OrderedDict(
            (f"{prefix}.{k}", v) for prefix, layer in self._modules() for k, v in layer.params.items()
        )

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (f"{prefix}.{k}", v) for prefix, layer in self._modules() for k, v in layer.buffers.items()
        )

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (f"{prefix}.{k}", layer.grads[k]) for prefix, layer in self._modules() for k in layer.params
        )

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = self.params()
        state.update(self.buffers())
        return OrderedDict((k, v.copy()) for k, v in state.items())

    def load_state_dict(self, state) -> None:
        own = self.params()
        own.update(self.buffers())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, v in own.items():
            if state[k].shape != v.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {v.shape}")
            v[...] = state[k]

    @property
    def n_trainable(self) -> int:
        return sum(v.size for v in self.params().values())

    # -- computation ------------------------------------------------------
    def _split_inputs(self, inputs):
        if isinstance(inputs, np.ndarray):
            inputs = [inputs]
        inputs = list(inputs)
        if len(inputs) != len(self.branches):
            raise ValueError(f"{self.tag} expects {len(self.branches)} input(s), got {len(inputs)}")
        n = inputs[0].shape[0]
        out = []
        for x in inputs:
            x = np.asarray(x)
            if x.shape[1:] != self.input_shape or x.shape[0] != n:
                raise ValueError(f"{self.tag}: input shape {x.shape} does not match (N, {self.input_shape})")
            out.append(x.astype(self.dtype, copy=False)[..., None])
        return out

    def logits(self, inputs, train=False, rng=None):
        xs = self._split_inputs(inputs)
        feats = [b.forward(x, train=train, rng=rng) for b, x in zip(self.branches, xs)]
        z = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
        return self.head.forward(z, train=train, rng=rng)

    def forward(self, inputs, train=False, rng=None) -> np.ndarray:
        """Class probabilities, shape (N, 2)."""
        return softmax(self.logits(inputs, train=train, rng=rng))

    def loss_and_grads(self, inputs, labels, rng=None):
        """Training-mode forward and backward; returns (loss, grads, probs)."""
        logits = self.logits(inputs, train=True, rng=rng)
        loss, probs, dlogits = softmax_cross_entropy(logits, labels)
        dz = self.head.backward(dlogits.astype(self.dtype, copy=False))
        offset = 0
        for branch, size in zip(self.branches, self.flatten_sizes):
            branch.backward(dz[:, offset : offset + size])
            offset += size
        return loss, self.grads(), probs

    def loss(self, inputs, labels, batch_size=512) -> float:
        """Eval-mode mean cross-entropy."""
        xs = self._split_inputs(inputs)
        labels = np.asarray(labels)
        n = labels.size
        total = 0.0
        for a in range(0, n, batch_size):
            logits = self.logits([x[a : a + batch_size, ..., 0] for x in xs])
            loss, _, _ = softmax_cross_entropy(logits.astype(np.float64), labels[a : a + batch_size])
            total += loss * min(batch_size, n - a)
        return total / n

    def predict(self, inputs, batch_size=512) -> np.ndarray:
        """Eval-mode probability of class 1 per row."""
        xs = self._split_inputs(inputs)
        n = xs[0].shape[0]
        out = [self.forward([x[a : a + batch_size, ..., 0] for x in xs])[:, 1] for a in range(0, n, batch_size)]
        return np.concatenate(out) if out else np.empty(0)

    def __repr__(self):
        return f"Network({self.tag}, input={self.input_shape}, trainable={self.n_trainable})"


def build_architecture(tag: str, n_bands: int = 32, n_frames: int = 50, seed: int = 0,
                       dtype=np.float32) -> Network:
    """Build A1, A2 or TEFS with seeded fan-in-scaled uniform initialisation.

    Any (K, B) whose shape chain stays valid is accepted; at K=32, B=50 the
    flatten sizes are asserted against the reference architecture.
    """
    tag = tag.upper()
    if tag not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {tag!r}; choose from {ARCHITECTURES}")
    rng = np.random.default_rng(seed)
    shape = (n_bands, n_frames)
    if tag == "A1":
        branches = [conv_branch("branch0", 2, rng, dtype)]
    elif tag == "A2":
        branches = [conv_branch("branch0", 3, rng, dtype)]
    else:
        branches = [conv_branch("branch0", 2, rng, dtype), conv_branch("branch1", 2, rng, dtype)]
    try:
        flat = sum(b.output_shape(shape + (1,))[0] for b in branches)
    except ValueError as exc:
        raise ValueError(f"{tag} cannot be built for input ({n_bands} x {n_frames}): {exc}") from exc
    if flat < 1:
        raise ValueError(f"{tag} cannot be built for input ({n_bands} x {n_frames}): empty feature map")
    if (n_bands, n_frames) == (32, 50) and flat != EXPECTED_FLATTEN[tag]:
        raise AssertionError(f"{tag}: flatten size {flat} != {EXPECTED_FLATTEN[tag]}")

    if tag == "A1":
        head = Sequential("head", [Dense("fc1", flat, N_CLASSES, rng=rng, dtype=dtype)])
    elif tag == "A2":
        head = Sequential("head", [
            Dense("fc1", flat, 4096, rng=rng, dtype=dtype),
            ReLU("relu_fc1"),
            Dense("fc2", 4096, N_CLASSES, rng=rng, dtype=dtype),
        ])
    else:
        head = Sequential("head", [
            Dense("fc1", flat, 128, rng=rng, dtype=dtype),
            ReLU("relu_fc1"),
            Dense("fc2", 128, N_CLASSES, rng=rng, dtype=dtype),
        ])
    return Network(tag, branches, head, shape, seed, dtype)
