"""
Minimal dense-tensor engine
===========================

Plain numpy arrays are the tensors. Every layer owns its parameters and
gradients, caches what it needs during a training-mode forward pass and
implements ``backward``. A :class:`Graph` runs an ordered list of layers and
supports skip edges through :class:`ResidualAdd` nodes.

Layout is NCHW for image tensors and (N, features) for vectors. Convolution,
batch normalization and activations run through fused compiled loops.
"""

import copy

import numpy as np

from . import _fused
from .binarize import binarize

LEAKY_SLOPE = 0.3
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a layer expects."""


class StateError(RuntimeError):
    """Raised when backward is requested without a cached training forward."""


class UnsupportedStructureError(ValueError):
    """Raised when a graph transformation meets a layer pattern it cannot handle."""


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "Layer"

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for store in (self.params, self.grads, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)
        self._cache = None
        return self

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a training-mode forward")
        return self._cache

    def _check_input(self, x, expected):
        if x.shape[1:] != tuple(expected):
            raise ShapeError(
                f"{self.name} ({self.kind}): expected per-sample shape {tuple(expected)}, "
                f"got {x.shape[1:]}"
            )

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad1(x):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution (cross-correlation). Returns (y, cache)."""
    xp = _pad1(x)
    n, _, h, wd = x.shape
    y = np.empty((n, w.shape[0], h, wd), dtype=x.dtype)
    y[:] = b.reshape(1, -1, 1, 1)
    _fused.correlate3x3(xp, np.ascontiguousarray(w, dtype=x.dtype), y)
    return y, xp


def conv3x3_backward(dy, w, cache):
    """Returns (dx, dw, db) for :func:`conv3x3_forward`."""
    xp = cache
    dy = np.ascontiguousarray(dy, dtype=xp.dtype)
    n, c = xp.shape[:2]
    # input gradient: correlate the padded output gradient with the flipped kernel
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dtype=dy.dtype)
    dx = np.zeros((n, c) + dy.shape[2:], dtype=dy.dtype)
    _fused.correlate3x3(_pad1(dy), w_flip, dx)
    dw = _fused.conv3x3_weight_grad(xp, dy).astype(w.dtype)
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(w.dtype)
    return dx, dw, db


class Conv3x3(Layer):
    kind = "Conv3x3"

    def __init__(self, c_in, c_out, rng=None, name=None, dtype=np.float32):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = xavier_uniform(
            rng, (c_out, c_in, 3, 3), 9 * c_in, 9 * c_out, dtype
        )
        self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeError(f"{self.name}: expected ({self.c_in}, H, W) input, got {tuple(shape)}")
        return (self.c_out,) + tuple(shape[1:])

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (N, {self.c_in}, H, W) input, got {x.shape}")
        y, cache = conv3x3_forward(x, self.params["weight"], self.params["bias"])
        self._cache = cache if train else None
        return y

    def backward(self, dy):
        cache = self._require_cache()
        dx, dw, db = conv3x3_backward(dy, self.params["weight"], cache)
        self.grads["weight"] = dw
        self.grads["bias"] = db
        return dx


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

class BatchNorm(Layer):
    """Per-channel batch normalization over axis 1 (rank-2 or rank-4 input)."""

    kind = "BatchNorm"

    def __init__(self, channels, name=None, dtype=np.float32, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if len(shape) not in (1, 3) or shape[0] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {tuple(shape)}")
        return tuple(shape)

    @staticmethod
    def _view3(x):
        return x.reshape(x.shape[0], x.shape[1], -1)

    def forward(self, x, train=False):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        x3 = self._view3(np.ascontiguousarray(x))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            count = x3.shape[0] * x3.shape[2]
            mean, var = _fused.channel_moments(x3)
            inv = 1.0 / np.sqrt(var + self.eps)
            y, xhat = _fused.bn_train_forward(x3, mean.astype(x.dtype), inv.astype(x.dtype), gamma, beta)
            m = self.momentum
            unbiased = var * (count / max(count - 1, 1))
            self.buffers["running_mean"] = (
                m * self.buffers["running_mean"] + (1 - m) * mean
            ).astype(x.dtype)
            self.buffers["running_var"] = (
                m * self.buffers["running_var"] + (1 - m) * unbiased
            ).astype(x.dtype)
            self._cache = (xhat, inv.astype(x.dtype))
            return y.reshape(x.shape)
        inv = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
        scale = inv * gamma
        shift = beta - self.buffers["running_mean"] * scale
        self._cache = None
        return _fused.channel_affine(x3, scale.astype(x.dtype), shift.astype(x.dtype)).reshape(x.shape)

    def backward(self, dy):
        xhat, inv = self._require_cache()
        dy3 = self._view3(np.ascontiguousarray(dy, dtype=xhat.dtype))
        dx, dgamma, dbeta = _fused.bn_backward(dy3, xhat, inv, self.params["gamma"])
        dtype = self.params["gamma"].dtype
        self.grads["gamma"] = dgamma.astype(dtype)
        self.grads["beta"] = dbeta.astype(dtype)
        return dx.reshape(dy.shape)


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, slope=LEAKY_SLOPE, name=None):
        super().__init__(name)
        self.slope = slope

    def forward(self, x, train=False):
        y = _fused.leaky_forward(np.ascontiguousarray(x), x.dtype.type(self.slope))
        self._cache = y if train else None
        return y

    def backward(self, dy):
        y = self._require_cache()
        return _fused.leaky_backward(y, np.ascontiguousarray(dy, dtype=y.dtype), y.dtype.type(self.slope))


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, train=False):
        y = np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)
        self._cache = y if train else None
        return y

    def backward(self, dy):
        y = self._require_cache()
        return dy * y * (1 - y)


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

class Dense(Layer):
    """y = x W^T + b with W of shape (out_features, in_features)."""

    kind = "Dense"

    def __init__(self, n_in, n_out, rng=None, name=None, dtype=np.float32):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = xavier_uniform(rng, (n_out, n_in), n_in, n_out, dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def output_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise ShapeError(f"{self.name}: expected ({self.n_in},) input, got {tuple(shape)}")
        return (self.n_out,)

    def weight_for_forward(self):
        return self.params["W"]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected (N, {self.n_in}) input, got {x.shape}")
        w = self.weight_for_forward()
        if train:
            self._cache = (x, w)
            return x @ w.T + self.params["b"]
        self._cache = None
        # one matrix-vector product per row so a sample's output does not depend on its batch
        out = np.empty((x.shape[0], self.n_out), dtype=np.result_type(x, w))
        for i in range(x.shape[0]):
            np.matmul(w, x[i], out=out[i])
        out += self.params["b"]
        return out

    def backward(self, dy):
        x, w = self._require_cache()
        self.grads["W"] = dy.T @ x
        self.grads["b"] = dy.sum(axis=0)
        return dy @ w


class BinaryDense(Dense):
    """Fully connected layer whose forward weight is alpha * sign(W).

    ``params["W"]`` normally holds the real-valued master weights and the
    forward pass binarizes on the fly. The trainer may instead swap the
    binarized weights in with :meth:`assign_binary` and put the master
    weights back with :meth:`restore_master`; while swapped, ``W`` is used
    as is. ``grads["W"]`` is always the gradient with respect to the weight
    used in the forward pass (the binarized one); converting it into a
    master-weight gradient is the trainer's job.
    """

    kind = "BinaryDense"

    def __init__(self, n_in, n_out, rng=None, name=None, dtype=np.float32):
        super().__init__(n_in, n_out, rng=rng, name=name, dtype=dtype)
        self._master = None

    @property
    def binary_assigned(self):
        return self._master is not None

    def assign_binary(self):
        w = self.params["W"]
        self._master = w.copy()
        signs, alpha = binarize(w)
        self.params["W"] = (alpha * signs).astype(w.dtype)
        return signs, alpha

    def restore_master(self):
        if self._master is None:
            raise StateError(f"{self.name}: no saved master weights to restore")
        self.params["W"] = self._master
        self._master = None

    def binarized(self):
        signs, alpha = binarize(self.params["W"])
        return signs, alpha

    def weight_for_forward(self):
        if self.binary_assigned:
            return self.params["W"]
        signs, alpha = binarize(self.params["W"])
        return (alpha * signs).astype(self.params["W"].dtype)

    def astype(self, dtype):
        super().astype(dtype)
        if self._master is not None:
            self._master = self._master.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._cache = x.shape if train else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        shape = self._require_cache()
        return dy.reshape(shape)


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, target, name=None):
        super().__init__(name)
        self.target = tuple(int(t) for t in target)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.target)):
            raise ShapeError(f"{self.name}: cannot reshape {tuple(shape)} to {self.target}")
        return self.target

    def forward(self, x, train=False):
        if int(np.prod(x.shape[1:])) != int(np.prod(self.target)):
            raise ShapeError(f"{self.name}: cannot reshape {x.shape[1:]} to {self.target}")
        self._cache = x.shape if train else None
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, dy):
        shape = self._require_cache()
        return dy.reshape(shape)


class ResidualAdd(Layer):
    """Adds the activation produced ``source`` nodes earlier in the graph.

    Activation index 0 is the graph input and index ``i + 1`` is the output
    of layer ``i``; ``source`` is an absolute activation index.
    """

    kind = "ResidualAdd"

    def __init__(self, source, name=None):
        super().__init__(name)
        self.source = int(source)

    def forward(self, x, skip, train=False):
        if x.shape != skip.shape:
            raise ShapeError(f"{self.name}: branch shapes differ, {x.shape} vs {skip.shape}")
        self._cache = True if train else None
        return x + skip

    def backward(self, dy):
        self._require_cache()
        return dy, dy


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Graph:
    """Ordered layers plus skip edges, executed in list order."""

    def __init__(self, layers, input_shape, name="graph"):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.name = name
        self.shapes = self._infer_shapes()
        self._trained_forward = False
        self._dtype = None

    def _infer_shapes(self):
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                if not 0 <= layer.source <= i:
                    raise ShapeError(
                        f"{self.name}/{layer.name}: skip source {layer.source} is not an earlier node"
                    )
                if shapes[layer.source] != shapes[i]:
                    raise ShapeError(
                        f"{self.name}/{layer.name}: skip shape {shapes[layer.source]} "
                        f"does not match {shapes[i]}"
                    )
                shapes.append(shapes[i])
                continue
            try:
                shapes.append(tuple(layer.output_shape(shapes[i])))
            except ShapeError as err:
                raise ShapeError(f"{self.name}/{err}") from None
        return shapes

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def dtype(self):
        if self._dtype is not None:
            return self._dtype
        for layer in self.layers:
            for v in layer.params.values():
                return v.dtype
        return np.dtype(np.float32)

    def parameters(self):
        """Yield (key, layer, param_name) for every trainable array."""
        for layer in self.layers:
            for pname in layer.params:
                yield f"{self.name}.{layer.name}.{pname}", layer, pname

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self._dtype = np.dtype(dtype)
        return self

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"{self.name}: expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        x = x.astype(self.dtype, copy=False)
        acts = [x]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                acts.append(layer.forward(acts[i], acts[layer.source], train=train))
            else:
                acts.append(layer.forward(acts[i], train=train))
        self._trained_forward = train
        return acts[-1]

    def backward(self, dy):
        if not self._trained_forward:
            raise StateError(f"{self.name}: backward requires a preceding training-mode forward")
        dy = np.asarray(dy)
        if dy.shape[1:] != self.output_shape:
            raise ShapeError(f"{self.name}: output gradient shape {dy.shape} does not match output")
        grads = [None] * (len(self.layers) + 1)
        grads[-1] = dy.astype(self.dtype, copy=False)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = grads[i + 1]
            if g is None:
                continue
            if isinstance(layer, ResidualAdd):
                dx, dskip = layer.backward(g)
                grads[layer.source] = dskip if grads[layer.source] is None else grads[layer.source] + dskip
            else:
                dx = layer.backward(g)
            grads[i] = dx if grads[i] is None else grads[i] + dx
        self._trained_forward = False
        return grads[0]

    def copy(self):
        return copy.deepcopy(self)

    def __repr__(self):
        inner = ", ".join(f"{layer.kind}:{layer.name}" for layer in self.layers)
        return f"Graph({self.name}: {inner})"


def forward(graph, x, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return graph.forward(x, train=(mode == "train"))


def backward(graph, output_grad):
    return graph.backward(output_grad)


def fuse_batchnorm(graph):
    """Return an equivalent eval-mode graph with every BatchNorm folded away.

    Each BatchNorm must directly follow a Conv3x3 or a float Dense layer, and
    the pre-normalization activation must not feed any skip edge.
    """
    layers = [layer for layer in graph.layers]
    removed = set()
    for i, layer in enumerate(layers):
        if not isinstance(layer, BatchNorm):
            continue
        prev = layers[i - 1] if i > 0 else None
        if i == 0 or i - 1 in removed or type(prev) not in (Conv3x3, Dense):
            raise UnsupportedStructureError(
                f"{graph.name}/{layer.name}: BatchNorm is not preceded by Conv3x3 or Dense"
            )
        removed.add(i)

    # activation index i (output of layer i-1) disappears when layer i is a removed BN
    for layer in layers:
        if isinstance(layer, ResidualAdd) and layer.source in removed:
            raise UnsupportedStructureError(
                f"{graph.name}/{layer.name}: skip edge reads an activation before BatchNorm"
            )
    remap = {}
    shift = 0
    for idx in range(len(layers) + 1):
        if idx in removed:
            shift += 1
            continue
        remap[idx] = idx - shift

    fused = []
    for i, layer in enumerate(layers):
        if i in removed:
            continue
        new = copy.deepcopy(layer)
        new._cache = None
        if i + 1 in removed:
            bn = layers[i + 1]
            scale = bn.params["gamma"] / np.sqrt(bn.buffers["running_var"] + bn.eps)
            shift_ = bn.params["beta"] - bn.buffers["running_mean"] * scale
            key_w, key_b = ("weight", "bias") if isinstance(new, Conv3x3) else ("W", "b")
            wshape = (-1,) + (1,) * (new.params[key_w].ndim - 1)
            dtype = new.params[key_w].dtype
            new.params[key_w] = (new.params[key_w] * scale.reshape(wshape)).astype(dtype)
            new.params[key_b] = (new.params[key_b] * scale + shift_).astype(dtype)
            new.zero_grad()
        if isinstance(new, ResidualAdd):
            new.source = remap[new.source]
        fused.append(new)
    return Graph(fused, graph.input_shape, name=graph.name)
