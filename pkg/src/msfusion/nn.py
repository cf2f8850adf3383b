"""A small layer graph with hand-written gradients and an Adam optimizer.

Tensors are numpy arrays in ``(batch, channels, rows, cols)`` order for image
data and ``(batch, features)`` for dense data. A :class:`ModelGraph` is an
ordered list of :class:`Node` objects wired by tensor name; parallel branches
are expressed by nodes that consume different names, joined by a ``Concat``
and forked again by a ``Split``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class GraphError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: float, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, xs: list, train: bool = False) -> list:
        raise NotImplementedError

    def backward(self, gys: list) -> list:
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _need_cache(self):
        if self._cache is None:
            raise GraphError(f"{self.kind}: backward called without retained activations")
        return self._cache


def _im2col(xp: np.ndarray, k: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N*out_h*out_w, C*k*k)
    return kernels.im2col(xp, k, s, out_h, out_w)


def _col2im(cols: np.ndarray, shape, k: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    # adjoint of _im2col: cols (N, out_h, out_w, C, k, k) scattered into shape
    return kernels.col2im(cols, shape, s)


class Conv2d(Layer):
    kind = "Conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0,
                 rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["weight"] = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel=self.kernel, stride=self.stride, padding=self.padding)

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        oh = conv_output_size(h, self.kernel, self.stride, self.padding)
        ow = conv_output_size(w, self.kernel, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} collapses to {oh}x{ow}")
        return (n, self.out_channels, oh, ow)

    def forward(self, xs, train=False):
        (x,) = xs
        n, _, oh, ow = self.output_shape(x.shape)
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, k, s, oh, ow)
        W = self.params["weight"].reshape(self.out_channels, -1)
        y = cols @ W.T + self.params["bias"]
        self._cache = (cols, xp.shape, oh, ow)
        return [np.ascontiguousarray(y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2))]

    def backward(self, gys):
        (gy,) = gys
        cols, xp_shape, oh, ow = self._need_cache()
        n = gy.shape[0]
        g = gy.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_channels)
        W = self.params["weight"]
        self.grads["weight"] = (g.T @ cols).reshape(W.shape)
        self.grads["bias"] = g.sum(axis=0)
        dcols = (g @ W.reshape(self.out_channels, -1)).reshape(
            n, oh, ow, self.in_channels, self.kernel, self.kernel)
        dxp = _col2im(dcols, xp_shape, self.kernel, self.stride, oh, ow)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return [np.ascontiguousarray(dxp)]


class ConvTranspose2d(Layer):
    """Transposed convolution; weight layout (in_channels, out_channels, k, k)."""

    kind = "ConvTranspose2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0,
                 output_padding=(0, 0), rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        if np.isscalar(output_padding):
            output_padding = (int(output_padding), int(output_padding))
        self.output_padding = tuple(int(v) for v in output_padding)
        if any(v < 0 or v >= max(stride, 1) for v in self.output_padding):
            raise ShapeError(f"output_padding {self.output_padding} must be in [0, stride)")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel / float(stride * stride)
        self.params["weight"] = kaiming_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel=self.kernel, stride=self.stride, padding=self.padding,
                    output_padding=list(self.output_padding))

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel, self.stride, self.padding
        oh = (h - 1) * s - 2 * p + k + self.output_padding[0]
        ow = (w - 1) * s - 2 * p + k + self.output_padding[1]
        return (n, self.out_channels, oh, ow)

    def forward(self, xs, train=False):
        (x,) = xs
        n, _, h, w = x.shape
        _, _, oh, ow = self.output_shape(x.shape)
        k, s, p = self.kernel, self.stride, self.padding
        xcols = x.transpose(0, 2, 3, 1).reshape(n * h * w, self.in_channels)
        W = self.params["weight"].reshape(self.in_channels, -1)
        cols = (xcols @ W).reshape(n, h, w, self.out_channels, k, k)
        full = (n, self.out_channels, oh + 2 * p, ow + 2 * p)
        y = _col2im(cols, full, k, s, h, w)
        if p:
            y = y[:, :, p:-p, p:-p]
        y = y + self.params["bias"][None, :, None, None]
        self._cache = (xcols, x.shape)
        return [np.ascontiguousarray(y)]

    def backward(self, gys):
        (gy,) = gys
        xcols, xshape = self._need_cache()
        n, _, h, w = xshape
        k, s, p = self.kernel, self.stride, self.padding
        gp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p))) if p else gy
        gcols = _im2col(gp, k, s, h, w)  # (N*h*w, O*k*k)
        W = self.params["weight"]
        self.grads["weight"] = (xcols.T @ gcols).reshape(W.shape)
        self.grads["bias"] = gy.sum(axis=(0, 2, 3))
        dx = gcols @ W.reshape(self.in_channels, -1).T
        return [np.ascontiguousarray(dx.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2))]


class Dense(Layer):
    kind = "Dense"

    def __init__(self, fan_in, fan_out, rng=None, dtype=np.float32, zero_init=False):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero_init:
            self.params["weight"] = np.zeros((fan_out, fan_in), dtype=dtype)
        else:
            self.params["weight"] = kaiming_uniform(rng, (fan_out, fan_in), fan_in, dtype)
        self.params["bias"] = np.zeros(fan_out, dtype=dtype)

    def config(self):
        return dict(fan_in=self.fan_in, fan_out=self.fan_out)

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.fan_in:
            raise ShapeError(f"expected (batch, {self.fan_in}), got {tuple(shape)}")
        return (shape[0], self.fan_out)

    def forward(self, xs, train=False):
        (x,) = xs
        self.output_shape(x.shape)
        self._cache = x
        return [x @ self.params["weight"].T + self.params["bias"]]

    def backward(self, gys):
        (gy,) = gys
        x = self._need_cache()
        self.grads["weight"] = gy.T @ x
        self.grads["bias"] = gy.sum(axis=0)
        return [gy @ self.params["weight"]]


class ReLU(Layer):
    kind = "ReLU"

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, xs, train=False):
        (x,) = xs
        self._cache = x > 0
        return [np.maximum(x, 0)]

    def backward(self, gys):
        return [gys[0] * self._need_cache()]


class Sigmoid(Layer):
    kind = "Sigmoid"

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, xs, train=False):
        (x,) = xs
        y = sigmoid(x)
        self._cache = y
        return [y]

    def backward(self, gys):
        y = self._need_cache()
        return [gys[0] * y * (1 - y)]


def sigmoid(x):
    # split by sign so neither branch overflows; sigmoid(0) == 0.5 exactly
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate=0.0, rng=None):
        super().__init__()
        self.rate = float(rate)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def config(self):
        return dict(rate=self.rate)

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, xs, train=False):
        (x,) = xs
        if not train or self.rate == 0.0:
            self._cache = None
            return [x]
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = keep
        return [x * keep]

    def backward(self, gys):
        return [gys[0] if self._cache is None else gys[0] * self._cache]


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, xs, train=False):
        (x,) = xs
        self._cache = x.shape
        return [x.reshape(x.shape[0], -1)]

    def backward(self, gys):
        return [gys[0].reshape(self._need_cache())]


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(v) for v in shape)

    def config(self):
        return dict(shape=list(self.shape))

    def output_shape(self, shape):
        if int(np.prod(shape[1:])) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(shape[1:])} to {self.shape}")
        return (shape[0],) + self.shape

    def forward(self, xs, train=False):
        (x,) = xs
        self.output_shape(x.shape)
        self._cache = x.shape
        return [x.reshape((x.shape[0],) + self.shape)]

    def backward(self, gys):
        return [gys[0].reshape(self._need_cache())]


class Concat(Layer):
    """Join along the channel axis."""

    kind = "Concat"

    def __init__(self, n_inputs):
        super().__init__()
        self.n_inputs = n_inputs

    def config(self):
        return dict(n_inputs=self.n_inputs)

    def output_shape(self, shapes):
        base = shapes[0]
        for s in shapes[1:]:
            if s[0] != base[0] or tuple(s[2:]) != tuple(base[2:]):
                raise ShapeError(f"cannot concatenate shapes {[tuple(x) for x in shapes]}")
        return (base[0], sum(s[1] for s in shapes)) + tuple(base[2:])

    def forward(self, xs, train=False):
        self.output_shape([x.shape for x in xs])
        self._cache = [x.shape[1] for x in xs]
        return [np.concatenate(xs, axis=1)]

    def backward(self, gys):
        sizes = self._need_cache()
        return list(np.split(gys[0], np.cumsum(sizes)[:-1], axis=1))


class Split(Layer):
    """Fork along the channel axis into pieces of the given sizes."""

    kind = "Split"

    def __init__(self, sizes):
        super().__init__()
        self.sizes = [int(s) for s in sizes]

    def config(self):
        return dict(sizes=list(self.sizes))

    def output_shape(self, shape):
        if shape[1] != sum(self.sizes):
            raise ShapeError(f"cannot split {shape[1]} channels into {self.sizes}")
        return [(shape[0], s) + tuple(shape[2:]) for s in self.sizes]

    def forward(self, xs, train=False):
        (x,) = xs
        self.output_shape(x.shape)
        self._cache = x.shape
        return [np.ascontiguousarray(p) for p in np.split(x, np.cumsum(self.sizes)[:-1], axis=1)]

    def backward(self, gys):
        self._need_cache()
        return [np.concatenate(gys, axis=1)]


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2d, ConvTranspose2d, Dense, ReLU, Sigmoid, Dropout, Flatten, Reshape, Concat, Split)}


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list
    outputs: list


@dataclass
class ModelGraph:
    """Topologically ordered nodes plus the names of graph inputs and outputs."""

    nodes: list
    inputs: list
    outputs: list
    bottleneck_name: str | None = None
    input_shapes: dict = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        produced = set(self.inputs)
        for node in self.nodes:
            for name in node.inputs:
                if name not in produced:
                    raise GraphError(f"node {node.name!r} consumes {name!r} before it is produced")
            for name in node.outputs:
                if name in produced:
                    raise GraphError(f"tensor {name!r} is produced more than once")
                produced.add(name)
        for name in self.outputs + ([self.bottleneck_name] if self.bottleneck_name else []):
            if name not in produced:
                raise GraphError(f"graph output {name!r} is never produced")

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def parameters(self) -> dict:
        return {f"{n.name}.{k}": v for n in self.nodes for k, v in n.layer.params.items()}

    def gradients(self) -> dict:
        return {f"{n.name}.{k}": v for n in self.nodes for k, v in n.layer.grads.items()}

    def set_parameters(self, params: dict):
        for n in self.nodes:
            for k in n.layer.params:
                key = f"{n.name}.{k}"
                if params[key].shape != n.layer.params[k].shape:
                    raise ShapeError(f"{key}: stored shape {params[key].shape} != {n.layer.params[k].shape}")
                n.layer.params[k] = params[key].copy()

    def copy_parameters(self) -> dict:
        return {k: v.copy() for k, v in self.parameters().items()}

    def infer_shapes(self, input_shapes: dict) -> dict:
        """Propagate shapes without computing; raises ShapeError naming the node."""
        shapes = dict(input_shapes)
        for node in self.nodes:
            ins = [shapes[n] for n in node.inputs]
            try:
                if isinstance(node.layer, Concat):
                    out = [node.layer.output_shape(ins)]
                elif isinstance(node.layer, Split):
                    out = node.layer.output_shape(ins[0])
                else:
                    out = [node.layer.output_shape(ins[0])]
            except ShapeError as exc:
                raise ShapeError(f"layer {node.name!r} ({node.layer.kind}): {exc}") from None
            shapes.update(zip(node.outputs, [tuple(s) for s in out]))
        return shapes

    def forward(self, inputs: dict, train: bool = False) -> dict:
        missing = [n for n in self.inputs if n not in inputs]
        if missing:
            raise GraphError(f"missing graph inputs {missing}")
        values = {n: inputs[n] for n in self.inputs}
        for node in self.nodes:
            try:
                outs = node.layer.forward([values[n] for n in node.inputs], train=train)
            except ShapeError as exc:
                raise ShapeError(f"layer {node.name!r} ({node.layer.kind}): {exc}") from None
            values.update(zip(node.outputs, outs))
        return values

    def backward(self, loss_grads: dict) -> dict:
        """Accumulate gradients from ``loss_grads`` (tensor name -> dL/dtensor).

        Parameter gradients land in each layer's ``grads``; the returned dict
        holds gradients with respect to the graph inputs.
        """
        grads = {k: v for k, v in loss_grads.items()}
        for node in reversed(self.nodes):
            gys = [grads.get(n) for n in node.outputs]
            if all(g is None for g in gys):
                node.layer.zero_grad()
                continue
            if any(g is None for g in gys):
                # only Split has several outputs; fill unused ones with zeros
                in_shape = node.layer._need_cache()
                ref = next(g for g in gys if g is not None)
                shapes = node.layer.output_shape(in_shape)
                gys = [np.zeros(sh, dtype=ref.dtype) if g is None else g for g, sh in zip(gys, shapes)]
            gxs = node.layer.backward(gys)
            for name, g in zip(node.inputs, gxs):
                grads[name] = g if name not in grads else grads[name] + g
        return {n: grads.get(n) for n in self.inputs}

    def zero_grad(self):
        for n in self.nodes:
            n.layer.zero_grad()


def mse_loss(prediction: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient with respect to ``prediction``."""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    n = diff.size
    return float(np.sum(diff * diff, dtype=np.float64) / n), (2.0 / n) * diff


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy for integer class ``labels`` and its logit gradient."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = -float(np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """Bias-corrected Adam update, in place. Returns ``(params, state)``."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {key}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for key, p in params.items():
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        if state.m[key].shape != p.shape:
            raise ShapeError(f"Adam moment shape mismatch for {key}")
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype, copy=False)
    return params, state


def sequential(layers: list, input_name: str = "x", input_shape=None) -> ModelGraph:
    """Chain ``layers`` one after another (node i reads t{i-1}, writes t{i})."""
    nodes, prev = [], input_name
    for i, layer in enumerate(layers):
        out = f"t{i}"
        nodes.append(Node(f"{layer.kind.lower()}{i}", layer, [prev], [out]))
        prev = out
    shapes = {input_name: input_shape} if input_shape else {}
    return ModelGraph(nodes, [input_name], [prev], input_shapes=shapes)
