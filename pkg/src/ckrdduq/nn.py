"""Minimal reverse-mode differentiation over float64 numpy arrays.

Trainable state lives in :class:`Parameter`.  A :class:`Graph` executes
operations eagerly and records them on a tape; :meth:`Graph.backward` walks
the tape in exact reverse order and accumulates gradients into parameters.

    g = Graph()
    h = g.tanh(g.dense(g.input(x), layer.weight, layer.bias))
    loss = g.mean(g.square(h))
    g.backward(loss)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class GraphError(RuntimeError):
    """Misuse of the graph, e.g. calling backward before any forward pass."""


class ShapeError(ValueError):
    pass


class Parameter:
    """A dense float64 array with an attached gradient accumulator."""

    def __init__(self, value, trainable: bool = True, name: str = "", kind: str = "param"):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name
        self.kind = kind

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Node:
    __slots__ = ("graph", "value", "grad", "requires_grad", "id")

    def __init__(self, graph: "Graph", value: np.ndarray, requires_grad: bool, id: int):
        self.graph = graph
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.shape})"


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Node, ...]
    output: Node
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Define-by-run tape.

    With ``record=False`` operations only compute values; this is the fast
    path for evaluation of frozen models.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.records: list[OpRecord] = []
        self._param_nodes: dict[int, tuple[Parameter, Node]] = {}
        self._next_id = 0
        self._done = False

    # -- leaves -----------------------------------------------------------
    def _node(self, value, requires_grad: bool) -> Node:
        node = Node(self, value, requires_grad and self.record, self._next_id)
        self._next_id += 1
        return node

    def input(self, value, requires_grad: bool = False) -> Node:
        return self._node(np.asarray(value, dtype=np.float64), requires_grad)

    const = input

    def param(self, p: Parameter) -> Node:
        hit = self._param_nodes.get(id(p))
        if hit is not None:
            return hit[1]
        node = self._node(p.value, True)
        self._param_nodes[id(p)] = (p, node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.input(x)

    def _op(self, kind: str, inputs: tuple[Node, ...], value: np.ndarray, backward) -> Node:
        requires = self.record and any(n.requires_grad for n in inputs)
        out = self._node(value, requires)
        if requires:
            self.records.append(OpRecord(kind, inputs, out, backward))
        return out

    def _fail(self, kind: str, msg: str):
        raise ShapeError(f"op #{self._next_id} ({kind}): {msg}")

    # -- affine -----------------------------------------------------------
    def dense(self, x, weight, bias=None) -> Node:
        x, w = self._lift(x), self._lift(weight)
        if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
            self._fail("dense", f"input {x.shape} incompatible with weight {w.shape}")
        value = x.value @ w.value
        inputs = (x, w)
        if bias is not None:
            b = self._lift(bias)
            if b.shape != (w.shape[1],):
                self._fail("dense", f"bias {b.shape} does not match weight {w.shape}")
            value = value + b.value
            inputs = (x, w, b)

        def backward(g):
            gx = g @ w.value.T if x.requires_grad else None
            gw = x.value.T @ g if w.requires_grad else None
            if len(inputs) == 3:
                return gx, gw, g.sum(axis=0)
            return gx, gw

        return self._op("dense", inputs, value, backward)

    # -- elementwise unary ------------------------------------------------
    def tanh(self, x) -> Node:
        x = self._lift(x)
        y = np.tanh(x.value)
        return self._op("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))

    def relu(self, x) -> Node:
        x = self._lift(x)
        mask = x.value > 0
        return self._op("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))

    def leaky_relu(self, x, slope: float = LEAKY_SLOPE) -> Node:
        x = self._lift(x)
        factor = np.where(x.value > 0, 1.0, slope)
        return self._op("leaky_relu", (x,), x.value * factor, lambda g: (g * factor,))

    def exp(self, x) -> Node:
        x = self._lift(x)
        y = np.exp(x.value)
        return self._op("exp", (x,), y, lambda g: (g * y,))

    def log(self, x) -> Node:
        x = self._lift(x)
        return self._op("log", (x,), np.log(x.value), lambda g: (g / x.value,))

    def sigmoid(self, x) -> Node:
        x = self._lift(x)
        y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
        return self._op("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))

    def square(self, x) -> Node:
        x = self._lift(x)
        return self._op("square", (x,), x.value * x.value, lambda g: (2.0 * g * x.value,))

    # -- elementwise binary -----------------------------------------------
    def _binary(self, kind, a, b, value_fn, grad_fn) -> Node:
        a, b = self._lift(a), self._lift(b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            self._fail(kind, f"cannot broadcast {a.shape} with {b.shape}")
        value = value_fn(a.value, b.value)

        def backward(g):
            ga, gb = grad_fn(g, a.value, b.value)
            return (
                _unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(gb, b.shape) if b.requires_grad else None,
            )

        return self._op(kind, (a, b), value, backward)

    def add(self, a, b) -> Node:
        return self._binary("add", a, b, np.add, lambda g, x, y: (g, g))

    def sub(self, a, b) -> Node:
        return self._binary("sub", a, b, np.subtract, lambda g, x, y: (g, -g))

    def mul(self, a, b) -> Node:
        return self._binary("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))

    # -- reductions and reshaping -----------------------------------------
    def sum(self, x, axis: int | None = None) -> Node:
        x = self._lift(x)
        shape = x.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return self._op("sum", (x,), x.value.sum(axis=axis), backward)

    def mean(self, x, axis: int | None = None) -> Node:
        x = self._lift(x)
        count = x.value.size if axis is None else x.shape[axis]
        shape = x.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape),)

        return self._op("mean", (x,), x.value.mean(axis=axis), backward)

    def concat(self, xs: Sequence, axis: int = 1) -> Node:
        xs = tuple(self._lift(x) for x in xs)
        try:
            value = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError as exc:
            self._fail("concat", str(exc))
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._op("concat", xs, value, lambda g: tuple(np.split(g, cuts, axis=axis)))

    def slice(self, x, start: int, stop: int) -> Node:
        """Columns ``start:stop`` of a 2-d node."""
        x = self._lift(x)
        if not 0 <= start <= stop <= x.shape[-1]:
            self._fail("slice", f"columns {start}:{stop} out of range for {x.shape}")
        shape = x.shape

        def backward(g):
            full = np.zeros(shape)
            full[..., start:stop] = g
            return (full,)

        return self._op("slice", (x,), x.value[..., start:stop], backward)

    def custom(self, kind: str, inputs: Sequence, value: np.ndarray, backward) -> Node:
        """Fused operation with a hand-written vector-Jacobian product."""
        return self._op(kind, tuple(self._lift(x) for x in inputs), value, backward)

    # -- backward -----------------------------------------------------------
    def backward(self, loss: Node) -> None:
        if not self.record:
            raise GraphError("graph was built with record=False")
        if not isinstance(loss, Node) or loss.graph is not self:
            raise GraphError("loss does not belong to this graph; run the forward pass first")
        if self._done:
            raise GraphError("backward already ran on this graph")
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any parameter")
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not node.requires_grad:
                    continue
                node.grad = gi if node.grad is None else node.grad + gi
        for p, node in self._param_nodes.values():
            if node.grad is not None:
                p.grad += node.grad
        self._done = True


# -- layers -------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out > 0 else 0.0
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 zero_init: bool = False, name: str = "dense"):
        w = np.zeros((fan_in, fan_out)) if zero_init else glorot_uniform(rng, fan_in, fan_out)
        self.weight = Parameter(w, name=f"{name}.weight", kind="dense_weight")
        self.bias = Parameter(np.zeros(fan_out), name=f"{name}.bias", kind="dense_bias")

    def __call__(self, g: Graph, x) -> Node:
        return g.dense(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


_ACTIVATIONS = {
    "relu": Graph.relu,
    "tanh": Graph.tanh,
    "leaky_relu": Graph.leaky_relu,
    "sigmoid": Graph.sigmoid,
}


class MLP:
    """Fully connected network; activation after every layer but the last."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", zero_last: bool = False, name: str = "mlp"):
        self.layers = [
            Dense(a, b, rng, zero_init=zero_last and i == len(sizes) - 2, name=f"{name}.{i}")
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = _ACTIVATIONS[activation]

    def __call__(self, g: Graph, x) -> Node:
        for layer in self.layers[:-1]:
            x = self.activation(g, layer(g, x))
        return self.layers[-1](g, x)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


# -- optimizer ------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam.  Also owns the moment state (m, v, t)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                name = p.name or f"#{self.params.index(p)}"
                raise FloatingPointError(f"non-finite gradient in parameter {name}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def snapshot(params: Sequence[Parameter]) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def restore(params: Sequence[Parameter], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.value[...] = v


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"CKRW"
FORMAT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    """Write ``CKRW`` + u32 version + u32 manifest length + JSON manifest + LE f64 payloads."""
    manifest = {
        "layers": [{"kind": p.kind, "name": p.name, "shape": list(p.shape)} for p in params],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[list[dict], list[np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a CKRW checkpoint")
    version, size = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[12:12 + size].decode())
    offset = 12 + size
    arrays = []
    for entry in manifest["layers"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        arrays.append(arr.reshape(entry["shape"]).astype(np.float64))
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return manifest["layers"], arrays, manifest["meta"]


def load_into(path, params: Sequence[Parameter]) -> dict:
    layers, arrays, meta = read_checkpoint(path)
    if len(layers) != len(params):
        raise ValueError(f"{path}: {len(layers)} tensors in file, model has {len(params)}")
    for entry, arr, p in zip(layers, arrays, params):
        if tuple(entry["shape"]) != p.shape or entry["kind"] != p.kind:
            raise ValueError(f"{path}: manifest entry {entry} does not match {p}")
        p.value[...] = arr
    return meta
