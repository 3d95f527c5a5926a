"""Minimal reverse-mode differentiation over float64 numpy arrays.

Graphs are built eagerly by calling the op functions on :class:`Node` objects
and discarded after each :func:`backward`. Only the operations needed by small
MLPs, Gaussian heads and the actor-critic losses are supported.
"""

from __future__ import annotations

import json
import struct
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Node:
    __slots__ = ("value", "grad", "op", "inputs", "requires_grad", "_backward", "name")

    def __init__(self, value, op: str = "leaf", inputs: tuple = (), requires_grad: bool = False,
                 name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # operator sugar, all routed through the tagged ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Node:
    return Node(value, op="const")


def param(value, name: str | None = None) -> Node:
    return Node(value, op="param", requires_grad=True, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


_add_reduce = np.add.reduce


def _check(op: str, value: np.ndarray) -> np.ndarray:
    # a finite sum implies finite entries; only fall back to the elementwise test otherwise
    if not math.isfinite(_add_reduce(value, None)) and not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by op '{op}'")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(op: str, value: np.ndarray, inputs: tuple, backward) -> Node:
    _check(op, value)
    out = Node.__new__(Node)
    out.value = value if value.dtype == np.float64 else value.astype(np.float64)
    out.grad = None
    out.op = op
    out.inputs = inputs
    out.name = None
    out.requires_grad = False
    out._backward = None
    for n in inputs:
        if n.requires_grad:
            out.requires_grad = True
            out._backward = backward
            break
    return out


def _binary(op: str, fn, a: Node, b: Node) -> np.ndarray:
    try:
        return fn(a.value, b.value)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", _binary("add", np.add, a, b), (a, b), backward)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make("mul", _binary("mul", np.multiply, a, b), (a, b), backward)


def matmul(a, b) -> Node:
    """Matrix-matrix or matrix-vector product."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.value @ b.value, (a, b), backward)


def affine(x, w, b) -> Node:
    """x @ w + b for a batch of row vectors (or a single vector)."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    if x.value.ndim not in (1, 2) or w.value.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} are incompatible")

    def backward(g):
        xv = x.value
        gx = g @ w.value.T if x.requires_grad else None
        if xv.ndim == 1:
            gw = np.outer(xv, g) if w.requires_grad else None
            gb = g
        else:
            gw = xv.T @ g if w.requires_grad else None
            gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make("affine", x.value @ w.value + b.value, (x, w, b), backward)


def mlp(x, layers: Sequence[tuple]) -> Node:
    """Fused ReLU network: ``layers`` is [(W0, b0), (W1, b1), ...]; the last layer is linear.

    Same value and gradients as chaining ``affine`` and ``relu``, with one graph node.
    """
    x = _as_node(x)
    layers = [(_as_node(w), _as_node(b)) for w, b in layers]
    acts, masks = [x.value], []
    h = x.value
    for i, (w, b) in enumerate(layers):
        if h.ndim not in (1, 2) or w.value.ndim != 2 or h.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise DimensionError(f"mlp layer {i}: shapes {h.shape}, {w.shape}, {b.shape} are incompatible")
        h = h @ w.value + b.value
        if i < len(layers) - 1:
            mask = h > 0
            h = h * mask
            masks.append(mask)
            acts.append(h)
    inputs = (x,) + tuple(n for pair in layers for n in pair)
    # lowest layer index whose parameters (or the input) need a gradient
    need = [x.requires_grad] + [w.requires_grad or b.requires_grad for w, b in layers]
    lowest = need.index(True) if any(need) else len(need)

    def backward(g):
        grads = [None] * len(inputs)
        for i in range(len(layers) - 1, -1, -1):
            w, b = layers[i]
            a = acts[i]
            if w.requires_grad:
                grads[1 + 2 * i] = np.outer(a, g) if a.ndim == 1 else a.T @ g
            if b.requires_grad:
                grads[2 + 2 * i] = g if g.ndim == 1 else g.sum(axis=0)
            if i == 0:
                if x.requires_grad:
                    grads[0] = g @ w.value.T
                break
            if lowest > i:  # nothing below this layer needs a gradient
                break
            g = (g @ w.value.T) * masks[i - 1]
        return tuple(grads)

    return _make("mlp", h, inputs, backward)


def relu(x) -> Node:
    x = _as_node(x)
    mask = (x.value > 0).astype(np.float64)
    return _make("relu", x.value * mask, (x,), lambda g: (g * mask,))


def tanh(x) -> Node:
    x = _as_node(x)
    y = np.tanh(x.value)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Node:
    x = _as_node(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Node:
    x = _as_node(x)
    if (x.value <= 0).any():
        raise NumericError("non-finite value produced by op 'log' (non-positive input)")
    return _make("log", np.log(x.value), (x,), lambda g: (g / x.value,))


def square(x) -> Node:
    x = _as_node(x)
    return _make("square", x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sum(x, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    x = _as_node(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make("sum", np.sum(x.value, axis=axis), (x,), backward)


def mean(x, axis: int | None = None) -> Node:
    x = _as_node(x)
    n = x.value.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _make("mean", np.mean(x.value, axis=axis), (x,), backward)


def clip(x, lo, hi) -> Node:
    """Clamp with identity gradient strictly inside (lo, hi), zero at or beyond the bounds."""
    x = _as_node(x)
    inside = (x.value > lo) & (x.value < hi)
    return _make("clip", np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def detach(x) -> Node:
    x = _as_node(x)
    return Node(x.value, op="detach")


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = tuple(_as_node(n) for n in nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", value, nodes, backward)


def take_cols(x, start: int, stop: int) -> Node:
    """Columns ``start:stop`` of the last axis."""
    x = _as_node(x)

    def backward(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _make("take_cols", x.value[..., start:stop], (x,), backward)


def where(mask, a, b) -> Node:
    """Elementwise select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _as_node(a), _as_node(b)
    value = _binary("where", lambda av, bv: np.where(mask, av, bv), a, b)

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make("where", value, (a, b), backward)


def minimum(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return where(a.value <= b.value, a, b)


def maximum(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return where(a.value >= b.value, a, b)


def forward(expression: Callable[..., Node], *inputs) -> np.ndarray:
    """Evaluate ``expression`` on constant inputs and return the raw array."""
    return expression(*(const(x) for x in inputs)).value


def _toposort(root: Node) -> list[Node]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every node reachable from the scalar ``root``."""
    if root.value.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.inputs, node._backward(node.grad)):
            if not parent.requires_grad:
                continue
            # never accumulate in place: g may alias a child's gradient
            parent.grad = g if parent.grad is None else parent.grad + g


class ParamStore:
    """Ordered name -> float64 array map with fixed shapes.

    Entries are views into one contiguous buffer, so optimizers update a store with a
    few whole-vector operations. Writes through ``store[name] = value`` copy into the view.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None, step_count: int = 0):
        self._entries: OrderedDict[str, np.ndarray] = OrderedDict()
        self._flat = np.zeros(0)
        self.step_count = int(step_count)
        if entries:
            self._layout([(k, np.asarray(v, dtype=np.float64)) for k, v in entries.items()])

    def _layout(self, items: list[tuple[str, np.ndarray]]) -> None:
        names = [k for k, _ in items]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate parameter name in {names}")
        self._flat = np.concatenate([v.ravel() for _, v in items]) if items else np.zeros(0)
        self._entries = OrderedDict()
        offset = 0
        for name, value in items:
            self._entries[name] = self._flat[offset:offset + value.size].reshape(value.shape)
            offset += value.size

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name '{name}'")
        self._layout([*self._entries.items(), (name, np.array(value, dtype=np.float64))])

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name not in self._entries:
            raise ContractError(f"unknown parameter '{name}'")
        if value.shape != self._entries[name].shape:
            raise DimensionError(f"parameter '{name}' has shape {self._entries[name].shape}, got {value.shape}")
        self._entries[name][...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._entries.items()}

    def num_params(self) -> int:
        return int(np.sum([v.size for v in self._entries.values()], dtype=np.int64))

    def copy(self) -> ParamStore:
        return ParamStore(self._entries, self.step_count)

    def nodes(self, trainable: bool = True) -> dict[str, Node]:
        make = param if trainable else const
        return {k: make(v, name=k) if trainable else make(v) for k, v in self._entries.items()}

    def flat(self) -> np.ndarray:
        return self._flat.copy()

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != self._flat.shape:
            raise DimensionError(f"flat vector has {vector.size} entries, store holds {self._flat.size}")
        self._flat[...] = vector

    def flat_grad(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """Gradients in buffer order as one vector."""
        missing = [k for k in self._entries if k not in grads]
        if missing:
            raise ContractError(f"missing gradients for {missing}")
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([np.ravel(grads[k]) for k in self._entries])

    def equals(self, other: ParamStore) -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self._entries)

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {
            "names": self.names(),
            "shapes": [list(v.shape) for v in self._entries.values()],
            "step_count": self.step_count,
        }
        if meta:
            header["meta"] = meta
        head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self._entries.values())
        return struct.pack("<Q", len(head)) + head + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple[ParamStore, dict]:
        (n,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8:8 + n].decode())
        offset = 8 + n
        store = cls(step_count=header["step_count"])
        for name, shape in zip(header["names"], header["shapes"]):
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            store.add(name, arr.astype(np.float64))
            offset += 8 * count
        if offset != len(data):
            raise ContractError("checkpoint payload length does not match header")
        return store, header.get("meta", {})

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def load(cls, path: str | Path) -> tuple[ParamStore, dict]:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def value_and_grad(loss_fn: Callable[[dict[str, Node]], Node], params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on trainable copies of ``params`` and return (loss, grads)."""
    nodes = params.nodes()
    root = loss_fn(nodes)
    backward(root)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}
    return float(root.value), grads


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    params._flat -= lr * params.flat_grad(grads)
    params.step_count += 1
    return params


class Adam:
    """Adam moment state for one ParamStore."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(params._flat)
        self.v = np.zeros_like(params._flat)
        self.t = 0

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> ParamStore:
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        g = params.flat_grad(grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        denom = np.sqrt(self.v / c2)
        denom += self.eps
        params._flat -= (lr / c1) * self.m / denom
        params.step_count += 1
        return params


def soft_update(target: ParamStore, online: ParamStore, tau: float) -> ParamStore:
    """target <- (1 - tau) * target + tau * online."""
    if target.names() != online.names():
        raise ContractError("soft_update: target and online stores have different keys")
    if target.shapes() != online.shapes():
        raise ContractError("soft_update: target and online stores have different shapes")
    if tau == 1.0:
        target._flat[...] = online._flat
    elif tau != 0.0:
        target._flat *= 1.0 - tau
        target._flat += tau * online._flat
    return target
