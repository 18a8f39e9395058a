"""Reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Graph` is a static op sequence built once per input shape.
:func:`forward` evaluates it against named bindings and returns a :class:`Tape`;
:func:`backward` walks the tape in reverse and produces gradients for every
trainable binding and every tapped node.

Values are computed in float64 by default regardless of the storage dtype of the
bound tensors; gradients for bindings are cast back to float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

OP_KINDS = (
    "input",
    "const",
    "matmul",
    "add",
    "mul",
    "scale",
    "concat",
    "slice",
    "mean",
    "layernorm",
    "gelu",
    "gather",
    "softmax",
    "transpose",
    "reshape",
    "softmax_cross_entropy",
)

_GELU_C = math.sqrt(2.0 / math.pi)


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, index: int, kind: str, shapes: list[tuple[int, ...]], detail: str = ""):
        self.index, self.kind, self.shapes = index, kind, shapes
        super().__init__(f"shape mismatch at op {index} ({kind}): input shapes {shapes} {detail}".rstrip())


class NonFiniteValue(AutodiffError):
    def __init__(self, index: int, kind: str):
        self.index, self.kind = index, kind
        super().__init__(f"non-finite value produced by op {index} ({kind})")


class TapNotPopulated(AutodiffError):
    pass


class Tensor:
    """Dense array with a trainable flag.

    Stored as float32 unless float64 data is passed explicitly (finite-difference
    oracles perturb in float64).
    """

    __slots__ = ("data", "trainable")

    def __init__(self, data, trainable: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


class TapHandle:
    """Observation point on a graph node: activation after forward, gradient after backward."""

    def __init__(self, node: int):
        self.node = node
        self._activation: np.ndarray | None = None
        self._gradient: np.ndarray | None = None

    @property
    def activation(self) -> np.ndarray:
        if self._activation is None:
            raise TapNotPopulated(f"tap on node {self.node} not yet populated (run forward first)")
        return self._activation

    @property
    def gradient(self) -> np.ndarray:
        if self._gradient is None:
            raise TapNotPopulated(f"tap on node {self.node} has no gradient (run backward first)")
        return self._gradient


class Graph:
    """Builder for a static op sequence. Each method appends one node and returns its id."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_names: dict[str, int] = {}
        self.taps: dict[int, TapHandle] = {}

    def _add(self, kind: str, inputs: tuple[int, ...], **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise AutodiffError(f"unknown node id {i}")
        self.nodes.append(Node(kind, tuple(inputs), attrs))
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        if name in self.input_names:
            return self.input_names[name]
        nid = self._add("input", (), name=name)
        self.input_names[name] = nid
        return nid

    def const(self, value) -> int:
        return self._add("const", (), value=np.asarray(value, dtype=np.float64))

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._add("scale", (a,), c=float(c))

    def concat(self, parts: list[int], axis: int = 0) -> int:
        return self._add("concat", tuple(parts), axis=axis)

    def slice(self, a: int, key) -> int:
        return self._add("slice", (a,), key=key)

    def mean(self, a: int, axis=None, keepdims: bool = False) -> int:
        return self._add("mean", (a,), axis=axis, keepdims=keepdims)

    def layernorm(self, x: int, gamma: int, beta: int, eps: float = 1e-5) -> int:
        return self._add("layernorm", (x, gamma, beta), eps=eps)

    def gelu(self, a: int) -> int:
        return self._add("gelu", (a,))

    def gather(self, table: int, indices) -> int:
        return self._add("gather", (table,), indices=np.asarray(indices, dtype=np.int64))

    def softmax(self, a: int) -> int:
        return self._add("softmax", (a,))

    def transpose(self, a: int, axes: tuple[int, ...]) -> int:
        return self._add("transpose", (a,), axes=tuple(axes))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        return self._add("reshape", (a,), shape=tuple(shape))

    def softmax_cross_entropy(self, logits: int, targets, weights=None) -> int:
        """Scalar ``sum_j w_j * -log softmax(logits_j)[targets_j]`` over rows of a 2-D logit matrix."""
        targets = np.asarray(targets, dtype=np.int64)
        if weights is None:
            weights = np.full(targets.shape, 1.0 / max(len(targets), 1))
        return self._add("softmax_cross_entropy", (logits,), targets=targets,
                         weights=np.asarray(weights, dtype=np.float64))


def register_tap(graph: Graph, node: int) -> TapHandle:
    if not 0 <= node < len(graph.nodes):
        raise AutodiffError(f"unknown node id {node}")
    if node not in graph.taps:
        graph.taps[node] = TapHandle(node)
    return graph.taps[node]


@dataclass
class Tape:
    graph: Graph
    values: list[np.ndarray | None]
    saved: dict[int, tuple]
    bindings: dict[str, Tensor]
    output: int
    intervened: bool = False
    consumed: bool = False


# -- forward rules ------------------------------------------------------------

def _gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_vjp(g, saved):
    x, t = saved
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _eval(node: Node, args: list[np.ndarray]):
    """Return (value, saved) for one node."""
    k, a = node.kind, node.attrs
    if k == "matmul":
        x, w = args
        if w.ndim == 2 and x.ndim > 2:
            return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],)), (x, w)
        return np.matmul(x, w), (x, w)
    if k == "add":
        x, y = args
        return x + y, (x.shape, y.shape)
    if k == "mul":
        x, y = args
        return x * y, (x, y)
    if k == "scale":
        return args[0] * a["c"], None
    if k == "concat":
        sizes = [p.shape[a["axis"]] for p in args]
        return np.concatenate(args, axis=a["axis"]), sizes
    if k == "slice":
        return args[0][a["key"]], args[0].shape
    if k == "mean":
        x = args[0]
        return np.mean(x, axis=a["axis"], keepdims=a["keepdims"]), x.shape
    if k == "layernorm":
        x, gamma, beta = args
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + a["eps"])
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv, gamma)
    if k == "gelu":
        return _gelu_fwd(args[0])
    if k == "gather":
        table = args[0]
        idx = a["indices"]
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise IndexError(f"gather index out of range for table of {table.shape[0]} rows")
        return table[idx], table.shape
    if k == "softmax":
        p = _softmax(args[0])
        return p, p
    if k == "transpose":
        return np.transpose(args[0], a["axes"]), None
    if k == "reshape":
        return args[0].reshape(a["shape"]), args[0].shape
    if k == "softmax_cross_entropy":
        logits = args[0]
        t, w = a["targets"], a["weights"]
        if logits.ndim != 2 or logits.shape[0] != t.shape[0]:
            raise ValueError("logits must be (rows, classes) with one target per row")
        if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
            raise IndexError("target class out of range")
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        nll = lse - z[np.arange(len(t)), t]
        return np.asarray(np.dot(w, nll)), logits
    raise AutodiffError(f"unknown op kind {k!r}")


def _vjp(node: Node, g: np.ndarray, saved, in_shapes) -> list[np.ndarray | None]:
    k, a = node.kind, node.attrs
    if k == "matmul":
        x, w = saved
        if w.ndim == 2 and x.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ w.T).reshape(x.shape)
            return [gx, x.reshape(-1, x.shape[-1]).T @ g2]
        if x.ndim == 1 and w.ndim == 1:
            return [g * w, g * x]
        x2 = x[None, :] if x.ndim == 1 else x
        w2 = w[:, None] if w.ndim == 1 else w
        g2 = g
        if x.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if w.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        gx = np.matmul(g2, np.swapaxes(w2, -1, -2))
        gw = np.matmul(np.swapaxes(x2, -1, -2), g2)
        if x.ndim == 1:
            gx = gx[..., 0, :]
        if w.ndim == 1:
            gw = gw[..., 0]
        return [_unbroadcast(gx, x.shape), _unbroadcast(gw, w.shape)]
    if k == "add":
        sx, sy = saved
        return [_unbroadcast(g, sx), _unbroadcast(g, sy)]
    if k == "mul":
        x, y = saved
        return [_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)]
    if k == "scale":
        return [g * a["c"]]
    if k == "concat":
        splits = np.cumsum(saved)[:-1]
        return list(np.split(g, splits, axis=a["axis"]))
    if k == "slice":
        out = np.zeros(saved, dtype=g.dtype)
        out[a["key"]] = g
        return [out]
    if k == "mean":
        shape = saved
        axis = a["axis"]
        if axis is None:
            count = int(np.prod(shape))
            return [np.broadcast_to(g, shape) / count]
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        count = int(np.prod([shape[ax] for ax in axes]))
        if not a["keepdims"]:
            g = np.expand_dims(g, axes)
        return [np.broadcast_to(g, shape) / count]
    if k == "layernorm":
        xhat, inv, gamma = saved
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return [gx, _unbroadcast(g * xhat, in_shapes[1]), _unbroadcast(g, in_shapes[2])]
    if k == "gelu":
        return [_gelu_vjp(g, saved)]
    if k == "gather":
        out = np.zeros(saved, dtype=g.dtype)
        np.add.at(out, a["indices"], g)
        return [out]
    if k == "softmax":
        p = saved
        return [p * (g - (g * p).sum(axis=-1, keepdims=True))]
    if k == "transpose":
        return [np.transpose(g, np.argsort(a["axes"]))]
    if k == "reshape":
        return [g.reshape(saved)]
    if k == "softmax_cross_entropy":
        logits = saved
        t, w = a["targets"], a["weights"]
        p = _softmax(logits)
        p[np.arange(len(t)), t] -= 1.0
        return [p * (w[:, None] * g).astype(p.dtype, copy=False)]
    raise AutodiffError(f"no vector-Jacobian rule for {k!r}")


def forward(graph: Graph, bindings: dict[str, Tensor], output: int | None = None,
            interventions: dict[int, Callable[[np.ndarray], np.ndarray]] | None = None,
            dtype=np.float64) -> tuple[Tensor, Tape]:
    """Evaluate ``graph`` and return (value of ``output``, tape).

    ``output`` defaults to the last node. ``interventions`` replace a node's value
    (forward-only; a tape with interventions cannot be differentiated). ``dtype``
    is the compute precision; float32 trades gradient-check accuracy for speed.
    """
    if not graph.nodes:
        raise AutodiffError("empty graph")
    output = len(graph.nodes) - 1 if output is None else output
    interventions = interventions or {}
    values: list[np.ndarray | None] = [None] * len(graph.nodes)
    saved: dict[int, tuple] = {}
    for i, node in enumerate(graph.nodes):
        if node.kind == "input":
            name = node.attrs["name"]
            if name not in bindings:
                raise AutodiffError(f"unbound input {name!r}")
            val = bindings[name].data.astype(dtype)
        elif node.kind == "const":
            val = node.attrs["value"].astype(dtype, copy=False)
        else:
            args = [values[j] for j in node.inputs]
            try:
                with np.errstate(over="ignore", invalid="ignore"):  # reported below as NonFiniteValue
                    val, s = _eval(node, args)
            except ValueError as exc:
                raise ShapeMismatch(i, node.kind, [x.shape for x in args], str(exc)) from None
            saved[i] = s
        if i in interventions:
            val = np.asarray(interventions[i](val), dtype=dtype)
        if not np.all(np.isfinite(val)):
            raise NonFiniteValue(i, node.kind)
        values[i] = val
        if i in graph.taps:
            graph.taps[i]._activation = val
            graph.taps[i]._gradient = None
    tape = Tape(graph, values, saved, dict(bindings), output, intervened=bool(interventions))
    return Tensor(values[output]), tape


def backward(tape: Tape, loss: int | None = None) -> dict[str, Tensor]:
    """Gradients of a scalar node for every trainable binding (zeros when unreachable).

    Tapped nodes receive their gradient on the handle.
    """
    if tape.consumed:
        raise AutodiffError("tape already consumed")
    if tape.intervened:
        raise AutodiffError("tape was produced with interventions; gradients undefined")
    graph = tape.graph
    loss = tape.output if loss is None else loss
    if tape.values[loss].size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {tape.values[loss].shape}")
    tape.consumed = True
    cot: dict[int, np.ndarray] = {loss: np.ones_like(tape.values[loss])}
    input_grads: dict[str, np.ndarray] = {}
    for i in range(loss, -1, -1):
        g = cot.pop(i, None)
        node = graph.nodes[i]
        if i in graph.taps and g is not None:
            graph.taps[i]._gradient = g
        if g is None:
            continue
        if node.kind == "input":
            input_grads[node.attrs["name"]] = g
            continue
        if node.kind == "const":
            continue
        in_shapes = [tape.values[j].shape for j in node.inputs]
        grads = _vjp(node, g, tape.saved[i], in_shapes)
        for j, gj in zip(node.inputs, grads):
            if gj is None:
                continue
            if j in cot:
                cot[j] = cot[j] + gj
            else:
                cot[j] = np.array(gj)
    for nid, handle in graph.taps.items():
        if handle._gradient is None and nid <= loss:
            handle._gradient = np.zeros_like(tape.values[nid])
    out: dict[str, Tensor] = {}
    for name, t in tape.bindings.items():
        if not t.trainable:
            continue
        g = input_grads.get(name)
        if g is None:
            out[name] = Tensor(np.zeros(t.shape, dtype=np.float32))
        else:
            out[name] = Tensor(np.asarray(g, dtype=np.float64).astype(np.float32))
    tape.values = []
    tape.saved = {}
    return out


def fd_gradient(f: Callable[[Tensor], float], x: Tensor, step: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, perturbing in float64."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(x.data, dtype=np.float64)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for j in range(base.size):
        pert = base.copy().reshape(-1)
        pert[j] += step
        fp = float(f(Tensor(pert.reshape(base.shape), x.trainable)))
        pert[j] -= 2 * step
        fm = float(f(Tensor(pert.reshape(base.shape), x.trainable)))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise AutodiffError(f"non-finite function value at coordinate {j}")
        flat[j] = (fp - fm) / (2 * step)
    return Tensor(grad)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - b| / max(|b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
