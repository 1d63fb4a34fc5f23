"""Reverse-mode differentiation over small, fixed expression graphs.

A graph is recorded once with :class:`GraphBuilder` and can then be evaluated
(and differentiated) many times with different input values.  Node values are
numpy arrays and elementwise operations broadcast, so a graph over an
``N x K x S x M`` Monte-Carlo workload has a few dozen nodes rather than
millions of scalar ones.

Example
-------
>>> b = GraphBuilder()
>>> x = b.input(())
>>> y = b.input(())
>>> g = b.build(x * y)
>>> gradient(g, [3.0, 4.0]).gradient
array([4., 3.])
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Any, Sequence

import hashlib

import numpy as np

__all__ = [
    "EvaluationError",
    "ExprGraph",
    "GradResult",
    "GraphBuilder",
    "Node",
    "branch_signature",
    "check_gradient",
    "evaluate",
    "gradient",
]

OP_KINDS = frozenset(
    {
        "input", "const",
        # arithmetic
        "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "pow",
        "minimum", "maximum", "relu", "sigmoid",
        # linear algebra and reductions
        "matmul", "dot", "sum", "amin", "amax", "prod", "cholesky",
        # structural
        "reshape", "transpose", "take", "concat",
    }
)

_CHOL_JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class EvaluationError(ArithmeticError):
    """Raised when a node produces a non-finite value."""

    def __init__(self, index: int, op: str, detail: str = "non-finite value"):
        super().__init__(f"node {index} ({op}): {detail}")
        self.index = index
        self.op = op


@dataclass(frozen=True)
class GradResult:
    value: Any
    gradient: np.ndarray


@dataclass(frozen=True)
class ExprGraph:
    """Immutable recorded computation.

    ``nodes[i] = (op, operand_indices, payload)``; operands always refer to
    earlier nodes.  ``inputs`` lists ``(node_index, shape)`` for each input
    slot in the order the flat input vector is laid out.
    """

    nodes: tuple
    inputs: tuple
    output: int

    @property
    def n_inputs(self) -> int:
        return int(sum(int(np.prod(s)) for _, s in self.inputs))

    @cached_property
    def needs_grad(self) -> tuple:
        """Whether each node depends on an input."""
        return tuple(_needs_grad(self))

    def split_inputs(self, inputs) -> list[np.ndarray]:
        if isinstance(inputs, (list, tuple)) and len(inputs) == len(self.inputs) and any(
            np.ndim(v) > 0 for v in inputs
        ):
            arrs = [np.asarray(v, dtype=float) for v in inputs]
            for a, (_, shape) in zip(arrs, self.inputs):
                if a.shape != tuple(shape):
                    raise ValueError(f"input shape {a.shape} does not match slot {shape}")
            return arrs
        flat = np.asarray(inputs, dtype=float).ravel()
        if flat.size != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {flat.size}")
        out, pos = [], 0
        for _, shape in self.inputs:
            size = int(np.prod(shape))
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        return out


class Node:
    """Handle to a node while a graph is being recorded."""

    __slots__ = ("builder", "index")

    def __init__(self, builder: "GraphBuilder", index: int):
        self.builder = builder
        self.index = index

    def _wrap(self, other) -> "Node":
        return other if isinstance(other, Node) else self.builder.const(other)

    def __add__(self, other):
        return self.builder.emit("add", (self, self._wrap(other)))

    def __radd__(self, other):
        return self.builder.emit("add", (self._wrap(other), self))

    def __sub__(self, other):
        return self.builder.emit("sub", (self, self._wrap(other)))

    def __rsub__(self, other):
        return self.builder.emit("sub", (self._wrap(other), self))

    def __mul__(self, other):
        return self.builder.emit("mul", (self, self._wrap(other)))

    def __rmul__(self, other):
        return self.builder.emit("mul", (self._wrap(other), self))

    def __truediv__(self, other):
        return self.builder.emit("div", (self, self._wrap(other)))

    def __rtruediv__(self, other):
        return self.builder.emit("div", (self._wrap(other), self))

    def __neg__(self):
        return self.builder.emit("neg", (self,))

    def __pow__(self, exponent: float):
        return self.builder.emit("pow", (self,), float(exponent))

    def __matmul__(self, other):
        return self.builder.emit("matmul", (self, self._wrap(other)))

    def __rmatmul__(self, other):
        return self.builder.emit("matmul", (self._wrap(other), self))

    def sum(self, axis=None):
        return self.builder.emit("sum", (self,), _axis(axis))

    def prod(self, axis: int = -1):
        return self.builder.emit("prod", (self,), int(axis))

    def min(self, axis: int = -1):
        return self.builder.emit("amin", (self,), int(axis))

    def max(self, axis: int = -1):
        return self.builder.emit("amax", (self,), int(axis))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return self.builder.emit("reshape", (self,), tuple(int(s) for s in shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return self.builder.emit("transpose", (self,), tuple(int(a) for a in axes))

    def take(self, indices, axis: int):
        idx = np.asarray(indices, dtype=np.intp)
        return self.builder.emit("take", (self,), (idx, int(axis)))


def _axis(axis):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(int(a) for a in axis)
    return int(axis)


class GraphBuilder:
    """Records operations into an :class:`ExprGraph`."""

    def __init__(self):
        self._nodes: list[tuple] = []
        self._inputs: list[tuple] = []

    def emit(self, op: str, args: Sequence[Node], payload=None) -> Node:
        if op not in OP_KINDS:
            raise ValueError(f"unsupported operation kind {op!r}")
        for a in args:
            if a.builder is not self:
                raise ValueError("operand belongs to a different graph")
        self._nodes.append((op, tuple(a.index for a in args), payload))
        return Node(self, len(self._nodes) - 1)

    def input(self, shape=()) -> Node:
        shape = (int(shape),) if isinstance(shape, (int, np.integer)) else tuple(int(s) for s in shape)
        node = self.emit("input", (), len(self._inputs))
        self._inputs.append((node.index, shape))
        return node

    def const(self, value) -> Node:
        arr = np.array(value, dtype=float)
        arr.setflags(write=False)
        return self.emit("const", (), arr)

    # named operations, for the ones without an operator
    def exp(self, x):
        return self.emit("exp", (x,))

    def log(self, x):
        return self.emit("log", (x,))

    def sqrt(self, x):
        return self.emit("sqrt", (x,))

    def relu(self, x):
        return self.emit("relu", (x,))

    def sigmoid(self, x):
        return self.emit("sigmoid", (x,))

    def minimum(self, *xs):
        return self.emit("minimum", tuple(self._as_node(x) for x in xs))

    def maximum(self, *xs):
        return self.emit("maximum", tuple(self._as_node(x) for x in xs))

    def dot(self, a, b):
        return self.emit("dot", (self._as_node(a), self._as_node(b)))

    def matmul(self, a, b):
        return self.emit("matmul", (self._as_node(a), self._as_node(b)))

    def cholesky(self, a):
        return self.emit("cholesky", (a,))

    def concat(self, xs, axis: int):
        return self.emit("concat", tuple(self._as_node(x) for x in xs), int(axis))

    def _as_node(self, x):
        return x if isinstance(x, Node) else self.const(x)

    def build(self, output: Node) -> ExprGraph:
        return ExprGraph(tuple(self._nodes), tuple(self._inputs), output.index)


# ---------------------------------------------------------------------------
# forward rules


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _jittered_cholesky(a: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(a)
        if np.all(np.isfinite(chol)):
            return chol
    except np.linalg.LinAlgError:
        pass
    batch = a.reshape((-1,) + a.shape[-2:])
    out = np.empty_like(batch)
    n = a.shape[-1]
    for i, mat in enumerate(batch):
        scale = max(float(np.mean(np.abs(np.diag(mat)))), 1e-300)
        for jitter in _CHOL_JITTERS:
            try:
                chol = np.linalg.cholesky(mat + jitter * scale * np.eye(n))
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(chol)):
                out[i] = chol
                break
        else:
            raise np.linalg.LinAlgError("matrix not positive definite after jitter escalation")
    return out.reshape(a.shape)


def _matmul(a, b):
    return np.matmul(a, b)


def _dot(a, b):
    return np.dot(a, b)


def _fold(fn):
    def run(vals, payload):
        out = vals[0]
        for v in vals[1:]:
            out = fn(out, v)
        return out
    return run


def _take(vals, payload):
    idx, axis = payload
    return np.take(vals[0], idx, axis=axis)


_FORWARD = {
    "add": lambda v, p: v[0] + v[1],
    "sub": lambda v, p: v[0] - v[1],
    "mul": lambda v, p: v[0] * v[1],
    "div": lambda v, p: v[0] / v[1],
    "neg": lambda v, p: -v[0],
    "exp": lambda v, p: np.exp(v[0]),
    "log": lambda v, p: np.log(v[0]),
    "sqrt": lambda v, p: np.sqrt(v[0]),
    "pow": lambda v, p: np.power(v[0], p),
    "minimum": _fold(np.minimum),
    "maximum": _fold(np.maximum),
    "relu": lambda v, p: np.maximum(v[0], 0.0),
    "sigmoid": lambda v, p: _sigmoid(v[0]),
    "matmul": lambda v, p: _matmul(v[0], v[1]),
    "dot": lambda v, p: _dot(v[0], v[1]),
    "sum": lambda v, p: np.sum(v[0], axis=p),
    "amin": lambda v, p: np.min(v[0], axis=p),
    "amax": lambda v, p: np.max(v[0], axis=p),
    "prod": lambda v, p: np.prod(v[0], axis=p),
    "cholesky": lambda v, p: _jittered_cholesky(v[0]),
    "reshape": lambda v, p: np.reshape(v[0], p),
    "transpose": lambda v, p: np.transpose(v[0], p),
    "take": _take,
    "concat": lambda v, p: np.concatenate(v, axis=p),
}


def _forward(op, vals, payload):
    """Value of one node; callers hold an errstate that silences float warnings."""
    try:
        fn = _FORWARD[op]
    except KeyError:
        raise ValueError(f"unsupported operation kind {op!r}") from None
    return fn(vals, payload)


# ---------------------------------------------------------------------------
# backward rules


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _select_first(vals, out):
    """Masks routing the gradient of an n-ary min/max to the first attaining operand."""
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for v in vals:
        m = (np.broadcast_to(v, out.shape) == out) & ~taken
        taken |= m
        masks.append(m)
    return masks


def _onehot_arg(x, axis, fn):
    idx = np.expand_dims(fn(x, axis=axis), axis)
    mask = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=axis)
    return mask


def _exclusive_prod(x, axis):
    x = np.moveaxis(x, axis, -1)
    ones = np.ones(x.shape[:-1] + (1,))
    left = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
    right = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return np.moveaxis(left * right, -1, axis)


def _matmul_backward(g, a, b):
    a_vec, b_vec = a.ndim == 1, b.ndim == 1
    a2 = a[None, :] if a_vec else a
    b2 = b[:, None] if b_vec else b
    g2 = g
    if a_vec:
        g2 = np.expand_dims(g2, -2)
    if b_vec:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    ga = _unbroadcast(ga, a2.shape)
    gb = _unbroadcast(gb, b2.shape)
    if a_vec:
        ga = ga.reshape(a.shape)
    if b_vec:
        gb = gb.reshape(b.shape)
    return ga, gb


def _cholesky_backward(g, chol):
    # dA from dL for A = L L^T (symmetrised)
    lt = np.swapaxes(chol, -1, -2)
    phi = np.tril(np.matmul(lt, g))
    diag = np.einsum("...ii->...i", phi)
    diag *= 0.5
    linv = np.linalg.inv(chol)
    s = np.matmul(np.swapaxes(linv, -1, -2), np.matmul(phi, linv))
    return 0.5 * (s + np.swapaxes(s, -1, -2))


def _b_add(g, vals, out, p):
    return _unbroadcast(g, np.shape(vals[0])), _unbroadcast(g, np.shape(vals[1]))


def _b_sub(g, vals, out, p):
    return _unbroadcast(g, np.shape(vals[0])), _unbroadcast(-g, np.shape(vals[1]))


def _b_mul(g, vals, out, p):
    a, b = vals
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _b_div(g, vals, out, p):
    a, b = vals
    return _unbroadcast(g / b, np.shape(a)), _unbroadcast(-g * out / b, np.shape(b))


def _b_sqrt(g, vals, out, p):
    # zero subgradient where the root is exactly zero
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, 0.5 * g / safe, 0.0),)


def _b_pow(g, vals, out, p):
    x = vals[0]
    if p == 0.0:
        return (np.zeros_like(x),)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * np.power(x, p - 1.0)
    return (np.where(np.isfinite(d), g * d, 0.0),)


def _b_extremum(g, vals, out, p):
    masks = _select_first(vals, out)
    return tuple(_unbroadcast(np.where(m, g, 0.0), np.shape(v)) for m, v in zip(masks, vals))


def _b_dot(g, vals, out, p):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    return _matmul_backward(g, a, b)


def _b_sum(g, vals, out, p):
    x = vals[0]
    if p is not None:
        g = np.expand_dims(g, p)
    return (np.broadcast_to(g, x.shape).copy(),)


def _b_arg_extremum(fn):
    def run(g, vals, out, p):
        mask = _onehot_arg(vals[0], p, fn)
        return (np.where(mask, np.expand_dims(g, p), 0.0),)
    return run


def _b_take(g, vals, out, p):
    idx, axis = p
    x = vals[0]
    gx = np.zeros(x.shape)
    ax = axis % x.ndim
    gm = np.moveaxis(gx, ax, 0)
    np.add.at(gm, idx.ravel(), np.moveaxis(g, tuple(range(ax, ax + idx.ndim)),
                                          tuple(range(idx.ndim))).reshape((idx.size,) + gm.shape[1:]))
    return (gx,)


def _b_concat(g, vals, out, p):
    sizes = np.cumsum([np.shape(v)[p] for v in vals])[:-1]
    return tuple(np.split(g, sizes, axis=p))


_BACKWARD = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "neg": lambda g, v, o, p: (-g,),
    "exp": lambda g, v, o, p: (g * o,),
    "log": lambda g, v, o, p: (g / v[0],),
    "sqrt": _b_sqrt,
    "pow": _b_pow,
    "minimum": _b_extremum,
    "maximum": _b_extremum,
    "relu": lambda g, v, o, p: (np.where(v[0] > 0, g, 0.0),),
    "sigmoid": lambda g, v, o, p: (g * o * (1.0 - o),),
    "matmul": lambda g, v, o, p: _matmul_backward(g, v[0], v[1]),
    "dot": _b_dot,
    "sum": _b_sum,
    "amin": _b_arg_extremum(np.argmin),
    "amax": _b_arg_extremum(np.argmax),
    "prod": lambda g, v, o, p: (np.expand_dims(g, p) * _exclusive_prod(v[0], p),),
    "cholesky": lambda g, v, o, p: (_cholesky_backward(g, o),),
    "reshape": lambda g, v, o, p: (g.reshape(np.shape(v[0])),),
    "transpose": lambda g, v, o, p: (np.transpose(g, np.argsort(p)),),
    "take": _b_take,
    "concat": _b_concat,
}


def _backward(op, g, vals, out, payload):
    try:
        fn = _BACKWARD[op]
    except KeyError:
        raise ValueError(f"no backward rule for {op!r}") from None
    return fn(g, vals, out, payload)


# ---------------------------------------------------------------------------
# public operations


def _finite(v: np.ndarray) -> bool:
    # one reduction; an overflowing sum of finite entries falls back to the exact check
    t = v.sum()
    return bool(t - t == 0) or bool(np.isfinite(v).all())


def _run(graph: ExprGraph, inputs) -> list:
    slots = graph.split_inputs(inputs)
    vals: list = [None] * len(graph.nodes)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i, (op, args, payload) in enumerate(graph.nodes):
            if op == "input":
                vals[i] = slots[payload]
                continue
            if op == "const":
                vals[i] = payload
                continue
            try:
                v = _forward(op, [vals[a] for a in args], payload)
            except np.linalg.LinAlgError as exc:
                raise EvaluationError(i, op, str(exc)) from None
            v = np.asarray(v, dtype=float)
            if not _finite(v):
                raise EvaluationError(i, op)
            vals[i] = v
    return vals


def _as_value(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v


def evaluate(graph: ExprGraph, inputs):
    """Forward value of the output node."""
    return _as_value(_run(graph, inputs)[graph.output])


def gradient(graph: ExprGraph, inputs) -> GradResult:
    """Value and reverse-mode gradient.

    For a non-scalar output the gradient is that of the sum of its entries.
    The gradient is flattened and laid out like the flat input vector.
    """
    vals = _run(graph, inputs)
    nodes = graph.nodes
    needed = graph.needs_grad
    adj: list = [None] * len(nodes)
    adj[graph.output] = np.ones(np.shape(vals[graph.output]))
    for i in range(graph.output, -1, -1):
        g = adj[i]
        if g is None:
            continue
        op, args, payload = nodes[i]
        if op in ("input", "const"):
            continue
        grads = _backward(op, g, [vals[a] for a in args], vals[i], payload)
        for a, ga in zip(args, grads):
            if not needed[a]:
                continue
            adj[a] = ga if adj[a] is None else adj[a] + ga
    parts = []
    for node_index, shape in graph.inputs:
        g = adj[node_index]
        parts.append(np.zeros(int(np.prod(shape))) if g is None else np.asarray(g, dtype=float).ravel())
    grad = np.concatenate(parts) if parts else np.zeros(0)
    return GradResult(_as_value(vals[graph.output]), grad)


def _needs_grad(graph: ExprGraph) -> list:
    needed = [False] * len(graph.nodes)
    for i, (op, args, _) in enumerate(graph.nodes):
        if op == "input":
            needed[i] = True
        elif op != "const":
            needed[i] = any(needed[a] for a in args)
    return needed


def _total(v) -> float:
    return float(np.sum(v))


def check_gradient(graph: ExprGraph, inputs, step: float = 1e-6) -> float:
    """Largest discrepancy between reverse-mode and central-difference gradients.

    Each component's error is scaled by the infinity norm of the gradient, so
    components that are nearly zero do not blow up the ratio.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(graph_flat(graph, inputs), dtype=float)
    exact = gradient(graph, x).gradient
    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (_total(evaluate(graph, xp)) - _total(evaluate(graph, xm))) / (2.0 * step)
    scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(exact), initial=0.0), 1e-300)
    return float(np.max(np.abs(exact - fd), initial=0.0) / scale)


def graph_flat(graph: ExprGraph, inputs) -> np.ndarray:
    return np.concatenate([a.ravel() for a in graph.split_inputs(inputs)]) if graph.inputs else np.zeros(0)


_BRANCHING = {"minimum", "maximum", "amin", "amax", "relu"}


def branch_signature(graph: ExprGraph, inputs) -> str:
    """Digest of which branch every min/max/clamp node took.

    Two input points with equal signatures lie on the same smooth piece of
    the graph, so finite differences between them are free of kinks.
    """
    vals = _run(graph, inputs)
    h = hashlib.sha1()
    for i, (op, args, payload) in enumerate(graph.nodes):
        if op not in _BRANCHING:
            continue
        if op == "relu":
            h.update(np.packbits(vals[args[0]] > 0).tobytes())
        elif op in ("amin", "amax"):
            fn = np.argmin if op == "amin" else np.argmax
            h.update(np.ascontiguousarray(fn(vals[args[0]], axis=payload)).tobytes())
        else:
            for m in _select_first([vals[a] for a in args], vals[i]):
                h.update(np.packbits(m).tobytes())
    return h.hexdigest()
