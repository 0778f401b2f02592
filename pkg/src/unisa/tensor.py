"""Dense float64 tensors with lazy graph construction and reverse-mode gradients.

A :class:`Graph` records operations as :class:`Node` objects. Nothing is
computed until :meth:`Graph.evaluate` is called, which is also where shape
errors surface. Values are plain ``numpy.ndarray`` objects of dtype float64.

Broadcasting is deliberately restricted: elementwise binary ops accept
operands of identical shape, or one operand of shape ``()``. Anything else
raises :class:`~unisa.errors.ShapeMismatch`.

Every tensor in this module is at most 2-D. Image-shaped inputs are carried
flat, ``(batch, C*H*W)``, and the convolution/pool ops take the image shape as
an attribute.
"""

from __future__ import annotations

from numbers import Real
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateNorm,
    NonFiniteValue,
    NonScalarRoot,
    ShapeMismatch,
    UnboundLeaf,
    UnknownParameter,
)

NORM_EPS = 1e-12

_LEAF_KINDS = ("param", "input", "const")


def as_tensor(value) -> np.ndarray:
    """Coerce to a finite float64 array. Raises NonFiniteValue on NaN/Inf."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("tensor contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "attrs", "name")

    def __init__(self, graph: "Graph", op: str, inputs: tuple["Node", ...] = (),
                 attrs: dict | None = None, name: str | None = None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.inputs = inputs
        self.attrs = attrs or {}
        self.name = name
        graph.nodes.append(self)

    @property
    def is_leaf(self) -> bool:
        return self.op in _LEAF_KINDS

    @property
    def value(self) -> np.ndarray:
        return self.graph.evaluate(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.id} {self.op}{label}>"

    # arithmetic sugar; python scalars become `scale` or constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Real):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, Real):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Real):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Graph:
    """A lazily evaluated computation graph.

    Leaves are trainable parameters (``param``), named inputs that may be
    re-bound between evaluations (``input``), or anonymous constants.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_values: dict[int, np.ndarray] = {}
        self._params: dict[str, Node] = {}
        self._inputs: dict[str, Node] = {}
        self._values: dict[int, np.ndarray] = {}

    # leaves
    def param(self, name: str, value=None) -> Node:
        """Create (or fetch) the trainable leaf called ``name``."""
        node = self._params.get(name)
        if node is None:
            node = Node(self, "param", name=name)
            self._params[name] = node
        if value is not None:
            self._set_leaf(node, value)
        return node

    def input(self, name: str, value=None) -> Node:
        node = self._inputs.get(name)
        if node is None:
            node = Node(self, "input", name=name)
            self._inputs[name] = node
        if value is not None:
            self._set_leaf(node, value)
        return node

    def constant(self, value) -> Node:
        node = Node(self, "const")
        self._set_leaf(node, value)
        return node

    def bind(self, name: str, value) -> None:
        node = self._params.get(name) or self._inputs.get(name)
        if node is None:
            raise UnknownParameter(name)
        self._set_leaf(node, value)

    @property
    def parameters(self) -> dict[str, Node]:
        return dict(self._params)

    def _set_leaf(self, node: Node, value) -> None:
        self._leaf_values[node.id] = as_tensor(value)
        if node.id in self._values:
            # re-binding an evaluated leaf invalidates every cached intermediate
            self._values = {}

    def wrap(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.constant(x)

    # evaluation
    def _ancestors(self, root: Node) -> list[Node]:
        seen = set()
        stack = [root]
        while stack:
            n = stack.pop()
            if n.id in seen:
                continue
            seen.add(n.id)
            stack.extend(n.inputs)
        return [self.nodes[i] for i in sorted(seen)]

    def evaluate(self, root: Node) -> np.ndarray:
        if root.graph is not self:
            raise ValueError("root belongs to a different graph")
        cached = self._values.get(root.id)
        if cached is not None:
            return cached
        values = self._values
        for node in self._ancestors(root):
            if node.id in values:
                continue
            if node.is_leaf:
                try:
                    values[node.id] = self._leaf_values[node.id]
                except KeyError:
                    raise UnboundLeaf(node.name or f"node #{node.id}") from None
                continue
            fwd = _OPS[node.op][0]
            with np.errstate(all="ignore"):
                out = fwd(*(values[i.id] for i in node.inputs), **node.attrs)
            if not np.all(np.isfinite(out)):
                raise NonFiniteValue(f"{node.op} produced NaN or Inf")
            values[node.id] = out
        return values[root.id]

    def gradient(self, root: Node, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """d(root)/d(param) for each requested parameter name.

        Parameters the root does not depend on get zero arrays.
        """
        names = list(self._params) if wrt is None else list(wrt)
        for name in names:
            if name not in self._params:
                raise UnknownParameter(name)
        out = self.evaluate(root)
        if out.size != 1:
            raise NonScalarRoot(f"root has shape {out.shape}")

        order = self._ancestors(root)
        targets = {self._params[n].id for n in names}
        needs = set()
        for node in order:
            if node.id in targets or any(i.id in needs for i in node.inputs):
                needs.add(node.id)

        values = self._values
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(out)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None or node.is_leaf:
                if g is not None:
                    grads[node.id] = g
                continue
            need = tuple(i.id in needs for i in node.inputs)
            if not any(need):
                continue
            bwd = _OPS[node.op][1]
            ins = [values[i.id] for i in node.inputs]
            in_grads = bwd(g, values[node.id], ins, need, **node.attrs)
            for inp, gi, wanted in zip(node.inputs, in_grads, need):
                if not wanted or gi is None:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi

        result = {}
        for name in names:
            node = self._params[name]
            g = grads.get(node.id)
            if g is None:
                g = np.zeros_like(self._leaf_values[node.id])
            result[name] = np.asarray(g, dtype=np.float64).reshape(self._leaf_values[node.id].shape)
        return result


def evaluate(graph: Graph, root: Node) -> np.ndarray:
    return graph.evaluate(root)


def gradient(graph: Graph, root: Node, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    return graph.gradient(root, wrt)


# ---------------------------------------------------------------------------
# op plumbing

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name: str, fwd: Callable, bwd: Callable) -> None:
    _OPS[name] = (fwd, bwd)


def _graph_of(args) -> Graph:
    for a in args:
        if isinstance(a, Node):
            return a.graph
    raise TypeError("at least one operand must be a Node")


def _apply(op: str, args: Sequence, **attrs) -> Node:
    graph = _graph_of(args)
    inputs = tuple(graph.wrap(a) for a in args)
    return Node(graph, op, inputs, attrs)


def _binary_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# elementwise binary -------------------------------------------------------

def _add_fwd(a, b):
    _binary_shapes(a, b, "add")
    return a + b


def _add_bwd(g, out, ins, need):
    a, b = ins
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def _sub_fwd(a, b):
    _binary_shapes(a, b, "subtract")
    return a - b


def _sub_bwd(g, out, ins, need):
    a, b = ins
    return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)


def _mul_fwd(a, b):
    _binary_shapes(a, b, "multiply")
    return a * b


def _mul_bwd(g, out, ins, need):
    a, b = ins
    ga = _reduce_to(g * b, a.shape) if need[0] else None
    gb = _reduce_to(g * a, b.shape) if need[1] else None
    return ga, gb


_register("add", _add_fwd, _add_bwd)
_register("sub", _sub_fwd, _sub_bwd)
_register("mul", _mul_fwd, _mul_bwd)


def add(a, b) -> Node:
    return _apply("add", (a, b))


def sub(a, b) -> Node:
    return _apply("sub", (a, b))


def mul(a, b) -> Node:
    return _apply("mul", (a, b))


# scalar scale ---------------------------------------------------------------

_register("scale", lambda x, c: x * c, lambda g, out, ins, need, c: (g * c,))


def scale(x: Node, c: float) -> Node:
    return _apply("scale", (x,), c=float(c))


# matmul / linear ----------------------------------------------------------

def _matmul_fwd(a, b, transpose_b=False):
    if transpose_b:
        if b.ndim != 2:
            raise ShapeMismatch("matmul: transpose_b needs a 2-D right operand")
        b = b.T
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or (a.ndim == 1 and b.ndim == 1):
        raise ShapeMismatch(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(g, out, ins, need, transpose_b=False):
    a, b = ins
    bt = b.T if transpose_b else b
    ga = gb = None
    if need[0]:
        ga = np.outer(g, bt) if bt.ndim == 1 else g @ bt.T
    if need[1]:
        if a.ndim == 1:
            gb = np.outer(a, g)
        elif bt.ndim == 1:
            gb = a.T @ g
        else:
            gb = a.T @ g
        if transpose_b:
            gb = gb.T
    return ga, gb


_register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b, transpose_b: bool = False) -> Node:
    return _apply("matmul", (a, b), transpose_b=transpose_b)


def _linear_fwd(x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: x{x.shape} W{w.shape} b{b.shape}")
    return x @ w + b


def _linear_bwd(g, out, ins, need):
    x, w, b = ins
    gx = g @ w.T if need[0] else None
    gw = None
    if need[1]:
        gw = np.outer(x, g) if x.ndim == 1 else x.T @ g
    gb = (g if g.ndim == 1 else g.sum(axis=0)) if need[2] else None
    return gx, gw, gb


_register("linear", _linear_fwd, _linear_bwd)


def linear(x, w, b) -> Node:
    """``x @ w + b`` with the bias broadcast over rows."""
    return _apply("linear", (x, w, b))


# elementwise unary ----------------------------------------------------------

_register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, ins, need: (g * (ins[0] > 0),))
_register("exp", np.exp, lambda g, out, ins, need: (g * out,))
_register("log", np.log, lambda g, out, ins, need: (g / ins[0],))


def relu(x: Node) -> Node:
    return _apply("relu", (x,))


def exp(x: Node) -> Node:
    return _apply("exp", (x,))


def log(x: Node) -> Node:
    return _apply("log", (x,))


def _clamp_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


def _clamp_bwd(g, out, ins, need, lo, hi):
    x = ins[0]
    return (g * ((x >= lo) & (x <= hi)),)


_register("clamp", _clamp_fwd, _clamp_bwd)


def clamp(x: Node, lo: float = -np.inf, hi: float = np.inf) -> Node:
    return _apply("clamp", (x,), lo=float(lo), hi=float(hi))


# reductions -----------------------------------------------------------------

def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def _sum_fwd(x, axis=None):
    return np.asarray(np.sum(x, axis=axis))


def _sum_bwd(g, out, ins, need, axis=None):
    return (_expand(g, ins[0].shape, axis),)


def _mean_fwd(x, axis=None):
    return np.asarray(np.mean(x, axis=axis))


def _mean_bwd(g, out, ins, need, axis=None):
    x = ins[0]
    count = x.size if axis is None else x.shape[axis]
    return (_expand(g, x.shape, axis) / count,)


_register("sum", _sum_fwd, _sum_bwd)
_register("mean", _mean_fwd, _mean_bwd)


def sum(x: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    return _apply("sum", (x,), axis=axis)


def mean(x: Node, axis: int | None = None) -> Node:
    return _apply("mean", (x,), axis=axis)


# softmax / normalisation ------------------------------------------------------

def _softmax_fwd(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_bwd(g, out, ins, need, axis=-1):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


_register("softmax", _softmax_fwd, _softmax_bwd)


def softmax(x: Node, axis: int = -1) -> Node:
    return _apply("softmax", (x,), axis=axis)


def _l2n_fwd(x, axis=-1, eps=NORM_EPS):
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise DegenerateNorm(f"slice norm <= {eps}")
    return x / n


def _l2n_bwd(g, out, ins, need, axis=-1, eps=NORM_EPS):
    x = ins[0]
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / n,)


_register("l2_normalize", _l2n_fwd, _l2n_bwd)


def l2_normalize(x: Node, axis: int = -1) -> Node:
    return _apply("l2_normalize", (x,), axis=axis)


def _norm_fwd(x, axis=None):
    return np.asarray(np.sqrt(np.sum(x * x, axis=axis)))


def _norm_bwd(g, out, ins, need, axis=None):
    x = ins[0]
    n = out if axis is None else np.expand_dims(out, axis)
    gg = g if axis is None else np.expand_dims(g, axis)
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, gg * x / safe, 0.0),)


_register("norm", _norm_fwd, _norm_bwd)


def norm(x: Node, axis: int | None = None) -> Node:
    """Euclidean norm over ``axis`` (all entries when None)."""
    return _apply("norm", (x,), axis=axis)


# pairwise distances -----------------------------------------------------------

def _pair_check(a, b, op):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def _sqdist_fwd(a, b):
    _pair_check(a, b, "sq_dist")
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=2)


def _sqdist_bwd(g, out, ins, need):
    a, b = ins
    ga = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b) if need[0] else None
    gb = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a) if need[1] else None
    return ga, gb


def _dist_fwd(a, b):
    return np.sqrt(_sqdist_fwd(a, b))


def _dist_bwd(g, out, ins, need):
    # d sqrt(s) = ds / (2 sqrt(s)); coincident points get a zero subgradient
    safe = np.where(out > 0, out, 1.0)
    gs = np.where(out > 0, g / (2.0 * safe), 0.0)
    return _sqdist_bwd(gs, None, ins, need)


_register("sq_dist", _sqdist_fwd, _sqdist_bwd)
_register("dist", _dist_fwd, _dist_bwd)


def sq_dist(a, b) -> Node:
    """Pairwise squared Euclidean distances between rows: (n,d),(m,d) -> (n,m)."""
    return _apply("sq_dist", (a, b))


def dist(a, b) -> Node:
    """Pairwise Euclidean distances between rows."""
    return _apply("dist", (a, b))


# concatenation ----------------------------------------------------------------

def _concat_fwd(*xs, axis=0):
    ranks = {x.ndim for x in xs}
    if len(ranks) != 1:
        raise ShapeMismatch("concat: mixed ranks")
    try:
        return np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None


def _concat_bwd(g, out, ins, need, axis=0):
    sizes = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


_register("concat", _concat_fwd, _concat_bwd)


def concat(xs: Sequence, axis: int = 0) -> Node:
    return _apply("concat", tuple(xs), axis=axis)


# small 2-D cross-correlation and average pooling (flat image layout) ----------

def _conv_fwd(x, w, b, image_shape):
    c, h, wd = image_shape
    if x.ndim != 2 or x.shape[1] != c * h * wd or w.ndim != 4 or w.shape[1] != c or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: x{x.shape} w{w.shape} b{b.shape} image{image_shape}")
    kh, kw = w.shape[2:]
    x4 = x.reshape(-1, c, h, wd)
    xp = np.pad(x4, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True) + b[None, :, None, None]
    return out.reshape(x.shape[0], -1)


def _conv_bwd(g, out, ins, need, image_shape):
    x, w, b = ins
    c, h, wd = image_shape
    kh, kw = w.shape[2:]
    n, o = x.shape[0], w.shape[0]
    g4 = g.reshape(n, o, h, wd)
    x4 = x.reshape(n, c, h, wd)
    xp = np.pad(x4, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    gx = gw = gb = None
    if need[1]:
        cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        gw = np.einsum("nchwij,nohw->ocij", cols, g4, optimize=True)
    if need[2]:
        gb = g4.sum(axis=(0, 2, 3))
    if need[0]:
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + h, j:j + wd] += np.einsum("nohw,oc->nchw", g4, w[:, :, i, j], optimize=True)
        gx = gxp[:, :, kh // 2:kh // 2 + h, kw // 2:kw // 2 + wd].reshape(n, -1)
    return gx, gw, gb


def _pool_fwd(x, image_shape):
    c, h, wd = image_shape
    if x.ndim != 2 or x.shape[1] != c * h * wd or h % 2 or wd % 2:
        raise ShapeMismatch(f"avg_pool2: x{x.shape} image{image_shape}")
    x4 = x.reshape(-1, c, h // 2, 2, wd // 2, 2)
    return x4.mean(axis=(3, 5)).reshape(x.shape[0], -1)


def _pool_bwd(g, out, ins, need, image_shape):
    c, h, wd = image_shape
    g4 = g.reshape(-1, c, h // 2, 1, wd // 2, 1) / 4.0
    return (np.broadcast_to(g4, (g4.shape[0], c, h // 2, 2, wd // 2, 2)).reshape(g.shape[0], -1).copy(),)


_register("conv2d", _conv_fwd, _conv_bwd)
_register("avg_pool2", _pool_fwd, _pool_bwd)


def conv2d(x, w, b, image_shape: tuple[int, int, int]) -> Node:
    """Same-padded stride-1 cross-correlation on flat ``(n, C*H*W)`` input."""
    return _apply("conv2d", (x, w, b), image_shape=tuple(image_shape))


def avg_pool2(x, image_shape: tuple[int, int, int]) -> Node:
    """2x2 average pooling on flat ``(n, C*H*W)`` input."""
    return _apply("avg_pool2", (x,), image_shape=tuple(image_shape))


# ---------------------------------------------------------------------------

def numeric(fn: Callable[..., Node], *arrays, **kwargs) -> np.ndarray:
    """Evaluate ``fn`` on plain arrays by binding them as constants in a fresh graph."""
    g = Graph()
    nodes = [g.constant(a) for a in arrays]
    return g.evaluate(fn(*nodes, **kwargs))
