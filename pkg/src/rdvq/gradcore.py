"""Reverse-mode differentiation over float64 numpy arrays.

Only the operations the tokenizer, quantizer and entropy model need are
provided. Each op returns a new :class:`Node` whose ``_backward`` closure maps
the output gradient to one gradient per parent (``None`` for parents that do
not need one).
"""

from __future__ import annotations

import itertools
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """A value in the computation graph."""

    __slots__ = ("id", "op", "parents", "value", "grad", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Node"] = (), op: str = "const", backward=None):
        self.id = next(_ids)
        self.op = op
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self._backward = backward if self.requires_grad else None
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Node):
    """A named leaf. Frozen parameters (``learnable=False``) never receive gradients."""

    __slots__ = ("name", "learnable")

    def __init__(self, value, name: str, learnable: bool = True):
        self.name = name
        self.learnable = learnable
        super().__init__(value, op="param")
        self.requires_grad = learnable
        self.grad = np.zeros_like(self.value)

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.value.shape:
            raise DimensionError(f"{self.name}: cannot assign {value.shape} to {self.value.shape}")
        self.value = value

    def freeze(self) -> None:
        self.learnable = False
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.learnable = True
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, learnable={self.learnable})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b), "add",
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b), "sub",
                lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), "mul",
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Node:
    a = as_node(a)
    return Node(a.value * c, (a,), "scale", lambda g: (g * c,))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Node:
    a = as_node(a)
    inv = np.argsort(axes)
    return Node(a.value.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def getitem(a, index) -> Node:
    a = as_node(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), "getitem", backward)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, "concat",
                lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / count)


def stop_gradient(a) -> Node:
    return Node(as_node(a).value)


def straight_through(y, y_q) -> Node:
    """Forward value of ``y_q``; gradient passed unchanged to ``y``."""
    y, y_q = as_node(y), as_node(y_q)
    if y.shape != y_q.shape:
        raise DimensionError(f"straight_through: {y.shape} vs {y_q.shape}")
    return Node(y_q.value.copy(), (y,), "straight_through", lambda g: (g,))


def clamp_min(a, lo: float = 0.0) -> Node:
    a = as_node(a)
    keep = a.value > lo
    return Node(np.where(keep, a.value, lo), (a,), "clamp_min", lambda g: (g * keep,))


def silu(a) -> Node:
    a = as_node(a)
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    return Node(x * sig, (a,), "silu", lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def gelu(a) -> Node:
    # tanh approximation
    a = as_node(a)
    x = a.value
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = c * (1.0 + 3 * 0.044715 * x**2)
    return Node(0.5 * x * (1.0 + t), (a,),
                "gelu", lambda g: (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(av @ bv, (a, b), "matmul", backward)


def _same_pad(k: int) -> int:
    return k // 2


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, ho, wo, c, k, k))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(0, 2, 3, 1)
    return cols.reshape(b * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, padded_shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = padded_shape[:2]
    cols = cols.reshape(b, ho, wo, c, k, k)
    xp = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride: int = 1, transpose: bool = False) -> Node:
    """2-D convolution with "same" padding (``k // 2``), NCHW layout.

    ``w`` is ``[Cout, Cin, k, k]`` in both modes. With ``transpose=True`` the
    op is the adjoint of a stride-``stride`` convolution, so spatial dims grow
    by ``stride``.
    """
    x, w = as_node(x), as_node(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: x {x.shape}, w {w.shape}")
    cout, cin, k, _ = w.shape
    bsz, c, h, wd = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cin}")
    s, p = stride, _same_pad(k)
    xv, wv = x.value, w.value
    if not transpose:
        if h % s or wd % s:
            raise DimensionError(f"conv2d: spatial dims {(h, wd)} not divisible by stride {s}")
        ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
        cols = _im2col(_pad(xv, p), k, s, ho, wo)
        wm = wv.reshape(cout, -1)
        out = (cols @ wm.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

        def backward(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gw = (gm.T @ cols).reshape(wv.shape)
            gx = _col2im(gm @ wm, (bsz, cin, h + 2 * p, wd + 2 * p), k, s, ho, wo)
            gx = gx[:, :, p:p + h, p:p + wd]
            return gx, gw
    else:
        ho, wo = h * s, wd * s
        wa = wv.transpose(1, 0, 2, 3).reshape(cin, -1)  # adjoint conv weight, [Cin, Cout*k*k]
        xm = xv.transpose(0, 2, 3, 1).reshape(-1, cin)
        full = _col2im(xm @ wa, (bsz, cout, ho + 2 * p, wo + 2 * p), k, s, h, wd)
        out = full[:, :, p:p + ho, p:p + wo]

        def backward(g):
            gcols = _im2col(_pad(g, p), k, s, h, wd)
            gx = (gcols @ wa.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2)
            gwa = (xm.T @ gcols).reshape(cin, cout, k, k)
            return gx, gwa.transpose(1, 0, 2, 3)

    node = Node(out, (x, w), "conv2d_t" if transpose else "conv2d", backward)
    if b is not None:
        node = add(node, reshape(b, (1, cout, 1, 1)))
    return node


def upsample_nearest(x, factor: int) -> Node:
    x = as_node(x)
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, factor, axis=2), factor, axis=3)
    return Node(out, (x,), "upsample",
                lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# normalization and probability ops
# ---------------------------------------------------------------------------


def _norm_backward(g_hat, xhat, inv_std, axis):
    n = np.prod([xhat.shape[a] for a in np.atleast_1d(axis)])
    return inv_std / n * (n * g_hat - g_hat.sum(axis=axis, keepdims=True)
                          - xhat * (g_hat * xhat).sum(axis=axis, keepdims=True))


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std
    gv = gamma.value

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        return (_norm_backward(g * gv, xhat, inv_std, -1),
                (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return Node(xhat * gv + beta.value, (x, gamma, beta), "layernorm", backward)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    b, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.value.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
    xhat = ((xg - mu) * inv_std).reshape(b, c, h, w)
    gv = gamma.value.reshape(1, c, 1, 1)

    def backward(g):
        gx = _norm_backward((g * gv).reshape(b, groups, -1), xhat.reshape(b, groups, -1), inv_std, -1)
        return gx.reshape(b, c, h, w), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Node(xhat * gv + beta.value.reshape(1, c, 1, 1), (x, gamma, beta), "group_norm", backward)


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    p = _softmax(x.value, axis)
    return Node(p, (x,), "softmax",
                lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Node:
    x = as_node(x)
    xv = x.value
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return Node(out, (x,), "log_softmax",
                lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def masked_attention(q, k, v, mask: np.ndarray, fallback: int = 0) -> Node:
    """Scaled dot-product attention restricted by a boolean mask.

    ``mask[i, j]`` true means position ``i`` may attend to ``j``. A row with
    no allowed entries attends to position ``fallback`` instead.
    """
    q, k, v = as_node(q), as_node(k), as_node(v)
    if q.ndim != 4 or q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"masked_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    length, d = q.shape[-2], q.shape[-1]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length, length):
        raise DimensionError(f"masked_attention: mask {mask.shape} for sequence length {length}")
    allowed = effective_mask(mask, fallback)
    c = 1.0 / np.sqrt(d)
    qv, kv, vv = q.value, k.value, v.value
    scores = np.where(allowed, (qv @ np.swapaxes(kv, -1, -2)) * c, -np.inf)
    p = _softmax(scores, -1)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vv, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        return gs @ kv, np.swapaxes(gs, -1, -2) @ qv, gv

    return Node(p @ vv, (q, k, v), "masked_attention", backward)


def effective_mask(mask: np.ndarray, fallback: int = 0) -> np.ndarray:
    allowed = np.array(mask, dtype=bool, copy=True)
    empty = ~allowed.any(axis=-1)
    allowed[empty, fallback] = True
    return allowed


def gather(table, indices, axis: int = 0) -> Node:
    """``np.take`` along ``axis``; used for codebook and embedding lookups."""
    table = as_node(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return Node(np.take(table.value, idx, axis=axis), (table,), "gather", backward)


def take_along_last(x, indices) -> Node:
    """Select ``x[..., indices[...]]`` along the last axis."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.int64)[..., None]
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return Node(np.take_along_axis(x.value, idx, axis=-1)[..., 0], (x,), "take", backward)


def mse(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size
    return Node(np.mean(diff**2), (a, b), "mse",
                lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def cross_entropy(p, log_q) -> Node:
    """Mean over rows of ``-sum_k p * log_q`` (last axis is the category axis)."""
    p, log_q = as_node(p), as_node(log_q)
    if p.shape != log_q.shape:
        raise DimensionError(f"cross_entropy: {p.shape} vs {log_q.shape}")
    rows = p.value.size // p.shape[-1]
    pv, lv = p.value, log_q.value
    return Node(-(pv * lv).sum() / rows, (p, log_q), "cross_entropy",
                lambda g: (-g * lv / rows, -g * pv / rows))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_dfs(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if p.requires_grad and p.id not in seen)
    order.reverse()
    return order


def _topo_kahn(root: Node) -> list[Node]:
    indegree: dict[int, int] = {}
    nodes = {root.id: root}
    todo = [root]
    while todo:
        node = todo.pop()
        for p in node.parents:
            if not p.requires_grad:
                continue
            indegree[p.id] = indegree.get(p.id, 0) + 1
            if p.id not in nodes:
                nodes[p.id] = p
                todo.append(p)
    order = []
    ready = deque([root])
    while ready:
        node = ready.popleft()
        order.append(node)
        for p in node.parents:
            if not p.requires_grad:
                continue
            indegree[p.id] -= 1
            if indegree[p.id] == 0:
                ready.append(p)
    return order


def backward(root: Node, params: Iterable[Parameter] = (), method: str = "dfs") -> dict[str, np.ndarray]:
    """Accumulate gradients of scalar ``root`` into every reachable node.

    Returns a map from parameter name to gradient for all learnable
    parameters reached, plus zeros for any extra ``params`` not reached.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    for p in params:
        p.grad = np.zeros_like(p.value)
    if not root.requires_grad:
        return {p.name: p.grad for p in params}
    order = _topo_dfs(root) if method == "dfs" else _topo_kahn(root)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    result: dict[str, np.ndarray] = {}
    for node in order:
        g = grads.pop(node.id, None)
        if g is None:
            g = np.zeros_like(node.value)
        node.grad = g
        if isinstance(node, Parameter):
            result[node.name] = g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    for p in params:
        result.setdefault(p.name, p.grad)
    return result


def find_parameters(root: Node) -> list[Parameter]:
    found, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        if isinstance(node, Parameter):
            found.append(node)
        stack.extend(node.parents)
    return sorted(found, key=lambda p: p.name)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    analytic_norms: dict[str, float]
    tolerance: float
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def numeric_gradient(f: Callable[[], float], param: Parameter, h: float = 1e-5,
                     entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the chosen flat entries of ``param``."""
    base = param.value.copy()
    flat = base.reshape(-1)
    entries = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(entries))
    for n, i in enumerate(entries):
        bumped = flat.copy()
        bumped[i] += h
        param.value = bumped.reshape(base.shape)
        fp = f()
        bumped[i] -= 2 * h
        param.value = bumped.reshape(base.shape)
        fm = f()
        out[n] = (fp - fm) / (2 * h)
    param.value = base
    return out


def grad_check(builder: Callable[[], Node], tolerance: float = 1e-6,
               params: Sequence[Parameter] | None = None, h: float = 1e-5,
               floor: float = 1e-6, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``builder`` rebuilds the scalar graph from the current parameter values
    each time it is called. The error for one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the report
    keeps the maximum per parameter.
    """
    root = builder()
    params = list(params) if params is not None else [p for p in find_parameters(root) if p.learnable]
    grads = backward(root, params)
    rng = np.random.default_rng(seed)
    f = lambda: builder().item()  # noqa: E731
    errors, norms, counts = {}, {}, {}
    for p in params:
        analytic = grads[p.name].reshape(-1)
        entries = np.arange(analytic.size)
        if max_entries is not None and analytic.size > max_entries:
            entries = np.sort(rng.choice(analytic.size, max_entries, replace=False))
        numeric = numeric_gradient(f, p, h, entries)
        a = analytic[entries]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[p.name] = float(np.max(np.abs(a - numeric) / denom)) if len(entries) else 0.0
        norms[p.name] = float(np.linalg.norm(grads[p.name]))
        counts[p.name] = len(entries)
    return GradCheckReport(errors, norms, tolerance, counts)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RDVQCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params) -> None:
    """Write named arrays (or Parameters) in the flat little-endian checkpoint format."""
    items = params.items() if isinstance(params, dict) else ((p.name, p) for p in params)
    items = [(name, np.asarray(v.value if isinstance(v, Node) else v, dtype="<f8")) for name, v in items]
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(items))


def checkpoint_bytes(items) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not an RDVQ checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) * 8
        if pos + size > len(data):
            raise ValueError("truncated checkpoint")
        out[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(DTYPE)
        pos += size
    return out
