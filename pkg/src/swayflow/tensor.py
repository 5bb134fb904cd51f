"""Dense n-d tensors with tape-based reverse-mode differentiation.

Every differentiable computation is expressed through the primitives
registered in :data:`PRIMITIVES`.  A primitive is a pair of numpy
functions: ``forward(*arrays, **attrs) -> (out, saved)`` and
``backward(saved, grad_out, needs) -> tuple of input grads``.

Operations are only recorded while a :class:`Graph` is active on the
current thread and at least one input requires a gradient::

    with Graph() as tape:
        loss = (w * x).sum()
    tape.backward(loss)

Broadcasting is limited to scalar-vs-tensor; use :func:`expand` for
anything else.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy import special

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


class UnknownOpError(KeyError):
    pass


class GraphError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# graph / tape
# --------------------------------------------------------------------------

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("prim", "inputs", "output", "saved", "graph")

    def __init__(self, prim, inputs, output, saved, graph):
        self.prim = prim
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.graph = graph


class Graph:
    """Ordered record of executed primitives on one thread.

    Nodes are appended in execution order, which is a topological order.
    A graph can be reversed exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Graph:
        if self.consumed:
            raise GraphError("graph already consumed by a backward pass")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph stack corrupted (exited out of order)")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, graph=self)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient, then consume the graph."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise GraphError("loss is detached: it was not produced under an active Graph")
    if graph is None:
        graph = node.graph
    elif node.graph is not graph:
        raise GraphError("loss was recorded on a different graph")
    if graph.consumed:
        raise GraphError("graph already consumed; run the forward pass again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.prim.backward(node.saved, g, needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise ShapeError(
                    f"{node.prim.name}: gradient shape {gi.shape} != input shape {t.data.shape}"
                )
            if t._node is None:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    graph.consumed = True
    for node in graph.nodes:
        node.saved = None
    graph.nodes.clear()


# --------------------------------------------------------------------------
# tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return apply("add", self, other)
        return apply("add_scalar", self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return apply("sub", self, other)
        return apply("add_scalar", self, value=-float(other))

    def __rsub__(self, other):
        return apply("add_scalar", apply("neg", self), value=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply("mul", self, other)
        return apply("mul_scalar", self, value=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return apply("div", self, other)
        return apply("mul_scalar", self, value=1.0 / float(other))

    def __rtruediv__(self, other):
        return apply("mul_scalar", apply("pow_scalar", self, exponent=-1.0), value=float(other))

    def __neg__(self):
        return apply("neg", self)

    def __pow__(self, exponent):
        return apply("pow_scalar", self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- method sugar -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return apply("transpose", self, axes=tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def expand(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("expand", self, shape=tuple(shape))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# primitive registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray, tuple], tuple]


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward, backward) -> Primitive:
    if name in PRIMITIVES:
        raise ValueError(f"primitive {name!r} already registered")
    prim = PRIMITIVES[name] = Primitive(name, forward, backward)
    return prim


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it on the active graph."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise UnknownOpError(f"unknown op kind {kind!r}")
    tensors = tuple(as_tensor(x) for x in inputs)
    out_data, saved = prim.forward(*(t.data for t in tensors), **attrs)
    out = Tensor._wrap(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        node = _Node(prim, tensors, out, saved, graph)
        out._node = node
        graph.nodes.append(node)
    return out


def _contig(a: np.ndarray) -> np.ndarray:
    """C-contiguous copy when needed; unlike np.ascontiguousarray keeps 0-d."""
    return a if a.flags.c_contiguous else a.copy()


def _same_or_scalar(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# elementwise binary ----------------------------------------------------------


def _add_f(a, b):
    _same_or_scalar("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_b(saved, g, needs):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_f(a, b):
    _same_or_scalar("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_b(saved, g, needs):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _mul_f(a, b):
    _same_or_scalar("mul", a, b)
    return a * b, (a, b)


def _mul_b(saved, g, needs):
    a, b = saved
    ga = _unbroadcast(g * b, a.shape) if needs[0] else None
    gb = _unbroadcast(g * a, b.shape) if needs[1] else None
    return ga, gb


def _div_f(a, b):
    _same_or_scalar("div", a, b)
    return a / b, (a, b)


def _div_b(saved, g, needs):
    a, b = saved
    ga = _unbroadcast(g / b, a.shape) if needs[0] else None
    gb = _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None
    return ga, gb


register("add", _add_f, _add_b)
register("sub", _sub_f, _sub_b)
register("mul", _mul_f, _mul_b)
register("div", _div_f, _div_b)

# scalar / unary ----------------------------------------------------------------

register("neg", lambda a: (-a, None), lambda s, g, n: (-g,))
register("add_scalar", lambda a, value: (a + a.dtype.type(value), None), lambda s, g, n: (g,))
register(
    "mul_scalar",
    lambda a, value: (a * a.dtype.type(value), value),
    lambda s, g, n: (g * g.dtype.type(s),),
)


def _pow_f(a, exponent):
    return a ** a.dtype.type(exponent), (a, exponent)


def _pow_b(saved, g, needs):
    a, p = saved
    return (g * p * a ** a.dtype.type(p - 1.0),)


register("pow_scalar", _pow_f, _pow_b)


def _exp_f(a):
    y = np.exp(a)
    return y, y


register("exp", _exp_f, lambda y, g, n: (g * y,))
register("log", lambda a: (np.log(a), a), lambda a, g, n: (g / a,))


def _sqrt_f(a):
    y = np.sqrt(a)
    return y, y


def _sqrt_b(y, g, needs):
    # subgradient 0 at the origin, as for a norm
    with np.errstate(divide="ignore", invalid="ignore"):
        gy = np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0)
    return (gy.astype(g.dtype, copy=False),)


register("sqrt", _sqrt_f, _sqrt_b)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_f(x):
    cdf = special.ndtr(x)
    return x * cdf, (x, cdf)


def _gelu_b(saved, g, needs):
    x, cdf = saved
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
    return (g * (cdf + x * pdf),)


register("gelu", _gelu_f, _gelu_b)


def _silu_f(x):
    sig = special.expit(x)
    return x * sig, (x, sig)


def _silu_b(saved, g, needs):
    x, sig = saved
    return (g * sig * (1.0 + x * (1.0 - sig)),)


register("silu", _silu_f, _silu_b)


def _tanh_f(x):
    y = np.tanh(x)
    return y, y


register("tanh", _tanh_f, lambda y, g, n: (g * (1.0 - y * y),))

# linear algebra --------------------------------------------------------------


def _matmul_f(a, b):
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform ((..., k) @ (k, m))")
    return a @ b, (a, b)


def _matmul_b(saved, g, needs):
    a, b = saved
    ga = g @ b.T if needs[0] else None
    gb = None
    if needs[1]:
        k, m = b.shape
        gb = a.reshape(-1, k).T @ g.reshape(-1, m)
    return ga, gb


def _bmm_f(a, b):
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not conform ((..., n, k) @ (..., k, m))")
    return a @ b, (a, b)


def _bmm_b(saved, g, needs):
    a, b = saved
    ga = g @ np.swapaxes(b, -1, -2) if needs[0] else None
    gb = np.swapaxes(a, -1, -2) @ g if needs[1] else None
    return ga, gb


register("matmul", _matmul_f, _matmul_b)
register("bmm", _bmm_f, _bmm_b)

# shape manipulation ---------------------------------------------------------


def _transpose_f(a, axes):
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return _contig(np.transpose(a, axes)), axes


def _transpose_b(axes, g, needs):
    return (_contig(np.transpose(g, np.argsort(axes))),)


def _reshape_f(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return out, a.shape


def _expand_f(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}") from None
    return _contig(out), a.shape


def _expand_b(src_shape, g, needs):
    lead = g.ndim - len(src_shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(src_shape) if d == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True) if axes else g
    return (out.reshape(src_shape),)


register("transpose", _transpose_f, _transpose_b)
register("reshape", _reshape_f, lambda shape, g, n: (g.reshape(shape),))
register("expand", _expand_f, _expand_b)


def _concat_f(*arrays, axis):
    first = arrays[0]
    ax = axis % first.ndim
    for arr in arrays[1:]:
        if arr.ndim != first.ndim or any(
            arr.shape[i] != first.shape[i] for i in range(first.ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {[x.shape for x in arrays]} disagree off axis {axis}"
            )
    sizes = [arr.shape[ax] for arr in arrays]
    return np.concatenate(arrays, axis=ax), (ax, sizes)


def _concat_b(saved, g, needs):
    ax, sizes = saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(_contig(p) for p in np.split(g, splits, axis=ax))


register("concat", _concat_f, _concat_b)


def _slice_f(a, key):
    for k in key if isinstance(key, tuple) else (key,):
        if not isinstance(k, (slice, int, type(Ellipsis))) and k is not None:
            raise TypeError(f"slice: only basic indexing is supported, got {type(k).__name__}")
    try:
        out = a[key]
    except IndexError as err:
        raise ShapeError(f"slice: {key!r} invalid for shape {a.shape}: {err}") from None
    return _contig(out), (a.shape, a.dtype, key)


def _slice_b(saved, g, needs):
    shape, dtype, key = saved
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g
    return (out,)


register("slice", _slice_f, _slice_b)

# reductions -------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_f(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    return np.asarray(a.sum(axis=axes, keepdims=keepdims)), (a.shape, axes, keepdims)


def _sum_b(saved, g, needs):
    shape, axes, keepdims = saved
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (_contig(np.broadcast_to(g, shape)),)


def _mean_f(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return np.asarray(a.mean(axis=axes, keepdims=keepdims)), (a.shape, axes, keepdims, count)


def _mean_b(saved, g, needs):
    shape, axes, keepdims, count = saved
    (out,) = _sum_b((shape, axes, keepdims), g, needs)
    return (out / out.dtype.type(count),)


register("sum", _sum_f, _sum_b)
register("mean", _mean_f, _mean_b)


def _softmax_f(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_b(y, g, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


register("softmax", _softmax_f, _softmax_b)

# normalisation / lookup -----------------------------------------------------------


def _layer_norm_f(x, *affine, eps):
    d = x.shape[-1]
    if affine:
        if len(affine) != 2:
            raise ShapeError("layer_norm: affine needs both weight and bias")
        w, b = affine
        if w.shape != (d,) or b.shape != (d,):
            raise ShapeError(f"layer_norm: affine shapes {w.shape}, {b.shape} != ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * affine[0] + affine[1] if affine else xhat
    return out, (xhat, rstd, affine[0] if affine else None)


def _layer_norm_b(saved, g, needs):
    xhat, rstd, w = saved
    gx_hat = g * w if w is not None else g
    d = xhat.shape[-1]
    gx = rstd / d * (
        d * gx_hat
        - gx_hat.sum(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
    )
    if w is None:
        return (gx,)
    lead = tuple(range(g.ndim - 1))
    return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


register("layer_norm", _layer_norm_f, _layer_norm_b)


def _embedding_f(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    return table[ids], (table.shape, ids)


def _embedding_b(saved, g, needs):
    shape, ids = saved
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
    return (out,)


register("embedding", _embedding_f, _embedding_b)

# convolutions (channel-last, stride 1, zero "same" padding) ------------------------


def _pad_time(x, pad):
    widths = [(0, 0)] * x.ndim
    widths[-2] = (pad, pad)
    return np.pad(x, widths)


def _dwconv_f(x, w, *bias):
    if x.ndim < 2 or w.ndim != 2 or w.shape[0] != x.shape[-1] or w.shape[1] % 2 != 1:
        raise ShapeError(
            f"conv1d_depthwise: input {x.shape} and kernel {w.shape} do not conform "
            "((..., L, C) with (C, K), K odd)"
        )
    if bias and bias[0].shape != (x.shape[-1],):
        raise ShapeError(f"conv1d_depthwise: bias {bias[0].shape} != ({x.shape[-1]},)")
    length = x.shape[-2]
    k = w.shape[1]
    xp = _pad_time(x, k // 2)
    out = np.zeros_like(x)
    for j in range(k):
        out += xp[..., j : j + length, :] * w[:, j]
    if bias:
        out += bias[0]
    return out, (xp, w, length, bool(bias))


def _dwconv_b(saved, g, needs):
    xp, w, length, has_bias = saved
    k = w.shape[1]
    pad = k // 2
    gxp = np.zeros_like(xp) if needs[0] else None
    gw = np.zeros_like(w) if needs[1] else None
    lead = tuple(range(g.ndim - 1))
    for j in range(k):
        if gxp is not None:
            gxp[..., j : j + length, :] += g * w[:, j]
        if gw is not None:
            gw[:, j] = (xp[..., j : j + length, :] * g).sum(axis=lead)
    gx = _contig(gxp[..., pad : pad + length, :]) if gxp is not None else None
    out = (gx, gw)
    if has_bias:
        out += (g.sum(axis=lead),)
    return out


register("conv1d_depthwise", _dwconv_f, _dwconv_b)


def _conv_f(x, w, *bias):
    if x.ndim < 2 or w.ndim != 3 or w.shape[1] != x.shape[-1] or w.shape[0] % 2 != 1:
        raise ShapeError(
            f"conv1d: input {x.shape} and kernel {w.shape} do not conform "
            "((..., L, Cin) with (K, Cin, Cout), K odd)"
        )
    if bias and bias[0].shape != (w.shape[2],):
        raise ShapeError(f"conv1d: bias {bias[0].shape} != ({w.shape[2]},)")
    length = x.shape[-2]
    k = w.shape[0]
    xp = _pad_time(x, k // 2)
    out = np.zeros(x.shape[:-1] + (w.shape[2],), dtype=x.dtype)
    for j in range(k):
        out += xp[..., j : j + length, :] @ w[j]
    if bias:
        out += bias[0]
    return out, (xp, w, length, bool(bias))


def _conv_b(saved, g, needs):
    xp, w, length, has_bias = saved
    k, cin, cout = w.shape
    pad = k // 2
    gxp = np.zeros_like(xp) if needs[0] else None
    gw = np.zeros_like(w) if needs[1] else None
    g2 = g.reshape(-1, cout)
    for j in range(k):
        if gxp is not None:
            gxp[..., j : j + length, :] += g @ w[j].T
        if gw is not None:
            gw[j] = xp[..., j : j + length, :].reshape(-1, cin).T @ g2
    gx = _contig(gxp[..., pad : pad + length, :]) if gxp is not None else None
    out = (gx, gw)
    if has_bias:
        out += (g2.sum(axis=0),)
    return out


register("conv1d", _conv_f, _conv_b)

# rotary position embedding -------------------------------------------------------------


def rope_angles(length: int, dim: int, base: float = 10000.0, offset: int = 0) -> np.ndarray:
    """Rotation angles, shape (length, dim // 2), for positions offset..offset+length-1."""
    if dim % 2:
        raise ShapeError(f"rope: head dim {dim} must be even")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pos = np.arange(offset, offset + length, dtype=np.float64)
    return np.outer(pos, inv_freq)


def _rotate(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rope_f(x, base=10000.0, offset=0):
    if x.ndim < 2:
        raise ShapeError(f"rope: input must be (..., L, D), got {x.shape}")
    ang = rope_angles(x.shape[-2], x.shape[-1], base, offset)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    return _rotate(x, cos, sin), (cos, sin)


def _rope_b(saved, g, needs):
    cos, sin = saved
    return (_rotate(g, cos, -sin),)


register("rope", _rope_f, _rope_b)


# --------------------------------------------------------------------------
# functional front-end
# --------------------------------------------------------------------------


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def sqrt(x):
    return apply("sqrt", x)


def tanh(x):
    return apply("tanh", x)


def gelu(x):
    return apply("gelu", x)


def silu(x):
    return apply("silu", x)


def matmul(a, b):
    b = as_tensor(b)
    if b.ndim == 2:
        return apply("matmul", a, b)
    return apply("bmm", a, b)


def bmm(a, b):
    return apply("bmm", a, b)


def transpose(x, axes):
    return apply("transpose", x, axes=tuple(axes))


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def expand(x, shape):
    return apply("expand", x, shape=tuple(shape))


def concat(tensors: Sequence, axis: int = -1):
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    return apply("concat", *tensors, axis=axis)


def slice_(x, key):
    return apply("slice", x, key=key)


def sum_(x, axis=None, keepdims=False):
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def softmax(x):
    return apply("softmax", x)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-6):
    if (weight is None) != (bias is None):
        raise ValueError("layer_norm: pass both weight and bias or neither")
    if weight is None:
        return apply("layer_norm", x, eps=eps)
    return apply("layer_norm", x, weight, bias, eps=eps)


def embedding(table, ids):
    return apply("embedding", table, ids=np.asarray(ids))


def conv1d_depthwise(x, weight, bias=None):
    if bias is None:
        return apply("conv1d_depthwise", x, weight)
    return apply("conv1d_depthwise", x, weight, bias)


def conv1d(x, weight, bias=None):
    if bias is None:
        return apply("conv1d", x, weight)
    return apply("conv1d", x, weight, bias)


def rope(x, base: float = 10000.0, offset: int = 0):
    return apply("rope", x, base=base, offset=offset)
