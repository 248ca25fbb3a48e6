"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is define-by-run: every primitive returns a :class:`Tensor` that
remembers its parents and a VJP closure. The VJP closures are themselves
written in terms of tracked primitives, so calling :func:`grad` with
``create_graph=True`` yields gradients that are differentiable again. That is
what makes exact second-order meta-gradients possible without any symbolic
machinery.

Design constraints honored throughout:

* all arithmetic in float64; forward and backward are bit-deterministic,
* explicit shapes only -- the sole broadcast allowed is scalar-times-tensor,
* convolution, its input-gradient (transposed convolution) and its
  weight-gradient form a closed triple: each one's VJP is expressed with the
  other two, so arbitrarily high derivative orders stay exact.
"""

from __future__ import annotations

import itertools
import math
import threading
import weakref
from collections import OrderedDict
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamVector",
    "Graph",
    "ShapeMismatchError",
    "NonScalarOutputError",
    "UnsupportedSecondOrderError",
    "tensor",
    "grad",
    "forward",
    "gradient",
    "second_order_gradient",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scalar_mul",
    "add_constant",
    "scale",
    "relu",
    "sigmoid",
    "sqrt",
    "log10",
    "clamp_min",
    "sum_all",
    "mean_all",
    "expand_scalar",
    "sum_time",
    "expand_time",
    "dot",
    "sq_norm",
    "reshape",
    "slice_channels",
    "pad_channels",
    "conv1d",
    "conv1d_input_grad",
    "conv1d_weight_grad",
    "detach",
]

_LN10 = math.log(10.0)


class ShapeMismatchError(ValueError):
    """Raised when an operation's inputs do not have the declared shapes."""


class NonScalarOutputError(ValueError):
    """Raised when a gradient is requested of a non-scalar output."""


class UnsupportedSecondOrderError(RuntimeError):
    """Raised when a second-order pass hits a primitive without a
    differentiable backward rule (never silently falls back to first order)."""


# Ops listed here have a backward rule that is not itself differentiable.
# The built-in primitive set is fully closed under differentiation, so the
# registry starts empty; it exists so extensions fail loudly instead of
# producing silently wrong second-order gradients.
FIRST_ORDER_ONLY_OPS: set[str] = set()


_ids = itertools.count()


class _GradMode(threading.local):
    """Per-thread recording flag; concurrent evaluations stay independent."""

    def __init__(self):
        self.enabled = True


_GradMode = _GradMode()


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


class Tensor:
    """A float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    # Operator sugar for same-shape elementwise math and python scalars.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(float(other), self)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(float(other), self)
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.shape))

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._vjp = vjp
    else:
        out.op = op
    return out


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(f"{op}: {msg}")


def _same_shape(op, a, b):
    _check(a.data.shape == b.data.shape, op,
           f"operands must share a shape, got {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (g if a.requires_grad else None,
                            g if b.requires_grad else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (g if a.requires_grad else None,
                            neg(g) if b.requires_grad else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (mul(g, b) if a.requires_grad else None,
                            mul(g, a) if b.requires_grad else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = _node("div", a.data / b.data, (a, b), None)
    # weakref avoids an out->vjp->out cycle; out is alive whenever its vjp runs
    ref = weakref.ref(out)

    def vjp(g):
        da = div(g, b) if a.requires_grad else None
        db = neg(mul(g, div(ref(), b))) if b.requires_grad else None
        return (da, db)

    out._vjp = vjp if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (neg(g),))


def scalar_mul(c: float, a: Tensor) -> Tensor:
    c = float(c)
    return _node("scalar_mul", c * a.data, (a,), lambda g: (scalar_mul(c, g),))


def add_constant(a: Tensor, c: float) -> Tensor:
    return _node("add_constant", a.data + float(c), (a,), lambda g: (g,))


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Scalar tensor times tensor, the one permitted broadcast."""
    _check(s.data.shape == (), "scale", f"scale factor must be a scalar, got {s.data.shape}")
    return _node("scale", a.data * s.data, (a, s),
                 lambda g: (scale(g, s) if a.requires_grad else None,
                            sum_all(mul(g, a)) if s.requires_grad else None))


def relu(a: Tensor) -> Tensor:
    # The 0/1 gate is a constant of the backward pass: d2(relu)/dx2 == 0 a.e.
    gate = Tensor((a.data > 0.0).astype(np.float64))
    return _node("relu", np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, gate),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    gate = Tensor((a.data > floor).astype(np.float64))
    return _node("clamp_min", np.maximum(a.data, floor), (a,), lambda g: (mul(g, gate),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _node("sigmoid", y, (a,), None)
    ref = weakref.ref(out)

    def vjp(g):
        y_out = ref()
        return (mul(g, mul(y_out, add_constant(neg(y_out), 1.0))),)

    out._vjp = vjp if out.requires_grad else None
    return out


def sqrt(a: Tensor) -> Tensor:
    out = _node("sqrt", np.sqrt(a.data), (a,), None)
    ref = weakref.ref(out)

    def vjp(g):
        return (scalar_mul(0.5, div(g, ref())),)

    out._vjp = vjp if out.requires_grad else None
    return out


def log10(a: Tensor) -> Tensor:
    def vjp(g):
        return (scalar_mul(1.0 / _LN10, div(g, a)),)

    return _node("log10", np.log10(a.data), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape movement


def sum_all(a: Tensor) -> Tensor:
    shp = a.data.shape
    return _node("sum_all", a.data.sum(), (a,), lambda g: (expand_scalar(g, shp),))


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(1.0 / a.data.size, sum_all(a))


def expand_scalar(s: Tensor, shape: tuple[int, ...]) -> Tensor:
    _check(s.data.shape == (), "expand_scalar", f"expected a scalar, got {s.data.shape}")
    shape = tuple(int(d) for d in shape)
    return _node("expand_scalar", np.full(shape, float(s.data)), (s,),
                 lambda g: (sum_all(g),))


def sum_time(a: Tensor) -> Tensor:
    """(C, T) -> (C,), summing over the time axis."""
    _check(a.data.ndim == 2, "sum_time", f"expected a (C, T) tensor, got {a.data.shape}")
    t = a.data.shape[1]
    return _node("sum_time", a.data.sum(axis=1), (a,), lambda g: (expand_time(g, t),))


def expand_time(a: Tensor, t: int) -> Tensor:
    """(C,) -> (C, T), replicating each channel across time."""
    _check(a.data.ndim == 1, "expand_time", f"expected a (C,) tensor, got {a.data.shape}")
    data = np.repeat(a.data[:, None], int(t), axis=1)
    return _node("expand_time", data, (a,), lambda g: (sum_time(g),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


def sq_norm(a: Tensor) -> Tensor:
    return dot(a, a)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    _check(int(np.prod(shape, dtype=np.int64)) == a.data.size, "reshape",
           f"cannot reshape {a.data.shape} to {shape}")
    old = a.data.shape
    return _node("reshape", a.data.reshape(shape), (a,),
                 lambda g: (reshape(g, old),))


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    _check(a.data.ndim == 2, "slice_channels", f"expected (C, T), got {a.data.shape}")
    c = a.data.shape[0]
    _check(0 <= lo < hi <= c, "slice_channels", f"bad channel range [{lo}, {hi}) for C={c}")
    return _node("slice_channels", a.data[lo:hi].copy(), (a,),
                 lambda g: (pad_channels(g, lo, c),))


def pad_channels(a: Tensor, lo: int, total: int) -> Tensor:
    _check(a.data.ndim == 2, "pad_channels", f"expected (C, T), got {a.data.shape}")
    c, t = a.data.shape
    _check(0 <= lo and lo + c <= total, "pad_channels",
           f"slice of {c} channels at offset {lo} exceeds total {total}")
    data = np.zeros((total, t))
    data[lo:lo + c] = a.data
    return _node("pad_channels", data, (a,),
                 lambda g: (slice_channels(g, lo, lo + c),))


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# 1-dim convolution triple
#
# conv1d computes a valid cross-correlation after zero-padding `pad` samples
# on both sides. conv1d_input_grad scatters cotangents back through the same
# geometry (it doubles as the transposed convolution used by the decoder) and
# conv1d_weight_grad correlates input windows with output cotangents. Each
# op's VJP is built from the other two, closing the set under differentiation.


_EINSUM_PATHS: dict[tuple, list] = {}


def _einsum(eq: str, *ops: np.ndarray) -> np.ndarray:
    """einsum with the contraction path cached per (equation, shapes)."""
    key = (eq,) + tuple(op.shape for op in ops)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(eq, *ops, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(eq, *ops, optimize=path)


def _windows(xp: np.ndarray, kernel: int, stride: int, dilation: int) -> np.ndarray:
    c, tp = xp.shape
    span = dilation * (kernel - 1) + 1
    t_out = (tp - span) // stride + 1
    s0, s1 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, t_out, kernel), strides=(s0, stride * s1, dilation * s1),
        writeable=False)


def _conv_geometry(op, t, kernel, stride, dilation, pad):
    _check(stride >= 1 and dilation >= 1 and pad >= 0, op, "stride/dilation/pad out of range")
    span = dilation * (kernel - 1) + 1
    padded = t + 2 * pad
    _check(padded >= span, op,
           f"input of length {t} (pad {pad}) shorter than kernel span {span}")
    return (padded - span) // stride + 1


def conv1d(x: Tensor, w: Tensor, *, stride: int = 1, dilation: int = 1,
           groups: int = 1, pad: int = 0) -> Tensor:
    """Grouped 1-dim convolution of x:(Cin, T) with w:(Cout, Cin/groups, K)."""
    _check(x.data.ndim == 2, "conv1d", f"input must be (Cin, T), got {x.data.shape}")
    _check(w.data.ndim == 3, "conv1d", f"weight must be (Cout, Cin/groups, K), got {w.data.shape}")
    cin, t = x.data.shape
    cout, cg, k = w.data.shape
    _check(cin == cg * groups, "conv1d",
           f"weight expects {cg * groups} input channels, input has {cin}")
    _check(cout % groups == 0, "conv1d", f"Cout={cout} not divisible by groups={groups}")
    t_out = _conv_geometry("conv1d", t, k, stride, dilation, pad)

    xp = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride, dilation).reshape(groups, cg, t_out, k)
    wg = w.data.reshape(groups, cout // groups, cg, k)
    y = _einsum("gitk,goik->got", win, wg).reshape(cout, t_out)

    def vjp(g):
        dx = conv1d_input_grad(g, w, stride=stride, dilation=dilation, groups=groups,
                               pad=pad, out_len=t) if x.requires_grad else None
        dw = conv1d_weight_grad(x, g, kernel=k, stride=stride, dilation=dilation,
                                groups=groups, pad=pad) if w.requires_grad else None
        return (dx, dw)

    return _node("conv1d", y, (x, w), vjp)


def conv1d_input_grad(g: Tensor, w: Tensor, *, stride: int = 1, dilation: int = 1,
                      groups: int = 1, pad: int = 0, out_len: int) -> Tensor:
    """Adjoint of conv1d w.r.t. its input; also the decoder's transposed conv.

    g:(Cout, T') and w:(Cout, Cin/groups, K) produce (Cin, out_len) by
    overlap-adding each kernel tap's contribution at its source position.
    """
    _check(g.data.ndim == 2, "conv1d_input_grad", f"grad must be (Cout, T'), got {g.data.shape}")
    _check(w.data.ndim == 3, "conv1d_input_grad", f"weight must be 3-d, got {w.data.shape}")
    cout, t_out = g.data.shape
    cout_w, cg, k = w.data.shape
    _check(cout == cout_w, "conv1d_input_grad",
           f"grad has {cout} channels, weight expects {cout_w}")
    cin = cg * groups
    t_expect = _conv_geometry("conv1d_input_grad", out_len, k, stride, dilation, pad)
    _check(t_expect == t_out, "conv1d_input_grad",
           f"grad length {t_out} inconsistent with output length {out_len} (expected {t_expect})")

    gg = g.data.reshape(groups, cout // groups, t_out)
    wg = w.data.reshape(groups, cout // groups, cg, k)
    dxp = np.zeros((cin, out_len + 2 * pad))
    hi = (t_out - 1) * stride + 1
    for tap in range(k):
        contrib = _einsum("got,goi->git", gg, wg[..., tap])
        dxp[:, tap * dilation: tap * dilation + hi: stride] += contrib.reshape(cin, t_out)
    dx = dxp[:, pad: pad + out_len] if pad else dxp

    def vjp(c):
        dg = conv1d(c, w, stride=stride, dilation=dilation, groups=groups,
                    pad=pad) if g.requires_grad else None
        dw = conv1d_weight_grad(c, g, kernel=k, stride=stride, dilation=dilation,
                                groups=groups, pad=pad) if w.requires_grad else None
        return (dg, dw)

    return _node("conv1d_input_grad", dx, (g, w), vjp)


def conv1d_weight_grad(x: Tensor, g: Tensor, *, kernel: int, stride: int = 1,
                       dilation: int = 1, groups: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv1d w.r.t. its weight: correlate input windows with g."""
    _check(x.data.ndim == 2 and g.data.ndim == 2, "conv1d_weight_grad",
           f"expected 2-d input and grad, got {x.data.shape} and {g.data.shape}")
    cin, t = x.data.shape
    cout, t_out = g.data.shape
    _check(cin % groups == 0 and cout % groups == 0, "conv1d_weight_grad",
           f"channels ({cin}, {cout}) not divisible by groups={groups}")
    t_expect = _conv_geometry("conv1d_weight_grad", t, kernel, stride, dilation, pad)
    _check(t_expect == t_out, "conv1d_weight_grad",
           f"grad length {t_out} does not match {t_expect} windows of the input")

    cg = cin // groups
    xp = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data
    win = _windows(xp, kernel, stride, dilation).reshape(groups, cg, t_out, kernel)
    gg = g.data.reshape(groups, cout // groups, t_out)
    dw = _einsum("got,gitk->goik", gg, win).reshape(cout, cg, kernel)

    def vjp(c):
        dx = conv1d_input_grad(g, c, stride=stride, dilation=dilation, groups=groups,
                               pad=pad, out_len=t) if x.requires_grad else None
        dg = conv1d(x, c, stride=stride, dilation=dilation, groups=groups,
                    pad=pad) if g.requires_grad else None
        return (dx, dg)

    return _node("conv1d_weight_grad", dw, (x, g), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_from(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = discovered, 1 = emitted
    stack: list[Tensor] = [output]
    while stack:
        node = stack[-1]
        st = state.get(node._id)
        if st is None:
            state[node._id] = 0
            for p in node._parents:
                if p.requires_grad and state.get(p._id) is None:
                    stack.append(p)
        elif st == 0:
            state[node._id] = 1
            order.append(node)
            stack.pop()
        else:
            stack.pop()
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Cotangents of a scalar `output` with respect to each tensor in `wrt`.

    With ``create_graph=True`` the returned tensors carry their own graphs and
    can be differentiated again. Tensors in `wrt` that the output does not
    depend on receive zeros.
    """
    if output.data.shape != ():
        raise NonScalarOutputError(
            f"gradient target must be a scalar, got shape {output.data.shape} from op {output.op!r}")
    wrt = list(wrt)
    if not output.requires_grad:
        return [Tensor(np.zeros(w.data.shape)) for w in wrt]

    topo = _topo_from(output)
    wrt_ids = {w._id for w in wrt}
    cot: dict[int, Tensor] = {output._id: Tensor(1.0)}

    prev = _GradMode.enabled
    _GradMode.enabled = bool(create_graph)
    try:
        for node in reversed(topo):
            g = cot.get(node._id)
            if g is None:
                continue
            if node._vjp is not None:
                if create_graph and node.op in FIRST_ORDER_ONLY_OPS:
                    raise UnsupportedSecondOrderError(
                        f"primitive {node.op!r} has no registered second derivative")
                for p, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    have = cot.get(p._id)
                    cot[p._id] = pg if have is None else add(have, pg)
            if node._id not in wrt_ids:
                del cot[node._id]
    finally:
        _GradMode.enabled = prev

    out: list[Tensor] = []
    for w in wrt:
        g = cot.get(w._id)
        out.append(g if g is not None else Tensor(np.zeros(w.data.shape)))
    return out


# ---------------------------------------------------------------------------
# flat parameter storage


class ParamVector:
    """Flat float64 parameter storage with named (offset, shape) slices."""

    def __init__(self, values: np.ndarray, layout: Mapping[str, tuple[int, tuple[int, ...]]]):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError(f"ParamVector values must be 1-d, got shape {values.shape}")
        self.values = values
        self.layout: "OrderedDict[str, tuple[int, tuple[int, ...]]]" = OrderedDict(
            (name, (int(off), tuple(int(d) for d in shp))) for name, (off, shp) in layout.items())
        self._validate()

    def _validate(self) -> None:
        covered = 0
        prev_end = 0
        for name, (off, shp) in self.layout.items():
            size = int(np.prod(shp, dtype=np.int64)) if shp else 1
            if off != prev_end:
                raise ValueError(f"layout slice {name!r} at offset {off} is not contiguous "
                                 f"with previous end {prev_end}")
            prev_end = off + size
            covered += size
        if covered != self.dim:
            raise ValueError(f"layout covers {covered} values, vector has {self.dim}")

    @classmethod
    def from_arrays(cls, named: Mapping[str, np.ndarray]) -> "ParamVector":
        layout: "OrderedDict[str, tuple[int, tuple[int, ...]]]" = OrderedDict()
        chunks = []
        off = 0
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (off, arr.shape)
            chunks.append(arr.reshape(-1))
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @property
    def dim(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        off, shp = self.layout[name]
        size = int(np.prod(shp, dtype=np.int64)) if shp else 1
        return self.values[off: off + size].reshape(shp)

    def names(self) -> Iterable[str]:
        return self.layout.keys()

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def replace(self, values: np.ndarray) -> "ParamVector":
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape} values, got {values.shape}")
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def to_leaves(self) -> "OrderedDict[str, Tensor]":
        """Fresh requires-grad leaf tensors, one per named slice."""
        return OrderedDict((name, Tensor(self.view(name).copy(), requires_grad=True))
                           for name in self.layout)

    def flatten_named(self, named: Mapping[str, np.ndarray]) -> "ParamVector":
        """Pack per-slice arrays (e.g. gradients) into a vector with this layout."""
        out = np.zeros_like(self.values)
        pv = ParamVector(out, self.layout)
        for name, arr in named.items():
            np.copyto(pv.view(name), np.asarray(arr, dtype=np.float64))
        return pv

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamVector)
                and self.layout == other.layout
                and np.array_equal(self.values, other.values))


# ---------------------------------------------------------------------------
# reusable computation wrapper


class Graph:
    """A re-runnable computation: a builder over (params, inputs) tensors.

    The builder receives a mapping of parameter-name to leaf tensor (or None
    when the graph takes no parameters) followed by one tensor per declared
    input, and returns a Tensor or a sequence of Tensors. Re-running the same
    graph on the same values is bit-identical because every primitive is
    deterministic.
    """

    def __init__(self, build: Callable, *, n_inputs: int, name: str = "graph"):
        self.build = build
        self.n_inputs = int(n_inputs)
        self.name = name

    def _run(self, params: ParamVector | None, inputs: Sequence[np.ndarray],
             free: bool):
        if len(inputs) != self.n_inputs:
            raise ShapeMismatchError(
                f"{self.name}: expected {self.n_inputs} inputs, got {len(inputs)}")
        leaves = params.to_leaves() if params is not None else None
        in_tensors = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
        if free:
            with no_grad():
                result = self.build(leaves, *in_tensors)
        else:
            result = self.build(leaves, *in_tensors)
        if isinstance(result, Tensor):
            outs: tuple[Tensor, ...] = (result,)
        else:
            outs = tuple(result)
        return outs, leaves


def forward(graph: Graph, params: ParamVector | None,
            inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Evaluate a graph; returns plain arrays."""
    outs, _ = graph._run(params, inputs, free=True)
    bad = [o for o in outs if not np.all(np.isfinite(o.data))]
    if bad:
        raise FloatingPointError(f"{graph.name}: non-finite output from op {bad[0].op!r}")
    return [o.data.copy() for o in outs]


def _scalar_loss(graph: Graph, params: ParamVector,
                 inputs: Sequence[np.ndarray]):
    outs, leaves = graph._run(params, inputs, free=False)
    if len(outs) != 1 or outs[0].data.shape != ():
        shapes = [o.data.shape for o in outs]
        raise NonScalarOutputError(
            f"{graph.name}: gradient needs a single scalar output, got {shapes}")
    return outs[0], leaves


def gradient(graph: Graph, params: ParamVector,
             inputs: Sequence[np.ndarray] = ()) -> ParamVector:
    """d(scalar loss)/d(params) for every parameter dimension."""
    loss, leaves = _scalar_loss(graph, params, inputs)
    gs = grad(loss, list(leaves.values()))
    return params.flatten_named({n: g.data for n, g in zip(leaves, gs)})


def second_order_gradient(graph: Graph, params: ParamVector,
                          inputs: Sequence[np.ndarray] = ()) -> ParamVector:
    """Total derivative of a loss whose builder embeds an inner `grad` call.

    The builder may call :func:`grad` with ``create_graph=True`` on quantities
    derived from the parameter leaves; the chain through those embedded
    gradient nodes is differentiated exactly, never approximated.
    """
    return gradient(graph, params, inputs)
