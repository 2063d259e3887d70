"""Reverse-mode tensor engine on float64 numpy arrays.

Computation is recorded as an append-only graph of primitive nodes and
evaluated lazily with per-node memoisation.  Every primitive has an adjoint
rule that is itself built from primitives, so expressions that contain
gradients (a gradient-norm penalty, say) can be differentiated again with the
same machinery.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operands cannot be combined under a primitive's shape rule."""


class NumericsError(ArithmeticError):
    """Raised when evaluation produces NaN/Inf or hits a domain error."""


_F64 = np.float64

# Compute kinds, in the order reported by the gradient-check harness.
PRIMITIVE_KINDS = (
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "abs",
    "square",
    "sqrt",
    "reciprocal",
    "l2norm",
    "leaky_relu",
    "matmul",
    "conv2d",
    "upsample2x",
    "avgpool",
    "concat",
    "slice",
    "broadcast",
    "round",
    "stop_gradient",
)

_LEAF_KINDS = ("const", "var")


class Node:
    __slots__ = ("kind", "inputs", "attrs", "shape")

    def __init__(self, kind, inputs, attrs, shape):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape


class Tensor:
    """Handle to one graph node, or a detached constant with no graph identity.

    Detached constants carry values only; gradients never flow into them.
    Graph tensors are identified by (graph, node id) and evaluated on demand.
    """

    __slots__ = ("graph", "nid", "shape", "_values")

    def __init__(self, graph, nid, shape, values=None):
        self.graph = graph
        self.nid = nid
        self.shape = shape
        self._values = values

    @property
    def detached(self):
        return self.graph is None

    def value(self):
        """Evaluate this tensor and return its array."""
        return evaluate([self])[0]

    # Small operator sugar; anything fancier goes through the named helpers.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = "detached" if self.detached else f"nid={self.nid}"
        return f"Tensor({tag}, shape={self.shape})"


class Graph:
    """Append-only computation graph; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._cache: dict[int, np.ndarray] = {}

    def _leaf(self, kind, values):
        arr = _clean_leaf(values)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, (), {}, arr.shape))
        self._cache[nid] = arr
        return Tensor(self, nid, arr.shape)

    def var(self, values):
        """Add a differentiable leaf holding `values`."""
        return self._leaf("var", values)

    def const(self, values):
        """Add a non-differentiable leaf holding `values`."""
        return self._leaf("const", values)

    def zeros(self, shape):
        return self.const(np.zeros(shape, dtype=_F64))

    def _materialize(self, t):
        if isinstance(t, Tensor):
            if t.graph is self:
                return t
            if t.graph is None:
                return self.const(t._values)
            raise ShapeError("operands belong to different graphs")
        return self.const(np.asarray(t, dtype=_F64))


def _clean_leaf(values):
    arr = np.asarray(values, dtype=_F64)
    if not np.isfinite(arr).all():
        raise NumericsError("leaf values must be finite")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def tensor_const(shape, values):
    """Detached constant from row-major `values`; gradients do not flow into it."""
    shape = tuple(int(s) for s in shape)
    arr = np.asarray(values, dtype=_F64)
    if arr.size != math.prod(shape):
        raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
    arr = arr.reshape(shape).copy()
    if not np.isfinite(arr).all():
        raise NumericsError("constant values must be finite")
    arr.flags.writeable = False
    return Tensor(None, None, shape, arr)


def apply(kind, inputs, **attrs):
    """Append one primitive node and return its tensor.

    Raw arrays/lists among `inputs` become constants; detached constants are
    materialised into the target graph at their point of use.
    """
    if kind not in PRIMITIVE_KINDS:
        raise ShapeError(f"unknown primitive kind {kind!r}")
    graph = None
    for t in inputs:
        if isinstance(t, Tensor) and t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise ShapeError("operands belong to different graphs")
    if graph is None:
        graph = Graph()
    ts = [graph._materialize(t) for t in inputs]
    shapes = [t.shape for t in ts]
    out_shape, attrs = _SHAPE_RULES[kind](shapes, attrs)
    nid = len(graph.nodes)
    graph.nodes.append(Node(kind, tuple(t.nid for t in ts), attrs, out_shape))
    return Tensor(graph, nid, out_shape)


# ---------------------------------------------------------------------------
# shape rules: (shapes, attrs) -> (out_shape, normalized_attrs)

def _same_shape(shapes, attrs, kind):
    a, b = shapes
    if a != b:
        raise ShapeError(f"{kind} needs equal shapes, got {a} vs {b}")
    return a, {}


def _norm_axes(axes, ndim, kind):
    if axes is None:
        return None
    axes = tuple(sorted(int(a) for a in axes))
    if len(axes) == 0 or len(set(axes)) != len(axes):
        raise ShapeError(f"{kind}: axes must be non-empty and unique")
    if any(a < 0 or a >= ndim for a in axes):
        raise ShapeError(f"{kind}: axes {axes} out of range for ndim {ndim}")
    return axes


def _reduce_shape(shapes, attrs, kind):
    (s,) = shapes
    axes = _norm_axes(attrs.get("axes"), len(s), kind)
    if axes is None:
        return (), {"axes": None}
    out = tuple(d for i, d in enumerate(s) if i not in axes)
    return out, {"axes": axes}


def _shape_scale(shapes, attrs):
    (s,) = shapes
    return s, {"c": float(attrs["c"])}


def _shape_elementwise(shapes, attrs):
    (s,) = shapes
    return s, {}


def _shape_abs(shapes, attrs):
    (s,) = shapes
    mode = attrs.get("mode", "fwd")
    if mode not in ("fwd", "dmask"):
        raise ShapeError(f"abs: bad mode {mode!r}")
    return s, {"mode": mode}


def _shape_reciprocal(shapes, attrs):
    (s,) = shapes
    return s, {"zero_to_zero": bool(attrs.get("zero_to_zero", False))}


def _shape_leaky_relu(shapes, attrs):
    (s,) = shapes
    mode = attrs.get("mode", "fwd")
    if mode not in ("fwd", "dmask"):
        raise ShapeError(f"leaky_relu: bad mode {mode!r}")
    return s, {"slope": float(attrs.get("slope", 0.2)), "mode": mode}


def _shape_matmul(shapes, attrs):
    a, b = shapes
    ta = bool(attrs.get("ta", False))
    tb = bool(attrs.get("tb", False))
    if len(a) != 2 or len(b) != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a} and {b}")
    ar, ac = (a[1], a[0]) if ta else a
    br, bc = (b[1], b[0]) if tb else b
    if ac != br:
        raise ShapeError(f"matmul inner extents differ: {a} (ta={ta}) vs {b} (tb={tb})")
    return (ar, bc), {"ta": ta, "tb": tb}


def _shape_conv2d(shapes, attrs):
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("pad", 0))
    mode = attrs.get("mode", "fwd")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    a, b = shapes
    if len(a) != 4 or len(b) != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {a} and {b}")
    out = {"stride": stride, "pad": pad, "mode": mode}
    if mode == "fwd":
        n, c, h, w = a
        k, c2, kh, kw = b
        if c != c2:
            raise ShapeError(f"conv2d: channel mismatch {c} vs {c2}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
        if pad > min(kh, kw) - 1:
            raise ShapeError("conv2d: pad must be <= kernel extent - 1")
        if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
            raise ShapeError(
                f"conv2d: non-integral output extent for input {h}x{w}, "
                f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        return (n, k, ho, wo), out
    if mode == "dgrad":
        n, k, ho, wo = a
        k2, c, kh, kw = b
        if k != k2:
            raise ShapeError(f"conv2d dgrad: channel mismatch {k} vs {k2}")
        h = (ho - 1) * stride + kh - 2 * pad
        w = (wo - 1) * stride + kw - 2 * pad
        if h < 1 or w < 1:
            raise ShapeError("conv2d dgrad: derived input extent < 1")
        return (n, c, h, w), out
    if mode == "wgrad":
        n, c, h, w = a
        n2, k, ho, wo = b
        if n != n2:
            raise ShapeError(f"conv2d wgrad: batch mismatch {n} vs {n2}")
        kh = h + 2 * pad - (ho - 1) * stride
        kw = w + 2 * pad - (wo - 1) * stride
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d wgrad: derived kernel extent invalid")
        return (k, c, kh, kw), out
    raise ShapeError(f"conv2d: bad mode {mode!r}")


def _shape_upsample2x(shapes, attrs):
    (s,) = shapes
    if len(s) != 4:
        raise ShapeError(f"upsample2x needs a 4-D operand, got {s}")
    n, c, h, w = s
    return (n, c, 2 * h, 2 * w), {}


def _shape_avgpool(shapes, attrs):
    (s,) = shapes
    f = int(attrs["factor"])
    if len(s) != 4:
        raise ShapeError(f"avgpool needs a 4-D operand, got {s}")
    if f < 2 or f & (f - 1):
        raise ShapeError(f"avgpool: factor must be a power of two >= 2, got {f}")
    n, c, h, w = s
    if h % f or w % f:
        raise ShapeError(f"avgpool: factor {f} does not divide {h}x{w}")
    return (n, c, h // f, w // f), {"factor": f}


def _shape_concat(shapes, attrs):
    axis = int(attrs["axis"])
    if len(shapes) < 2:
        raise ShapeError("concat needs at least two operands")
    nd = len(shapes[0])
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat: axis {axis} out of range for ndim {nd}")
    for s in shapes[1:]:
        if len(s) != nd or any(i != axis and s[i] != shapes[0][i] for i in range(nd)):
            raise ShapeError(f"concat: incompatible shapes {shapes}")
    out = list(shapes[0])
    out[axis] = sum(s[axis] for s in shapes)
    return tuple(out), {"axis": axis}


def _shape_slice(shapes, attrs):
    (s,) = shapes
    starts = tuple(int(v) for v in attrs["starts"])
    stops = tuple(int(v) for v in attrs["stops"])
    if len(starts) != len(s) or len(stops) != len(s):
        raise ShapeError("slice: starts/stops must cover every axis")
    for d, (a, b) in zip(s, zip(starts, stops)):
        if not (0 <= a < b <= d):
            raise ShapeError(f"slice: bad range [{a}, {b}) for extent {d}")
    return tuple(b - a for a, b in zip(starts, stops)), {"starts": starts, "stops": stops}


def _shape_broadcast(shapes, attrs):
    (s,) = shapes
    shape = tuple(int(v) for v in attrs["shape"])
    axes = tuple(int(v) for v in attrs["axes"])
    if any(d < 1 for d in shape):
        raise ShapeError(f"broadcast: bad target shape {shape}")
    if len(axes) != len(s):
        raise ShapeError("broadcast: one target axis per input axis")
    if any(axes[i] >= axes[i + 1] for i in range(len(axes) - 1)):
        raise ShapeError("broadcast: axes must be strictly increasing")
    if any(a < 0 or a >= len(shape) for a in axes):
        raise ShapeError(f"broadcast: axes {axes} out of range for target {shape}")
    if any(shape[a] != d for a, d in zip(axes, s)):
        raise ShapeError(f"broadcast: input {s} does not match target {shape} at axes {axes}")
    return shape, {"shape": shape, "axes": axes}


_SHAPE_RULES = {
    "add": lambda s, a: _same_shape(s, a, "add"),
    "sub": lambda s, a: _same_shape(s, a, "sub"),
    "mul": lambda s, a: _same_shape(s, a, "mul"),
    "scale": _shape_scale,
    "sum": lambda s, a: _reduce_shape(s, a, "sum"),
    "mean": lambda s, a: _reduce_shape(s, a, "mean"),
    "abs": _shape_abs,
    "square": _shape_elementwise,
    "sqrt": _shape_elementwise,
    "reciprocal": _shape_reciprocal,
    "l2norm": lambda s, a: _reduce_shape(s, a, "l2norm"),
    "leaky_relu": _shape_leaky_relu,
    "matmul": _shape_matmul,
    "conv2d": _shape_conv2d,
    "upsample2x": _shape_upsample2x,
    "avgpool": _shape_avgpool,
    "concat": _shape_concat,
    "slice": _shape_slice,
    "broadcast": _shape_broadcast,
    "round": _shape_elementwise,
    "stop_gradient": _shape_elementwise,
}


# ---------------------------------------------------------------------------
# forward rules: (values, attrs) -> array

def round_half_away(arr):
    """Round to nearest integer, ties away from zero (unlike numpy's rint)."""
    arr = np.asarray(arr, dtype=_F64)
    return np.trunc(arr + np.copysign(0.5, arr))


def _windows(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, ho, wo, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw))


def _conv_corr(x, w, stride):
    # valid cross-correlation via im2col + gemm
    n = x.shape[0]
    k, c, kh, kw = w.shape
    win = _windows(x, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = col @ w.reshape(k, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _dilate_hw(x, s):
    if s == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * s + 1, (w - 1) * s + 1), dtype=_F64)
    out[:, :, ::s, ::s] = x
    return out


def _conv_forward(vals, attrs):
    a, b = vals
    stride, pad, mode = attrs["stride"], attrs["pad"], attrs["mode"]
    if mode == "fwd":
        return _conv_corr(_pad_hw(a, pad), b, stride)
    if mode == "dgrad":
        # transpose of the fwd map in its image slot
        k, c, kh, kw = b.shape
        wr = np.ascontiguousarray(b[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        g = _dilate_hw(a, stride)
        g = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad,) * 2, (kw - 1 - pad,) * 2))
        return _conv_corr(g, wr, 1)
    # wgrad: correlate input windows with the output gradient
    n, c, h, w = a.shape
    n2, k, ho, wo = b.shape
    kh = h + 2 * pad - (ho - 1) * stride
    kw = w + 2 * pad - (wo - 1) * stride
    win = _windows(_pad_hw(a, pad), kh, kw, stride)
    return np.einsum("nchwuv,nkhw->kcuv", win, b, optimize=True)


def _sum_forward(vals, attrs):
    (v,) = vals
    return np.sum(v, axis=attrs["axes"])


def _mean_forward(vals, attrs):
    (v,) = vals
    return np.mean(v, axis=attrs["axes"])


def _l2norm_forward(vals, attrs):
    (v,) = vals
    return np.sqrt(np.sum(np.square(v), axis=attrs["axes"]))


def _sqrt_forward(vals, attrs):
    (v,) = vals
    if (v < 0).any():
        raise NumericsError("sqrt of negative value")
    return np.sqrt(v)


def _reciprocal_forward(vals, attrs):
    (v,) = vals
    if attrs["zero_to_zero"]:
        out = np.zeros_like(v)
        nz = v != 0
        out[nz] = 1.0 / v[nz]
        return out
    with np.errstate(divide="ignore"):  # 1/0 surfaces as a NumericsError
        return 1.0 / v


def _leaky_relu_forward(vals, attrs):
    (v,) = vals
    slope = attrs["slope"]
    if attrs["mode"] == "fwd":
        return np.where(v >= 0, v, slope * v)
    return np.where(v >= 0, 1.0, slope)  # derivative at 0 is 1 by convention


def _abs_forward(vals, attrs):
    (v,) = vals
    if attrs["mode"] == "fwd":
        return np.abs(v)
    return np.sign(v)  # derivative at 0 is 0 by convention


def _matmul_forward(vals, attrs):
    a, b = vals
    if attrs["ta"]:
        a = a.T
    if attrs["tb"]:
        b = b.T
    return a @ b


def _avgpool_forward(vals, attrs):
    (v,) = vals
    f = attrs["factor"]
    n, c, h, w = v.shape
    return v.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))


def _upsample2x_forward(vals, attrs):
    (v,) = vals
    return np.repeat(np.repeat(v, 2, axis=2), 2, axis=3)


def _slice_forward(vals, attrs):
    (v,) = vals
    sl = tuple(slice(a, b) for a, b in zip(attrs["starts"], attrs["stops"]))
    return v[sl]


def _broadcast_forward(vals, attrs):
    (v,) = vals
    shape, axes = attrs["shape"], attrs["axes"]
    idx = [None] * len(shape)
    for i, a in enumerate(axes):
        idx[a] = slice(None)
    return np.broadcast_to(v[tuple(idx)], shape).copy()


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "scale": lambda v, a: v[0] * a["c"],
    "sum": _sum_forward,
    "mean": _mean_forward,
    "abs": _abs_forward,
    "square": lambda v, a: np.square(v[0]),
    "sqrt": _sqrt_forward,
    "reciprocal": _reciprocal_forward,
    "l2norm": _l2norm_forward,
    "leaky_relu": _leaky_relu_forward,
    "matmul": _matmul_forward,
    "conv2d": _conv_forward,
    "upsample2x": _upsample2x_forward,
    "avgpool": _avgpool_forward,
    "concat": lambda v, a: np.concatenate(v, axis=a["axis"]),
    "slice": _slice_forward,
    "broadcast": _broadcast_forward,
    "round": lambda v, a: round_half_away(v[0]),
    "stop_gradient": lambda v, a: v[0],
}


# ---------------------------------------------------------------------------
# adjoint rules: given upstream gradient `up` (shaped like the output), return
# one gradient tensor per input (None where gradients never flow).  Each rule
# only emits primitive nodes, so the results stay differentiable.

def _kept_axes(ndim, axes):
    if axes is None:
        return ()
    return tuple(i for i in range(ndim) if i not in axes)


def _unreduce(up, in_shape, axes):
    # inverse layout of a reduction: spread `up` back over the reduced axes
    return broadcast(up, in_shape, _kept_axes(len(in_shape), axes))


def _adj_sum(ins, out, up, attrs):
    return [_unreduce(up, ins[0].shape, attrs["axes"])]


def _adj_mean(ins, out, up, attrs):
    s = ins[0].shape
    axes = attrs["axes"]
    count = math.prod(s) if axes is None else math.prod(s[a] for a in axes)
    return [scale(_unreduce(up, s, axes), 1.0 / count)]


def _adj_l2norm(ins, out, up, attrs):
    # d||x||/dx = x / ||x||, defined as 0 at x = 0
    inv = reciprocal(out, zero_to_zero=True)
    return [mul(ins[0], _unreduce(mul(up, inv), ins[0].shape, attrs["axes"]))]


def _adj_matmul(ins, out, up, attrs):
    a, b = ins
    ta, tb = attrs["ta"], attrs["tb"]
    if ta:
        da = matmul(b, up, ta=tb, tb=True)
    else:
        da = matmul(up, b, ta=False, tb=not tb)
    if tb:
        db = matmul(up, a, ta=True, tb=ta)
    else:
        db = matmul(a, up, ta=not ta, tb=False)
    return [da, db]


def _adj_conv2d(ins, out, up, attrs):
    a, b = ins
    s, p, mode = attrs["stride"], attrs["pad"], attrs["mode"]
    if mode == "fwd":
        return [apply("conv2d", [up, b], stride=s, pad=p, mode="dgrad"),
                apply("conv2d", [a, up], stride=s, pad=p, mode="wgrad")]
    if mode == "dgrad":
        return [apply("conv2d", [up, b], stride=s, pad=p, mode="fwd"),
                apply("conv2d", [up, a], stride=s, pad=p, mode="wgrad")]
    return [apply("conv2d", [up, b], stride=s, pad=p, mode="dgrad"),
            apply("conv2d", [a, up], stride=s, pad=p, mode="fwd")]


def _adj_avgpool(ins, out, up, attrs):
    f = attrs["factor"]
    g = up
    for _ in range(f.bit_length() - 1):
        g = upsample2x(g)
    return [scale(g, 1.0 / (f * f))]


def _adj_concat(ins, out, up, attrs):
    axis = attrs["axis"]
    nd = len(out.shape)
    outs = []
    offset = 0
    for t in ins:
        starts = [0] * nd
        stops = list(out.shape)
        starts[axis] = offset
        stops[axis] = offset + t.shape[axis]
        outs.append(crop(up, starts, stops))
        offset += t.shape[axis]
    return outs


def _adj_slice(ins, out, up, attrs):
    # scatter back into a zero field, one axis at a time
    (x,) = ins
    g = up
    for ax, (start, stop, d) in enumerate(zip(attrs["starts"], attrs["stops"], x.shape)):
        if start == 0 and stop == d:
            continue
        parts = []
        if start > 0:
            lo = list(g.shape)
            lo[ax] = start
            parts.append(g.graph.zeros(tuple(lo)))
        parts.append(g)
        if stop < d:
            hi = list(g.shape)
            hi[ax] = d - stop
            parts.append(g.graph.zeros(tuple(hi)))
        g = concat(parts, axis=ax)
    return [g]


def _adj_broadcast(ins, out, up, attrs):
    new_axes = tuple(i for i in range(len(attrs["shape"])) if i not in attrs["axes"])
    if not new_axes:
        return [up]
    return [reduce_sum(up, axes=new_axes)]


_ADJOINTS = {
    "add": lambda ins, out, up, a: [up, up],
    "sub": lambda ins, out, up, a: [up, scale(up, -1.0)],
    "mul": lambda ins, out, up, a: [mul(up, ins[1]), mul(up, ins[0])],
    "scale": lambda ins, out, up, a: [scale(up, a["c"])],
    "sum": _adj_sum,
    "mean": _adj_mean,
    "abs": lambda ins, out, up, a: [mul(up, apply("abs", [ins[0]], mode="dmask"))]
    if a["mode"] == "fwd" else [None],
    "square": lambda ins, out, up, a: [scale(mul(up, ins[0]), 2.0)],
    "sqrt": lambda ins, out, up, a: [scale(mul(up, reciprocal(out)), 0.5)],
    "reciprocal": lambda ins, out, up, a: [scale(mul(up, square(out)), -1.0)],
    "l2norm": _adj_l2norm,
    "leaky_relu": lambda ins, out, up, a: [
        mul(up, apply("leaky_relu", [ins[0]], slope=a["slope"], mode="dmask"))]
    if a["mode"] == "fwd" else [None],
    "matmul": _adj_matmul,
    "conv2d": _adj_conv2d,
    "upsample2x": lambda ins, out, up, a: [scale(avg_pool(up, 2), 4.0)],
    "avgpool": _adj_avgpool,
    "concat": _adj_concat,
    "slice": _adj_slice,
    "broadcast": _adj_broadcast,
    "round": lambda ins, out, up, a: [None],
    "stop_gradient": lambda ins, out, up, a: [None],
}


# ---------------------------------------------------------------------------
# evaluation and differentiation

def evaluate(tensors):
    """Evaluate tensors, computing each needed node at most once per graph.

    Returns read-only arrays; raises NumericsError if any computed node is
    non-finite.
    """
    out = []
    for t in tensors:
        if t.graph is None:
            out.append(t._values)
            continue
        g = t.graph
        if t.nid not in g._cache:
            _eval_into_cache(g, t.nid)
        out.append(g._cache[t.nid])
    return out


def _eval_into_cache(g, root):
    needed = []
    seen = set()
    stack = [root]
    while stack:
        nid = stack.pop()
        if nid in seen or nid in g._cache:
            continue
        seen.add(nid)
        needed.append(nid)
        stack.extend(g.nodes[nid].inputs)
    for nid in sorted(needed):
        node = g.nodes[nid]
        vals = [g._cache[i] for i in node.inputs]
        arr = np.asarray(_FORWARD[node.kind](vals, node.attrs), dtype=_F64)
        if not np.isfinite(arr).all():
            raise NumericsError(f"non-finite values from '{node.kind}' node {nid}")
        arr.flags.writeable = False
        g._cache[nid] = arr


def grad(output, wrt):
    """Reverse-mode gradients of a scalar `output` with respect to `wrt`.

    Returns one graph tensor per entry of `wrt`; results are ordinary nodes,
    so they can be combined and differentiated again.  A `wrt` tensor the
    output does not depend on yields a zero tensor of its shape.
    """
    if output.shape not in ((), (1,)):
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    g = output.graph
    if g is None:
        return [tensor_const(t.shape, np.zeros(t.shape)) for t in wrt]

    ancestors = set()
    stack = [output.nid]
    while stack:
        nid = stack.pop()
        if nid in ancestors:
            continue
        ancestors.add(nid)
        stack.extend(g.nodes[nid].inputs)

    adjoint: dict[int, Tensor] = {output.nid: g.const(np.ones(output.shape, dtype=_F64))}
    for nid in range(output.nid, -1, -1):
        if nid not in adjoint or nid not in ancestors:
            continue
        node = g.nodes[nid]
        if node.kind in _LEAF_KINDS:
            continue
        ins = [Tensor(g, i, g.nodes[i].shape) for i in node.inputs]
        out_t = Tensor(g, nid, node.shape)
        contribs = _ADJOINTS[node.kind](ins, out_t, adjoint[nid], node.attrs)
        for inp_nid, contrib in zip(node.inputs, contribs):
            if contrib is None or g.nodes[inp_nid].kind == "const":
                continue
            if inp_nid in adjoint:
                adjoint[inp_nid] = add(adjoint[inp_nid], contrib)
            else:
                adjoint[inp_nid] = contrib

    results = []
    for t in wrt:
        if t.graph is g and t.nid in adjoint and g.nodes[t.nid].kind != "const":
            results.append(adjoint[t.nid])
        else:
            results.append(g.zeros(t.shape))
    return results


# ---------------------------------------------------------------------------
# named constructors

def add(a, b):
    return apply("add", [a, b])


def sub(a, b):
    return apply("sub", [a, b])


def mul(a, b):
    return apply("mul", [a, b])


def scale(a, c):
    return apply("scale", [a], c=c)


def reduce_sum(a, axes=None):
    return apply("sum", [a], axes=axes)


def reduce_mean(a, axes=None):
    return apply("mean", [a], axes=axes)


def absolute(a):
    return apply("abs", [a])


def square(a):
    return apply("square", [a])


def sqrt(a):
    return apply("sqrt", [a])


def reciprocal(a, zero_to_zero=False):
    return apply("reciprocal", [a], zero_to_zero=zero_to_zero)


def l2_norm(a, axes=None):
    return apply("l2norm", [a], axes=axes)


def leaky_relu(a, slope=0.2):
    return apply("leaky_relu", [a], slope=slope)


def matmul(a, b, ta=False, tb=False):
    return apply("matmul", [a, b], ta=ta, tb=tb)


def conv2d(x, w, stride=1, pad=0):
    return apply("conv2d", [x, w], stride=stride, pad=pad, mode="fwd")


def upsample2x(a):
    return apply("upsample2x", [a])


def avg_pool(a, factor):
    return apply("avgpool", [a], factor=factor)


def concat(tensors, axis):
    return apply("concat", list(tensors), axis=axis)


def crop(a, starts, stops):
    return apply("slice", [a], starts=tuple(starts), stops=tuple(stops))


def broadcast(a, shape, axes):
    return apply("broadcast", [a], shape=tuple(shape), axes=tuple(axes))


def round_nearest(a):
    return apply("round", [a])


def stop_gradient(a):
    return apply("stop_gradient", [a])
