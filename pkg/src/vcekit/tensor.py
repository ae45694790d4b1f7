"""Dense float tensors with a reverse-mode gradient tape.

The primitive set is deliberately closed and small; everything else in the
package is composed from it, which keeps every backward rule individually
auditable against finite differences.  Model state lives in float32, but all
ops preserve float64 inputs end to end so gradient checks can run at full
precision.  Reductions accumulate in float64 regardless of tensor dtype.

Broadcasting is restricted to three patterns: scalar-with-tensor, a (C,) bias
against the channel axis of (B, C) or (B, C, H, W), and a (B, C) per-sample
bias against (B, C, H, W).  Anything else is a shape error by design.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "apply_primitive",
    "backward",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "conv2d",
    "transpose_conv2d",
    "relu",
    "silu",
    "mean",
    "tsum",
    "reshape",
    "concat",
    "embedding_lookup",
    "log_softmax",
    "group_normalize",
    "clamp_unit",
]

_SUPPORTED = (np.dtype(np.float32), np.dtype(np.float64))


class TensorError(ValueError):
    """Failure inside a tensor primitive, tagged with the op name."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


class _Node:
    """One recorded op: inputs plus a closure computing input gradients."""

    __slots__ = ("kind", "inputs", "backward_fn", "consumed")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A dense float array, optionally wired into a gradient tape.

    ``data`` is treated as read-only once the tensor participates in an op;
    the only sanctioned in-place mutation is an optimizer updating leaf
    weights between tape constructions.  ``grad`` is populated on leaves by
    :func:`backward` and accumulates across calls until reset to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected one element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def reset_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.node is not None:
            flags.append(f"node={self.node.kind}")
        tail = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tail})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_dtypes(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TensorError(op, f"dtype mismatch: {dt} vs {t.dtype}")
    return dt


def _result(kind: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(kind, "non-finite value in output")
    t = Tensor(out)
    if any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = _Node(kind, inputs, backward_fn)
    return t


def _needs(inputs: Sequence[Tensor]) -> tuple:
    return tuple(i.requires_grad for i in inputs)


def _reduce_sum(arr: np.ndarray, axes, out_shape, dtype) -> np.ndarray:
    """Sum ``arr`` over ``axes`` with float64 accumulation, cast back."""
    s = arr.sum(axis=axes, dtype=np.float64)
    return s.astype(dtype).reshape(out_shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _bias_plan(op: str, xs: tuple, bs: tuple):
    """Classify the allowed broadcast of ``b`` against ``x``.

    Returns (expanded_shape_for_b, axes_to_reduce_in_backward) or raises.
    """
    if xs == bs:
        return bs, None
    if int(np.prod(bs, dtype=np.int64)) == 1:
        return (1,) * len(xs), "scalar"
    if len(bs) == 1:
        c = bs[0]
        if len(xs) == 2 and xs[1] == c:
            return (1, c), (0,)
        if len(xs) == 4 and xs[1] == c:
            return (1, c, 1, 1), (0, 2, 3)
    if len(bs) == 2 and len(xs) == 4 and xs[:2] == bs:
        return (bs[0], bs[1], 1, 1), (2, 3)
    raise ShapeError(op, f"cannot broadcast {bs} against {xs}")


def _add_like(op: str, a: Tensor, b: Tensor, sign: float) -> Tensor:
    dtype = _check_dtypes(op, a, b)
    bshape, reduce_axes = _bias_plan(op, a.shape, b.shape)
    brhs = b.data.reshape(bshape)
    out = a.data + brhs if sign > 0 else a.data - brhs
    needs = _needs((a, b))

    def backward_fn(g):
        ga = g if needs[0] else None
        gb = None
        if needs[1]:
            if reduce_axes is None:
                gb = g if sign > 0 else -g
            elif reduce_axes == "scalar":
                gb = _reduce_sum(g, None, b.shape, dtype)
                if sign < 0:
                    gb = -gb
            else:
                gb = _reduce_sum(g, reduce_axes, b.shape, dtype)
                if sign < 0:
                    gb = -gb
        return ga, gb

    return _result(op, out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _add_like("add", a, b, 1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _add_like("sub", a, b, -1.0)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _check_dtypes("mul-elementwise", a, b)
    if a.shape != b.shape:
        raise ShapeError("mul-elementwise", f"shape mismatch {a.shape} vs {b.shape}")
    needs = _needs((a, b))
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _result("mul-elementwise", a.data * b.data, (a, b), backward_fn)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    needs = _needs((a,))

    def backward_fn(g):
        return (g * s if needs[0] else None,)

    return _result("scalar-mul", a.data * s, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    needs = _needs((a, b))
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------


def _patch_view(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int):
    """Zero-copy (B, C, kh, kw, ho, wo) window view over a padded map."""
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def _pad_input(op: str, x: np.ndarray, pad: int, pad_mode: str) -> np.ndarray:
    if pad == 0:
        return x
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if pad_mode == "zero":
        return np.pad(x, spec)
    if pad_mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise TensorError(op, f"unknown pad_mode {pad_mode!r}")


def _fold_reflect(dxp: np.ndarray, h: int, w: int, pad: int) -> np.ndarray:
    """Scatter padded-position gradients back onto their mirror sources."""
    b, c = dxp.shape[:2]
    idx = np.pad(np.arange(h * w).reshape(h, w), pad, mode="reflect").ravel()
    acc = np.zeros((h * w, b * c), dtype=np.float64)
    np.add.at(acc, idx, dxp.reshape(b * c, -1).T.astype(np.float64))
    return acc.T.reshape(b, c, h, w).astype(dxp.dtype)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, pad_mode: str = "zero") -> Tensor:
    op = "conv2d"
    _check_dtypes(op, x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(op, f"need 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(op, f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    stride = int(stride)
    pad = int(pad)
    if stride < 1 or pad < 0:
        raise TensorError(op, f"invalid stride={stride} pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1 or (h + 2 * pad - kh) % stride not in range(stride):
        raise ShapeError(op, f"kernel {w.shape} does not fit input {x.shape} (pad={pad})")

    xp = _pad_input(op, x.data, pad, pad_mode)
    view = _patch_view(xp, kh, kw, ho, wo, stride)
    out = np.tensordot(w.data, view, axes=([1, 2, 3], [1, 2, 3]))  # (co, b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    needs = _needs((x, w))
    wd_data = w.data

    def backward_fn(g):
        gx = gw = None
        if needs[1]:
            gw = np.tensordot(g, view, axes=([0, 2, 3], [0, 4, 5]))
        if needs[0]:
            tmp = np.tensordot(g, wd_data, axes=([1], [0]))  # (b, ho, wo, ci, kh, kw)
            tmp = tmp.transpose(0, 3, 1, 2, 4, 5)  # (b, ci, ho, wo, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i + (ho - 1) * stride + 1
                for j in range(kw):
                    wj = j + (wo - 1) * stride + 1
                    dxp[:, :, i:hi:stride, j:wj:stride] += tmp[:, :, :, :, i, j]
            if pad == 0:
                gx = dxp
            elif pad_mode == "zero":
                gx = dxp[:, :, pad:pad + h, pad:pad + wd]
            else:
                gx = _fold_reflect(dxp, h, wd, pad)
        return gx, gw

    return _result(op, out, (x, w), backward_fn)


def transpose_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    op = "transpose-conv2d"
    _check_dtypes(op, x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(op, f"need 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, ci, h, wd = x.shape
    ci_w, co, kh, kw = w.shape
    if ci != ci_w:
        raise ShapeError(op, f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    stride = int(stride)
    pad = int(pad)
    if stride < 1 or pad < 0:
        raise TensorError(op, f"invalid stride={stride} pad={pad}")
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (wd - 1) * stride + kw - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError(op, f"output collapses for input {x.shape}, kernel {w.shape}, pad={pad}")

    u = np.tensordot(x.data, w.data, axes=([1], [0]))  # (b, h, w, co, kh, kw)
    u = u.transpose(0, 3, 1, 2, 4, 5)  # (b, co, h, w, kh, kw)
    yp = np.zeros((bsz, co, ho + 2 * pad, wo + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        hi = i + (h - 1) * stride + 1
        for j in range(kw):
            wj = j + (wd - 1) * stride + 1
            yp[:, :, i:hi:stride, j:wj:stride] += u[:, :, :, :, i, j]
    out = np.ascontiguousarray(yp[:, :, pad:pad + ho, pad:pad + wo])
    needs = _needs((x, w))
    xd, wdat = x.data, w.data

    def backward_fn(g):
        gp = g
        if pad:
            gp = np.zeros((bsz, co, ho + 2 * pad, wo + 2 * pad), dtype=g.dtype)
            gp[:, :, pad:pad + ho, pad:pad + wo] = g
        view = _patch_view(gp, kh, kw, h, wd, stride)  # (b, co, kh, kw, h, w)
        gx = gw = None
        if needs[0]:
            gx = np.tensordot(view, wdat, axes=([1, 2, 3], [1, 2, 3]))  # (b, h, w, ci)
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if needs[1]:
            gw = np.tensordot(xd, view, axes=([0, 2, 3], [0, 4, 5]))  # (ci, co, kh, kw)
        return gx, gw

    return _result(op, out, (x, w), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities, reductions, shape ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    needs = _needs((x,))
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask if needs[0] else None,)

    return _result("relu", np.maximum(x.data, 0), (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    needs = _needs((x,))
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    xd = x.data

    def backward_fn(g):
        if not needs[0]:
            return (None,)
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return _result("silu", out, (x,), backward_fn)


def _full_reduce(op: str, x: Tensor, divide: bool) -> Tensor:
    needs = _needs((x,))
    n = x.size
    if n == 0:
        raise ShapeError(op, "cannot reduce an empty tensor")
    total = x.data.sum(dtype=np.float64)
    if divide:
        total = total / n
    out = np.asarray(total, dtype=x.dtype)
    shape, dtype = x.shape, x.dtype

    def backward_fn(g):
        if not needs[0]:
            return (None,)
        gval = float(np.asarray(g).reshape(()))
        if divide:
            gval /= n
        return (np.full(shape, gval, dtype=dtype),)

    return _result(op, out, (x,), backward_fn)


def mean(x: Tensor) -> Tensor:
    """Mean over all elements (float64 accumulation, 0-d output)."""
    return _full_reduce("mean", x, divide=True)


def tsum(x: Tensor) -> Tensor:
    """Sum over all elements (float64 accumulation, 0-d output)."""
    return _full_reduce("sum", x, divide=False)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    needs = _needs((x,))
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as e:
        raise ShapeError("reshape", f"{x.shape} -> {shape}: {e}") from None
    old = x.shape

    def backward_fn(g):
        return (g.reshape(old) if needs[0] else None,)

    return _result("reshape", out, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", "need at least one input")
    _check_dtypes("concat", *tensors)
    nd = tensors[0].data.ndim
    ax = axis if axis >= 0 else axis + nd
    if not 0 <= ax < nd:
        raise ShapeError("concat", f"axis {axis} out of range for rank {nd}")
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError("concat", f"rank mismatch {tensors[0].shape} vs {t.shape}")
        for d in range(nd):
            if d != ax and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError("concat", f"shape mismatch {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    needs = _needs(tensors)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for k in range(len(sizes)):
            if needs[k]:
                sl = [slice(None)] * nd
                sl[ax] = slice(int(offsets[k]), int(offsets[k + 1]))
                grads.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                grads.append(None)
        return tuple(grads)

    return _result("concat", out, tensors, backward_fn)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if table.data.ndim != 2:
        raise ShapeError("embedding-lookup", f"table must be 2-d, got {table.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding-lookup", "indices must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise TensorError("embedding-lookup", f"index out of range for table {table.shape}")
    needs = _needs((table,))
    tshape, tdtype = table.shape, table.dtype

    def backward_fn(g):
        if not needs[0]:
            return (None,)
        gt = np.zeros(tshape, dtype=tdtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result("embedding-lookup", table.data[idx].copy(), (table,), backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("log-softmax", f"expected (batch, classes), got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = shifted - lse
    needs = _needs((x,))

    def backward_fn(g):
        if not needs[0]:
            return (None,)
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _result("log-softmax", out, (x,), backward_fn)


def group_normalize(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    op = "group-normalize"
    _check_dtypes(op, x, gamma, beta)
    if x.data.ndim != 4:
        raise ShapeError(op, f"expected (B, C, H, W), got {x.shape}")
    bsz, c, h, w = x.shape
    g_ = int(num_groups)
    if g_ < 1 or c % g_:
        raise ShapeError(op, f"{c} channels not divisible into {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(op, f"affine params must be ({c},), got {gamma.shape}, {beta.shape}")
    xg = x.data.reshape(bsz, g_, -1)
    mu = xg.mean(axis=2, keepdims=True, dtype=np.float64)
    var = np.square(xg - mu).mean(axis=2, keepdims=True, dtype=np.float64)
    r = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * r).astype(x.dtype).reshape(bsz, c, h, w)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    needs = _needs((x, gamma, beta))
    r32 = r.astype(x.dtype)
    gdat = gamma.data

    def backward_fn(g):
        gx = gg = gb = None
        if needs[1]:
            gg = _reduce_sum(g * xhat, (0, 2, 3), (c,), gdat.dtype)
        if needs[2]:
            gb = _reduce_sum(g, (0, 2, 3), (c,), gdat.dtype)
        if needs[0]:
            dxh = (g * gdat.reshape(1, c, 1, 1)).reshape(bsz, g_, -1)
            xh = xhat.reshape(bsz, g_, -1)
            m1 = dxh.mean(axis=2, keepdims=True, dtype=np.float64)
            m2 = (dxh * xh).mean(axis=2, keepdims=True, dtype=np.float64)
            gx = (r * (dxh - m1 - xh * m2)).astype(g.dtype).reshape(bsz, c, h, w)
        return gx, gg, gb

    return _result(op, out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# composed helpers
# ---------------------------------------------------------------------------


def clamp_unit(x: Tensor) -> Tensor:
    """Clamp to [-1, 1], composed as relu(x+1) - relu(x-1) - 1.

    The composition's gradient is exactly the clamp subgradient: identity
    inside the interval, zero outside it.
    """
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    hi = relu(add(x, one))
    lo = relu(sub(x, one))
    return sub(sub(hi, lo), one)


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------


def _adapt(fn, arity):
    def call(inputs, params):
        if len(inputs) != arity:
            raise ShapeError(fn.__name__, f"expected {arity} inputs, got {len(inputs)}")
        return fn(*inputs, **params)

    return call


PRIMITIVES = {
    "add": _adapt(add, 2),
    "sub": _adapt(sub, 2),
    "mul-elementwise": _adapt(mul, 2),
    "scalar-mul": _adapt(scalar_mul, 1),
    "matmul": _adapt(matmul, 2),
    "conv2d": _adapt(conv2d, 2),
    "transpose-conv2d": _adapt(transpose_conv2d, 2),
    "relu": _adapt(relu, 1),
    "silu": _adapt(silu, 1),
    "mean": _adapt(mean, 1),
    "sum": _adapt(tsum, 1),
    "reshape": _adapt(reshape, 1),
    "embedding-lookup": _adapt(embedding_lookup, 1),
    "log-softmax": _adapt(log_softmax, 1),
    "group-normalize": _adapt(group_normalize, 3),
}


def _concat_adapter(inputs, params):
    return concat(inputs, **params)


PRIMITIVES["concat"] = _concat_adapter


def apply_primitive(kind: str, inputs: Sequence[Tensor], params: dict | None = None) -> Tensor:
    """Run one primitive by name.  Pure: identical calls yield identical bytes."""
    if kind not in PRIMITIVES:
        raise TensorError(kind, "unknown primitive")
    inputs = [_as_tensor(i) for i in inputs]
    return PRIMITIVES[kind](inputs, dict(params or {}))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(output: Tensor) -> None:
    """Reverse-sweep the tape rooted at a scalar ``output``.

    Populates ``grad`` on every requires-grad leaf reachable from the root.
    Repeated calls (on distinct roots) accumulate into the same leaf grads
    until ``reset_grad`` is called; invoking backward twice on the same root
    raises.  Sub-graphs shared between several roots may be swept once per
    root.
    """
    if output.size != 1:
        raise TapeError("backward", f"output has {output.size} elements; expected a scalar")
    if output.node is None:
        raise TapeError("backward", "output has no recorded tape")
    if output.node.consumed:
        raise TapeError("backward", "tape for this output was already consumed")
    output.node.consumed = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            continue
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _eval_scalar(f, x: Tensor) -> float:
    y = f(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise TensorError("finite-difference", "function under test must return a scalar tensor")
    return float(y.data.reshape(()))


def finite_difference_gradient(f, x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    All arithmetic on function values runs in float64; the effective step is
    measured after dtype rounding so float32 probes stay accurate.  ``f`` is
    evaluated twice at ``x`` first and must reproduce its value bit-for-bit.
    """
    h = float(h)
    if h <= 0:
        raise TensorError("finite-difference", f"step must be positive, got {h}")
    first = _eval_scalar(f, x)
    second = _eval_scalar(f, x)
    if first != second:
        raise TensorError("finite-difference", "function under test is not deterministic")

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += h
        lo[i] -= h
        span = float(hi[i]) - float(lo[i])
        fp = _eval_scalar(f, Tensor(hi.reshape(x.shape), dtype=x.dtype))
        fm = _eval_scalar(f, Tensor(lo.reshape(x.shape), dtype=x.dtype))
        grad[i] = (fp - fm) / span
    return Tensor(grad.reshape(x.shape), dtype=np.float64)
