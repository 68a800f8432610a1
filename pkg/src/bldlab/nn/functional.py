"""Differentiable ops on :class:`Tensor`.

Shape algebra (N = batch):

* ``conv2d``: x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,H/s,W/s]; padding k//2, s in {1,2}
* ``linear``: x [N,I], w [O,I], b [O] -> [N,O]
* ``group_norm``: x [N,C,H,W] (C divisible by groups) -> same shape
* ``nearest_upsample2x`` / ``avgpool2x``: spatial x2 / /2
* ``add`` / ``mul``: numpy broadcasting
* ``concat_channels``: along axis 1
* ``mse``: mean squared difference of equal-shape tensors -> scalar
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _shape_fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        _shape_fail("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(out.astype(a.dtype, copy=False), (a, b), back, "add")


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    try:
        out = a.data - b.data
    except ValueError:
        _shape_fail("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(out.astype(a.dtype, copy=False), (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _coerce(a)
        s = float(b)

        def back_s(g):
            return (g * s,)

        return make_result((a.data * s).astype(a.dtype, copy=False), (a,), back_s, "mul")
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        _shape_fail("mul", a.shape, b.shape)
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape

    def back(g):
        ga = _unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return make_result(out.astype(a.dtype, copy=False), (a, b), back, "mul")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def back(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return make_result(out, (x,), back, "silu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return make_result(out, (x,), back, "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        return (g * out,)

    return make_result(out, (x,), back, "exp")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def back(g):
        return (2.0 * g * xd,)

    return make_result(xd * xd, (x,), back, "square")


# -- reductions -------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def back(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype).reshape(()), (x,), back, "mean")


def mse(a: Tensor, b) -> Tensor:
    """Mean of (a - b)^2 over all elements."""
    b = _coerce(b, a)
    if a.shape != b.shape:
        _shape_fail("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def back(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    out = np.asarray(np.mean(diff * diff), dtype=a.dtype).reshape(())
    return make_result(out, (a, b), back, "mse")


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        _shape_fail("reshape", old, shape)

    def back(g):
        return (g.reshape(old),)

    return make_result(out, (x,), back, "reshape")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:1] != ref[:1] or x.shape[2:] != ref[2:]:
            _shape_fail("concat_channels", ref, x.shape)
    sizes = [x.shape[1] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, tuple(xs), back, "concat_channels")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum_ints(sizes) != x.shape[1]:
        _shape_fail("split_channels", x.shape, tuple(sizes))
    outs = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def back(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(make_result(np.ascontiguousarray(x.data[:, lo:hi]), (x,), back, "split_channels"))
        start = hi
    return outs


def sum_ints(xs) -> int:
    total = 0
    for v in xs:
        total += int(v)
    return total


# -- layers -----------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        _shape_fail("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        _shape_fail("linear(bias)", w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, back, "linear")


def _im2col_nhwc(xh: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix [N*Ho*Wo, k*k*C] (column order ky, kx, c) of an NHWC array, zero padded by k//2."""
    n, h, w, c = xh.shape
    p = k // 2
    ho, wo = h // stride, w // stride
    if p:
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=xh.dtype)
        xp[:, p:p + h, p:p + w, :] = xh
    else:
        xp = xh
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution with zero padding k//2 (``same`` size at stride 1)."""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        _shape_fail("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        _shape_fail("conv2d(bias)", w.shape, b.shape)
    n, c, h, wd_ = x.shape
    o, _, k, _ = w.shape
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride == 2 and (h % 2 or wd_ % 2):
        _shape_fail("conv2d(stride 2 needs even size)", x.shape, w.shape)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    cols, ho, wo = _im2col_nhwc(x.data.transpose(0, 2, 3, 1), k, stride)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def back(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        gm = gh.reshape(n * ho * wo, o)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            # input gradient = stride-1 conv of the zero-dilated output grad with the flipped kernel
            if stride == 2:
                gd = np.zeros((n, h, wd_, o), dtype=g.dtype)
                gd[:, ::2, ::2, :] = gh
            else:
                gd = gh
            gcols, _, _ = _im2col_nhwc(gd, k, 1)
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
            gx = np.ascontiguousarray((gcols @ wf.T).reshape(n, h, wd_, c).transpose(0, 3, 1, 2))
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, back, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4 or x.shape[1] % groups:
        _shape_fail(f"group_norm(groups={groups})", x.shape)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        _shape_fail("group_norm(affine)", x.shape, gamma.shape)
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    m = xg.shape[2]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = (g * gd).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = (inv / m) * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                              - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "group_norm")


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        _shape_fail("nearest_upsample2x", x.shape)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(np.ascontiguousarray(out), (x,), back, "nearest_upsample2x")


def avgpool2x(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        _shape_fail("avgpool2x", x.shape)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        gg = np.broadcast_to((g * 0.25)[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2))
        return (gg.reshape(n, c, h, w).copy(),)

    return make_result(out, (x,), back, "avgpool2x")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.ndim != 2 or ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result(out, (table,), back, "embedding")


def detach(x: Tensor) -> Tensor:
    return x.detach()


FORWARD_OPS = {
    "conv2d": conv2d,
    "linear": linear,
    "group_norm": group_norm,
    "silu": silu,
    "nearest_upsample2x": nearest_upsample2x,
    "avgpool2x": avgpool2x,
    "add": add,
    "mul": mul,
    "concat_channels": concat_channels,
    "mse": mse,
}


def forward_suite(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the core ops by name."""
    try:
        fn = FORWARD_OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)
