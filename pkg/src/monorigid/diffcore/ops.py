"""Differentiable primitives.

Every function takes tensors (or array-likes, treated as constants) and
returns a new ``Tensor``. Binary elementwise ops follow numpy broadcasting;
their backward passes sum gradients back to the operand shapes.

Layout conventions: ``conv2d`` and the upsampling ops use N x C x H x W;
``bilinear_sample`` takes channels-last grids.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import ContractError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "matmul",
    "exp", "log", "abs", "sqrt", "sin", "cos", "sigmoid", "elu", "relu",
    "sum", "mean", "reshape", "transpose", "getitem", "concatenate", "stack",
    "softmax", "layer_norm", "conv2d", "upsample_nearest", "upsample_bilinear",
    "bilinear_sample", "scaled_dot_attention", "linear", "swapaxes",
]


def _pair(a, b):
    """Coerce ``a`` and ``b`` to tensors sharing the dtype of whichever is a Tensor."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype.type)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype.type)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant scalar exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._make(out, (a,), backward)


# -- unary math ---------------------------------------------------------------

def _unary(a, fwd, dfdx):
    a = as_tensor(a)
    out = fwd(a.data)

    def backward(g):
        a._accumulate(g * dfdx(a.data, out))

    return Tensor._make(out, (a,), backward)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def abs(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def sigmoid(a):
    def fwd(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda x, y: y * (1.0 - y))


def elu(a, alpha=1.0):
    def fwd(x):
        return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))

    return _unary(a, fwd, lambda x, y: np.where(x > 0, 1.0, y + alpha))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


# -- reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,),
                        lambda g: a._accumulate(np.transpose(g, inv)))


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, index):
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)

    def backward_basic(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    basic = _is_basic_index(index)
    return Tensor._make(np.array(out) if basic else out, (a,),
                        backward_basic if basic else backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._make(out, tuple(tensors), backward)


def stack(tensors, axis=0):
    """Stack along a new axis (composed from reshape + concatenate)."""
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim + 1
    ax = axis % nd
    parts = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concatenate(parts, axis=ax)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# -- normalisation ---------------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._make(out, (a,), backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - xhat * gx))

    out = Tensor._make(xhat, (x,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# -- convolution -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, N x C x H x W input, O x C x kh x kw weight, zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ContractError("conv2d kernel larger than padded input")

    if kh == 1 and kw == 1:
        cols = xp[:, :, ::s, ::s][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def backward(g):
        grows = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if weight.requires_grad:
            weight._accumulate((grows @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grows.sum(axis=1).reshape(bias.shape))
        if x.requires_grad:
            # column gradient laid out as (c, kh, kw, n, ho, wo) so the scatter reads contiguous blocks
            dcols = (wmat.T @ grows).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            x._accumulate(np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w] if p else gxp))

    return Tensor._make(out, parents, backward)


# -- resampling ------------------------------------------------------------------------

def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    f = int(factor)
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)

    def backward(g):
        sh = g.shape[:-2] + (x.shape[-2], f, x.shape[-1], f)
        x._accumulate(g.reshape(sh).sum(axis=(-3, -1)))

    return Tensor._make(out, (x,), backward)


def _interp_matrix(n_out, n_in, dtype):
    """Half-pixel-centre linear interpolation weights (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i0 + 1] += frac
    return m


def upsample_bilinear(x, size):
    """Bilinear resize of the last two axes to ``size = (H, W)``."""
    x = as_tensor(x)
    ho, wo = size
    ah = _interp_matrix(ho, x.shape[-2], x.dtype)
    aw = _interp_matrix(wo, x.shape[-1], x.dtype)
    out = ah @ x.data @ aw.T

    def backward(g):
        x._accumulate(ah.T @ g @ aw)

    return Tensor._make(out, (x,), backward)


BORDER_TOLERANCE = 1e-4


def bilinear_sample(grid, coords):
    """Sample a channels-last grid at continuous pixel positions.

    ``grid`` is H x W x C, or B x H x W x C with ``coords`` of shape
    B x ... x 2. ``coords[..., 0]`` is x (column) and ``coords[..., 1]`` is
    y (row), with integer values at pixel centres. Returns ``(values, valid)``;
    samples outside [0, W-1] x [0, H-1] (give or take ``BORDER_TOLERANCE``
    pixels of roundoff) are zero, flagged invalid, and pass no gradient.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    batched = grid.ndim == 4
    if grid.ndim not in (3, 4) or coords.shape[-1] != 2:
        raise ContractError(f"bilinear_sample: bad shapes grid {grid.shape}, coords {coords.shape}")
    if batched and coords.shape[0] != grid.shape[0]:
        raise ContractError("bilinear_sample: batch size mismatch")
    h, w, c = grid.shape[-3:]
    if h < 2 or w < 2:
        raise ContractError("bilinear_sample needs a grid of at least 2 x 2")
    cd = coords.data
    if not np.all(np.isfinite(cd)):
        raise ContractError("bilinear_sample: non-finite coordinates")

    x, y = cd[..., 0], cd[..., 1]
    # roundoff can push exact border samples a hair outside; accept and clamp those
    tol = BORDER_TOLERANCE
    valid = (x >= -tol) & (x <= w - 1 + tol) & (y >= -tol) & (y <= h - 1 + tol)
    x, y = np.clip(x, 0, w - 1), np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.intp)
    fx = np.where(valid, x - x0, 0.0).astype(grid.dtype)
    fy = np.where(valid, y - y0, 0.0).astype(grid.dtype)

    g = grid.data
    flat = g.reshape(-1, c)
    if batched:
        lead = cd.shape[:-1]
        base = np.arange(grid.shape[0]).reshape((-1,) + (1,) * (len(lead) - 1)) * (h * w)
        i00 = base + y0 * w + x0
    else:
        i00 = y0 * w + x0
    corners = (i00, i00 + 1, i00 + w, i00 + w + 1)
    v00, v01, v10, v11 = (np.take(flat, i, axis=0) for i in corners)
    wx, wy = fx[..., None], fy[..., None]
    # weighted form keeps lattice points exact at either end of a cell
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    vmask = valid[..., None].astype(grid.dtype)
    out = (top * (1 - wy) + bot * wy) * vmask

    def backward(gr):
        gr = gr * vmask
        if grid.requires_grad:
            w00 = (1 - wx) * (1 - wy)
            w01 = wx * (1 - wy)
            w10 = (1 - wx) * wy
            w11 = wx * wy
            rows = np.concatenate([i.ravel() for i in corners])
            wts = np.concatenate([ww.ravel() for ww in (w00, w01, w10, w11)])
            npts = x0.size
            cols = np.tile(np.arange(npts), 4)
            scatter = sparse.csr_matrix((wts, (rows, cols)), shape=(g.size // c, npts))
            acc = scatter @ gr.reshape(npts, c)
            grid._accumulate(np.asarray(acc, dtype=g.dtype).reshape(g.shape))
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * gr
            dy = (bot - top) * gr
            gc = np.stack([dx.sum(-1), dy.sum(-1)], axis=-1).astype(cd.dtype)
            coords._accumulate(gc)

    return Tensor._make(out, (grid, coords), backward), valid


# -- attention -------------------------------------------------------------------------

def scaled_dot_attention(q, k, v, heads, w_out=None, b_out=None, key_mask=None,
                         return_weights=False):
    """Multi-head scaled dot-product attention over the last two axes.

    ``q`` is ... x Tq x d, ``k`` is ... x Tk x d and ``v`` is ... x Tk x dv.
    Each head attends with ``softmax(q k^T / sqrt(d / heads)) v``; the heads
    are concatenated and mixed by ``w_out`` (dv x dv, stored out x in) and
    ``b_out``. ``key_mask`` (broadcastable to ... x Tk, True = keep) drops
    padded keys from every softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d, dv = q.shape[-1], v.shape[-1]
    if heads < 1 or d % heads or dv % heads:
        raise ContractError(f"feature widths ({d}, {dv}) not divisible by {heads} heads")
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ContractError("attention key/value shape mismatch")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise ContractError("attention needs at least one query and one key")
    dh, dvh = d // heads, dv // heads

    def split(t, width):
        lead = t.shape[:-2]
        t = reshape(t, lead + (t.shape[-2], heads, width))
        return swapaxes(t, -3, -2)  # ... x heads x T x width

    qh, kh, vh = split(q, dh), split(k, dh), split(v, dvh)
    scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, -1e9).astype(scores.dtype)
        scores = add(scores, np.expand_dims(np.expand_dims(bias, -2), -3))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # ... x heads x Tq x dvh
    ctx = swapaxes(ctx, -3, -2)
    ctx = reshape(ctx, ctx.shape[:-2] + (dv,))
    if w_out is not None:
        ctx = linear(ctx, w_out, b_out)
    if return_weights:
        return ctx, weights
    return ctx

