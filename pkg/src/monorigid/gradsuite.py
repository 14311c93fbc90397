"""Gradient-check suite: every diffcore primitive plus the full warp-to-loss pipeline.

Each case builder takes a numpy Generator and returns ``(params, fn)`` where
``fn()`` rebuilds the graph from ``params``. All checks run in 64-bit.
"""
from __future__ import annotations

import numpy as np

from .diffcore import Tensor, bilinear_sample, grad_check, ops, precision, scaled_dot_attention
from .geometry import CameraIntrinsics
from .losses import LossConfig, total_loss

TOLERANCE = 1e-4
SEEDS = tuple(range(10))
PIPELINE_K = CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=5.5, width=16, height=12)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def weighted(out, rng):
    """Reduce a tensor to a scalar with random weights so every entry matters."""
    return ops.sum(ops.mul(out, rng.normal(size=out.shape)))


def _binary(op, pos_b=False):
    def build(rng):
        a = t64(rng.normal(size=(3, 4)))
        b = rng.normal(size=(1, 4))
        b = t64(np.abs(b) + 0.5 if pos_b else b)
        return [a, b], lambda: op(a, b)
    return build


def _unary(op, positive=False):
    def build(rng):
        x = rng.normal(size=(4, 5))
        a = t64(np.abs(x) + 0.3 if positive else x)
        return [a], lambda: op(a)
    return build


def _conv(stride, pad, k):
    def build(rng):
        x = t64(rng.normal(size=(2, 3, 7, 6)))
        w = t64(rng.normal(size=(4, 3, k, k)))
        b = t64(rng.normal(size=(4,)))
        return [x, w, b], lambda: ops.conv2d(x, w, b, stride=stride, padding=pad)
    return build


def _reduce(fn, axis):
    def build(rng):
        a = t64(rng.normal(size=(3, 4, 2)))
        return [a], lambda: fn(a, axis)
    return build


def _matmul(rng):
    a, b = t64(rng.normal(size=(2, 3, 4))), t64(rng.normal(size=(4, 5)))
    return [a, b], lambda: ops.matmul(a, b)


def _softmax(rng):
    a = t64(rng.normal(size=(3, 5)))
    return [a], lambda: ops.softmax(a, axis=-1)


def _layer_norm(rng):
    a, g, b = t64(rng.normal(size=(3, 6))), t64(rng.normal(size=6)), t64(rng.normal(size=6))
    return [a, g, b], lambda: ops.layer_norm(a, g, b)


def _up_nearest(rng):
    a = t64(rng.normal(size=(2, 3, 3, 4)))
    return [a], lambda: ops.upsample_nearest(a, 2)


def _up_bilinear(rng):
    a = t64(rng.normal(size=(2, 3, 4)))
    return [a], lambda: ops.upsample_bilinear(a, (7, 9))


def _concat(rng):
    a, b = t64(rng.normal(size=(2, 3))), t64(rng.normal(size=(2, 2)))
    return [a, b], lambda: ops.concatenate([a, b], axis=1)


def _reshape(rng):
    a = t64(rng.normal(size=(2, 6)))
    return [a], lambda: ops.reshape(a, (3, 4))


def _transpose(rng):
    a = t64(rng.normal(size=(2, 3, 4)))
    return [a], lambda: ops.transpose(a, (2, 0, 1))


def _getitem(rng):
    a = t64(rng.normal(size=(4, 5)))
    return [a], lambda: a[1:3, ::2]


def _sample(rng):
    grid = t64(rng.normal(size=(5, 6, 2)))
    c = t64(np.stack([rng.uniform(-0.5, 5.5, 12), rng.uniform(-0.5, 4.5, 12)], axis=-1))
    return [grid, c], lambda: bilinear_sample(grid, c)[0]


def _sample_batched(rng):
    grid = t64(rng.normal(size=(2, 4, 5, 3)))
    c = t64(np.stack([rng.uniform(0.1, 3.9, (2, 7)), rng.uniform(0.1, 2.9, (2, 7))], axis=-1))
    return [grid, c], lambda: bilinear_sample(grid, c)[0]


def _attention(rng):
    q, k, v = (t64(rng.normal(size=(3, 4))) for _ in range(3))
    wo, bo = t64(rng.normal(size=(4, 4))), t64(rng.normal(size=4))
    return [q, k, v, wo, bo], lambda: scaled_dot_attention(q, k, v, 2, wo, bo)


PRIMITIVES = {
    "add": _binary(ops.add), "sub": _binary(ops.sub), "mul": _binary(ops.mul),
    "div": _binary(ops.div, pos_b=True), "matmul": _matmul,
    "conv2d_3x3_s1": _conv(1, 1, 3), "conv2d_3x3_s2": _conv(2, 1, 3), "conv2d_1x1": _conv(1, 0, 1),
    "sigmoid": _unary(ops.sigmoid), "elu": _unary(ops.elu), "exp": _unary(ops.exp),
    "log": _unary(ops.log, positive=True), "sqrt": _unary(ops.sqrt, positive=True),
    "abs": _unary(ops.abs, positive=True), "sin": _unary(ops.sin), "cos": _unary(ops.cos),
    "softmax": _softmax, "layer_norm": _layer_norm,
    "sum": _reduce(ops.sum, 1), "mean": _reduce(ops.mean, (0, 2)),
    "upsample_nearest": _up_nearest, "upsample_bilinear": _up_bilinear,
    "concatenate": _concat, "reshape": _reshape, "transpose": _transpose, "getitem": _getitem,
    "bilinear_sample": _sample, "bilinear_sample_batched": _sample_batched,
    "scaled_dot_attention": _attention,
}


def check_primitive(name, seed):
    """GradReport of one primitive on one seed."""
    rng = np.random.default_rng(seed)
    params, fn = PRIMITIVES[name](rng)
    wseed = 1000 + seed
    with precision(np.float64):
        return grad_check(lambda: weighted(fn(), np.random.default_rng(wseed)), params, eps=1e-6)


def _smooth_image(rng, h, w):
    # low-frequency colour image keeps bilinear kinks mild for finite differences
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.full((h, w, 3), 0.5)
    for _ in range(3):
        fx, fy = rng.uniform(0.2, 0.6, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        img += 0.1 * np.sin(fx * xs[..., None] + fy * ys[..., None] + ph)
    return img[None]


def pipeline_problem(seed, scales=2):
    """Small two-source problem with one moving instance for the warp-to-loss chain."""
    rng = np.random.default_rng(seed)
    h, w = PIPELINE_K.height, PIPELINE_K.width
    tgt = _smooth_image(rng, h, w)
    srcs = [_smooth_image(rng, h, w) for _ in range(2)]
    depths = [rng.uniform(4, 6, size=(1, h // 2 ** k, w // 2 ** k)) for k in range(scales)]
    egos = [rng.normal(scale=[0.02] * 3 + [0.3] * 3, size=(1, 6)) for _ in range(2)]
    masks = np.zeros((1, 1, h, w), bool)
    masks[0, 0, 3:8, 4:10] = True
    inst = [rng.normal(scale=[0.01] * 3 + [0.1] * 3, size=(1, 1, 6)) for _ in range(2)]
    return tgt, srcs, depths, egos, masks, inst


def check_pipeline(seed):
    """GradReports (depth, poses) of depth + poses -> warp -> sample -> total loss."""
    tgt, srcs, depths, egos, masks, inst = pipeline_problem(seed)
    with precision(np.float64):
        d = [t64(x) for x in depths]
        e = [t64(x) for x in egos]
        p = [t64(x) for x in inst]
        cfg = LossConfig(scales=2, alpha_d=0.01)
        f = lambda: total_loss(tgt, srcs, d, PIPELINE_K, e, masks, p, cfg).total  # noqa: E731
        # step sizes follow the parameter magnitudes (depth ~5, poses ~0.1)
        return grad_check(f, d, eps=1e-4), grad_check(f, e + p, eps=1e-6)


def run_suite(names=None, pipeline=True, seeds=SEEDS):
    """Yield ``(case, seed, max_rel_error)`` for the requested cases."""
    for name in (sorted(PRIMITIVES) if names is None else names):
        for s in seeds:
            yield name, s, check_primitive(name, s).max_rel_error
    if pipeline:
        for s in seeds:
            yield "pipeline", s, max(r.max_rel_error for r in check_pipeline(s))
