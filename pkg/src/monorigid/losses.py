"""Photometric, SSIM and edge-aware smoothness losses and the total objective.

Images are channels-last (... x H x W x C); depth and disparity maps are
... x H x W.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError, Tensor, as_tensor, ops
from .geometry import inverse_warp, piecewise_rigid_warp

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossConfig:
    alpha: float = 0.15
    alpha_d: float = 0.001
    scales: int = 4
    source_aggregation: str = "mean"
    object_frame: str = "source"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.alpha_d < 0:
            raise ContractError("alpha_d must be non-negative")
        if self.scales < 1:
            raise ContractError("need at least one scale")
        if self.source_aggregation != "mean":
            raise ContractError("only mean source aggregation is supported")


@dataclass
class LossBreakdown:
    total: Tensor
    photometric: Tensor
    smoothness: Tensor
    per_scale: list = field(default_factory=list)
    per_source: list = field(default_factory=list)
    skipped_terms: int = 0

    def row(self, step):
        return {
            "step": step,
            "total": float(self.total.data),
            "photometric": float(self.photometric.data),
            "smoothness": float(self.smoothness.data),
            "skipped_terms": self.skipped_terms,
        }


LOG_FIELDS = ["step", "total", "photometric", "smoothness", "skipped_terms"]


def write_loss_log(path, rows, fields=LOG_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# -- SSIM ------------------------------------------------------------------------------

def _sl(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _sum3(a, axis, adjoint=False):
    """Sum of each sample and its two neighbours along ``axis`` with reflection
    padding, or the adjoint of that map."""
    n, d = a.shape[axis], a.ndim
    out = a.copy()
    out[_sl(d, axis, slice(1, None))] += a[_sl(d, axis, slice(None, -1))]
    out[_sl(d, axis, slice(None, -1))] += a[_sl(d, axis, slice(1, None))]
    if adjoint:
        # the padded samples p[0] = x[1] and p[n+1] = x[n-2] fold back
        out[_sl(d, axis, 1)] += a[_sl(d, axis, 0)]
        out[_sl(d, axis, n - 2)] += a[_sl(d, axis, n - 1)]
    else:
        out[_sl(d, axis, 0)] += a[_sl(d, axis, 1)]
        out[_sl(d, axis, n - 1)] += a[_sl(d, axis, n - 2)]
    return out


def _box3_np(x, axes, adjoint=False):
    for ax in (reversed(axes) if adjoint else axes):
        x = _sum3(x, ax, adjoint)
    return x * x.dtype.type(1.0 / 9.0)


def ssim_map(a, b):
    """Per-pixel SSIM of two ... x H x W x C images, averaged over channels.

    Computed as one graph node. With ``S = A1 A2 / (B1 B2)`` (A1 = 2 mu_a mu_b + C1,
    A2 = 2 cov + C2, B1 = mu_a^2 + mu_b^2 + C1, B2 = var_a + var_b + C2), the
    backward pass pulls dS/d(mu_x, E[x^2], E[ab]) through the box-filter adjoint.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"ssim_map shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 3 or a.shape[-3] < 2 or a.shape[-2] < 2:
        raise ContractError("ssim_map needs ... x H x W x C inputs with at least 2 x 2 pixels")
    dtype = np.result_type(a.dtype, b.dtype)
    x, y = a.data.astype(dtype, copy=False), b.data.astype(dtype, copy=False)
    axes = (x.ndim - 3, x.ndim - 2)
    mu_x, mu_y = _box3_np(x, axes), _box3_np(y, axes)
    exx, eyy, exy = _box3_np(x * x, axes), _box3_np(y * y, axes), _box3_np(x * y, axes)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (exy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = (exx - mu_x * mu_x) + (eyy - mu_y * mu_y) + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    nc = x.shape[-1]

    def grad_for(gs, u, mu_u, mu_v):
        d_mu = gs * (2 * mu_v / a1 - 2 * mu_v / a2 - 2 * mu_u / b1 + 2 * mu_u / b2)
        d_euu = -gs / b2
        d_exy = 2 * gs / a2
        return (_box3_np(d_mu, axes, True) + 2 * u * _box3_np(d_euu, axes, True)
                + (y if u is x else x) * _box3_np(d_exy, axes, True))

    def backward(g):
        gs = smap * (g[..., None] / nc)
        if a.requires_grad:
            a._accumulate(grad_for(gs, x, mu_x, mu_y).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accumulate(grad_for(gs, y, mu_y, mu_x).astype(b.dtype, copy=False))

    return Tensor._make(smap.mean(axis=-1), (a, b), backward)


def photometric_map(target, recon, alpha):
    """``(1 - alpha) * (1 - SSIM) / 2 + alpha * L1`` per pixel (L1 averaged over channels)."""
    target, recon = as_tensor(target), as_tensor(recon)
    dssim = ops.mul(ops.sub(1.0, ssim_map(target, recon)), 0.5)
    l1 = ops.mean(ops.abs(ops.sub(target, recon)), axis=-1)
    return ops.add(ops.mul(dssim, 1.0 - alpha), ops.mul(l1, alpha))


def fill_invalid(target, recon, valid):
    """Replace invalid reconstruction pixels by the (constant) target.

    Keeps unobservable pixels from leaking into the SSIM windows of their
    valid neighbours; they carry no gradient either way.
    """
    keep = np.asarray(valid, dtype=bool)[..., None]
    recon = as_tensor(recon)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=recon.dtype)
    return ops.add(ops.mul(recon, keep.astype(recon.dtype)), np.where(keep, 0.0, t).astype(recon.dtype))


def photometric_loss(target, recon, valid, alpha=0.15):
    """Mean of the photometric map over valid pixels."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ContractError("photometric_loss: no valid pixels")
    pe = photometric_map(target, fill_invalid(target, recon, valid), alpha)
    return ops.div(ops.sum(ops.mul(pe, valid.astype(pe.dtype))), float(n))


# -- smoothness ---------------------------------------------------------------------------

def smoothness_loss(disparity, image):
    """Edge-aware first-order smoothness of the mean-normalised disparity."""
    disparity = as_tensor(disparity)
    if np.any(disparity.data <= 0):
        raise ContractError("smoothness_loss needs positive disparity")
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    d = ops.div(disparity, ops.mean(disparity, axis=(-2, -1), keepdims=True))
    dx = ops.abs(ops.sub(d[..., :, 1:], d[..., :, :-1]))
    dy = ops.abs(ops.sub(d[..., 1:, :], d[..., :-1, :]))
    wx = np.exp(-np.abs(img[..., :, 1:, :] - img[..., :, :-1, :]).mean(-1)).astype(disparity.dtype)
    wy = np.exp(-np.abs(img[..., 1:, :, :] - img[..., :-1, :, :]).mean(-1)).astype(disparity.dtype)
    return ops.add(ops.mean(ops.mul(dx, wx)), ops.mean(ops.mul(dy, wy)))


def downsample_image(img, factor):
    """Area-average a ... x H x W x C array by an integer factor."""
    if factor == 1:
        return img
    h, w = img.shape[-3] // factor, img.shape[-2] // factor
    lead = img.shape[:-3]
    v = img[..., :h * factor, :w * factor, :].reshape(lead + (h, factor, w, factor, img.shape[-1]))
    return v.mean(axis=(-4, -2))


# -- total objective -----------------------------------------------------------------------

def total_loss(target, sources, depths, K, ego_poses, instance_masks=None, instance_poses=None,
               config=None):
    """Multi-scale photometric + smoothness objective for one batch.

    target        B x H x W x 3 array
    sources       list of J source images, each B x H x W x 3
    depths        list of ``config.scales`` depth tensors, scale k is B x H/2^k x W/2^k
    ego_poses     list of J target-to-source poses, each B x 6 (or B x 4 x 4)
    instance_masks  B x N x H x W binary masks (disjoint) or None
    instance_poses  list of J tensors, each B x N x 6, or None
    """
    config = config or LossConfig()
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    b, h, w, _ = target.shape
    if len(depths) != config.scales:
        raise ContractError(f"expected {config.scales} depth scales, got {len(depths)}")
    nsrc = len(sources)
    if len(ego_poses) != nsrc:
        raise ContractError("one ego pose per source is required")
    depths = [as_tensor(d) for d in depths]
    dtype = depths[0].dtype.type
    use_instances = instance_masks is not None and instance_poses is not None \
        and np.asarray(instance_masks).shape[1] > 0

    full = []
    for k, d in enumerate(depths):
        full.append(d if d.shape[-2:] == (h, w) else ops.upsample_bilinear(d, (h, w)))

    combos = [(k, j) for k in range(config.scales) for j in range(nsrc)]
    depth_all = ops.concatenate([full[k] for k, j in combos], axis=0)
    ego_all = ops.concatenate([as_tensor(ego_poses[j]) for k, j in combos], axis=0)
    src_all = np.concatenate([np.asarray(sources[j], dtype=dtype) for k, j in combos], axis=0)
    tgt_all = np.concatenate([target.astype(dtype)] * len(combos), axis=0)
    masks_all = poses_all = None
    if use_instances:
        masks_all = np.concatenate([np.asarray(instance_masks)] * len(combos), axis=0)
        poses_all = ops.concatenate([as_tensor(instance_poses[j]) for k, j in combos], axis=0)

    coords, in_front = piecewise_rigid_warp(depth_all, K, ego_all, masks_all, poses_all,
                                            object_frame=config.object_frame)
    recon, valid = inverse_warp(Tensor(src_all, dtype=dtype), coords, in_front)
    pe = photometric_map(Tensor(tgt_all, dtype=dtype), fill_invalid(tgt_all, recon, valid), config.alpha)
    counts = valid.reshape(len(combos) * b, -1).sum(axis=1)
    keep = counts > 0
    skipped = int((~keep).sum())
    if not keep.any():
        raise ContractError("every photometric term has zero valid pixels")
    if skipped:
        log.warning("skipping %d photometric terms with no valid pixels", skipped)
    per_item = ops.div(ops.sum(ops.mul(pe, valid.astype(dtype)), axis=(1, 2)),
                       np.maximum(counts, 1).astype(dtype))
    weights = keep.astype(dtype) / keep.sum()
    photometric = ops.sum(ops.mul(per_item, weights))

    vals = per_item.data.reshape(len(combos), b)
    kept = keep.reshape(len(combos), b)
    per_term = np.array([vals[i][kept[i]].mean() if kept[i].any() else np.nan for i in range(len(combos))])
    per_term = per_term.reshape(config.scales, nsrc)
    per_scale = [float(np.nanmean(r)) if np.isfinite(r).any() else float("nan") for r in per_term]
    per_source = [float(np.nanmean(c)) if np.isfinite(c).any() else float("nan") for c in per_term.T]

    smooth = None
    for k, d in enumerate(depths):
        factor = h // d.shape[-2]
        img_k = downsample_image(target, factor)
        s = ops.mul(smoothness_loss(ops.div(1.0, d), img_k), 1.0 / (2 ** k))
        smooth = s if smooth is None else ops.add(smooth, s)
    smooth = ops.mul(smooth, 1.0 / config.scales)

    total = ops.add(photometric, ops.mul(smooth, config.alpha_d)) if config.alpha_d else photometric
    return LossBreakdown(total=total, photometric=photometric, smoothness=smooth,
                         per_scale=per_scale, per_source=per_source, skipped_terms=skipped)
