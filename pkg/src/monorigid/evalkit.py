"""Depth evaluation: the seven standard metrics, median scaling, depth cap
and the static/dynamic category breakdown with per-category means.

Sums go through ``math.fsum`` (exactly rounded), so every metric is
independent of pixel order and reproducible bit for bit.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .diffcore import ContractError

METRICS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
CATEGORIES = ("all", "static", "dynamic", "per_category_mean")
POOLING = "global pixel pooling per category; median scaling once over all valid pixels"


@dataclass
class MetricsConfig:
    depth_cap: float = 80.0
    min_depth: float = 1e-3
    delta_thresholds: tuple = (1.25, 1.25 ** 2, 1.25 ** 3)
    median_scaling: bool = True

    def __post_init__(self):
        self.delta_thresholds = tuple(float(t) for t in self.delta_thresholds)
        if not self.depth_cap > self.min_depth > 0:
            raise ContractError("need depth_cap > min_depth > 0")
        if len(self.delta_thresholds) != 3:
            raise ContractError("need three delta thresholds")

    def to_dict(self):
        d = asdict(self)
        d["delta_thresholds"] = list(self.delta_thresholds)
        return d


def lower_median(x):
    """Median taking the lower of the two middle values for even counts."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if x.size == 0:
        raise ContractError("median of an empty set")
    return float(x[(x.size - 1) // 2])


def median_scale(pred, gt, valid, return_factor=False):
    """``pred * (median(gt[valid]) / median(pred[valid]))``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    if not valid.any():
        raise ContractError("median scaling needs at least one valid pixel")
    if np.any(gt[valid] <= 0):
        raise ContractError("ground truth must be positive on valid pixels")
    mp = lower_median(pred[valid])
    if mp == 0:
        raise ContractError("median of the prediction is zero")
    factor = lower_median(gt[valid]) / mp
    return (pred * factor, factor) if return_factor else pred * factor


def _log(a):
    # math.log keeps the logarithm identical to a scalar reference
    return np.fromiter(map(math.log, a.tolist()), dtype=np.float64, count=a.size)


def _metrics_flat(p, g, thresholds):
    """Metrics of already scaled and clamped 1-D arrays (non-empty)."""
    n = p.size
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    dlog = _log(p) - _log(g)
    out = {
        "abs_rel": math.fsum((np.abs(diff) / g).tolist()) / n,
        "sq_rel": math.fsum((diff * diff / g).tolist()) / n,
        "rmse": math.sqrt(math.fsum((diff * diff).tolist()) / n),
        "rmse_log": math.sqrt(math.fsum((dlog * dlog).tolist()) / n),
    }
    for k, t in enumerate(thresholds, 1):
        out[f"delta{k}"] = int(np.count_nonzero(ratio < t)) / n
    return out


def _prepare(pred, gt, valid):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ContractError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    return pred, gt, valid & np.isfinite(gt) & (gt > 0)


def depth_metrics(pred, gt, valid, config=None):
    """Seven metrics over ``valid`` pixels, or None when none are valid.

    Order: optional median scaling, clamping of both maps to
    [min_depth, depth_cap], then the metric sums.
    """
    config = config or MetricsConfig()
    pred, gt, valid = _prepare(pred, gt, valid)
    if not valid.any():
        return None
    if config.median_scaling:
        pred = median_scale(pred, gt, valid)
    p = np.clip(pred[valid], config.min_depth, config.depth_cap)
    g = np.clip(gt[valid], config.min_depth, config.depth_cap)
    return _metrics_flat(p, g, config.delta_thresholds)


@dataclass
class MetricsReport:
    rows: dict            # category -> metrics dict, or None when absent
    counts: dict          # all / static / dynamic valid pixel counts
    static_fraction: float
    scale_factor: float
    metadata: dict

    def to_dict(self):
        return {"rows": self.rows, "counts": self.counts, "static_fraction": self.static_fraction,
                "scale_factor": self.scale_factor, "metadata": self.metadata}


def category_report(pred, gt, valid, dynamic_mask, config=None):
    """Metrics over all valid pixels, the static and dynamic subsets, and their mean.

    Median scaling is one global correction over all valid pixels; the
    categories are sliced afterwards. An empty category is reported as None,
    and so is the per-category mean that depends on it.
    """
    config = config or MetricsConfig()
    pred, gt, valid = _prepare(pred, gt, valid)
    dyn = np.asarray(dynamic_mask, dtype=bool)
    if dyn.shape != gt.shape:
        raise ContractError(f"dynamic mask shape {dyn.shape} != depth shape {gt.shape}")
    if not valid.any():
        raise ContractError("no valid pixels to evaluate")
    factor = 1.0
    if config.median_scaling:
        pred, factor = median_scale(pred, gt, valid, return_factor=True)
    p = np.clip(pred, config.min_depth, config.depth_cap)
    g = np.clip(gt, config.min_depth, config.depth_cap)
    sel = {"all": valid, "static": valid & ~dyn, "dynamic": valid & dyn}
    rows = {k: (_metrics_flat(p[m], g[m], config.delta_thresholds) if m.any() else None)
            for k, m in sel.items()}
    if rows["static"] is not None and rows["dynamic"] is not None:
        rows["per_category_mean"] = {k: (rows["static"][k] + rows["dynamic"][k]) / 2 for k in METRICS}
    else:
        rows["per_category_mean"] = None
    counts = {k: int(np.count_nonzero(m)) for k, m in sel.items()}
    return MetricsReport(rows=rows, counts=counts,
                         static_fraction=counts["static"] / counts["all"],
                         scale_factor=factor,
                         metadata={"pooling": POOLING, "config": config.to_dict()})


# -- files ----------------------------------------------------------------------------------

def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_report(report, path, extra_metadata=None):
    """Write ``<path>`` as JSON and a sibling ``.csv`` with one row per category."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    d["metadata"] = {**d["metadata"], **(extra_metadata or {})}
    path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "pixels", *METRICS])
        for cat in CATEGORIES:
            row = report.rows[cat]
            count = report.counts.get(cat, "")
            if row is None:
                w.writerow([cat, count, *(["absent"] * len(METRICS))])
            else:
                w.writerow([cat, count, *(repr(row[k]) for k in METRICS)])
    return path, csv_path


def write_depth_png(path, depth, depth_max=80.0):
    """16-bit grayscale depth image plus a JSON side-car with the gray-to-depth map."""
    path = Path(path)
    d = np.clip(np.asarray(depth, dtype=np.float64), 0.0, depth_max)
    gray = np.round(d / depth_max * 65535).astype(np.uint16)
    Image.fromarray(gray).save(path)
    side = {"mapping": "linear", "formula": "depth = gray * scale", "scale": depth_max / 65535,
            "gray_max": 65535, "depth_max": depth_max, "units": "scene units"}
    path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return path


def read_depth_png(path):
    side = json.loads(Path(path).with_suffix(".json").read_text())
    return np.asarray(Image.open(path), dtype=np.float64) * side["scale"]


def read_dynamic_mask(mask_dir, seq_id, index, shape):
    """External dynamic mask ``<dir>/<seq_id>/frame_<index>.png`` (non-zero = dynamic)."""
    path = Path(mask_dir) / seq_id / f"frame_{index}.png"
    if not path.exists():
        raise OSError(f"dynamic mask not found: {path}")
    m = np.asarray(Image.open(path)) != 0
    if m.ndim == 3:
        m = m.any(axis=-1)
    if m.shape != tuple(shape):
        raise ContractError(f"{path}: mask shape {m.shape} != image shape {tuple(shape)}")
    return m


def evaluate(checkpoint, data_root, report_path, dynamic_mask_dir=None, config=None,
             export_depth_dir=None, batch=8):
    """Evaluate a checkpoint's depth branch on every frame of a dataset."""
    from .synthscene import dynamic_mask, read_dataset
    from .trainer import load_model

    config = config or MetricsConfig()
    model, meta = load_model(checkpoint)
    manifest, sequences = read_dataset(data_root)
    preds, gts, dyns = [], [], []
    frames = [f for seq in sequences for f in seq]
    if not frames:
        raise ContractError(f"{data_root}: dataset has no frames")
    for start in range(0, len(frames), batch):
        chunk = frames[start:start + batch]
        preds.append(model.predict_depth(np.stack([f.image for f in chunk])))
    pred = np.concatenate(preds).astype(np.float64)
    for f in frames:
        gts.append(f.gt_depth)
        if dynamic_mask_dir is not None:
            dyns.append(read_dynamic_mask(dynamic_mask_dir, f.seq_id, f.index, f.gt_depth.shape))
        else:
            dyns.append(dynamic_mask(f))
    gt = np.stack(gts).astype(np.float64)
    report = category_report(pred, gt, np.ones(gt.shape, bool), np.stack(dyns), config)
    extra = {"checkpoint_sha256": file_digest(checkpoint), "weights": meta.get("weights", "unknown"),
             "frames": len(frames), "dataset_format": manifest.get("format"),
             "dynamic_masks": "external" if dynamic_mask_dir is not None else "ground truth motion"}
    paths = write_report(report, report_path, extra)
    if export_depth_dir is not None:
        out = Path(export_depth_dir)
        for f, d in zip(frames, pred):
            (out / f.seq_id).mkdir(parents=True, exist_ok=True)
            write_depth_png(out / f.seq_id / f"frame_{f.index}_pred.png", d * report.scale_factor,
                            config.depth_cap)
    return report, paths
