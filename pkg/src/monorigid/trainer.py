"""Training loop: Adam, EMA shadow weights, step learning-rate drop,
flip/colour augmentation, CSV logging and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractError, load_checkpoint, save_checkpoint
from .losses import LossConfig, total_loss
from .nets import ModelConfig, MonoRigidModel
from .synthscene import read_dataset

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "train_log.csv"
TRAIN_LOG_FIELDS = ["step", "epoch", "lr", "total", "photometric", "smoothness", "skipped_terms",
                    "rejected_steps"]


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss); the message names the diagnostic dump."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ema_decay: float = 0.995
    epochs: int = 20
    lr_drop_epoch: int = 15
    lr_after_drop: float = 1e-5
    batch: int = 2
    flip_prob: float = 0.5
    jitter_prob: float = 1.0
    jitter_strength: float = 0.2
    sources: tuple = (-1, 1)
    alpha: float = 0.15
    alpha_d: float = 0.001
    scales: int = 4
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.sources = tuple(int(s) for s in self.sources)
        if not self.lr > 0 or not self.lr_after_drop > 0:
            raise ContractError("learning rates must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ContractError("ema_decay must lie in [0, 1)")
        if not all(0 <= b < 1 for b in self.betas):
            raise ContractError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch < 1:
            raise ContractError("epochs must be >= 0 and batch >= 1")
        # the drop must fall inside the run; an empty run (epochs = 0) has nothing to schedule
        if self.epochs > 0 and not self.lr_drop_epoch < self.epochs:
            raise ContractError(f"lr_drop_epoch ({self.lr_drop_epoch}) must be < epochs ({self.epochs})")
        if not self.sources or 0 in self.sources or len(set(self.sources)) != len(self.sources):
            raise ContractError("sources must be distinct non-zero frame offsets")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.jitter_prob <= 1):
            raise ContractError("probabilities must lie in [0, 1]")

    def lr_at(self, epoch):
        return self.lr if epoch < self.lr_drop_epoch else self.lr_after_drop

    def loss_config(self):
        return LossConfig(alpha=self.alpha, alpha_d=self.alpha_d, scales=self.scales)

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["sources"] = list(self.betas), list(self.sources)
        return d


def load_run_config(path):
    """Read a JSON run config ``{"model": {...}, "train": {...}}``; missing keys take defaults."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ContractError(f"{path}: invalid JSON ({e})") from None
    unknown = set(d) - {"model", "train"}
    if unknown:
        raise ContractError(f"{path}: unknown sections {sorted(unknown)}")
    try:
        return ModelConfig.from_dict(d.get("model", {})), TrainConfig(**d.get("train", {}))
    except TypeError as e:
        raise ContractError(f"{path}: {e}") from None


def dump_run_config(model_config, train_config):
    return json.dumps({"model": model_config.to_dict(), "train": train_config.to_dict()},
                      indent=1, sort_keys=True)


# -- optimiser ------------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    rejected_steps: int = 0

    @classmethod
    def create(cls, params):
        shapes = [np.shape(_data(p)) for p in params]
        return cls([np.zeros(s) for s in shapes], [np.zeros(s) for s in shapes])


def _data(p):
    return p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p


def adam_step(params, grads, state, config, lr=None):
    """Bias-corrected Adam update of ``params`` in place.

    A missing gradient counts as zero. Any non-finite gradient rejects the
    whole step: parameters and moments stay untouched and
    ``state.rejected_steps`` is incremented. Returns True when applied.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state differ in length")
    grads = [np.zeros(np.shape(_data(p))) if g is None else np.asarray(g, dtype=np.float64)
             for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != np.shape(_data(p)):
            raise ContractError(f"gradient shape {g.shape} != parameter shape {np.shape(_data(p))}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.rejected_steps += 1
        log.warning("non-finite gradient; step rejected (%d so far)", state.rejected_steps)
        return False
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data = _data(p)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        data[...] = (data.astype(np.float64) - upd).astype(data.dtype)
    return True


def ema_update(shadow, params, decay):
    """``shadow <- decay * shadow + (1 - decay) * params`` in place; returns ``shadow``."""
    if len(shadow) != len(params):
        raise ContractError("shadow and params differ in length")
    for s, p in zip(shadow, params):
        p = _data(p)
        if s.shape != np.shape(p):
            raise ContractError(f"shadow shape {s.shape} != parameter shape {np.shape(p)}")
        s *= decay
        s += (1 - decay) * p
    return shadow


# -- data -----------------------------------------------------------------------------------

@dataclass
class Batch:
    target: np.ndarray                 # B x H x W x 3, clean
    sources: list                      # per source offset, B x H x W x 3
    K: object
    masks: np.ndarray                  # B x N x H x W (zero for dummy slots)
    boxes: np.ndarray                  # B x N x 4, (x0, y0, x1, y1) pixel edges
    valid: np.ndarray                  # B x N
    net_target: np.ndarray = None      # jittered copies fed to the networks
    net_sources: list = field(default=None)

    def inputs(self):
        t = self.target if self.net_target is None else self.net_target
        s = self.sources if self.net_sources is None else self.net_sources
        return t, s


def triplet_index(sequences, offsets=(-1, 1)):
    """(sequence, frame) pairs whose every source offset exists; endpoints are excluded."""
    lo, hi = -min(min(offsets), 0), max(max(offsets), 0)
    return [(i, t) for i, seq in enumerate(sequences) for t in range(lo, len(seq) - hi)]


def instance_slots(frame, n_slots):
    """Oracle proposals of a target frame: masks, boxes and validity padded to ``n_slots``.

    When a frame holds more instances than slots, the largest masks are kept.
    """
    h, w = frame.instance_map.shape
    masks = np.zeros((n_slots, h, w), np.float32)
    boxes = np.tile(np.array([-0.5, -0.5, w - 0.5, h - 0.5]), (n_slots, 1))
    valid = np.zeros(n_slots, bool)
    insts = [i for i in frame.gt_instances.instances if i.mask.any()]
    insts = sorted(insts, key=lambda i: -int(i.mask.sum()))[:n_slots]
    for k, inst in enumerate(sorted(insts, key=lambda i: i.id)):
        ys, xs = np.nonzero(inst.mask)
        masks[k] = inst.mask
        boxes[k] = [xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5]
        valid[k] = True
    return masks, boxes, valid


def make_batch(sequences, items, offsets, n_slots):
    frames = [sequences[i][t] for i, t in items]
    Ks = {f.intrinsics for f in frames}
    if len(Ks) != 1:
        raise ContractError("all frames of a batch must share intrinsics")
    slots = [instance_slots(f, n_slots) for f in frames]
    return Batch(
        target=np.stack([f.image for f in frames]).astype(np.float32),
        sources=[np.stack([sequences[i][t + o].image for i, t in items]).astype(np.float32) for o in offsets],
        K=frames[0].intrinsics,
        masks=np.stack([s[0] for s in slots]),
        boxes=np.stack([s[1] for s in slots]),
        valid=np.stack([s[2] for s in slots]),
    )


def flip_batch(batch):
    """Mirror images, masks, boxes and the principal point horizontally."""
    w = batch.K.width
    boxes = batch.boxes.copy()
    boxes[..., 0], boxes[..., 2] = w - 1 - batch.boxes[..., 2], w - 1 - batch.boxes[..., 0]
    fl = lambda a: None if a is None else np.ascontiguousarray(a[:, :, ::-1])
    return Batch(
        target=fl(batch.target), sources=[fl(s) for s in batch.sources], K=batch.K.flipped(),
        masks=np.ascontiguousarray(batch.masks[..., ::-1]), boxes=boxes, valid=batch.valid.copy(),
        net_target=fl(batch.net_target),
        net_sources=None if batch.net_sources is None else [fl(s) for s in batch.net_sources],
    )


def mirror_pose_params(p):
    """Axis-angle/translation parameters of a motion seen in the mirrored image.

    Conjugating by diag(-1, 1, 1) flips rx's partners: (rx, -ry, -rz, -tx, ty, tz).
    """
    return np.asarray(p) * np.array([1, -1, -1, -1, 1, 1], dtype=np.asarray(p).dtype)


def colour_jitter(images, rng, strength=0.2):
    """Same random brightness, contrast and saturation for every frame of a sample.

    ``images`` is a list of B x H x W x 3 arrays (target then sources).
    """
    b = images[0].shape[0]
    fac = rng.uniform(1 - strength, 1 + strength, size=(3, b)).astype(np.float32)
    out = []
    for img in images:
        x = img * fac[0][:, None, None, None]
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        x = (x - mean) * fac[1][:, None, None, None] + mean
        gray = x.mean(axis=3, keepdims=True)
        x = (x - gray) * fac[2][:, None, None, None] + gray
        out.append(np.clip(x, 0.0, 1.0).astype(np.float32))
    return out


def augment(batch, rng, config):
    """Random flip (whole batch) and per-sample colour jitter of the network inputs."""
    if rng.random() < config.flip_prob:
        batch = flip_batch(batch)
    frames = [batch.target] + batch.sources
    jittered = colour_jitter(frames, rng, config.jitter_strength)
    apply = rng.random(batch.target.shape[0]) < config.jitter_prob
    net = [np.where(apply[:, None, None, None], j, f) for j, f in zip(jittered, frames)]
    batch.net_target, batch.net_sources = net[0], net[1:]
    return batch


# -- loss binding ---------------------------------------------------------------------------

def batch_loss(model, batch, loss_config):
    """Forward the heads on the (possibly jittered) inputs and score on clean images."""
    t_in, s_in = batch.inputs()
    rigid = model.config.piecewise_rigid and batch.valid.any()
    out = model(t_in, s_in, batch.boxes if rigid else None, batch.valid if rigid else None)
    if rigid:
        inst = [out.instances[:, :, i] for i in range(len(batch.sources))]
        masks = batch.masks
    else:
        inst, masks = None, None
    return total_loss(batch.target, batch.sources, out.depths, batch.K, out.ego, masks, inst, loss_config), out


# -- training -------------------------------------------------------------------------------

def model_metadata(model_config, train_config, steps, state, epochs_done):
    return {"model_config": model_config.to_dict(), "train_config": train_config.to_dict(),
            "weights": "ema", "steps": steps, "epochs": epochs_done,
            "rejected_steps": state.rejected_steps}


def load_model(path):
    """Model rebuilt from a checkpoint's config and (EMA) weights."""
    tensors, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise ContractError(f"{path}: checkpoint lacks a model config")
    model = MonoRigidModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(tensors)
    return model, meta


def _dump_batch(out_dir, step, batch, breakdown):
    path = Path(out_dir) / f"nan_dump_step{step}.npz"
    np.savez(path, target=batch.target, sources=np.stack(batch.sources), masks=batch.masks,
             boxes=batch.boxes, valid=batch.valid,
             net_target=batch.inputs()[0], net_sources=np.stack(batch.inputs()[1]))
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump({"step": step, "intrinsics": batch.K.to_dict(),
                   "total": float(breakdown.total.data), "photometric": float(breakdown.photometric.data),
                   "smoothness": float(breakdown.smoothness.data)}, fh, indent=1)
    return path


def train(data_root, model_config, train_config, out_dir, sequences=None, progress=None):
    """Train on the dataset at ``data_root`` and write the EMA checkpoint to ``out_dir``.

    Returns the checkpoint path. ``sequences`` may pass already-loaded frames.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sequences is None:
        _, sequences = read_dataset(data_root)
    tc = train_config
    items = triplet_index(sequences, tc.sources)
    if not items:
        raise ContractError(f"{data_root}: no triplets with sources {tc.sources}")
    if model_config.piecewise_rigid and model_config.instance.s != len(tc.sources):
        raise ContractError("instance head source count must match the training source offsets")

    model = MonoRigidModel(model_config, seed=tc.seed)
    params = model.parameters()
    names = list(model.named_parameters())
    state = OptimizerState.create(params)
    shadow = [p.data.astype(np.float64) for p in params]
    rng = np.random.default_rng([tc.seed, 1])
    loss_config = tc.loss_config()
    n_slots = model_config.instance.N

    step = 0
    with open(out_dir / LOG_NAME, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_FIELDS)
        writer.writeheader()
        for epoch in range(tc.epochs):
            lr = tc.lr_at(epoch)
            order = rng.permutation(len(items))
            for start in range(0, len(order), tc.batch):
                chosen = [items[k] for k in order[start:start + tc.batch]]
                batch = augment(make_batch(sequences, chosen, tc.sources, n_slots), rng, tc)
                model.zero_grad()
                breakdown, _ = batch_loss(model, batch, loss_config)
                if not math.isfinite(float(breakdown.total.data)):
                    path = _dump_batch(out_dir, step, batch, breakdown)
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}); batch dumped to {path}")
                breakdown.total.backward()
                if adam_step(params, [p.grad for p in params], state, tc, lr):
                    ema_update(shadow, params, tc.ema_decay)
                row = breakdown.row(step)
                row.update(epoch=epoch, lr=lr, rejected_steps=state.rejected_steps)
                writer.writerow({k: row[k] for k in TRAIN_LOG_FIELDS})
                if progress is not None:
                    progress(row)
                step += 1
            fh.flush()
    ckpt = out_dir / CHECKPOINT_NAME
    save_checkpoint(ckpt, dict(zip(names, (s.astype(np.float32) for s in shadow))),
                    model_metadata(model_config, tc, step, state, tc.epochs))
    return ckpt
