"""Toy-scale networks: pyramid encoder, depth decoder, ego-pose head, ROI
align and the transformer instance-pose head.

Feature maps are N x C x H x W; images enter channels-last (B x H x W x 3)
and are transposed once at the encoder input.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import ContractError, Tensor, as_tensor, no_grad, ops

LEVELS = ("P4", "P8", "P16", "P32")


# -- module plumbing ----------------------------------------------------------------------

class Module:
    """Parameter container; parameters are discovered by attribute traversal."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ContractError(f"{k}: shape {v.shape} != {p.shape}")
            p.data = v.astype(p.dtype, copy=True)

    def to(self, dtype):
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _param(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=None, zero=False):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in) if not zero else 0.0
        self.weight = _param(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, fin, fout, zero=False, bias=True):
        bound = 0.0 if zero else math.sqrt(6.0 / (fin + fout))
        self.weight = _param(rng.uniform(-bound, bound, size=(fout, fin)))
        self.bias = _param(np.zeros(fout)) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


# -- configs ------------------------------------------------------------------------------

@dataclass
class DepthHeadConfig:
    d_min: float = 0.5
    d_max: float = 100.0

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ContractError("need 0 < d_min < d_max")

    @property
    def a(self):
        return 1.0 / self.d_min - 1.0 / self.d_max

    @property
    def b(self):
        return 1.0 / self.d_max


@dataclass
class HeadConfig:
    N: int = 8
    s: int = 2
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    roi_size: int = 7
    roi_channels: int = 64

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ContractError("embed_dim must be divisible by heads")
        if self.N < 1 or self.s < 1 or self.layers < 1 or self.roi_size < 1:
            raise ContractError("N, s, layers and roi_size must be >= 1")


@dataclass
class ModelConfig:
    feature_channels: int = 64
    encoder_channels: tuple = (16, 24, 32, 48, 64)
    decoder_channels: tuple = (16, 16, 24, 32)      # strides 1, 2, 4, 8
    ego_channels: int = 32
    depth: DepthHeadConfig = field(default_factory=DepthHeadConfig)
    instance: HeadConfig = field(default_factory=HeadConfig)
    ego_feature_level: str = "P4"
    shared_backbone: bool = True
    piecewise_rigid: bool = True
    rot_scale: float = 0.01
    trans_scale: float = 0.01
    row_channel: bool = False

    def __post_init__(self):
        if isinstance(self.depth, dict):
            self.depth = DepthHeadConfig(**self.depth)
        if isinstance(self.instance, dict):
            self.instance = HeadConfig(**self.instance)
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 4:
            raise ContractError("encoder needs 5 stages and decoder 4 scales")
        if self.ego_feature_level not in ("P4", "P8", "P16"):
            raise ContractError(f"ego_feature_level must be P4, P8 or P16, got {self.ego_feature_level}")
        if self.instance.roi_channels != self.feature_channels:
            raise ContractError("roi_channels must equal feature_channels")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


ABLATIONS = {
    "A2": {"ego_feature_level": "P16", "shared_backbone": False, "piecewise_rigid": False},
    "A3": {"ego_feature_level": "P8", "shared_backbone": False, "piecewise_rigid": False},
    "A4": {"ego_feature_level": "P4", "shared_backbone": False, "piecewise_rigid": False},
    "A5": {"ego_feature_level": "P4", "shared_backbone": True, "piecewise_rigid": False},
    "A6": {"ego_feature_level": "P4", "shared_backbone": True, "piecewise_rigid": True},
}


def apply_ablation(config, name):
    if name not in ABLATIONS:
        raise ContractError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    d = config.to_dict()
    d.update(ABLATIONS[name])
    return ModelConfig.from_dict(d)


# -- encoder ------------------------------------------------------------------------------

@dataclass
class FeaturePyramid:
    P4: Tensor
    P8: Tensor
    P16: Tensor
    P32: Tensor
    skip2: Tensor

    def level(self, name):
        return getattr(self, name)


IMAGE_MEAN, IMAGE_STD = 0.45, 0.225


class PyramidEncoder(Module):
    """Five stride-2 conv stages with FPN-style top-down lateral merging."""

    def __init__(self, rng, channels=(16, 24, 32, 48, 64), cf=32, row_channel=False):
        self.row_channel = row_channel
        cin = 4 if row_channel else 3
        self.stages = []
        for c in channels:
            self.stages.append(Conv2d(rng, cin, c, 3, stride=2))
            cin = c
        self.laterals = [Conv2d(rng, c, cf, 1) for c in channels[1:]]

    def __call__(self, image):
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[-1] != 3:
            raise ContractError(f"expected B x H x W x 3 images, got {image.shape}")
        h, w = image.shape[1:3]
        if h % 32 or w % 32:
            raise ContractError(f"image size {h}x{w} must be divisible by 32")
        x = ops.mul(ops.sub(ops.transpose(image, (0, 3, 1, 2)), IMAGE_MEAN), 1.0 / IMAGE_STD)
        if self.row_channel:
            # normalised row coordinate in [-1, 1]; mirror-symmetric, so flips stay consistent
            rows = np.linspace(-1.0, 1.0, h, dtype=x.dtype)[None, None, :, None]
            x = ops.concatenate([x, np.broadcast_to(rows, (x.shape[0], 1, h, w)).copy()], axis=1)
        feats = []
        for conv in self.stages:
            x = ops.elu(conv(x))
            feats.append(x)
        lat = [conv(f) for conv, f in zip(self.laterals, feats[1:])]
        p32 = lat[3]
        p16 = ops.add(lat[2], ops.upsample_nearest(p32, 2))
        p8 = ops.add(lat[1], ops.upsample_nearest(p16, 2))
        p4 = ops.add(lat[0], ops.upsample_nearest(p8, 2))
        return FeaturePyramid(P4=p4, P8=p8, P16=p16, P32=p32, skip2=feats[0])


def pyramid_encode(encoder, image):
    return encoder(image)


# -- depth --------------------------------------------------------------------------------

def sigmoid_to_depth(sigma, config):
    """``D = 1 / (a sigma + b)``."""
    return ops.div(1.0, ops.add(ops.mul(sigma, config.a), config.b))


class DepthDecoder(Module):
    """Decoder from P8 up to full resolution with skips from P4 and the stride-2 stage."""

    def __init__(self, rng, cf, skip_ch, channels=(16, 16, 24, 32)):
        c1, c2, c4, c8 = channels
        self.conv8 = Conv2d(rng, cf, c8)
        self.conv4 = Conv2d(rng, c8 + cf, c4)
        self.conv2 = Conv2d(rng, c4 + skip_ch, c2)
        self.conv1 = Conv2d(rng, c2, c1)
        self.out = [Conv2d(rng, c, 1, 1) for c in (c1, c2, c4, c8)]
        for conv in self.out:
            # start near sigma = 0.5 so the sigmoid is not saturated
            conv.weight.data *= np.float32(0.1)

    def __call__(self, pyr, config):
        x8 = ops.elu(self.conv8(pyr.P8))
        x4 = ops.elu(self.conv4(ops.concatenate([ops.upsample_nearest(x8, 2), pyr.P4], axis=1)))
        x2 = ops.elu(self.conv2(ops.concatenate([ops.upsample_nearest(x4, 2), pyr.skip2], axis=1)))
        x1 = ops.elu(self.conv1(ops.upsample_nearest(x2, 2)))
        depths = []
        for conv, x in zip(self.out, (x1, x2, x4, x8)):
            sigma = ops.sigmoid(conv(x))
            d = sigmoid_to_depth(sigma, config)
            depths.append(ops.reshape(d, (d.shape[0],) + d.shape[2:]))
        return depths


def depth_head(decoder, pyramid, config):
    """Four depth maps (B x H/2^k x W/2^k, k = 0..3) within [d_min, d_max]."""
    return decoder(pyramid, config)


# -- ego pose -----------------------------------------------------------------------------

class EgoPoseHead(Module):
    """Shared per-source head: concat(target, source) -> 2 strided convs -> mean -> 6."""

    def __init__(self, rng, cf, ch=32, rot_scale=0.01, trans_scale=0.01):
        self.conv1 = Conv2d(rng, 2 * cf, ch, 3, stride=2)
        self.conv2 = Conv2d(rng, ch, ch, 3, stride=2)
        self.fc = Linear(rng, ch, 6, zero=True)
        self.scale = np.array([rot_scale] * 3 + [trans_scale] * 3, dtype=np.float32)

    def __call__(self, feat_t, feat_sources):
        out = []
        for fs in feat_sources:
            if fs.shape != feat_t.shape:
                raise ContractError("target and source features differ in shape")
            x = ops.concatenate([feat_t, fs], axis=1)
            x = ops.elu(self.conv1(x))
            x = ops.elu(self.conv2(x))
            x = ops.mean(x, axis=(2, 3))
            out.append(ops.mul(self.fc(x), self.scale.astype(x.dtype)))
        return out


def ego_pose_head(head, p4_target, p4_sources):
    """List of B x 6 axis-angle poses, one per source."""
    return head(p4_target, p4_sources)


# -- ROI align ----------------------------------------------------------------------------

def roi_sample_points(boxes, roi_size, stride=1):
    """Bin-centre sample positions (N x r*r x 2) in feature coordinates.

    Boxes are (x0, y0, x1, y1) image-pixel edges: pixel i spans [i-0.5, i+0.5].
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ContractError("degenerate ROI box")
    f = (boxes + 0.5) / stride - 0.5
    t = (np.arange(roi_size) + 0.5) / roi_size
    xs = f[:, 0:1] + t[None] * (f[:, 2:3] - f[:, 0:1])
    ys = f[:, 1:2] + t[None] * (f[:, 3:4] - f[:, 1:2])
    gx = np.broadcast_to(xs[:, None, :], (len(f), roi_size, roi_size))
    gy = np.broadcast_to(ys[:, :, None], (len(f), roi_size, roi_size))
    return np.stack([gx, gy], -1).reshape(len(f), roi_size * roi_size, 2)


def roi_align(features, boxes, roi_size, stride=1):
    """Pool ``features`` (C x h x w, or B x C x h x w with B x N x 4 boxes) into
    N x C x r x r (resp. B x N x C x r x r) by bilinear sampling at bin centres.

    Sample positions are clamped to the feature map so boxes touching the
    image border still read valid features.
    """
    features = as_tensor(features)
    single = features.ndim == 3
    if single:
        features = ops.reshape(features, (1,) + features.shape)
        boxes = np.asarray(boxes)[None]
    b, c, h, w = features.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[1]
    pts = roi_sample_points(boxes.reshape(-1, 4), roi_size, stride).reshape(b, n * roi_size ** 2, 2)
    pts[..., 0] = np.clip(pts[..., 0], 0, w - 1)
    pts[..., 1] = np.clip(pts[..., 1], 0, h - 1)
    grid = ops.transpose(features, (0, 2, 3, 1))
    vals, _ = ops.bilinear_sample(grid, pts.astype(features.dtype))
    vals = ops.reshape(vals, (b, n, roi_size, roi_size, c))
    out = ops.transpose(vals, (0, 1, 4, 2, 3))
    return out[0] if single else out


# -- instance pose head ---------------------------------------------------------------------

class MultiHeadAttention(Module):
    def __init__(self, rng, dim, heads):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.heads = heads

    def __call__(self, q, kv, key_mask=None):
        return ops.scaled_dot_attention(self.wq(q), self.wk(kv), self.wv(kv), self.heads,
                                        self.wo.weight, self.wo.bias, key_mask=key_mask)


class FeedForward(Module):
    def __init__(self, rng, dim, mult):
        self.fc1 = Linear(rng, dim, dim * mult)
        self.fc2 = Linear(rng, dim * mult, dim)

    def __call__(self, x):
        return self.fc2(ops.elu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, dim, heads, mult):
        self.norm1, self.attn = LayerNorm(dim), MultiHeadAttention(rng, dim, heads)
        self.norm2, self.ffn = LayerNorm(dim), FeedForward(rng, dim, mult)

    def __call__(self, x, mask):
        h = self.norm1(x)
        x = ops.add(x, self.attn(h, h, mask))
        return ops.add(x, self.ffn(self.norm2(x)))


class DecoderLayer(Module):
    def __init__(self, rng, dim, heads, mult):
        self.norm1, self.self_attn = LayerNorm(dim), MultiHeadAttention(rng, dim, heads)
        self.norm2, self.cross_attn = LayerNorm(dim), MultiHeadAttention(rng, dim, heads)
        self.norm3, self.ffn = LayerNorm(dim), FeedForward(rng, dim, mult)

    def __call__(self, x, memory, q_mask, m_mask):
        h = self.norm1(x)
        x = ops.add(x, self.self_attn(h, h, q_mask))
        x = ops.add(x, self.cross_attn(self.norm2(x), memory, m_mask))
        return ops.add(x, self.ffn(self.norm3(x)))


class InstancePoseHead(Module):
    """Transformer over (s+1) x N pooled proposals; decodes s poses per target proposal."""

    def __init__(self, rng, config, rot_scale=0.01, trans_scale=0.01):
        self.config = config
        c = config
        flat = c.roi_channels * c.roi_size * c.roi_size
        self.proj = Linear(rng, flat, c.embed_dim)
        self.frame_embed = _param(rng.normal(scale=0.02, size=(c.s + 1, c.embed_dim)))
        self.encoder = [EncoderLayer(rng, c.embed_dim, c.heads, c.ffn_mult) for _ in range(c.layers)]
        self.decoder = [DecoderLayer(rng, c.embed_dim, c.heads, c.ffn_mult) for _ in range(c.layers)]
        self.norm = LayerNorm(c.embed_dim)
        self.out = Linear(rng, c.embed_dim, c.s * 6, zero=True)
        self.scale = np.array([rot_scale] * 3 + [trans_scale] * 3, dtype=np.float32)

    def __call__(self, pooled, valid=None):
        c = self.config
        pooled = as_tensor(pooled)
        if pooled.ndim != 6:
            raise ContractError(f"pooled features must be b x (s+1) x N x C x r x r, got {pooled.shape}")
        b, s1, n = pooled.shape[:3]
        if s1 != c.s + 1 or pooled.shape[3:] != (c.roi_channels, c.roi_size, c.roi_size):
            raise ContractError(f"pooled shape {pooled.shape} does not match config {c}")
        if n < 1:
            raise ContractError("need at least one proposal slot")
        valid = np.ones((b, n), bool) if valid is None else np.asarray(valid, dtype=bool)
        tokens = self.proj(ops.reshape(pooled, (b, s1, n, c.roi_channels * c.roi_size ** 2)))
        tokens = ops.add(tokens, ops.reshape(self.frame_embed, (1, s1, 1, c.embed_dim)))
        seq = ops.reshape(tokens, (b, s1 * n, c.embed_dim))
        seq_mask = np.tile(valid, (1, s1))
        for layer in self.encoder:
            seq = layer(seq, seq_mask)
        memory = seq
        x = seq[:, :n]
        for layer in self.decoder:
            x = layer(x, memory, valid, seq_mask)
        y = self.out(self.norm(x))
        y = ops.reshape(y, (b, n, c.s, 6))
        return ops.mul(y, self.scale.astype(y.dtype))


def instance_pose_head(head, pooled, valid=None):
    """b x (s+1) x N x C x r x r pooled features -> b x N x s x 6 object poses."""
    return head(pooled, valid)


# -- full model -----------------------------------------------------------------------------

@dataclass
class ModelOutput:
    depths: list            # 4 tensors B x H/2^k x W/2^k
    ego: list               # per source, B x 6
    instances: Tensor = None  # B x N x s x 6, or None when piecewise rigidity is off


class MonoRigidModel(Module):
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        ec, cf = cfg.encoder_channels, cfg.feature_channels
        self.encoder = PyramidEncoder(rng, ec, cf, cfg.row_channel)
        self.pose_encoder = None if cfg.shared_backbone else PyramidEncoder(rng, ec, cf, cfg.row_channel)
        self.depth_decoder = DepthDecoder(rng, cf, ec[0], cfg.decoder_channels)
        self.ego_head = EgoPoseHead(rng, cf, cfg.ego_channels, cfg.rot_scale, cfg.trans_scale)
        self.instance_head = InstancePoseHead(rng, cfg.instance, cfg.rot_scale, cfg.trans_scale) \
            if cfg.piecewise_rigid else None

    def __call__(self, target, sources, boxes=None, valid=None):
        """``target`` B x H x W x 3, ``sources`` list of s such images,
        ``boxes`` B x N x 4 target boxes (image pixel edges), ``valid`` B x N."""
        cfg = self.config
        b = np.shape(target.data if isinstance(target, Tensor) else target)[0]
        frames = ops.concatenate([as_tensor(target)] + [as_tensor(s) for s in sources], axis=0)
        pyr_all = self.encoder(frames)
        tgt_pyr = FeaturePyramid(*(getattr(pyr_all, k)[:b] for k in ("P4", "P8", "P16", "P32", "skip2")))
        depths = self.depth_decoder(tgt_pyr, cfg.depth)
        pose_pyr = pyr_all if self.pose_encoder is None else self.pose_encoder(frames)
        lvl = pose_pyr.level(cfg.ego_feature_level)
        feats = [lvl[i * b:(i + 1) * b] for i in range(len(sources) + 1)]
        ego = self.ego_head(feats[0], feats[1:])
        inst = None
        if self.instance_head is not None and boxes is not None and np.shape(boxes)[1] > 0:
            p4 = pose_pyr.P4
            s1 = len(sources) + 1
            bx = np.tile(np.asarray(boxes, dtype=np.float64), (s1, 1, 1))
            pooled = roi_align(p4, bx, cfg.instance.roi_size, stride=4)
            n = pooled.shape[1]
            pooled = ops.reshape(pooled, (s1, b) + pooled.shape[1:])
            pooled = ops.transpose(pooled, (1, 0, 2, 3, 4, 5))
            inst = self.instance_head(pooled, valid)
            if inst.shape[1] != n:
                raise ContractError("instance head output does not match proposal count")
        return ModelOutput(depths=depths, ego=ego, instances=inst)

    def predict_depth(self, images):
        """Full-resolution depth (B x H x W array) from the depth branch alone."""
        with no_grad():
            pyr = self.encoder(np.asarray(images, dtype=np.float32))
            return self.depth_decoder(pyr, self.config.depth)[0].data
