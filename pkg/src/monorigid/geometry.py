"""Pinhole camera, SE(3) poses and the piecewise-rigid inverse warp.

Pixel coordinates put integer values at pixel centres; x runs along columns
and y along rows. Cameras look down +z with y pointing down.

Object motion is composed with ego motion as ``T_obj @ T_ego`` by default,
i.e. the object transform acts on points already expressed in the source
camera. ``object_frame="target"`` selects ``T_ego @ T_obj`` instead.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .diffcore import ContractError, Tensor, as_tensor, no_grad, ops

SMALL_ANGLE = 1e-8
Z_MIN = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractError("principal point outside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def inverse(self):
        return np.array([[1 / self.fx, 0, -self.cx / self.fx],
                         [0, 1 / self.fy, -self.cy / self.fy],
                         [0, 0, 1.0]])

    def flipped(self):
        """Intrinsics of the horizontally mirrored image."""
        return CameraIntrinsics(self.fx, self.fy, self.width - 1 - self.cx, self.cy, self.width, self.height)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# -- SE(3) ----------------------------------------------------------------------

def _skew(r):
    """... x 3 tensor -> ... x 3 x 3 cross-product matrices."""
    rx, ry, rz = r[..., 0:1], r[..., 1:2], r[..., 2:3]
    zero = ops.mul(rx, 0.0)
    rows = [
        ops.concatenate([zero, ops.neg(rz), ry], axis=-1),
        ops.concatenate([rz, zero, ops.neg(rx)], axis=-1),
        ops.concatenate([ops.neg(ry), rx, zero], axis=-1),
    ]
    return ops.stack(rows, axis=-2)


def axis_angle_to_pose(v):
    """Map ... x 6 parameters (rx, ry, rz, tx, ty, tz) to ... x 4 x 4 rigid transforms.

    Rotation by Rodrigues' formula; angles below 1e-8 use ``I + [r]x``.
    Differentiable in ``v``.
    """
    v = as_tensor(v)
    if v.shape[-1] != 6:
        raise ContractError(f"expected 6 pose parameters, got shape {v.shape}")
    if not np.all(np.isfinite(v.data)):
        raise ContractError("non-finite pose parameters")
    dtype = v.dtype.type
    r, t = v[..., 0:3], v[..., 3:6]
    lead = v.shape[:-1]
    eye = np.broadcast_to(np.eye(3, dtype=dtype), lead + (3, 3))

    theta_sq = np.sum(r.data.astype(np.float64) ** 2, axis=-1)
    small = (theta_sq < SMALL_ANGLE ** 2)[..., None]
    ms = small.astype(dtype)
    # the large-angle branch sees a dummy unit rotation where the angle is tiny,
    # which keeps sqrt and the 1/theta factors finite (and their gradients zero)
    r_safe = ops.add(ops.mul(r, 1.0 - ms), ms * np.array([1.0, 0.0, 0.0], dtype=dtype))
    th2 = ops.sum(ops.mul(r_safe, r_safe), axis=-1, keepdims=True)
    th = ops.sqrt(th2)
    a = ops.div(ops.sin(th), th)[..., None]
    b = ops.div(ops.sub(1.0, ops.cos(th)), th2)[..., None]
    k_safe = _skew(r_safe)
    rod = ops.add(ops.add(eye, ops.mul(a, k_safe)), ops.mul(b, ops.matmul(k_safe, k_safe)))
    first_order = ops.add(eye, _skew(r))
    msk = ms[..., None]
    rot = ops.add(ops.mul(first_order, msk), ops.mul(rod, 1.0 - msk))

    top = ops.concatenate([rot, ops.reshape(t, lead + (3, 1))], axis=-1)
    bottom = np.broadcast_to(np.array([0, 0, 0, 1], dtype=dtype), lead + (1, 4))
    return ops.concatenate([top, bottom], axis=-2)


def pose_matrix(params):
    """Numpy float64 convenience wrapper around :func:`axis_angle_to_pose`."""
    with no_grad():
        return axis_angle_to_pose(Tensor(np.asarray(params, dtype=np.float64), dtype=np.float64)).data


def check_rigid(T, tol=1e-6):
    T = np.asarray(T, dtype=np.float64)
    if T.shape[-2:] != (4, 4):
        raise ContractError(f"expected 4x4 transforms, got {T.shape}")
    R = T[..., :3, :3]
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max() if R.size else 0.0
    if err > tol or np.any(np.linalg.det(R) <= 0):
        raise ContractError(f"rotation block is not orthonormal (error {err:.2e})")
    if np.abs(T[..., 3, :] - np.array([0, 0, 0, 1.0])).max() > tol:
        raise ContractError("last row of a rigid transform must be (0, 0, 0, 1)")


def pose_invert(T):
    """Closed-form inverse of rigid transform(s) ``[R | t] -> [R^T | -R^T t]``."""
    T = np.asarray(T, dtype=np.float64)
    check_rigid(T)
    R = T[..., :3, :3]
    t = T[..., :3, 3:]
    out = np.zeros_like(T)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3:] = -Rt @ t
    out[..., 3, 3] = 1.0
    return out


def pose_to_params(T):
    """Rigid transform(s) -> axis-angle + translation parameters."""
    T = np.asarray(T, dtype=np.float64)
    rv = Rotation.from_matrix(T[..., :3, :3].reshape(-1, 3, 3)).as_rotvec().reshape(T.shape[:-2] + (3,))
    return np.concatenate([rv, T[..., :3, 3]], axis=-1)


def rotation_angle(R):
    """Geodesic angle of rotation matrix ``R`` in radians."""
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


@dataclass
class PoseSE3:
    params: np.ndarray

    @property
    def matrix(self):
        return pose_matrix(self.params)

    @classmethod
    def from_matrix(cls, T):
        check_rigid(T)
        return cls(pose_to_params(T))

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "axis_angle": [float(x) for x in self.params]}

    @classmethod
    def from_dict(cls, d):
        if "axis_angle" in d:
            return cls(np.asarray(d["axis_angle"], dtype=np.float64))
        return cls.from_matrix(np.asarray(d["matrix"], dtype=np.float64))


def matrix_to_json(T):
    return json.dumps({"matrix": np.asarray(T).tolist()})


# -- instances --------------------------------------------------------------------

@dataclass
class Instance:
    id: int
    cls: int
    box: tuple
    mask: np.ndarray
    pose_per_source: list = field(default_factory=list)


@dataclass
class InstanceSet:
    instances: list = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def validate(self):
        total = None
        for inst in self.instances:
            if inst.id < 1:
                raise ContractError("instance id 0 is reserved for background")
            m = np.asarray(inst.mask, dtype=bool)
            x0, y0, x1, y1 = inst.box
            ys, xs = np.nonzero(m)
            if xs.size and (xs.min() < x0 or xs.max() > x1 or ys.min() < y0 or ys.max() > y1):
                raise ContractError(f"mask of instance {inst.id} leaves its box")
            if total is None:
                total = m.astype(np.int32)
            else:
                total += m
        if total is not None and total.max() > 1:
            raise ContractError("instance masks overlap")

    def masks(self):
        return np.stack([np.asarray(i.mask, dtype=bool) for i in self.instances]) if self.instances else None

    def poses(self, source_index):
        return np.stack([np.asarray(i.pose_per_source[source_index], dtype=np.float64)
                         for i in self.instances]) if self.instances else None


# -- projection ----------------------------------------------------------------------

def pixel_grid(height, width):
    """H x W x 2 array of (x, y) pixel-centre coordinates."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def backproject(pixels, depth, K):
    """Lift P x 2 pixels with P depths to camera-frame points (P x 3)."""
    depth = as_tensor(depth)
    if np.any(depth.data <= 0):
        raise ContractError("backproject needs positive depth")
    px = np.asarray(pixels.data if isinstance(pixels, Tensor) else pixels, dtype=np.float64)
    rays = np.stack([(px[..., 0] - K.cx) / K.fx, (px[..., 1] - K.cy) / K.fy, np.ones(px.shape[:-1])], -1)
    return ops.mul(ops.reshape(depth, depth.shape + (1,)), rays.astype(depth.dtype))


def project(points, K, z_min=Z_MIN):
    """Project ... x 3 points; returns ``(pixels, in_front)``.

    Points with ``Z <= z_min`` are flagged ``in_front = False`` and projected
    as if ``Z = 1`` so downstream values stay finite.
    """
    points = as_tensor(points)
    X, Y, Z = points[..., 0], points[..., 1], points[..., 2]
    in_front = Z.data > z_min
    keep = in_front.astype(points.dtype)
    zs = ops.add(ops.mul(Z, keep), 1.0 - keep)
    x = ops.add(ops.mul(ops.div(X, zs), K.fx), K.cx)
    y = ops.add(ops.mul(ops.div(Y, zs), K.fy), K.cy)
    return ops.stack([x, y], axis=-1), in_front


def _as_transform(p):
    p = as_tensor(p)
    if p.shape[-1] == 6:
        return axis_angle_to_pose(p)
    if p.shape[-2:] == (4, 4):
        return p
    raise ContractError(f"pose must be ... x 6 or ... x 4 x 4, got {p.shape}")


def _apply(T, pts):
    """Apply ... x 4 x 4 transforms to ... x P x 3 points."""
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    return ops.add(ops.matmul(pts, ops.swapaxes(R, -1, -2)), ops.reshape(t, t.shape[:-1] + (1, 3)))


def piecewise_rigid_warp(depth, K, ego, masks=None, object_poses=None, object_frame="source"):
    """Source-frame sampling coordinates for every target pixel.

    ``depth`` is H x W or B x H x W. ``ego`` is the target-to-source camera
    motion (B x 6 parameters or B x 4 x 4). ``masks`` is B x N x H x W
    (binary, pairwise disjoint) and ``object_poses`` B x N x 6 (or x 4 x 4).
    Background pixels move with the ego transform alone; pixels of instance
    ``i`` with ``T_obj_i @ T_ego`` (``object_frame="source"``) or
    ``T_ego @ T_obj_i`` (``"target"``).

    Returns ``(coords, in_front)``: B x H x W x 2 and B x H x W.
    """
    depth = as_tensor(depth)
    single = depth.ndim == 2
    if single:
        depth = ops.reshape(depth, (1,) + depth.shape)
    b, h, w = depth.shape
    if np.any(depth.data <= 0) or not np.all(np.isfinite(depth.data)):
        raise ContractError("depth must be positive and finite")
    dtype = depth.dtype.type
    ego_T = _as_transform(ego)
    if ego_T.ndim == 2:
        ego_T = ops.reshape(ego_T, (1, 4, 4))

    rays = np.stack([(pixel_grid(h, w)[..., 0] - K.cx) / K.fx,
                     (pixel_grid(h, w)[..., 1] - K.cy) / K.fy,
                     np.ones((h, w))], axis=-1).reshape(1, h * w, 3).astype(dtype)
    pts = ops.mul(ops.reshape(depth, (b, h * w, 1)), rays)
    moved = _apply(ego_T, pts)

    if masks is not None and object_poses is not None and np.asarray(masks).shape[1] > 0:
        m = np.asarray(masks)
        if single and m.ndim == 3:
            m = m[None]
        if m.shape[0] != b or m.shape[2:] != (h, w):
            raise ContractError(f"mask shape {m.shape} does not match depth {depth.shape}")
        if m.astype(np.int32).sum(axis=1).max() > 1:
            raise ContractError("instance masks overlap")
        obj_T = _as_transform(object_poses)
        if obj_T.ndim == 3:
            obj_T = ops.reshape(obj_T, (1,) + obj_T.shape)
        m = m.reshape(b, m.shape[1], h * w, 1).astype(dtype)
        delta = None
        for i in range(m.shape[1]):
            if not m[:, i].any():
                continue
            Ti = obj_T[:, i]
            if object_frame == "source":
                obj = _apply(Ti, moved)
            elif object_frame == "target":
                obj = _apply(ego_T, _apply(Ti, pts))
            else:
                raise ContractError(f"unknown object_frame {object_frame!r}")
            term = ops.mul(ops.sub(obj, moved), m[:, i])
            delta = term if delta is None else ops.add(delta, term)
        if delta is not None:
            moved = ops.add(moved, delta)

    pix, in_front = project(moved, K)
    coords = ops.reshape(pix, (b, h, w, 2))
    in_front = in_front.reshape(b, h, w)
    if single:
        return coords[0], in_front[0]
    return coords, in_front


def inverse_warp(source, coords, in_front):
    """Sample ``source`` (B x H x W x C or H x W x C) at ``coords``.

    Returns ``(reconstruction, valid)`` where ``valid`` requires the point to
    be in front of the camera and inside the source image.
    """
    source, coords = as_tensor(source), as_tensor(coords)
    batched = source.ndim == 4
    h, w = coords.shape[-3], coords.shape[-2]
    flat = ops.reshape(coords, (coords.shape[0], h * w, 2) if batched else (h * w, 2))
    vals, inside = ops.bilinear_sample(source, flat)
    c = source.shape[-1]
    recon = ops.reshape(vals, coords.shape[:-1] + (c,))
    valid = inside.reshape(coords.shape[:-1]) & np.asarray(in_front, dtype=bool)
    return recon, valid
