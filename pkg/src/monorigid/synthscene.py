"""Procedural scenes with exact depth, instance masks and poses.

A scene is a ground plane, a far wall and a handful of upright textured
billboards. Every surface carries a value-noise texture attached to world
coordinates, so two renders of the same surface point always agree. Frames are
rendered by ray casting each pixel centre; the nearest hit wins, which keeps
instance masks disjoint and makes the depth map exact.

World frame: camera 0 sits at the origin looking down +z, y points down and
the ground is the plane ``y = camera_height``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from .diffcore import ContractError
from .geometry import CameraIntrinsics, Instance, InstanceSet, PoseSE3, pixel_grid, pose_invert, pose_matrix

FORMAT = "monorigid-synth-v1"
GROUND, WALL = 0, 1
CLASS_SIZES = {1: ((1.6, 2.4), (1.3, 1.7)), 2: ((0.6, 0.9), (1.6, 1.9))}


@dataclass
class SceneConfig:
    width: int = 192
    height: int = 64
    frames: int = 3
    n_objects: int = 2
    depth_range: tuple = (0.5, 80.0)
    ego_motion_scale: tuple = (0.5, 0.02)      # (translation units, rotation rad) per frame
    object_motion_scale: tuple = (0.2, 0.02)
    texture_octaves: int = 3
    texture_contrast: float = 0.3
    texture_scale: float = 12.0                # finest noise period in pixels at first sight
    object_scale: float = 1.0                  # scales billboard size, hence the dynamic fraction
    camera_height: float = 1.5
    objects_follow_ego: bool = True            # objects keep pace with the camera, like traffic
    seed: int = 0

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.ego_motion_scale = tuple(float(v) for v in self.ego_motion_scale)
        self.object_motion_scale = tuple(float(v) for v in self.object_motion_scale)
        near, far = self.depth_range
        if near < 0.5 or far > 100 or near >= far:
            raise ContractError(f"depth_range {self.depth_range} must satisfy 0.5 <= near < far <= 100")
        if self.frames < 3:
            raise ContractError("a sequence needs at least 3 frames")
        if self.width < 8 or self.height < 8:
            raise ContractError("image too small")
        if not 0 <= self.n_objects <= 255:
            raise ContractError("n_objects must be in [0, 255]")
        if self.texture_octaves < 1:
            raise ContractError("texture_octaves must be >= 1")
        if self.texture_scale <= 0 or not 0 <= self.texture_contrast <= 0.5:
            raise ContractError("texture_scale must be positive and texture_contrast in [0, 0.5]")
        if min(self.ego_motion_scale + self.object_motion_scale) < 0:
            raise ContractError("motion scales must be non-negative")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def intrinsics(self):
        w, h = self.width, self.height
        return CameraIntrinsics(0.58 * w, 1.92 * h, (w - 1) / 2.0, (h - 1) / 2.0, w, h)


# -- textures -------------------------------------------------------------------------------

@dataclass
class Texture:
    """Multi-octave value noise on a wrapped lattice.

    Lattice values are blended bilinearly with smoothstep-faded weights, which
    keeps the texture C1 so resampling a render stays close to re-rendering.
    """
    base: np.ndarray
    lattices: list
    spacings: list
    weights: list
    contrast: float

    @classmethod
    def random(cls, rng, octaves, contrast, fine_spacing=8.0, size=64):
        base = rng.uniform(0.35, 0.65, size=3)
        lattices, spacings, weights = [], [], []
        for o in range(octaves):
            lattices.append(rng.random((size, size, 3)))
            spacings.append(fine_spacing * 2.0 ** (octaves - 1 - o))
            weights.append(0.6 ** (octaves - 1 - o))
        return cls(base, lattices, spacings, weights, contrast)

    def __call__(self, u, v):
        out = np.zeros(u.shape + (3,))
        for lat, sp, wt in zip(self.lattices, self.spacings, self.weights):
            out += wt * _lookup(lat, u / sp, v / sp)
        out = out / sum(self.weights) - 0.5
        return np.clip(self.base + 2.0 * self.contrast * out, 0.0, 1.0)


def _lookup(lat, u, v):
    n = lat.shape[0]
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    fx = fx * fx * (3 - 2 * fx)
    fy = fy * fy * (3 - 2 * fy)
    x0 = x0.astype(np.int64) % n
    y0 = y0.astype(np.int64) % n
    x1 = (x0 + 1) % n
    y1 = (y0 + 1) % n
    top = lat[y0, x0] * (1 - fx) + lat[y0, x1] * fx
    bot = lat[y1, x0] * (1 - fx) + lat[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# -- scene description ----------------------------------------------------------------------

@dataclass
class Billboard:
    id: int
    cls: int
    width: float
    height: float
    poses: np.ndarray           # frames x 4 x 4 object-to-world
    texture: Texture = None
    tex_scale: tuple = (1.0, 1.0)


@dataclass
class SceneGeometry:
    """Everything needed to ray-cast a frame, minus textures."""
    intrinsics: CameraIntrinsics
    camera_height: float
    wall_z: float
    cameras: np.ndarray         # frames x 4 x 4 camera-to-world
    billboards: list = field(default_factory=list)
    textures: dict = None       # surface id -> (Texture, (u scale, v scale)); absent when read from disk

    def raycast(self, frame, pixels):
        """Cast rays through continuous pixel positions (... x 2) of ``frame``.

        Returns ``(depth, surface, local)`` where depth is the camera-frame z,
        surface is 0 for ground, 1 for wall and ``2 + k`` for billboard k, and
        local holds surface texture coordinates (... x 2).
        """
        K = self.intrinsics
        pixels = np.asarray(pixels, dtype=np.float64)
        shape = pixels.shape[:-1]
        px = pixels.reshape(-1, 2)
        rays = np.stack([(px[:, 0] - K.cx) / K.fx, (px[:, 1] - K.cy) / K.fy, np.ones(len(px))], -1)
        C = self.cameras[frame]
        origin = C[:3, 3]
        dirs = rays @ C[:3, :3].T
        best = np.full(len(px), np.inf)
        surf = np.full(len(px), -1, dtype=np.int64)
        local = np.zeros((len(px), 2))

        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.camera_height - origin[1]) / dirs[:, 1]
        hit = (dirs[:, 1] > 1e-12) & (t > 0)
        p = origin + t[:, None] * dirs
        _take(hit, t, best, surf, local, GROUND, np.stack([p[:, 0] / p[:, 2], 1.0 / p[:, 2]], -1))

        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.wall_z - origin[2]) / dirs[:, 2]
        hit = (dirs[:, 2] > 1e-12) & (t > 0)
        p = origin + t[:, None] * dirs
        _take(hit, t, best, surf, local, WALL, p[:, :2])

        for k, bb in enumerate(self.billboards):
            inv = pose_invert(bb.poses[frame])
            o = inv[:3, :3] @ origin + inv[:3, 3]
            d = dirs @ inv[:3, :3].T
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -o[2] / d[:, 2]
            p = o + t[:, None] * d
            hit = (np.abs(d[:, 2]) > 1e-12) & (t > 0) & (np.abs(p[:, 0]) <= bb.width / 2) \
                & (p[:, 1] <= 0) & (p[:, 1] >= -bb.height)
            _take(hit, t, best, surf, local, 2 + k, p[:, :2])

        if np.any(surf < 0):
            raise ContractError("some rays hit no surface")
        return best.reshape(shape), surf.reshape(shape), local.reshape(shape + (2,))

    def object_motion(self, k, target, source):
        """World-space motion of billboard k from frame ``target`` to ``source``."""
        P = self.billboards[k].poses
        return P[source] @ pose_invert(P[target])


def _take(hit, t, best, surf, local, sid, coords):
    win = hit & (t < best)
    best[win] = t[win]
    surf[win] = sid
    local[win] = coords[win]


# -- frames ---------------------------------------------------------------------------------

@dataclass
class Frame:
    image: np.ndarray                       # H x W x 3 in [0, 1]
    intrinsics: CameraIntrinsics
    gt_depth: np.ndarray                    # H x W
    gt_instances: InstanceSet
    gt_ego_pose_world: PoseSE3              # camera-to-world
    instance_map: np.ndarray = None         # H x W ids, 0 = background
    scene: SceneGeometry = None
    index: int = 0
    seq_id: str = "seq_000"
    classes: dict = field(default_factory=dict)

    @property
    def camera(self):
        return self.scene.cameras[self.index]


def relative_ego(target, source):
    """Target-to-source camera transform ``C_s^-1 C_t`` (4 x 4)."""
    return pose_invert(source.camera) @ target.camera


def relative_object(target, source, instance_id, object_frame="source"):
    """Object motion of ``instance_id`` between two frames in camera coordinates.

    With ``object_frame="source"`` the returned transform ``T`` satisfies
    ``p_s = T @ relative_ego(target, source) @ p_t`` for points on the object.
    """
    k = instance_id - 1
    Wm = target.scene.object_motion(k, target.index, source.index)
    if object_frame == "source":
        C = source.camera
    elif object_frame == "target":
        C = target.camera
    else:
        raise ContractError(f"unknown object_frame {object_frame!r}")
    return pose_invert(C) @ Wm @ C


def instance_inputs(target, sources, object_frame="source", ids=None):
    """Stacked masks (N x H x W) and poses (per source, N x 4 x 4) of the target's instances."""
    ids = [inst.id for inst in target.gt_instances.instances] if ids is None else ids
    h, w = target.gt_depth.shape
    masks = np.stack([target.instance_map == i for i in ids]) if ids else np.zeros((0, h, w), bool)
    poses = [np.stack([relative_object(target, s, i, object_frame) for i in ids]) if ids
             else np.zeros((0, 4, 4)) for s in sources]
    return masks, poses


def loss_inputs(target, sources, object_frame="source"):
    """Ground-truth keyword arguments for ``losses.total_loss`` (batch of one).

    Depths are left to the caller; poses are 4 x 4 matrices.
    """
    masks, poses = instance_inputs(target, sources, object_frame)
    return {
        "target": target.image[None],
        "sources": [s.image[None] for s in sources],
        "K": target.intrinsics,
        "ego_poses": [relative_ego(target, s)[None] for s in sources],
        "instance_masks": masks[None],
        "instance_poses": [p[None] for p in poses],
    }


def _smooth_walk(rng, n, lo, hi, knots_every=4):
    """Cubic-smoothed random sequence of length n with values in [lo, hi]."""
    m = max(2, int(np.ceil(n / knots_every)) + 1)
    xs = np.linspace(0, n - 1, m)
    ys = rng.uniform(lo, hi, size=m)
    return np.clip(CubicSpline(xs, ys)(np.arange(n)), lo, hi)


def _build_scene(config, rng):
    K = config.intrinsics()
    n = config.frames
    near, far = config.depth_range
    cam_h = config.camera_height
    wall_z = 0.8 * far
    # depth of the ground at the bottom image row
    ground_min = cam_h * K.fy / (K.height - 1 - K.cy)
    if ground_min < near:
        raise ContractError(f"ground reaches depth {ground_min:.2f} below near={near}")

    ts, rs = config.ego_motion_scale
    fwd = ts * _smooth_walk(rng, n - 1, 0.5, 1.0)
    lat = ts * _smooth_walk(rng, n - 1, -0.1, 0.1)
    yaw = rs * _smooth_walk(rng, n - 1, -1.0, 1.0)
    cams = [np.eye(4)]
    for i in range(n - 1):
        cams.append(cams[-1] @ pose_matrix(np.array([0.0, yaw[i], 0.0, lat[i], 0.0, fwd[i]])))
    cams = np.stack(cams)
    travel = cams[-1][2, 3]
    if wall_z - travel < 2 * near or wall_z - travel <= 0:
        raise ContractError("ego motion runs into the far wall")

    z_lo = max(near, ground_min + 1.0)
    z_hi = min(25.0, 0.5 * (wall_z - travel))
    if config.n_objects and z_lo >= z_hi:
        raise ContractError(f"objects cannot fit the depth range {config.depth_range}")

    ot, orot = config.object_motion_scale
    billboards = []
    for k in range(config.n_objects):
        cls = int(rng.integers(1, 3))
        (w0, w1), (h0, h1) = CLASS_SIZES[cls]
        width = config.object_scale * rng.uniform(w0, w1)
        height = config.object_scale * rng.uniform(h0, h1)
        z0 = rng.uniform(z_lo, z_hi)
        x0 = rng.uniform(-0.3, 0.3) * z0
        # offset relative to the camera follows a smooth walk, so objects keep pace
        # with the ego motion and stay in view
        dz = ot * _smooth_walk(rng, n - 1, -1.0, 1.0)
        dx = ot * _smooth_walk(rng, n - 1, -1.0, 1.0)
        dpsi = orot * _smooth_walk(rng, n - 1, -1.0, 1.0)
        rel = np.array([x0, z0])
        psi = rng.uniform(-0.3, 0.3)
        poses = []
        for i in range(n):
            if i:
                rel = rel + np.array([dx[i - 1], dz[i - 1]])
                rel[1] = np.clip(rel[1], z_lo, z_hi)
                psi += dpsi[i - 1]
            c = cams[i if config.objects_follow_ego else 0][:3, 3]
            poses.append(pose_matrix(np.array([0.0, psi, 0.0, c[0] + rel[0], cam_h, c[2] + rel[1]])))
        tex = Texture.random(rng, config.texture_octaves, config.texture_contrast, config.texture_scale)
        billboards.append(Billboard(k + 1, cls, width, height, np.stack(poses), tex, (K.fx / z0, K.fy / z0)))
    textures = {
        GROUND: (Texture.random(rng, config.texture_octaves, config.texture_contrast, config.texture_scale), (K.fx, K.fy * cam_h)),
        WALL: (Texture.random(rng, config.texture_octaves, config.texture_contrast, config.texture_scale), (K.fx / wall_z, K.fy / wall_z)),
    }
    return SceneGeometry(K, cam_h, wall_z, cams, billboards, textures)


def _shade(scene, surf, local):
    img = np.zeros(surf.shape + (3,))
    for sid, (tex, (su, sv)) in scene.textures.items():
        sel = surf == sid
        if sel.any():
            img[sel] = tex(local[sel][:, 0] * su, local[sel][:, 1] * sv)
    for k, bb in enumerate(scene.billboards):
        sel = surf == 2 + k
        if sel.any():
            su, sv = bb.tex_scale
            img[sel] = bb.texture(local[sel][:, 0] * su, local[sel][:, 1] * sv)
    return img


def _box(mask):
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def render_frame(scene, index, seq_id="seq_000"):
    K = scene.intrinsics
    grid = pixel_grid(K.height, K.width)
    depth, surf, local = scene.raycast(index, grid)
    image = _shade(scene, surf, local)
    ids = np.where(surf >= 2, surf - 1, 0).astype(np.int64)
    return _assemble(scene, index, image, depth, ids, seq_id)


def _assemble(scene, index, image, depth, ids, seq_id):
    instances = []
    for bb in scene.billboards:
        m = ids == bb.id
        if not m.any():
            continue
        instances.append(Instance(bb.id, bb.cls, _box(m), m, []))
    frame = Frame(image=image, intrinsics=scene.intrinsics, gt_depth=depth,
                  gt_instances=InstanceSet(instances),
                  gt_ego_pose_world=PoseSE3.from_matrix(scene.cameras[index]),
                  instance_map=ids, scene=scene, index=index, seq_id=seq_id,
                  classes={bb.id: bb.cls for bb in scene.billboards})
    return frame


def _fill_instance_poses(frames):
    n = len(frames)
    for t, f in enumerate(frames):
        for inst in f.gt_instances.instances:
            inst.pose_per_source = [
                PoseSE3.from_matrix(relative_object(f, frames[s], inst.id)).params if 0 <= s < n else None
                for s in (t - 1, t + 1)]


def generate_sequence(config, sequence_index=0):
    """Render ``config.frames`` frames of one scene; deterministic in (seed, index)."""
    rng = np.random.default_rng([config.seed, sequence_index])
    scene = _build_scene(config, rng)
    seq_id = f"seq_{sequence_index:03d}"
    frames = [render_frame(scene, i, seq_id) for i in range(config.frames)]
    near, far = config.depth_range
    for f in frames:
        if f.gt_depth.min() < near or f.gt_depth.max() > far:
            raise ContractError("rendered depth leaves the configured range")
    _fill_instance_poses(frames)
    return frames


def gt_warp_field(target, source, return_visible=False):
    """Source-image coordinates of every target pixel from the world geometry.

    With ``return_visible`` also returns a mask of pixels that land inside the
    source image and are not occluded there.
    """
    scene = target.scene
    K = scene.intrinsics
    grid = pixel_grid(K.height, K.width)
    depth, surf, _ = scene.raycast(target.index, grid)
    rays = np.stack([(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy, np.ones(depth.shape)], -1)
    pc = rays * depth[..., None]
    Ct = scene.cameras[target.index]
    pw = pc @ Ct[:3, :3].T + Ct[:3, 3]
    for k in range(len(scene.billboards)):
        sel = surf == 2 + k
        if sel.any():
            M = scene.object_motion(k, target.index, source.index)
            pw[sel] = pw[sel] @ M[:3, :3].T + M[:3, 3]
    Cs_inv = pose_invert(scene.cameras[source.index])
    ps = pw @ Cs_inv[:3, :3].T + Cs_inv[:3, 3]
    z = ps[..., 2]
    safe = np.where(z > 1e-3, z, 1.0)
    coords = np.stack([K.fx * ps[..., 0] / safe + K.cx, K.fy * ps[..., 1] / safe + K.cy], -1)
    if not return_visible:
        return coords
    inside = (z > 1e-3) & (coords[..., 0] >= 0) & (coords[..., 0] <= K.width - 1) \
        & (coords[..., 1] >= 0) & (coords[..., 1] <= K.height - 1)
    sdepth, ssurf, _ = scene.raycast(source.index, np.where(inside[..., None], coords, 0.0))
    visible = inside & (ssurf == surf) & (np.abs(sdepth - z) <= 1e-6 * np.maximum(z, 1.0))
    return coords, visible


def dynamic_mask(frame, tol=1e-6):
    """Pixels of instances whose world pose changes next to this frame."""
    out = np.zeros(frame.gt_depth.shape, dtype=bool)
    n = len(frame.scene.cameras)
    for inst in frame.gt_instances.instances:
        k = inst.id - 1
        moving = False
        for s in (frame.index - 1, frame.index + 1):
            if 0 <= s < n:
                M = frame.scene.object_motion(k, frame.index, s)
                moving |= np.abs(M - np.eye(4)).max() > tol
        if moving:
            out |= frame.instance_map == inst.id
    return out


def dynamic_fraction(frames):
    total = sum(f.gt_depth.size for f in frames)
    return float(sum(dynamic_mask(f).sum() for f in frames)) / total if total else 0.0


# -- on-disk format --------------------------------------------------------------------------

def write_pfm(path, arr):
    arr = np.asarray(arr, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise ContractError(f"{path}: not a grayscale PFM")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dt)
    if data.size != w * h:
        raise ContractError(f"{path}: truncated PFM")
    return data.reshape(h, w)[::-1].astype(np.float32)


def _frame_meta(frame):
    scene = frame.scene
    objs = []
    ids = set(np.unique(frame.instance_map)) - {0}
    for bb in scene.billboards:
        objs.append({
            "id": bb.id, "class": bb.cls, "size": [bb.width, bb.height],
            "world_pose": {"matrix": bb.poses[frame.index].tolist()},
            "visible": bb.id in ids,
        })
    return {
        "sequence": frame.seq_id,
        "index": frame.index,
        "intrinsics": frame.intrinsics.to_dict(),
        "ego_pose_world": {"matrix": frame.camera.tolist(),
                           "axis_angle": [float(v) for v in frame.gt_ego_pose_world.params]},
        "camera_height": scene.camera_height,
        "wall_z": scene.wall_z,
        "instances": objs,
    }


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_dataset(sequences, directory, config=None):
    """Write sequences (lists of Frames) under ``directory`` and return the manifest."""
    if sequences and isinstance(sequences[0], Frame):
        sequences = [sequences]
    try:
        os.makedirs(directory, exist_ok=True)
        entries = []
        for frames in sequences:
            seq_id = frames[0].seq_id
            sdir = os.path.join(directory, seq_id)
            os.makedirs(sdir, exist_ok=True)
            for f in frames:
                stem = os.path.join(sdir, f"frame_{f.index}")
                rgb = np.round(np.clip(f.image, 0, 1) * 255).astype(np.uint8)
                Image.fromarray(rgb, "RGB").save(stem + ".png")
                Image.fromarray(f.instance_map.astype(np.uint8), "L").save(stem + "_mask.png")
                write_pfm(stem + "_depth.pfm", f.gt_depth)
                _dump_json(stem + "_meta.json", _frame_meta(f))
            entries.append({"id": seq_id, "frames": len(frames),
                            "seed": None if config is None else config.seed,
                            "sequence_index": int(seq_id.split("_")[-1])})
        manifest = {
            "format": FORMAT,
            "sequences": entries,
            "config": None if config is None else asdict(config),
            "dynamic_fraction": dynamic_fraction([f for s in sequences for f in s]),
        }
        _dump_json(os.path.join(directory, "manifest.json"), manifest)
    except OSError as exc:
        raise OSError(f"writing dataset to {directory}: {exc}") from exc
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise OSError(f"reading {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{path}: unknown dataset format")
    return manifest


def read_sequence(directory, seq_id, frames):
    """Load one sequence; frames carry a geometry-only scene usable by gt_warp_field."""
    metas, images, depths, maps = [], [], [], []
    sdir = os.path.join(directory, seq_id)
    for k in range(frames):
        stem = os.path.join(sdir, f"frame_{k}")
        try:
            with open(stem + "_meta.json") as fh:
                metas.append(json.load(fh))
            images.append(np.asarray(Image.open(stem + ".png").convert("RGB"), dtype=np.float64) / 255.0)
            maps.append(np.asarray(Image.open(stem + "_mask.png"), dtype=np.int64))
            depths.append(read_pfm(stem + "_depth.pfm").astype(np.float64))
        except OSError as exc:
            raise OSError(f"reading frame {stem}: {exc}") from exc
    m0 = metas[0]
    K = CameraIntrinsics.from_dict(m0["intrinsics"])
    cams = np.stack([np.asarray(m["ego_pose_world"]["matrix"]) for m in metas])
    billboards = []
    for j, obj in enumerate(m0["instances"]):
        poses = np.stack([np.asarray(m["instances"][j]["world_pose"]["matrix"]) for m in metas])
        billboards.append(Billboard(obj["id"], obj["class"], obj["size"][0], obj["size"][1], poses))
    scene = SceneGeometry(K, m0["camera_height"], m0["wall_z"], cams, billboards)
    out = [_assemble(scene, k, images[k], depths[k], maps[k], seq_id) for k in range(frames)]
    _fill_instance_poses(out)
    return out


def read_dataset(directory):
    """Return ``(manifest, sequences)`` with sequences a list of Frame lists."""
    manifest = read_manifest(directory)
    seqs = [read_sequence(directory, e["id"], e["frames"]) for e in manifest["sequences"]]
    return manifest, seqs


def generate_dataset(config, sequences):
    return [generate_sequence(config, i) for i in range(sequences)]


@dataclass
class WarpCheck:
    seq_id: str
    target: int
    source: int
    agreement: float      # fraction of visible pixels within tolerance
    max_error: float      # over visible pixels
    visible: int


def validate_warp(sequences, tol=1e-5, offsets=(-1, 1)):
    """Compare ``piecewise_rigid_warp`` on GT depth and poses with ``gt_warp_field``.

    One WarpCheck per (target, source) pair over non-occluded pixels.
    """
    from .geometry import piecewise_rigid_warp

    checks = []
    for frames in sequences:
        for t in range(len(frames)):
            for o in offsets:
                if not 0 <= t + o < len(frames):
                    continue
                tgt, src = frames[t], frames[t + o]
                coords, visible = gt_warp_field(tgt, src, return_visible=True)
                masks, poses = instance_inputs(tgt, [src])
                warp, _ = piecewise_rigid_warp(tgt.gt_depth.astype(np.float64), tgt.intrinsics,
                                               relative_ego(tgt, src), masks[None], poses[0][None])
                err = np.linalg.norm(warp.data - coords, axis=-1)[visible]
                checks.append(WarpCheck(tgt.seq_id, t, t + o,
                                        float((err < tol).mean()) if err.size else 1.0,
                                        float(err.max()) if err.size else 0.0, int(err.size)))
    return checks
