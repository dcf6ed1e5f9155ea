"""Deterministic synthetic desk scenes rendered from a ring of RGB-D cameras.

Objects are voxel templates from eight procedural shape categories, each
with its own base color and a gray marker on its front (+z) slab so that
every category has a unique yaw.  Objects are yawed, scaled and placed on a
ground plane just below the grid, rasterized into the scene grid itself, and
rendered by exact ray/voxel traversal.
"""

from dataclasses import dataclass, asdict
import math

import numpy as np

from . import _kernels
from .detect import Box2D, Box3D
from .errors import PlacementFailure
from .geometry import CameraIntrinsics, CameraPose, GridSpec, PosedImage, pixel_rays, project_points
from .voxel import yaw_matrix

TEMPLATE_SIZE = 12
CATEGORY_NAMES = ("box", "l_shape", "t_shape", "pyramid", "cross", "ring", "wedge", "tower")
BASE_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.85, 0.15],
        [0.15, 0.15, 0.85],
        [0.85, 0.85, 0.15],
        [0.85, 0.15, 0.85],
        [0.15, 0.85, 0.85],
        [0.85, 0.85, 0.85],
        [0.15, 0.15, 0.15],
    ]
)
MARKER_COLOR = np.array([0.5, 0.5, 0.5])


def _shape(name):
    n = TEMPLATE_SIZE
    occ = np.zeros((n, n, n), dtype=bool)  # [x, y, z]
    if name == "box":
        occ[2:10, 0:6, 2:10] = True
    elif name == "l_shape":
        occ[1:11, 0:8, 1:5] = True
        occ[1:5, 0:8, 1:11] = True
    elif name == "t_shape":
        occ[0:12, 0:6, 8:12] = True
        occ[4:8, 0:6, 0:8] = True
    elif name == "pyramid":
        occ[1:11, 0:3, 1:11] = True
        occ[3:9, 3:6, 3:9] = True
        occ[5:7, 6:9, 5:7] = True
    elif name == "cross":
        occ[4:8, 0:5, 0:12] = True
        occ[0:12, 0:5, 4:8] = True
    elif name == "ring":
        occ[1:11, 0:6, 1:11] = True
        occ[3:9, 0:6, 3:9] = False
    elif name == "wedge":
        for x in range(1, 11):
            occ[x, 0 : 11 - x, 2:10] = True
    elif name == "tower":
        occ[3:9, 0:12, 3:9] = True
    else:
        raise KeyError(name)
    return occ


@dataclass(frozen=True)
class ShapeCategory:
    id: int
    name: str
    occupancy: np.ndarray  # (12, 12, 12) bool, [x, y, z]
    colors: np.ndarray  # (12, 12, 12, 3)

    @property
    def footprint_radius(self):
        """Template-unit radius of the x-z footprint around the template center."""
        xs, _, zs = np.nonzero(self.occupancy)
        c = TEMPLATE_SIZE / 2.0
        corners = [(xs + dx - c) ** 2 + (zs + dz - c) ** 2 for dx in (0, 1) for dz in (0, 1)]
        return float(np.sqrt(np.max(corners)))


def categories():
    out = []
    for k, name in enumerate(CATEGORY_NAMES):
        occ = _shape(name)
        colors = np.broadcast_to(BASE_COLORS[k], occ.shape + (3,)).copy()
        zmax = np.nonzero(occ.any(axis=(0, 1)))[0].max()
        colors[:, :, zmax - 1 :, :] = MARKER_COLOR
        colors[~occ] = 0.0
        out.append(ShapeCategory(k, name, occ, colors))
    return out


CATEGORIES = categories()


@dataclass
class SynthConfig:
    num_objects: tuple = (1, 3)
    scale_range: tuple = (0.75, 1.25)
    num_views: int = 8
    image_size: tuple = (96, 96)  # (width, height)
    fov_deg: float = 55.0
    grid_min: tuple = (-0.6, 0.0, -0.6)
    grid_max: tuple = (0.6, 0.48, 0.6)
    grid_resolution: tuple = (48, 48, 48)
    object_size: float = 0.3
    min_gap: float = 0.08
    camera_radius: float = 1.3
    camera_height: float = 0.8
    camera_target: tuple = (0.0, 0.1, 0.0)
    ground_y: float = -0.01
    color_noise: float = 0.0
    categories: tuple = tuple(range(len(CATEGORY_NAMES)))

    @property
    def grid_spec(self):
        return GridSpec(self.grid_min, self.grid_max, self.grid_resolution)

    @property
    def intrinsics(self):
        w, h = self.image_size
        f = (w / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)
        return CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h)

    def camera_poses(self):
        target = np.asarray(self.camera_target, dtype=float)
        poses = []
        for i in range(self.num_views):
            az = math.radians(360.0 * i / self.num_views)
            eye = target + np.array(
                [self.camera_radius * math.cos(az), self.camera_height - target[1], self.camera_radius * math.sin(az)]
            )
            poses.append(CameraPose.look_at(eye, target))
        return poses

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class ObjectGT:
    category: int
    box: Box3D
    yaw_deg: float
    scale: float
    position: tuple  # (x, z) footprint center in world meters


@dataclass
class SceneGT:
    objects: list
    num_views: int
    seed: int = 0
    index: int = 0

    def boxes(self):
        return [o.box for o in self.objects]

    def to_dict(self):
        return {
            "objects": [
                {
                    "category": int(o.category),
                    "box": [float(v) for v in (*o.box.min_corner, *o.box.max_corner)],
                    "yaw_deg": float(o.yaw_deg),
                    "scale": float(o.scale),
                    "position": [float(v) for v in o.position],
                }
                for o in self.objects
            ],
            "views": int(self.num_views),
            "seed": int(self.seed),
            "index": int(self.index),
        }

    @classmethod
    def from_dict(cls, d):
        objs = [
            ObjectGT(o["category"], Box3D.from_list(o["box"]), o["yaw_deg"], o["scale"], tuple(o.get("position", (0, 0))))
            for o in d["objects"]
        ]
        return cls(objs, d["views"], d.get("seed", 0), d.get("index", 0))


def rasterize_object(spec, category, yaw_deg, scale, position, object_size):
    """Boolean mask and colors of one placed object on the grid lattice."""
    cat = CATEGORIES[category]
    tvox = scale * object_size / TEMPLATE_SIZE
    centers = spec.voxel_centers()
    rel = centers - np.array([position[0], 0.0, position[1]])
    local = rel @ yaw_matrix(yaw_deg)  # inverse yaw: R^T p written as p @ R
    tx = np.floor(local[..., 0] / tvox + TEMPLATE_SIZE / 2.0).astype(np.int64)
    ty = np.floor(centers[..., 1] / tvox).astype(np.int64)
    tz = np.floor(local[..., 2] / tvox + TEMPLATE_SIZE / 2.0).astype(np.int64)
    ok = (tx >= 0) & (tx < TEMPLATE_SIZE) & (ty >= 0) & (ty < TEMPLATE_SIZE) & (tz >= 0) & (tz < TEMPLATE_SIZE)
    mask = np.zeros(spec.resolution, dtype=bool)
    colors = np.zeros(spec.resolution + (3,))
    mask[ok] = cat.occupancy[tx[ok], ty[ok], tz[ok]]
    colors[mask] = cat.colors[tx[mask], ty[mask], tz[mask]]
    return mask, colors


def mask_box(spec, mask):
    """Tight world AABB of the voxels in ``mask``."""
    idx = np.argwhere(mask)
    lo = spec.lo + idx.min(axis=0) * spec.pitch
    hi = spec.lo + (idx.max(axis=0) + 1) * spec.pitch
    return Box3D(tuple(lo), tuple(hi))


def build_world(gt, config):
    """Rasterize all GT objects: ``(occupied, colors, object_id)`` grids."""
    spec = config.grid_spec
    occ = np.zeros(spec.resolution, dtype=bool)
    colors = np.zeros(spec.resolution + (3,))
    ids = -np.ones(spec.resolution, dtype=np.int64)
    for i, o in enumerate(gt.objects):
        m, c = rasterize_object(spec, o.category, o.yaw_deg, o.scale, o.position, config.object_size)
        occ |= m
        colors[m] = c[m]
        ids[m] = i
    return occ, colors, ids


def render_world(occ, colors, spec, intrinsics, pose, ground_y):
    """Render RGB and z-depth of a voxel world by exact traversal.

    The reported depth lies a little inside the first-hit voxel (a quarter of
    the smallest voxel edge, or half the chord if shorter), so that the
    back-projected point falls in the voxel that produced it.  Rays missing
    every voxel hit the black ground plane ``y = ground_y`` or see sky
    (depth 0).
    """
    origins, dirs = pixel_rays(intrinsics, pose)
    idx, t_in, t_out = _kernels.first_hit(origins, dirs, occ, spec.lo, spec.pitch)
    hit = idx[:, 0] >= 0
    n = dirs.shape[0]
    depth = np.zeros(n)
    rgb = np.zeros((n, 3))
    scale = np.linalg.norm(dirs, axis=1)
    nudge = np.minimum(0.5 * (t_out - t_in), 0.25 * spec.pitch.min() / scale)
    depth[hit] = (t_in + nudge)[hit]
    rgb[hit] = colors[idx[hit, 0], idx[hit, 1], idx[hit, 2]]
    down = (~hit) & (dirs[:, 1] < 0)
    depth[down] = (ground_y - origins[down, 1]) / dirs[down, 1]
    shape = (intrinsics.height, intrinsics.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape)


def _place(rng, config):
    spec = config.grid_spec
    lo, hi = config.num_objects
    count = int(rng.integers(lo, hi + 1))
    objects = []
    masks = []
    cats = np.asarray(config.categories)
    for _ in range(count):
        for _attempt in range(100):
            category = int(cats[rng.integers(len(cats))])
            yaw = float(rng.uniform(0.0, 360.0))
            scale = float(rng.uniform(*config.scale_range))
            radius = CATEGORIES[category].footprint_radius * scale * config.object_size / TEMPLATE_SIZE
            margin = radius + spec.pitch[0]
            if spec.lo[0] + margin > spec.hi[0] - margin or spec.lo[2] + margin > spec.hi[2] - margin:
                continue  # too large for the grid at this scale
            px = float(rng.uniform(spec.lo[0] + margin, spec.hi[0] - margin))
            pz = float(rng.uniform(spec.lo[2] + margin, spec.hi[2] - margin))
            mask, _ = rasterize_object(spec, category, yaw, scale, (px, pz), config.object_size)
            if not mask.any():
                continue
            box = mask_box(spec, mask)
            padded = Box3D(
                tuple(np.array(box.min_corner) - config.min_gap), tuple(np.array(box.max_corner) + config.min_gap)
            )
            if any(padded.intersects(o.box) for o in objects):
                continue
            objects.append(ObjectGT(category, box, yaw, scale, (px, pz)))
            masks.append(mask)
            break
        else:
            raise PlacementFailure(f"could not place object {len(objects) + 1} of {count} after 100 attempts")
    return objects


def generate_scene(seed, config=None, index=0):
    """Generate one scene: ``(list of PosedImage, SceneGT)``.

    The RNG stream is derived from ``(seed, index)`` only, so a scene's content
    does not depend on which other scenes are generated.
    """
    config = config or SynthConfig()
    rng = np.random.default_rng([int(seed), int(index)])
    objects = _place(rng, config)
    gt = SceneGT(objects, config.num_views, seed, index)
    occ, colors, _ = build_world(gt, config)
    intr = config.intrinsics
    views = []
    for pose in config.camera_poses():
        rgb, depth = render_world(occ, colors, config.grid_spec, intr, pose, config.ground_y)
        if config.color_noise > 0:
            rgb = np.clip(rgb + rng.normal(0.0, config.color_noise, rgb.shape), 0.0, 1.0)
        views.append(PosedImage(rgb, depth, intr, pose))
    return views, gt


def gt_boxes_2d(gt, view_index, intrinsics, pose, jitter=0.0, rng=None):
    """Project GT boxes into one view as pixel AABBs, optionally jittered.

    Each edge moves by an independent uniform offset in ``[-jitter, jitter]``.
    Objects entirely behind the camera are skipped.
    """
    out = []
    w, h = intrinsics.width, intrinsics.height
    for o in gt.objects:
        corners = o.box.corners()
        u, v, z = project_points(intrinsics, pose, corners)
        front = z > 1e-9
        if not front.any():
            continue
        if not front.all():
            # clamp the part behind the camera to the image border
            u = np.where(front, u, np.nan)
            v = np.where(front, v, np.nan)
        u0, u1 = np.nanmin(u), np.nanmax(u)
        v0, v1 = np.nanmin(v), np.nanmax(v)
        if jitter > 0:
            if rng is None:
                rng = np.random.default_rng(0)
            d = rng.uniform(-jitter, jitter, 4)
            u0, v0, u1, v1 = u0 + d[0], v0 + d[1], u1 + d[2], v1 + d[3]
        u0, u1 = max(u0, 0.0), min(u1, w - 1.0)
        v0, v1 = max(v0, 0.0), min(v1, h - 1.0)
        if u1 <= u0 or v1 <= v0:
            continue
        out.append(Box2D(float(u0), float(v0), float(u1), float(v1), view_index))
    return out


def scene_boxes_2d(gt, views, jitter=0.0, seed=0):
    """2D boxes for every view of a scene with a per-scene jitter stream."""
    rng = np.random.default_rng([int(seed), int(gt.seed), int(gt.index), 2])
    boxes = []
    for i, view in enumerate(views):
        boxes.extend(gt_boxes_2d(gt, i, view.intrinsics, view.pose, jitter, rng))
    return boxes
