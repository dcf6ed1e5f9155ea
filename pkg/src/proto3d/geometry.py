"""Pinhole camera math, RGB-D lifting into world voxel grids, and rendering.

Conventions
-----------
World frame: ``x`` right, ``y`` up (the axis of all yaw rotations), ``z`` depth.
Camera frame: OpenCV style, ``x`` right, ``y`` down, ``z`` forward, so that
``u = fx * x / z + cx`` and ``v = fy * y / z + cy``.  Pixel ``(row i, col j)``
has its center at ``(u, v) = (j, i)``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import BehindCamera, SpecMismatch

UNKNOWN = 0
FREE = _kernels.FREE
OCCUPIED = _kernels.OCCUPIED


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
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Rigid world-to-camera transform (4x4, meters)."""

    transform: np.ndarray

    def __post_init__(self):
        t = np.array(self.transform, dtype=np.float64)
        if t.shape != (4, 4):
            raise ValueError("pose must be 4x4")
        rot = t[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("pose rotation must be orthonormal with det +1")
        if not np.allclose(t[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("pose last row must be (0, 0, 0, 1)")
        t.setflags(write=False)
        object.__setattr__(self, "transform", t)

    @property
    def rotation(self):
        return self.transform[:3, :3]

    @property
    def translation(self):
        return self.transform[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self):
        """Camera-to-world 4x4 matrix."""
        inv = np.eye(4)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = self.center
        return inv

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)):
        """Pose of a camera at ``eye`` looking at ``target`` with world ``up``."""
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        down = -np.asarray(up, dtype=float)
        down = down - fwd * np.dot(down, fwd)
        down /= np.linalg.norm(down)
        right = np.cross(down, fwd)
        rot = np.stack([right, down, fwd])
        t = np.eye(4)
        t[:3, :3] = rot
        t[:3, 3] = -rot @ eye
        return cls(t)


@dataclass(eq=False)
class PosedImage:
    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w):
            raise ValueError("image dimensions do not match the intrinsics")
        if self.rgb.min(initial=0.0) < 0 or self.rgb.max(initial=0.0) > 1:
            raise ValueError("rgb values must lie in [0, 1]")
        if not np.all(np.isfinite(self.depth)) or self.depth.min(initial=0.0) < 0:
            raise ValueError("depth must be finite and non-negative")


@dataclass(frozen=True, eq=False)
class GridSpec:
    aabb_min: tuple
    aabb_max: tuple
    resolution: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.aabb_min)
        hi = tuple(float(v) for v in self.aabb_max)
        res = tuple(int(v) for v in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise ValueError("grid spec needs 3D bounds and resolution")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("aabb_max must exceed aabb_min componentwise")
        if any(r < 2 for r in res):
            raise ValueError("resolution components must be >= 2")
        object.__setattr__(self, "aabb_min", lo)
        object.__setattr__(self, "aabb_max", hi)
        object.__setattr__(self, "resolution", res)

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (self.aabb_min, self.aabb_max, self.resolution) == (other.aabb_min, other.aabb_max, other.resolution)

    def __hash__(self):
        return hash((self.aabb_min, self.aabb_max, self.resolution))

    @property
    def lo(self):
        return np.array(self.aabb_min)

    @property
    def hi(self):
        return np.array(self.aabb_max)

    @property
    def pitch(self):
        return (self.hi - self.lo) / np.array(self.resolution)

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape ``(w, h, d, 3)``."""
        axes = [self.lo[i] + (np.arange(self.resolution[i]) + 0.5) * self.pitch[i] for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def world_to_index(self, pts):
        """Integer voxel indices of world points (may fall outside the grid)."""
        return np.floor((np.asarray(pts, dtype=float) - self.lo) / self.pitch).astype(np.int64)

    def shifted(self, offset):
        off = np.asarray(offset, dtype=float)
        return GridSpec(tuple(self.lo + off), tuple(self.hi + off), self.resolution)


@dataclass(eq=False)
class VoxelGrid:
    """World-anchored ``w x h x d x c`` feature grid indexed ``[x, y, z, channel]``."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[:3] != self.spec.resolution:
            raise ValueError(f"data shape {self.data.shape} does not match {self.spec.resolution}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data must be finite")

    @property
    def channels(self):
        return self.data.shape[3]


@dataclass(eq=False)
class OccupancyGrid:
    """Tri-state labels: ``UNKNOWN`` (0) < ``FREE`` (1) < ``OCCUPIED`` (2)."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.shape != self.spec.resolution:
            raise ValueError("label shape does not match the grid spec")

    @classmethod
    def unknown(cls, spec):
        return cls(spec, np.zeros(spec.resolution, dtype=np.int8))

    @property
    def occupied(self):
        return self.labels == OCCUPIED

    @property
    def free(self):
        return self.labels == FREE


def project_points(intrinsics, pose, world_pts):
    """Vectorized projection: returns ``(u, v, z)`` arrays (no depth check)."""
    pts = np.asarray(world_pts, dtype=np.float64).reshape(-1, 3)
    cam = pts @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return u, v, z


def project_point(intrinsics, pose, world_pt):
    """Project one world point; raises :class:`BehindCamera` if depth <= 1e-9."""
    u, v, z = project_points(intrinsics, pose, world_pt)
    if not z[0] > 1e-9:
        raise BehindCamera(f"point at camera depth {z[0]:.3g}")
    return float(u[0]), float(v[0]), float(z[0])


def back_project(intrinsics, pose, u, v, depth):
    """World points of pixels ``(u, v)`` at camera depth ``depth`` (broadcasting)."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    cam = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx * depth, (v - intrinsics.cy) / intrinsics.fy * depth, depth], axis=-1
    )
    return (cam - pose.translation) @ pose.rotation


def pixel_rays(intrinsics, pose):
    """Ray origins and directions for every pixel center.

    Directions have unit camera-space depth, so the ray parameter is the
    z-depth of the point.  Shapes: ``(H*W, 3)`` in row-major pixel order.
    """
    v, u = np.meshgrid(np.arange(intrinsics.height), np.arange(intrinsics.width), indexing="ij")
    d_cam = np.stack(
        [(u.ravel() - intrinsics.cx) / intrinsics.fx, (v.ravel() - intrinsics.cy) / intrinsics.fy,
         np.ones(u.size)], axis=-1,
    )
    dirs = d_cam @ pose.rotation
    origins = np.broadcast_to(pose.center, dirs.shape).copy()
    return origins, np.ascontiguousarray(dirs)


def bilinear_sample(img, u, v):
    """Sample an ``H x W x C`` image at subpixel ``(u, v)``; borders clamp."""
    h, w = img.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(u.shape, np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(v.shape, np.int64)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    return (
        img[v0, u0] * (1 - fu) * (1 - fv)
        + img[v0, u1] * fu * (1 - fv)
        + img[v1, u0] * (1 - fu) * fv
        + img[v1, u1] * fu * fv
    )


def raycast_freespace(image, spec):
    """Label voxels FREE along camera rays and OCCUPIED at depth hits.

    Each valid depth pixel is marched from the camera center to its
    back-projected point in steps of half the smallest voxel edge.
    """
    labels = np.zeros(spec.resolution, dtype=np.int8)
    valid = image.depth > 0
    if not valid.any():
        return OccupancyGrid(spec, labels)
    rows, cols = np.nonzero(valid)
    pts = back_project(image.intrinsics, image.pose, cols, rows, image.depth[rows, cols])
    center = image.pose.center
    seg = pts - center
    lengths = np.linalg.norm(seg, axis=1)
    dirs = seg / lengths[:, None]
    origins = np.broadcast_to(center, dirs.shape).copy()
    step = 0.5 * float(spec.pitch.min())
    _kernels.march_free(origins, np.ascontiguousarray(dirs), lengths, spec.lo, spec.pitch, step, labels)
    return OccupancyGrid(spec, labels)


def unproject_image(image, spec, visible_only=False):
    """Lift one posed RGB-D view into a 4-channel grid (RGB + hit mask).

    A voxel is hit when its center projects inside the image onto a pixel
    with valid depth; its color is the bilinear RGB sample there.  With
    ``visible_only`` the hit mask (and color) is also cleared where this
    view's occupancy is UNKNOWN, i.e. behind the observed surface.
    """
    occ = raycast_freespace(image, spec)
    data = np.zeros(spec.resolution + (4,))
    centers = spec.voxel_centers().reshape(-1, 3)
    intr = image.intrinsics
    u, v, z = project_points(intr, image.pose, centers)
    inside = (z > 1e-9) & (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5)
    idx = np.nonzero(inside)[0]
    if idx.size:
        cols = np.clip(np.rint(u[idx]).astype(np.int64), 0, intr.width - 1)
        rows = np.clip(np.rint(v[idx]).astype(np.int64), 0, intr.height - 1)
        has_depth = image.depth[rows, cols] > 0
        idx = idx[has_depth]
        flat = data.reshape(-1, 4)
        flat[idx, :3] = bilinear_sample(image.rgb, u[idx], v[idx])
        flat[idx, 3] = 1.0
    if visible_only:
        data[occ.labels == UNKNOWN] = 0.0
    return VoxelGrid(spec, data), occ


def fuse_views(grids):
    """Fuse per-view ``(VoxelGrid, OccupancyGrid)`` pairs into one.

    Features are the hit-mask weighted mean over views (last channel is the
    hit mask, fused as the union).  Per-voxel contributions are summed in
    sorted order, which makes the result bitwise independent of input order.
    Occupancy takes the highest label: OCCUPIED over FREE over UNKNOWN.
    """
    grids = list(grids)
    if not grids:
        raise ValueError("no grids to fuse")
    spec = grids[0][0].spec
    c = grids[0][0].channels
    for g, o in grids:
        if g.spec != spec or o.spec != spec or g.channels != c:
            raise SpecMismatch("all grids must share one GridSpec and channel count")
    if len(grids) == 1:
        g, o = grids[0]
        return VoxelGrid(spec, g.data.copy()), OccupancyGrid(spec, o.labels.copy())
    stack = np.stack([g.data for g, _ in grids])
    weight = stack[..., -1:]
    num = np.sort(stack[..., :-1] * weight, axis=0).sum(axis=0)
    den = weight.sum(axis=0)
    data = np.zeros(spec.resolution + (c,))
    hit = den[..., 0] > 0
    data[hit, :-1] = num[hit] / den[hit]
    data[..., -1] = hit
    labels = np.max(np.stack([o.labels for _, o in grids]), axis=0)
    return VoxelGrid(spec, data), OccupancyGrid(spec, labels)


def render_view(grid, occ, intrinsics, pose):
    """Render RGB and occupancy images by exact ray traversal of the grid.

    RGB is channels 0-2 of the first OCCUPIED voxel on each pixel ray (0 on
    a miss); the occupancy image is the max of the occupancy along the ray.
    """
    if grid.spec != occ.spec:
        raise SpecMismatch("grid and occupancy specs differ")
    origins, dirs = pixel_rays(intrinsics, pose)
    idx, _, _ = _kernels.first_hit(origins, dirs, occ.occupied, grid.spec.lo, grid.spec.pitch)
    hit = idx[:, 0] >= 0
    rgb = np.zeros((dirs.shape[0], 3))
    rgb[hit] = grid.data[idx[hit, 0], idx[hit, 1], idx[hit, 2], :3]
    shape = (intrinsics.height, intrinsics.width)
    return rgb.reshape(shape + (3,)), hit.reshape(shape).astype(np.float64)


def view_prediction_loss(pred_rgb, pred_occ_logits, gt_rgb, gt_occ, valid=None):
    """RGB L1 and class-balanced logistic occupancy loss of a predicted view.

    ``gt_occ`` holds labels in {-1, +1}; ``valid`` masks which labels count
    (default: all non-zero labels).  The logistic term is averaged within
    each class present, then across classes; it is 0 with no valid pixels.
    """
    pred_rgb = np.asarray(pred_rgb, dtype=np.float64)
    gt_rgb = np.asarray(gt_rgb, dtype=np.float64)
    logits = np.asarray(pred_occ_logits, dtype=np.float64)
    labels = np.asarray(gt_occ, dtype=np.float64)
    if valid is None:
        valid = labels != 0
    valid = np.asarray(valid, dtype=bool)
    rgb_l1 = float(np.mean(np.abs(pred_rgb - gt_rgb)))
    per_class = []
    for cls in (-1.0, 1.0):
        m = valid & (labels == cls)
        if m.any():
            per_class.append(float(np.mean(np.logaddexp(0.0, -cls * logits[m]))))
    occ = float(np.mean(per_class)) if per_class else 0.0
    return rgb_l1, occ
