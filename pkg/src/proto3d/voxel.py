"""Object-tensor algebra: crop/resize, vertical-axis rotation, similarity kernels.

Object tensors are plain ``float64`` arrays of shape ``(16, 16, 16, c)`` indexed
``[x, y, z, channel]`` with ``y`` the vertical axis.
"""

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from .errors import DegenerateBox

TENSOR_SIZE = 16
TENSOR_CENTER = (TENSOR_SIZE - 1) / 2.0  # 7.5: 90 degree turns permute the lattice
NORM_EPS = 1e-12


@dataclass(frozen=True)
class RotationSet:
    """Discrete vertical-axis rotations ``{0, step, ..., 360 - step}`` in degrees."""

    step_deg: float = 10.0

    def __post_init__(self):
        if self.step_deg <= 0 or not math.isclose(360.0 / self.step_deg, round(360.0 / self.step_deg)):
            raise ValueError(f"360 is not a multiple of step_deg={self.step_deg}")

    @property
    def angles(self):
        n = int(round(360.0 / self.step_deg))
        return tuple(float(i * self.step_deg) for i in range(n))

    def __len__(self):
        return int(round(360.0 / self.step_deg))

    def __iter__(self):
        return iter(self.angles)


def _cos_sin(angle_deg):
    """cos/sin with exact values at multiples of 90 degrees."""
    a = float(angle_deg) % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in exact:
        return exact[a]
    r = math.radians(a)
    return math.cos(r), math.sin(r)


def yaw_matrix(angle_deg):
    """3x3 rotation about the vertical (y) axis.

    Maps ``(x, z)`` to ``(cos*x + sin*z, -sin*x + cos*z)``; shared by the
    tensor warp and the scene generator so that yaw conventions agree.
    """
    c, s = _cos_sin(angle_deg)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@lru_cache(maxsize=None)
def rotation_table(angle_deg, size=TENSOR_SIZE):
    """Bilinear taps of the x-z plane warp for one angle.

    Returns ``(index, weight)`` arrays of shape ``(size*size, 4)``.  ``index``
    is the flat input plane index ``qx * size + qz`` or ``-1`` when the tap
    falls outside the tensor.  The vertical coordinate is never resampled, so
    these four taps are exactly the trilinear taps with non-zero weight.
    """
    c, s = _cos_sin(-float(angle_deg))
    center = (size - 1) / 2.0
    px, pz = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    dx, dz = px - center, pz - center
    sx = c * dx + s * dz + center
    sz = -s * dx + c * dz + center
    x0 = np.floor(sx)
    z0 = np.floor(sz)
    fx = sx - x0
    fz = sz - z0
    x0 = x0.astype(np.int64)
    z0 = z0.astype(np.int64)
    index = np.empty((size * size, 4), dtype=np.int64)
    weight = np.empty((size * size, 4), dtype=np.float64)
    taps = [(0, 0, (1 - fx) * (1 - fz)), (0, 1, (1 - fx) * fz), (1, 0, fx * (1 - fz)), (1, 1, fx * fz)]
    for t, (ox, oz, w) in enumerate(taps):
        qx = x0 + ox
        qz = z0 + oz
        inside = (qx >= 0) & (qx < size) & (qz >= 0) & (qz < size)
        index[:, t] = np.where(inside, qx * size + qz, -1).ravel()
        weight[:, t] = np.where(inside, w, 0.0).ravel()
    index.setflags(write=False)
    weight.setflags(write=False)
    return index, weight


def rotation_tables(rots):
    """Stacked tables for every angle of a RotationSet: ``(R, 256, 4)`` each."""
    tabs = [rotation_table(a) for a in rots]
    return np.stack([t[0] for t in tabs]), np.stack([t[1] for t in tabs])


def rotation_matrix(angle_deg, size=TENSOR_SIZE):
    """Dense ``(size*size, size*size)`` x-z plane warp matrix of one angle."""
    index, weight = rotation_table(angle_deg, size)
    m = np.zeros((size * size, size * size))
    for tap in range(4):
        ok = index[:, tap] >= 0
        np.add.at(m, (np.nonzero(ok)[0], index[ok, tap]), weight[ok, tap])
    return m


@lru_cache(maxsize=None)
def _gram_tables(angles, size):
    mats = [rotation_matrix(a, size) for a in angles]
    grams = [m.T @ m for m in mats]
    pattern = np.zeros((size * size, size * size), dtype=bool)
    for g in grams:
        pattern |= g != 0.0
    q1, q2 = np.nonzero(np.triu(pattern))
    scale = np.where(q1 == q2, 1.0, 2.0)
    values = np.stack([g[q1, q2] * scale for g in grams])
    pairs = np.stack([q1, q2], axis=1).astype(np.int64)
    pairs.setflags(write=False)
    values.setflags(write=False)
    return pairs, values


def rotation_grams(rots, size=TENSOR_SIZE):
    """Sparse Gram matrices ``M_R^T M_R`` of the plane warps of a RotationSet.

    Returns ``(pairs (P, 2), values (R, P))`` over the upper-triangular union
    pattern, off-diagonal values doubled, so that for a tensor whose x-z
    columns are ``C_q`` the squared norm of its rotation by angle ``r`` is
    ``sum_p values[r, p] * <C_pairs[p,0], C_pairs[p,1]>``.
    """
    return _gram_tables(tuple(float(a) for a in rots), size)


def rotate_tensor(t, angle):
    """Rotate tensor content by ``angle`` degrees about the vertical axis.

    The rotation center is the lattice center (7.5, 7.5, 7.5).  Samples that
    fall outside the tensor read zero.
    """
    t = np.asarray(t, dtype=np.float64)
    if float(angle) % 360.0 == 0.0:
        return t.copy()
    n = t.shape[0]
    index, weight = rotation_table(float(angle) % 360.0, n)
    # plane rows: (x*n + z), columns: (y, channel)
    plane = np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(n * n, -1)
    padded = np.vstack([plane, np.zeros((1, plane.shape[1]))])
    out = np.zeros_like(plane)
    for tap in range(4):
        out += weight[:, tap, None] * padded[index[:, tap]]
    return out.reshape(n, n, n, -1).transpose(0, 2, 1, 3).copy()


def cosine_similarity(a, b):
    """Flat cosine similarity; 0 when either input has (near) zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def l2_distance(a, b):
    """Euclidean norm of the elementwise difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def max_rotated_cosine(reference, t, rots):
    """Max over the rotation set of ``cos(reference, rotate(t, R))``.

    Returns ``(score, angle)``; ties go to the smaller angle.
    """
    best, best_angle = -np.inf, 0.0
    for angle in rots:
        s = cosine_similarity(reference, rotate_tensor(t, angle))
        if s > best:
            best, best_angle = s, angle
    return best, best_angle


def _taps(pos, grid_min, pitch, n_in):
    """Linear taps at world positions: samples inside the grid AABB clamp to the
    edge voxel beyond the outermost centers; samples outside it read zero."""
    idx = (pos - grid_min) / pitch - 0.5
    i0 = np.floor(idx).astype(np.int64)
    f = idx - i0
    inside = (pos >= grid_min) & (pos <= grid_min + n_in * pitch)
    index = np.stack([np.clip(i0, 0, n_in - 1), np.clip(i0 + 1, 0, n_in - 1)], axis=-1)
    weight = np.stack([1.0 - f, f], axis=-1) * inside[..., None]
    index[~inside] = -1
    return index, weight


def interp_matrix(lo, hi, n_out, grid_min, pitch, n_in):
    """1D linear-interpolation weights for ``n_out`` cell-centered samples.

    Row ``a`` samples world coordinate ``lo + (a + 0.5) / n_out * (hi - lo)``
    from a lattice of ``n_in`` voxel centers; samples outside the grid read 0.
    """
    pos = lo + (np.arange(n_out) + 0.5) / n_out * (hi - lo)
    index, weight = _taps(pos, grid_min, pitch, n_in)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for t in range(2):
        ok = index[:, t] >= 0
        np.add.at(m, (rows[ok], index[ok, t]), weight[ok, t])
    return m


def interp_taps(starts, length, n_out, grid_min, pitch, n_in):
    """Two-tap form of :func:`interp_matrix` for many windows along one axis.

    Returns ``(index, weight)`` of shape (len(starts), n_out, 2); samples
    outside the grid get index -1 and weight 0.
    """
    starts = np.asarray(starts, dtype=float)[:, None]
    pos = starts + (np.arange(n_out) + 0.5) / n_out * length
    index, weight = _taps(pos, grid_min, pitch, n_in)
    return np.ascontiguousarray(index), np.ascontiguousarray(weight)


def crop_resize(grid, box, size=TENSOR_SIZE):
    """Trilinearly resample the interior of ``box`` onto a ``size``^3 lattice.

    ``grid`` is a :class:`~proto3d.geometry.VoxelGrid`; samples outside the
    grid AABB read zero, and samples between the AABB and the outermost voxel
    centers take the edge value.  Trilinear weights on an axis-aligned lattice factor per
    axis, so the resampling is three 1D interpolation passes.
    """
    lo = np.asarray(box.min_corner, dtype=float)
    hi = np.asarray(box.max_corner, dtype=float)
    if np.any(hi - lo <= 0):
        raise DegenerateBox(f"box edges must be positive, got {hi - lo}")
    spec = grid.spec
    pitch = spec.pitch
    mx, my, mz = (
        interp_matrix(lo[i], hi[i], size, spec.aabb_min[i], pitch[i], spec.resolution[i]) for i in range(3)
    )
    data = np.asarray(grid.data, dtype=np.float64)
    return np.einsum("ax,by,cz,xyzk->abck", mx, my, mz, data, optimize=True)


def _sqnorms(batch):
    """Squared L2 norm of each tensor in a batch."""
    flat = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
    return np.einsum("ij,ij->i", flat, flat)
