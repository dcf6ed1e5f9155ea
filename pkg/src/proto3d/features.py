"""Geometric scene encoder and object-centric crops.

The encoder turns a fused RGB + hit-mask grid and its occupancy into the
scene feature map that every downstream module consumes: solid occupancy
(everything not seen as FREE), surface colors filled into object interiors
and centered on gray, and a light Gaussian blur so that matching tolerates
voxel-level misalignment.
"""

import numpy as np
from scipy import ndimage

from .detect import Box3D
from .geometry import FREE, OCCUPIED, VoxelGrid
from .voxel import crop_resize


def solid_mask(occ):
    """Voxels not observed as free space."""
    return occ.labels != FREE


def encode_scene(grid, occ, sigma=2.0, occupancy_weight=1.0):
    """Four-channel scene features: centered color (3) and occupancy (1)."""
    solid = solid_mask(occ)
    colored = (occ.labels == OCCUPIED) & (grid.data[..., -1] > 0)
    feats = np.zeros(grid.spec.resolution + (4,))
    if colored.any():
        # nearest observed surface color for every voxel
        _, nearest = ndimage.distance_transform_edt(~colored, return_indices=True)
        rgb = grid.data[nearest[0], nearest[1], nearest[2], :3]
        feats[..., :3] = np.where(solid[..., None], 2.0 * (rgb - 0.5), 0.0)
    feats[..., 3] = occupancy_weight * solid
    if sigma > 0:
        for ch in range(4):
            feats[..., ch] = ndimage.gaussian_filter(feats[..., ch], sigma, mode="constant")
    return VoxelGrid(grid.spec, feats)


def canonical_box(solid, spec, box):
    """Rotation-covariant crop box for the object inside ``box``.

    The x-z footprint is a square centered on the centroid of the solid
    voxels in ``box`` whose half-side is their largest x-z distance from that
    centroid; the vertical range is the box's.  Turning the object about the
    vertical axis turns its crop about the tensor center.
    """
    lo = np.clip(np.floor((box.lo - spec.lo) / spec.pitch + 1e-9).astype(int), 0, None)
    hi = np.minimum(np.ceil((box.hi - spec.lo) / spec.pitch - 1e-9).astype(int), spec.resolution)
    sub = solid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    idx = np.argwhere(sub)
    if idx.size == 0:
        side = max(box.size[0], box.size[2])
        return Box3D.from_center(box.center, (side, box.size[1], side))
    pts = spec.lo + (idx + lo + 0.5) * spec.pitch
    cx, cz = pts[:, 0].mean(), pts[:, 2].mean()
    r = np.sqrt((pts[:, 0] - cx) ** 2 + (pts[:, 2] - cz) ** 2).max() + 0.5 * max(spec.pitch[0], spec.pitch[2])
    return Box3D((cx - r, box.lo[1], cz - r), (cx + r, box.hi[1], cz + r))


def object_tensor(grid, solid, box):
    """16^3 object tensor cropped from the canonical box of ``box``."""
    return crop_resize(grid, canonical_box(solid, grid.spec, box))
