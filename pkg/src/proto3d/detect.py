"""3D box bootstrap, saliency, pseudo-labeling and a matched-filter detector.

The detector scores sliding windows by the rotation-pooled cosine similarity
of the window crop against a bank of prototype templates; refitting it on
prototype-verified pseudo-labels is what closes the self-training loop.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import DegenerateBox, EmptyDictionary, NoValidProposals
from .voxel import TENSOR_SIZE, _sqnorms, cosine_similarity, crop_resize, interp_taps

VALID = "valid"
INVALID = "invalid"
UNLABELED = "unlabeled"

_CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    view_index: int = 0

    def __post_init__(self):
        if not (self.u_max > self.u_min and self.v_max > self.v_min):
            raise DegenerateBox("2D box must have positive extent")


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned world box."""

    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if any(b <= a for a, b in zip(lo, hi)):
            raise DegenerateBox(f"box edges must be positive: {lo} {hi}")

    @classmethod
    def from_list(cls, v):
        return cls(tuple(v[:3]), tuple(v[3:6]))

    @classmethod
    def from_center(cls, center, size):
        c = np.asarray(center, dtype=float)
        s = np.asarray(size, dtype=float) / 2.0
        return cls(tuple(c - s), tuple(c + s))

    def to_list(self):
        return [*self.min_corner, *self.max_corner]

    @property
    def lo(self):
        return np.array(self.min_corner)

    @property
    def hi(self):
        return np.array(self.max_corner)

    @property
    def size(self):
        return self.hi - self.lo

    @property
    def center(self):
        return (self.hi + self.lo) / 2.0

    @property
    def volume(self):
        return float(np.prod(self.size))

    def corners(self):
        lo, hi = self.lo, self.hi
        return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]] for i in (0, 1) for j in (0, 1) for k in (0, 1)])

    def intersects(self, other):
        return bool(np.all(np.minimum(self.hi, other.hi) > np.maximum(self.lo, other.lo)))

    def translated(self, offset):
        off = np.asarray(offset, dtype=float)
        return Box3D(tuple(self.lo + off), tuple(self.hi + off))

    def clipped(self, lo, hi):
        """Intersection with ``[lo, hi]`` or ``None`` when empty."""
        a = np.maximum(self.lo, lo)
        b = np.minimum(self.hi, hi)
        if np.any(b <= a):
            return None
        return Box3D(tuple(a), tuple(b))


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class LabeledProposal:
    proposal: Proposal
    label: str
    prototype_sim: float
    surround_sim: float
    prototype_id: int = -1
    rotation: float = 0.0
    valid_thresh: float = 0.8
    invalid_thresh: float = 0.65

    def to_dict(self):
        return {
            "box": [float(v) for v in self.proposal.box.to_list()],
            "confidence": float(self.proposal.confidence),
            "label": self.label,
            "prototype_sim": float(self.prototype_sim),
            "surround_sim": float(self.surround_sim),
        }


@dataclass(frozen=True, eq=False)
class Detector:
    """Rotation-pooled matched-filter bank.

    ``templates`` holds L2-normalized tensors and ``template_ids`` the
    prototype each came from.  Templates are scored on windows of
    ``box_size`` meters slid at ``stride`` voxels; ``box_sizes``, when given,
    overrides the window size per template.
    """

    templates: tuple
    template_ids: tuple
    box_size: tuple
    stride: int = 4
    confidence_threshold: float = 0.9
    nms_iou: float = 0.3
    refine: bool = False
    box_sizes: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if len(self.templates) != len(self.template_ids):
            raise ValueError("templates and ids must align")
        if self.box_sizes and len(self.box_sizes) != len(self.templates):
            raise ValueError("box_sizes must give one size per template")
        if len(self.box_size) != 3 or min(self.box_size) <= 0:
            raise DegenerateBox("box_size needs three positive edges")
        if int(self.stride) < 1:
            raise ValueError("stride must be at least one voxel")

    def __len__(self):
        return len(self.templates)

    def window_size(self, t):
        return tuple(self.box_sizes[t]) if self.box_sizes else tuple(self.box_size)

    def to_dict(self):
        return {
            "template_ids": [int(i) for i in self.template_ids],
            "box_size": [float(v) for v in self.box_size],
            "stride": int(self.stride),
            "confidence_threshold": float(self.confidence_threshold),
            "nms_iou": float(self.nms_iou),
            "refine": bool(self.refine),
            "box_sizes": [[float(v) for v in s] for s in self.box_sizes],
        }


def iou_3d(a, b):
    """Intersection over union of two axis-aligned boxes."""
    inter = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)
    iv = float(np.prod(inter))
    union = a.volume + b.volume - iv
    return iv / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU, vectorized."""
    if not len(boxes_a) or not len(boxes_b):
        return np.zeros((len(boxes_a), len(boxes_b)))
    la = np.array([b.min_corner for b in boxes_a])
    ha = np.array([b.max_corner for b in boxes_a])
    lb = np.array([b.min_corner for b in boxes_b])
    hb = np.array([b.max_corner for b in boxes_b])
    inter = np.clip(np.minimum(ha[:, None], hb[None]) - np.maximum(la[:, None], lb[None]), 0.0, None).prod(-1)
    va = (ha - la).prod(-1)
    vb = (hb - lb).prod(-1)
    return inter / (va[:, None] + vb[None] - inter)


def nms_3d(proposals, iou_thresh):
    """Greedy non-maximum suppression.

    Visits proposals by descending confidence (ties: lexicographically lower
    min corner, then input order) and drops any box whose IoU with an
    already kept box exceeds ``iou_thresh``.
    """
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, proposals[i].box.min_corner, i))
    kept = []
    for i in order:
        p = proposals[i]
        if all(iou_3d(p.box, proposals[k].box) <= iou_thresh for k in kept):
            kept.append(i)
    return [proposals[i] for i in kept]


def _components_to_boxes(mask, spec, min_voxels):
    labels, n = ndimage.label(mask, structure=_CONN26)
    if n == 0:
        return []
    boxes = []
    counts = np.bincount(labels.ravel())
    for comp, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or counts[comp] < min_voxels:
            continue
        lo = spec.lo + np.array([s.start for s in sl]) * spec.pitch
        hi = spec.lo + np.array([s.stop for s in sl]) * spec.pitch
        boxes.append(Box3D(tuple(lo), tuple(hi)))
    return boxes


def triangulate_boxes(boxes2d, cameras, spec, min_views=None, occupancies=None, min_voxels=8):
    """Fuse per-view 2D boxes into 3D boxes by voxel voting.

    A voxel earns one vote per view in which its center projects inside one
    of that view's boxes and which does not see it as FREE (``occupancies``
    holds each view's raycast labels; without them nothing is carved).
    Voxels with at least ``min_views`` votes (default: two thirds of the
    views) are grouped into 26-connected components; components with fewer
    than ``min_voxels`` voxels are dropped.  Returns tight AABBs.
    """
    from .geometry import FREE, project_points

    if not boxes2d:
        return []
    n_views = len(cameras)
    if min_views is None:
        min_views = int(math.ceil(2.0 * n_views / 3.0))
    centers = spec.voxel_centers().reshape(-1, 3)
    votes = np.zeros(centers.shape[0], dtype=np.int32)
    by_view = {}
    for b in boxes2d:
        by_view.setdefault(b.view_index, []).append(b)
    for v, (intr, pose) in enumerate(cameras):
        boxes = by_view.get(v)
        if not boxes:
            continue
        u, vv, z = project_points(intr, pose, centers)
        front = z > 1e-9
        inside = np.zeros(centers.shape[0], dtype=bool)
        for b in boxes:
            inside |= front & (u >= b.u_min) & (u <= b.u_max) & (vv >= b.v_min) & (vv <= b.v_max)
        if occupancies is not None:
            inside &= occupancies[v].labels.ravel() != FREE
        votes += inside
    mask = (votes >= min_views).reshape(spec.resolution)
    return _components_to_boxes(mask, spec, min_voxels)


def center_surround_sim(grid, box, transform=None):
    """Mean cosine similarity between a box crop and its six neighbors.

    Neighbors are the box shifted by its own extent along +-x, +-y, +-z and
    clipped to the grid; a neighbor fully outside the grid contributes 0.
    """
    size = box.size
    if np.any(size <= 0):
        raise DegenerateBox("box edges must be positive")
    f = transform or (lambda t: t)
    center = f(crop_resize(grid, box))
    lo, hi = grid.spec.lo, grid.spec.hi
    sims = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            off = np.zeros(3)
            off[axis] = sign * size[axis]
            nb = box.translated(off).clipped(lo, hi)
            sims.append(0.0 if nb is None else cosine_similarity(center, f(crop_resize(grid, nb))))
    return float(np.mean(sims))


def best_prototype_match(tensors, prototypes, rots):
    """Rotation-pooled cosine of each tensor against each prototype.

    Returns ``(scores (N, K), best angle index (N, K))``.
    """
    tensors = np.ascontiguousarray(np.asarray(tensors, dtype=np.float64))
    protos = np.ascontiguousarray(np.asarray(prototypes, dtype=np.float64))
    norms = np.sqrt(_sqnorms(protos))
    return _kernels.window_scores(tensors, protos, norms, rots)


def label_proposals(proposals, grid, dictionary, rots, valid_thresh=0.8, invalid_thresh=0.65, transform=None):
    """Pseudo-label proposals by prototype match and center-surround saliency.

    VALID when the best rotation-pooled cosine to any prototype reaches
    ``valid_thresh``; otherwise INVALID when the surround similarity exceeds
    ``invalid_thresh``; otherwise UNLABELED.
    """
    if dictionary is None or len(dictionary) == 0:
        raise EmptyDictionary("cannot label proposals without prototypes")
    if not proposals:
        return []
    f = transform or (lambda t: t)
    crops = np.stack([f(crop_resize(grid, p.box)) for p in proposals])
    scores, best_r = best_prototype_match(crops, dictionary.tensors(), rots)
    angles = rots.angles
    ids = dictionary.ids()
    out = []
    for i, p in enumerate(proposals):
        k = int(np.argmax(scores[i]))
        psim = float(scores[i, k])
        ssim = center_surround_sim(grid, p.box, transform)
        if psim >= valid_thresh:
            label = VALID
        elif ssim > invalid_thresh:
            label = INVALID
        else:
            label = UNLABELED
        out.append(
            LabeledProposal(p, label, psim, ssim, ids[k], angles[best_r[i, k]], valid_thresh, invalid_thresh)
        )
    return out


def _unit(t):
    t = np.asarray(t, dtype=np.float64)
    n = np.linalg.norm(t.ravel())
    return t / n if n > 0 else t.copy()


def square_footprint(size):
    """Window size with equal x and z edges (the larger of the two)."""
    s = np.asarray(size, dtype=float)
    side = max(s[0], s[2])
    return (side, float(s[1]), side)


def refit_detector(labeled, dictionary, box_size=None, stride=4, confidence_threshold=0.9, nms_iou=0.3, refine=False,
                   per_template_sizes=False):
    """Build a detector from the prototypes that VALID proposals matched.

    Templates are deduplicated by prototype id (ascending) and L2-normalized.
    ``box_size`` defaults to the median VALID box size with a square x-z
    footprint.  With ``per_template_sizes`` each template also gets the
    median size of the VALID boxes that matched its prototype.
    """
    valid = [lp for lp in labeled if lp.label == VALID]
    if not valid:
        raise NoValidProposals("refit needs at least one VALID proposal")
    by_id = {}
    for lp in valid:
        by_id.setdefault(lp.prototype_id, []).append(lp.proposal.box.size)
    ids = sorted(by_id)
    if box_size is None:
        box_size = square_footprint(np.median([lp.proposal.box.size for lp in valid], axis=0))
    sizes = ()
    if per_template_sizes:
        sizes = tuple(tuple(float(v) for v in square_footprint(np.median(by_id[k], axis=0))) for k in ids)
    templates = tuple(_unit(dictionary.get(k).tensor) for k in ids)
    return Detector(templates, tuple(ids), tuple(float(v) for v in box_size), stride, confidence_threshold,
                    nms_iou, refine, sizes)


def window_starts(lo, hi, size, step):
    """Start coordinates of windows of ``size`` stepping by ``step`` inside ``[lo, hi]``."""
    n = int(math.floor((hi - lo - size) / step + 1e-9)) + 1 if size <= hi - lo else 1
    return lo + step * np.arange(max(n, 1))


def _window_taps(spec, size, stride):
    starts = [window_starts(spec.lo[a], spec.hi[a], size[a], stride * spec.pitch[a]) for a in range(3)]
    taps = tuple(
        interp_taps(starts[a], size[a], TENSOR_SIZE, spec.lo[a], spec.pitch[a], spec.resolution[a]) for a in range(3)
    )
    boxes = [
        Box3D((x, y, z), (x + size[0], y + size[1], z + size[2]))
        for x in starts[0] for y in starts[1] for z in starts[2]
    ]
    return boxes, taps


def _linear_part(grid, transform):
    """Grid data under the transform's weights, and the bias to add per sample.

    The transform acts per voxel and resampling is linear, so transforming
    the grid once and adding the bias after cropping equals transforming
    every crop.
    """
    data = np.asarray(grid.data, dtype=np.float64)
    if transform is None or transform.is_identity():
        return data, np.zeros(data.shape[-1])
    return data @ transform.weights.T, np.asarray(transform.bias, dtype=np.float64)


def window_crops(grid, size, stride, transform=None):
    """All window boxes of one size and their crops, ``(boxes, (W, 16,16,16,c))``."""
    boxes, taps = _window_taps(grid.spec, size, stride)
    data, bias = _linear_part(grid, transform)
    cols = _kernels.grid_crops(data, taps, bias)
    n, c = TENSOR_SIZE, data.shape[-1]
    return boxes, cols.reshape(len(cols), n, n, n, c).transpose(0, 1, 3, 2, 4)


def score_windows(grid, det, rots, transform=None):
    """Score map of the detector, one entry per window size.

    Returns a list of ``(template indices, boxes, scores (W, T), best angles
    (W, T))``; the score is the max over rotations of
    ``cos(template, rotate(crop, R))``.  Sizes appear in order of their first
    template.
    """
    groups = {}
    for t in range(len(det)):
        groups.setdefault(det.window_size(t), []).append(t)
    data, bias = _linear_part(grid, transform)
    out = []
    for size, members in groups.items():
        boxes, taps = _window_taps(grid.spec, size, det.stride)
        temps = np.stack([det.templates[t] for t in members])
        scores, best = _kernels.grid_window_scores(data, taps, bias, temps, np.sqrt(_sqnorms(temps)), rots)
        out.append((members, boxes, scores, np.asarray(rots.angles)[best]))
    return out


def occupied_components(occupied):
    """26-connected labels of an occupancy mask and the slices of each label."""
    labels, n = ndimage.label(occupied, structure=_CONN26)
    return labels, ndimage.find_objects(labels)


def refine_box(occupied, spec, box, components=None):
    """Snap a window to the occupied component it mostly covers.

    Components are 26-connected over the whole grid, so a window covering
    only part of an object still snaps to the full object.  Pass
    ``components`` (from :func:`occupied_components`) to reuse the labeling
    across windows.  Windows with no occupied voxel are returned unchanged.
    """
    labels, slices = components if components is not None else occupied_components(occupied)
    a = np.clip(np.floor((box.lo - spec.lo) / spec.pitch + 1e-9).astype(int), 0, None)
    b = np.minimum(np.ceil((box.hi - spec.lo) / spec.pitch - 1e-9).astype(int), spec.resolution)
    inner = labels[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
    counts = np.bincount(inner.ravel(), minlength=len(slices) + 1)
    counts[0] = 0
    if counts.max() == 0:
        return box
    sl = slices[int(np.argmax(counts)) - 1]
    lo = spec.lo + np.array([s.start for s in sl]) * spec.pitch
    hi = spec.lo + np.array([s.stop for s in sl]) * spec.pitch
    return Box3D(tuple(lo), tuple(hi))


def _holds_surface(occupied, spec, box):
    a = np.clip(np.floor((box.lo - spec.lo) / spec.pitch + 1e-9).astype(int), 0, None)
    b = np.minimum(np.ceil((box.hi - spec.lo) / spec.pitch - 1e-9).astype(int), spec.resolution)
    return bool(occupied[a[0]:b[0], a[1]:b[1], a[2]:b[2]].any())


def detect(grid, det, rots, occupied=None, transform=None):
    """Sliding-window detection with the matched-filter bank.

    Windows whose best template score reaches the confidence threshold become
    proposals (confidence = clamped score).  Given an ``occupied`` mask,
    windows holding no occupied voxel are skipped (smooth features can match
    empty space), and with ``det.refine`` each window is snapped to its
    occupied component.  NMS runs at ``det.nms_iou``.
    """
    if len(det) == 0:
        raise EmptyDictionary("detector has no templates")
    proposals = []
    components = occupied_components(occupied) if det.refine and occupied is not None else None
    for _, boxes, scores, _ in score_windows(grid, det, rots, transform):
        for box, row in zip(boxes, scores):
            score = float(row.max())
            if score < det.confidence_threshold:
                continue
            if occupied is not None and not _holds_surface(occupied, grid.spec, box):
                continue
            if det.refine and occupied is not None:
                box = refine_box(occupied, grid.spec, box, components)
            proposals.append(Proposal(box, min(max(score, 0.0), 1.0)))
    return nms_3d(proposals, det.nms_iou)
