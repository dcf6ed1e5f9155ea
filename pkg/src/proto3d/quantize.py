"""Pose-aware vector quantization of object tensors into prototypes.

Assignment is an exhaustive argmin over prototypes and vertical-axis
rotations of ``||e_k - rotate(object, R)||``; the update step replaces each
assigned prototype by the mean of its rotation-aligned members, which is the
exact minimizer of the squared objective for fixed assignments.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from . import _kernels
from .errors import EmptyDictionary
from .voxel import RotationSet, _sqnorms, l2_distance, rotate_tensor, rotation_tables

log = logging.getLogger(__name__)


@dataclass
class Prototype:
    id: int
    tensor: np.ndarray
    assigned_count: int = 0


@dataclass
class PrototypeDictionary:
    prototypes: list = field(default_factory=list)
    K_max: int = 50
    diversity_thresh: float = 0.8

    def __len__(self):
        return len(self.prototypes)

    def ids(self):
        return [p.id for p in self.prototypes]

    def tensors(self):
        return np.stack([p.tensor for p in self.prototypes])

    def get(self, k):
        for p in self.prototypes:
            if p.id == k:
                return p
        raise KeyError(k)

    def index_of(self, k):
        return self.ids().index(k)

    def copy(self):
        return PrototypeDictionary(
            [Prototype(p.id, p.tensor.copy(), p.assigned_count) for p in self.prototypes], self.K_max,
            self.diversity_thresh,
        )


@dataclass(frozen=True)
class Assignment:
    object_ref: int
    k_star: int
    r_star: float
    distance: float


@dataclass(frozen=True)
class ParseRecord:
    box: object
    prototype: int
    rotation_deg: float
    confidence: float

    def to_dict(self):
        return {
            "box": [float(v) for v in self.box.to_list()],
            "prototype": int(self.prototype),
            "rotation_deg": float(self.rotation_deg),
            "confidence": float(self.confidence),
        }


@dataclass
class SceneParse:
    records: list = field(default_factory=list)

    def to_list(self):
        return [r.to_dict() for r in self.records]


def _as_batch(tensors):
    return np.ascontiguousarray(np.asarray(tensors, dtype=np.float64))


def rotated_cosines(tensor, prototypes, rots):
    """(K, R) cosine of every prototype against every rotation of ``tensor``."""
    from .voxel import cosine_similarity

    return np.array([[cosine_similarity(p, rotate_tensor(tensor, a)) for a in rots] for p in prototypes])


def init_dictionary(exemplars, K_max=50, diversity_thresh=0.8, rots=None):
    """Build a diverse dictionary by one ordered scan over the exemplars.

    An exemplar becomes a prototype when its rotation-pooled cosine
    similarity to every admitted prototype is below ``diversity_thresh``.
    The first exemplar is always admitted.
    """
    from .detect import best_prototype_match

    rots = rots or RotationSet(10)
    exemplars = list(exemplars)
    if not exemplars:
        raise ValueError("need at least one exemplar")
    admitted = []
    for x in exemplars:
        if len(admitted) >= K_max:
            break
        x = np.asarray(x, dtype=np.float64)
        if admitted:
            scores, _ = best_prototype_match(x[None], np.stack(admitted), rots)
            if scores.max() >= diversity_thresh:
                continue
        admitted.append(x.copy())
    protos = [Prototype(k, t, 1) for k, t in enumerate(admitted)]
    return PrototypeDictionary(protos, K_max, diversity_thresh)


def assign_all(objects, dictionary, rots):
    """Rotation-aware nearest prototype for every object.

    Distances for all (object, prototype, rotation) triples come from a
    batched kernel; near-ties are then re-evaluated with :func:`l2_distance`
    and resolved by smaller prototype id, then smaller angle, so the result
    equals the direct double loop.
    """
    if dictionary is None or len(dictionary) == 0:
        raise EmptyDictionary("cannot assign without prototypes")
    objects = _as_batch(objects)
    if objects.shape[0] == 0:
        return []
    protos = _as_batch(dictionary.tensors())
    idx, wts = rotation_tables(rots)
    sq = _kernels.rotated_sqdist(objects, protos, idx, wts)
    ids = dictionary.ids()
    angles = rots.angles
    pnorm = _sqnorms(protos)
    onorm = _sqnorms(objects)
    out = []
    for o in range(objects.shape[0]):
        d = sq[o]
        m = d.min()
        tol = 1e-9 * (pnorm.max() + onorm[o]) + 1e-12
        cand = np.argwhere(d <= m + tol)
        best = None
        for k_i, r_i in cand:
            dist = l2_distance(protos[k_i], rotate_tensor(objects[o], angles[r_i]))
            key = (dist, ids[k_i], angles[r_i])
            if best is None or key < best:
                best = key
        out.append(Assignment(o, int(best[1]), float(best[2]), float(best[0])))
    return out


def assign(obj, dictionary, rots):
    """Exhaustive ``argmin_{k, R} ||e_k - rotate(obj, R)||`` as an Assignment."""
    a = assign_all([obj], dictionary, rots)[0]
    return a


def update_prototypes(assignments, dictionary):
    """Replace each assigned prototype with the mean of its aligned members.

    ``assignments`` is a list of ``(tensor, Assignment)``; members are summed
    in list order.  Prototypes without members keep their tensor and count.
    """
    new = dictionary.copy()
    sums = {}
    counts = {}
    for tensor, a in assignments:
        new.get(a.k_star)  # KeyError for unknown prototypes
        aligned = rotate_tensor(tensor, a.r_star)
        if a.k_star in sums:
            sums[a.k_star] += aligned
            counts[a.k_star] += 1
        else:
            sums[a.k_star] = aligned
            counts[a.k_star] = 1
    for p in new.prototypes:
        if p.id in sums:
            p.tensor = sums[p.id] / counts[p.id]
            p.assigned_count = counts[p.id]
    return new


def quantization_loss(assignments, dictionary, squared=False):
    """Sum over assignments of ``||e_k* - rotate(object, r*)||`` (or its square)."""
    total = 0.0
    for tensor, a in assignments:
        d = l2_distance(dictionary.get(a.k_star).tensor, rotate_tensor(tensor, a.r_star))
        total += d * d if squared else d
    return total


def em_fit(objects, K_max=50, diversity_thresh=0.8, rots=None, max_iters=20, loss_tol=1e-6, history=None,
           dictionary=None):
    """Alternate rotation-aware assignment and mean updates.

    Starts from ``init_dictionary`` (or the given ``dictionary``) and stops
    when the loss improves by less than ``loss_tol`` or after ``max_iters``
    rounds.  When ``history`` is a list, one entry per round is appended with
    the squared and unsquared objectives after the update.  Returns the final
    dictionary and the assignments against it.
    """
    rots = rots or RotationSet(10)
    objects = [np.asarray(o, dtype=np.float64) for o in objects]
    if not objects:
        raise ValueError("em_fit needs at least one object")
    d = dictionary.copy() if dictionary is not None else init_dictionary(objects, K_max, diversity_thresh, rots)
    prev = np.inf
    assignments = assign_all(objects, d, rots)
    for it in range(max_iters):
        d = update_prototypes(list(zip(objects, assignments)), d)
        pairs = list(zip(objects, assignments))
        sq = quantization_loss(pairs, d, squared=True)
        if history is not None:
            history.append({"iteration": it, "squared": sq, "l2": quantization_loss(pairs, d)})
        log.debug("em iteration %d: squared objective %.6g", it, sq)
        assignments = assign_all(objects, d, rots)
        if prev - sq < loss_tol:
            break
        prev = sq
    return d, assignments


def parse_scene(grid, det, dictionary, rots, occupied=None, transform=None, extract=None, proposals=None):
    """Detect objects and match each to its prototype and rotation.

    ``extract(grid, box)`` produces the object tensor (default: plain
    ``crop_resize``); ``transform`` maps it into feature space.  Passing
    ``proposals`` reuses detections already made with ``det``.
    """
    from .detect import detect
    from .voxel import crop_resize

    if len(dictionary) == 0:
        raise EmptyDictionary("cannot parse without prototypes")
    extract = extract or crop_resize
    f = transform or (lambda t: t)
    if proposals is None:
        proposals = detect(grid, det, rots, occupied=occupied, transform=transform)
    if not proposals:
        return SceneParse([])
    tensors = [f(extract(grid, p.box)) for p in proposals]
    assigns = assign_all(tensors, dictionary, rots)
    return SceneParse(
        [ParseRecord(p.box, a.k_star, a.r_star, p.confidence) for p, a in zip(proposals, assigns)]
    )
