"""Evaluation protocols: LIN-MATCH accuracy, precision@k, meanAP, few-shot.

All functions are pure; ties are broken deterministically as documented.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detect import iou_matrix
from .errors import EmptyMatrix
from .voxel import RotationSet

UNLABELED = None


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of samples per (prototype row, category column)."""

    counts: np.ndarray
    row_ids: tuple = ()
    col_labels: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or np.any(c < 0):
            raise ValueError("counts must be a non-negative 2D array")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_labels(cls, predicted, truth):
        rows = tuple(sorted(set(predicted)))
        cols = tuple(sorted(set(truth)))
        ri = {r: i for i, r in enumerate(rows)}
        ci = {c: i for i, c in enumerate(cols)}
        counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
        for p, t in zip(predicted, truth):
            counts[ri[p], ci[t]] += 1
        return cls(counts, rows, cols)


def _padded_matching(cm):
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    total = counts.sum() if counts.size else 0.0
    if total <= 0:
        raise EmptyMatrix("confusion matrix has no samples")
    n = max(counts.shape)
    square = np.zeros((n, n))
    square[: counts.shape[0], : counts.shape[1]] = counts
    rows, cols = linear_sum_assignment(square, maximize=True)
    return counts, square, rows, cols, total


def linmatch_accuracy(cm):
    """Fraction of samples covered by the best one-to-one row/column matching.

    The matrix is zero-padded to square and solved as a linear assignment
    that maximizes matched counts.
    """
    _, square, rows, cols, total = _padded_matching(cm)
    return float(square[rows, cols].sum() / total)


def linmatch_mapping(cm):
    """Row id -> column label of the optimal matching (padding dropped)."""
    counts, _, rows, cols, _ = _padded_matching(cm)
    row_ids = cm.row_ids or tuple(range(counts.shape[0]))
    col_labels = cm.col_labels or tuple(range(counts.shape[1]))
    return {row_ids[r]: col_labels[c] for r, c in zip(rows, cols)
            if r < counts.shape[0] and c < counts.shape[1]}


def precision_at_k(queries, query_labels, pool, pool_labels, transform=None, rots=None, k=10):
    """Mean fraction of same-label items among each query's top ``k``.

    Pool items are ranked by the max over rotations of the inner product
    between the transformed query and the rotated, transformed pool item;
    ties go to the lower pool index.
    """
    from . import _kernels

    rots = rots or RotationSet(10)
    if len(pool) < k:
        raise ValueError(f"pool of {len(pool)} is smaller than k={k}")
    f = transform or (lambda t: t)
    P = np.ascontiguousarray(np.stack([f(p) for p in pool]).astype(np.float64))
    Q = np.ascontiguousarray(np.stack([f(q) for q in queries]).astype(np.float64))
    scores, _ = _kernels.window_scores(P, Q, np.ones(len(Q)), rots, False)
    pool_labels = np.asarray(pool_labels)
    precs = []
    for qi, lab in enumerate(query_labels):
        order = np.lexsort((np.arange(len(pool)), -scores[:, qi]))[:k]
        precs.append(float(np.mean(pool_labels[order] == lab)))
    return float(np.mean(precs))


def rank_pool(query, pool, transform=None, rots=None):
    """Pool indices in retrieval order for one query (see :func:`precision_at_k`)."""
    from . import _kernels

    rots = rots or RotationSet(10)
    f = transform or (lambda t: t)
    P = np.ascontiguousarray(np.stack([f(p) for p in pool]).astype(np.float64))
    Q = np.ascontiguousarray(f(query)[None].astype(np.float64))
    scores, _ = _kernels.window_scores(P, Q, np.ones(1), rots, False)
    return list(np.lexsort((np.arange(len(pool)), -scores[:, 0]))), scores[:, 0]


def average_precision(tp, n_gt):
    """All-points interpolated area under the precision-recall curve."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def match_detections(detections, gts, iou_thresh=0.5):
    """Greedy matching of pooled detections; returns the TP flags in rank order.

    Detections from all scenes are sorted by descending confidence (ties: scene
    index, then position within the scene); each takes the unmatched GT box of
    its scene with the highest IoU, counting as a true positive if that IoU
    reaches ``iou_thresh``.
    """
    flat = [(-p.confidence, s, i, p) for s, dets in enumerate(detections) for i, p in enumerate(dets)]
    flat.sort(key=lambda e: e[:3])
    ious = [iou_matrix([p.box for p in dets], list(g)) for dets, g in zip(detections, gts)]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = []
    for _, s, i, _ in flat:
        row = ious[s][i] if len(gts[s]) else np.zeros(0)
        best, best_j = -1.0, -1
        for j, v in enumerate(row):
            if not used[s][j] and v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_thresh:
            used[s][best_j] = True
            tp.append(1.0)
        else:
            tp.append(0.0)
    return tp


def mean_ap(detections, gts, iou_thresh=0.5):
    """Single-class average precision over scenes at the given IoU.

    ``detections``: per-scene lists of Proposals; ``gts``: per-scene lists of
    Box3D.  No GT and no detections gives 1.0; no GT with detections gives 0.
    """
    n_gt = sum(len(g) for g in gts)
    return average_precision(match_detections(detections, gts, iou_thresh), n_gt)


def few_shot_propagate(exemplars, dictionary, rots, assignments):
    """Label prototypes from a few labeled exemplars and propagate to members.

    Each exemplar is assigned to its rotation-aware nearest prototype; a
    prototype takes the most frequent exemplar label (ties: smallest label)
    and prototypes without exemplars stay unlabeled (``None``).  Returns
    ``(label map, predicted label per assignment)``.  Prototypes are not
    modified.
    """
    from .quantize import assign_all

    if not exemplars:
        raise ValueError("need at least one labeled exemplar")
    tensors = [t for t, _ in exemplars]
    ex_assign = assign_all(tensors, dictionary, rots)
    votes = {}
    for (_, label), a in zip(exemplars, ex_assign):
        votes.setdefault(a.k_star, Counter())[label] += 1
    label_map = {}
    for k in dictionary.ids():
        if k in votes:
            label_map[k] = sorted(votes[k].items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        else:
            label_map[k] = UNLABELED
    return label_map, [label_map.get(a.k_star) for a in assignments]
