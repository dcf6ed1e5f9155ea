"""Cross-scene part correspondence mining and contrastive feature fitting.

Mining follows a coarse-to-fine search: target objects are ranked against a
query object by rotation-pooled cosine similarity, then 2x2x2 patches on the
best targets are verified by the inner products of their eight diagonal
surround patches.  Verified matches contribute their surround pairs as
positives; negatives are random patch pairs.  A per-voxel affine feature
transform is then fit on these pairs with a hinge loss on cosine similarity.
"""

from dataclasses import dataclass
import itertools
import logging

import numpy as np

from .errors import NoNegatives, NoPositives
from .voxel import TENSOR_SIZE, RotationSet, rotate_tensor

log = logging.getLogger(__name__)

PATCH = 2
SURROUND_OFFSETS = np.array(list(itertools.product((-2, 2), repeat=3)))
CORNER_LATTICE = np.array(list(itertools.product((0, 4, 8, 12), repeat=3)))
POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True, eq=False)
class Patch:
    object_ref: tuple  # (pool name, index)
    corner_index: tuple
    data: np.ndarray

    @property
    def size(self):
        return (PATCH, PATCH, PATCH)


@dataclass(frozen=True, eq=False)
class Correspondence:
    query: Patch
    target: Patch
    rotation: float
    verify_score: float
    polarity: str

    def to_dict(self):
        return {
            "query": {"object": list(self.query.object_ref), "corner": [int(v) for v in self.query.corner_index]},
            "target": {"object": list(self.target.object_ref), "corner": [int(v) for v in self.target.corner_index]},
            "rotation_deg": float(self.rotation),
            "verify_score": float(self.verify_score),
            "polarity": self.polarity,
        }


@dataclass(eq=False)
class FeatureTransform:
    """Per-voxel affine map ``x -> weights @ x + bias``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (c_out, c_in) and bias (c_out,)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("transform entries must be finite")

    @classmethod
    def identity(cls, channels):
        return cls(np.eye(channels), np.zeros(channels))

    @property
    def c_in(self):
        return self.weights.shape[1]

    @property
    def c_out(self):
        return self.weights.shape[0]

    def is_identity(self):
        return (
            self.c_in == self.c_out and np.array_equal(self.weights, np.eye(self.c_in)) and not np.any(self.bias)
        )

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.is_identity():
            return x
        return x @ self.weights.T + self.bias


def patch_at(tensor, corner):
    """The 2x2x2 block at ``corner`` or ``None`` when it leaves the tensor."""
    c = np.asarray(corner)
    n = tensor.shape[0]
    if np.any(c < 0) or np.any(c + PATCH > n):
        return None
    return tensor[c[0]:c[0] + PATCH, c[1]:c[1] + PATCH, c[2]:c[2] + PATCH]


def build_pools(tensors, pool_size, rng):
    """Randomly split tensors into disjoint query and target pools.

    Returns index lists ``(query, target)``, each of at most ``pool_size``.
    """
    n = len(tensors)
    if n < 2 * pool_size:
        log.warning("only %d objects for two pools of %d", n, pool_size)
    perm = rng.permutation(n)
    half = min(pool_size, n // 2)
    query = sorted(int(i) for i in perm[:half])
    target = sorted(int(i) for i in perm[half:half + min(pool_size, n - half)])
    return query, target


def coarse_rank(query, pool, rots, top_n=30):
    """Top pool objects by rotation-pooled cosine to ``query``.

    Returns ``[(pool index, best angle, score)]`` by descending score, ties by
    lower index.
    """
    from .detect import best_prototype_match

    if len(pool) == 0:
        raise ValueError("empty pool")
    scores, best = best_prototype_match(np.asarray(pool), np.asarray(query)[None], rots)
    angles = rots.angles
    order = sorted(range(len(pool)), key=lambda i: (-scores[i, 0], i))[:top_n]
    return [(i, angles[best[i, 0]], float(scores[i, 0])) for i in order]


def verify_match(query_tensor, query_corner, target_tensor, target_corner, rotation, rotated=False):
    """Sum of inner products of the eight diagonal surround patch pairs.

    The target is first rotated by ``rotation`` (skipped when ``rotated`` says
    it already is).  Surround patches sit at offsets (+-2, +-2, +-2) from the
    patch corner; a pair with either patch outside its tensor contributes 0.
    """
    target = np.asarray(target_tensor, dtype=np.float64)
    if not rotated:
        target = rotate_tensor(target, rotation)
    q = np.asarray(query_tensor, dtype=np.float64)
    total = 0.0
    for off in SURROUND_OFFSETS:
        a = patch_at(q, np.asarray(query_corner) + off)
        b = patch_at(target, np.asarray(target_corner) + off)
        if a is None or b is None:
            continue
        total += float(np.dot(a.ravel(), b.ravel()))
    return total


def _surround_patches(tensor, corners):
    """(n_corners, 8, 2*2*2*c) surround patch vectors plus validity mask."""
    c = tensor.shape[-1]
    out = np.zeros((len(corners), 8, PATCH ** 3 * c))
    ok = np.zeros((len(corners), 8), dtype=bool)
    for i, corner in enumerate(corners):
        for j, off in enumerate(SURROUND_OFFSETS):
            p = patch_at(tensor, corner + off)
            if p is not None:
                out[i, j] = p.ravel()
                ok[i, j] = True
    return out, ok


def _informative(patch, min_norm):
    return patch is not None and float(np.linalg.norm(patch)) >= min_norm


def _sample_negative(rng, query_pool, target_pool, min_norm, attempts=50):
    """A uniformly drawn (query, target) patch pair with both patches informative."""
    n = TENSOR_SIZE
    for _ in range(attempts):
        ai = int(rng.integers(len(query_pool)))
        bi = int(rng.integers(len(target_pool)))
        ac = rng.integers(0, n - PATCH + 1, size=3)
        bc = rng.integers(0, n - PATCH + 1, size=3)
        a = patch_at(np.asarray(query_pool[ai], dtype=np.float64), ac)
        b = patch_at(np.asarray(target_pool[bi], dtype=np.float64), bc)
        if _informative(a, min_norm) and _informative(b, min_norm):
            return ai, ac, a, bi, bc, b
    return None


def mine_correspondences(query_pool, target_pool, rots=None, top_n=30, top_retrievals=200,
                         negatives_per_positive=1, rounds=1, seed=0, min_norm=0.0,
                         pool_names=("query", "target")):
    """Mine POSITIVE and NEGATIVE patch correspondences between two pools.

    Each round samples a query object and a query patch corner (all eight
    surrounds inside the tensor), ranks the target pool coarsely, scores every
    lattice corner ``{0, 4, 8, 12}^3`` on the ``top_n`` targets with
    :func:`verify_match`, keeps the ``top_retrievals`` best pairs and emits
    their in-bounds surround pairs as positives.  Negatives are uniformly
    sampled patch pairs across the pools.  Pairs in which either patch has an
    L2 norm below ``min_norm`` (empty space) are skipped on both sides.
    """
    rots = rots or RotationSet(10)
    if len(query_pool) == 0 or len(target_pool) == 0:
        raise ValueError("pools must be non-empty")
    rng = np.random.default_rng(seed)
    qname, tname = pool_names
    out = []
    for _ in range(rounds):
        qi = int(rng.integers(len(query_pool)))
        q = np.asarray(query_pool[qi], dtype=np.float64)
        qc = rng.integers(PATCH, TENSOR_SIZE - 2 * PATCH + 1, size=3)
        q_sur, q_ok = _surround_patches(q, [qc])
        candidates = []
        rotated = {}
        for rank, (ti, angle, _) in enumerate(coarse_rank(q, target_pool, rots, top_n)):
            t = rotate_tensor(target_pool[ti], angle)
            rotated[ti] = t
            t_sur, t_ok = _surround_patches(t, CORNER_LATTICE)
            valid = t_ok & q_ok[0]
            scores = np.einsum("cjd,jd->c", t_sur * valid[..., None], q_sur[0])
            for ci in range(len(CORNER_LATTICE)):
                candidates.append((-scores[ci], rank, ci, ti, angle))
        candidates.sort(key=lambda e: e[:3])
        positives = []
        for neg_score, _, ci, ti, angle in candidates[:top_retrievals]:
            tc = CORNER_LATTICE[ci]
            t = rotated[ti]
            for off in SURROUND_OFFSETS:
                a = patch_at(q, qc + off)
                b = patch_at(t, tc + off)
                if not (_informative(a, min_norm) and _informative(b, min_norm)):
                    continue
                positives.append(
                    Correspondence(
                        Patch((qname, qi), tuple(int(v) for v in qc + off), a.copy()),
                        Patch((tname, ti), tuple(int(v) for v in tc + off), b.copy()),
                        angle, -float(neg_score), POSITIVE,
                    )
                )
        out.extend(positives)
        for _ in range(negatives_per_positive * len(positives)):
            drawn = _sample_negative(rng, query_pool, target_pool, min_norm)
            if drawn is None:
                log.warning("no informative negative patch found")
                break
            ai, ac, a, bi, bc, b = drawn
            out.append(
                Correspondence(
                    Patch((qname, ai), tuple(int(v) for v in ac), a.copy()),
                    Patch((tname, bi), tuple(int(v) for v in bc), b.copy()),
                    0.0, 0.0, NEGATIVE,
                )
            )
    return out


def _pair_arrays(correspondences, polarity):
    sel = [c for c in correspondences if c.polarity == polarity]
    if not sel:
        return None
    a = np.stack([c.query.data.reshape(-1, c.query.data.shape[-1]) for c in sel])
    b = np.stack([c.target.data.reshape(-1, c.target.data.shape[-1]) for c in sel])
    return a, b


def _cos_and_grads(weights, bias, a, b):
    """Cosine of transformed patch pairs and its gradients w.r.t. the outputs.

    a, b: (N, V, c_in).  Returns ``cos (N,), dcos/dA (N, V, c_out), dcos/dB``.
    """
    A = a @ weights.T + bias
    B = b @ weights.T + bias
    na = np.sqrt(np.einsum("nvo,nvo->n", A, A))
    nb = np.sqrt(np.einsum("nvo,nvo->n", B, B))
    dot = np.einsum("nvo,nvo->n", A, B)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    safe_a = np.where(ok, na, 1.0)
    safe_b = np.where(ok, nb, 1.0)
    cos = np.where(ok, dot / (safe_a * safe_b), 0.0)
    ga = B / (safe_a * safe_b)[:, None, None] - (cos / safe_a ** 2)[:, None, None] * A
    gb = A / (safe_a * safe_b)[:, None, None] - (cos / safe_b ** 2)[:, None, None] * B
    ga[~ok] = 0.0
    gb[~ok] = 0.0
    return cos, ga, gb


def _packed(correspondences):
    return [(sign, thresh_key, _pair_arrays(correspondences, polarity))
            for polarity, sign, thresh_key in ((POSITIVE, -1.0, "margin"), (NEGATIVE, 1.0, "neg_margin"))]


def _packed_loss(W, bvec, packed, margins, with_grad):
    total = 0.0
    gW = np.zeros_like(W)
    gb = np.zeros_like(bvec)
    for sign, key, arrs in packed:
        if arrs is None:
            continue
        a, b = arrs
        cos, ga, gbb = _cos_and_grads(W, bvec, a, b)
        viol = sign * (cos - margins[key])
        active = viol > 0
        m = len(cos)
        total += float(np.sum(np.where(active, viol, 0.0))) / m
        if with_grad:
            coef = np.where(active, sign / m, 0.0)[:, None, None]
            GA = coef * ga
            GB = coef * gbb
            gW += np.einsum("nvo,nvi->oi", GA, a) + np.einsum("nvo,nvi->oi", GB, b)
            gb += GA.sum(axis=(0, 1)) + GB.sum(axis=(0, 1))
    return total, gW, gb


def contrastive_loss(transform, correspondences, margin=0.5, neg_margin=0.3, with_grad=False):
    """Hinge loss on cosine similarity of transformed patch pairs.

    ``mean_pos max(0, margin - cos) + mean_neg max(0, cos - neg_margin)``.
    With ``with_grad`` also returns ``(dL/dweights, dL/dbias)``.
    """
    margins = {"margin": margin, "neg_margin": neg_margin}
    total, gW, gb = _packed_loss(transform.weights, transform.bias, _packed(correspondences), margins, with_grad)
    if with_grad:
        return total, gW, gb
    return total


def contrastive_fit(transform, correspondences, margin=0.5, neg_margin=0.3, learning_rate=1e-2, epochs=50,
                    history=None, fit_bias=True):
    """Full-batch gradient descent on :func:`contrastive_loss`.

    Deterministic: no sampling happens inside the fit.  ``history`` (a list)
    receives the loss before each epoch's update.  With ``fit_bias=False``
    the bias is held at its initial value.
    """
    if not any(c.polarity == POSITIVE for c in correspondences):
        raise NoPositives("contrastive fit needs positive pairs")
    if not any(c.polarity == NEGATIVE for c in correspondences):
        raise NoNegatives("contrastive fit needs negative pairs")
    W = transform.weights.copy()
    b = transform.bias.copy()
    packed = _packed(correspondences)
    margins = {"margin": margin, "neg_margin": neg_margin}
    for _ in range(epochs):
        loss, gW, gb = _packed_loss(W, b, packed, margins, True)
        if history is not None:
            history.append(loss)
        W = W - learning_rate * gW
        if fit_bias:
            b = b - learning_rate * gb
    return FeatureTransform(W, b)
