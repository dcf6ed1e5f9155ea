"""The self-training loop: detect, mine, fit the transform, quantize, refit.

``bootstrap`` lifts every scene, triangulates jittered 2D boxes into 3D
proposals, seeds the prototype dictionary from them and builds the first
detector.  Each ``run_iteration`` then performs one pass of

1. detection with the current detector (cached in the state),
2. cross-scene correspondence mining and contrastive transform fitting,
3. rotation-aware EM over the transformed object tensors,
4. pseudo-labeling and detector refitting,

followed by a fresh detection pass and the evaluation report.  States are
immutable values; everything that survives an iteration is rounded to the
precision of its on-disk format, so replaying from a saved state directory
reproduces an uninterrupted run exactly.
"""

from dataclasses import dataclass, field, fields
import json
import logging
import math
import os

import numpy as np

from . import formats
from .detect import (
    Detector,
    Proposal,
    _unit,
    detect,
    label_proposals,
    nms_3d,
    refit_detector,
    square_footprint,
    triangulate_boxes,
    VALID,
)
from .errors import ConfigError, EmptyDataset, NoNegatives, NoPositives, NoValidProposals
from .evaluate import ConfusionMatrix, few_shot_propagate, linmatch_accuracy, mean_ap, precision_at_k
from .features import canonical_box, encode_scene, object_tensor, solid_mask
from .geometry import GridSpec, fuse_views, unproject_image
from .mine import FeatureTransform, build_pools, contrastive_fit, mine_correspondences, POSITIVE
from .quantize import PrototypeDictionary, Prototype, assign_all, em_fit, init_dictionary, quantization_loss
from .synth import scene_boxes_2d
from .voxel import RotationSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = ""
    seed: int = 0
    grid_min: tuple = (-0.6, 0.0, -0.6)
    grid_max: tuple = (0.6, 0.48, 0.6)
    grid_resolution: tuple = (48, 48, 48)
    rotation_step: float = 10.0
    K_max: int = 50
    diversity_thresh: float = 0.8
    valid_thresh: float = 0.8
    invalid_thresh: float = 0.65
    detector_conf: float = 0.9
    stride: int = 4
    nms_iou: float = 0.3
    refine: bool = True
    per_template_sizes: bool = True
    em_iters: int = 20
    em_tol: float = 1e-6
    jitter: float = 2.0
    min_views: int = 0  # 0: two thirds of the views
    sigma: float = 2.0
    mining_rounds: int = 10
    pool_size: int = 1000
    top_n: int = 30
    top_retrievals: int = 200
    negatives_per_positive: int = 1
    min_patch_norm: float = 0.25
    margin: float = 0.5
    neg_margin: float = 0.3
    learning_rate: float = 0.05
    fit_bias: bool = False
    epochs: int = 50
    eval_k: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ("diversity_thresh", "valid_thresh", "invalid_thresh", "detector_conf", "nms_iou"):
            v = getattr(self, key)
            if not 0.0 < v < 1.0:
                raise ConfigError(key, f"must lie in (0, 1), got {v}")
        for key in ("K_max", "stride", "em_iters", "pool_size", "top_n", "top_retrievals", "eval_k"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be at least 1")
        for key in ("mining_rounds", "negatives_per_positive", "epochs", "min_views"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        for key in ("rotation_step", "learning_rate"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        for key in ("jitter", "sigma", "em_tol", "min_patch_norm"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        if 360.0 % self.rotation_step:
            raise ConfigError("rotation_step", "must divide 360")
        try:
            self.grid_spec
        except ValueError as exc:
            raise ConfigError("grid_resolution", str(exc)) from None

    @property
    def grid_spec(self):
        return GridSpec(tuple(self.grid_min), tuple(self.grid_max), tuple(int(v) for v in self.grid_resolution))

    @property
    def rots(self):
        return RotationSet(self.rotation_step)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string or typed values; unknown keys raise ConfigError."""
        kinds = {f.name: type(f.default) for f in fields(cls)}
        kw = {}
        for key, value in mapping.items():
            if key not in kinds:
                raise ConfigError(key, "unknown configuration key")
            kw[key] = _coerce(key, value, kinds[key])
        return cls(**kw)

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


def _coerce(key, value, kind):
    if not isinstance(value, str):
        if kind is tuple:
            return tuple(value)
        return value
    text = value.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) if key == "grid_resolution" else float(p) for p in parts)
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {kind.__name__}") from None
    return text


@dataclass(eq=False)
class SceneData:
    """One lifted scene: encoded features, occupancy and bootstrap boxes."""

    index: int
    grid: object
    occ: object
    solid: np.ndarray
    gt: object
    triangulated: list

    def object_tensor(self, box):
        return object_tensor(self.grid, self.solid, box)

    def canonical(self, box):
        return canonical_box(self.solid, self.grid.spec, box)


def prepare_scene(views, gt, config, index=0):
    """Lift, fuse and encode one scene and triangulate its jittered 2D boxes."""
    spec = config.grid_spec
    per = [unproject_image(v, spec, visible_only=True) for v in views]
    fused, occ = fuse_views(per)
    enc = encode_scene(fused, occ, sigma=config.sigma)
    tri = []
    if gt is not None:
        b2 = scene_boxes_2d(gt, views, jitter=config.jitter, seed=config.seed)
        tri = triangulate_boxes(b2, [(v.intrinsics, v.pose) for v in views], spec,
                                min_views=config.min_views or None, occupancies=[o for _, o in per])
    return SceneData(index, enc, occ, solid_mask(occ), gt, tri)


def prepare_scenes(scenes, config):
    return [prepare_scene(views, gt, config, i) for i, (views, gt) in enumerate(scenes)]


@dataclass(frozen=True, eq=False)
class PipelineState:
    iteration: int
    dictionary: PrototypeDictionary
    transform: FeatureTransform
    detector: Detector
    detections: tuple  # per scene: tuple of Proposal found by ``detector``


@dataclass
class IterationReport:
    iteration: int
    precision_at_10: float
    linmatch_accuracy: float
    mean_ap: float
    loss: float
    dictionary_size: int
    num_detections: int = 0
    num_valid: int = 0
    num_positives: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self):
        """JSON-ready dict; undefined metrics (NaN) become ``None``."""
        return {
            "iteration": self.iteration,
            "precision_at_10": _json_float(self.precision_at_10),
            "linmatch_accuracy": _json_float(self.linmatch_accuracy),
            "mean_ap": _json_float(self.mean_ap),
            "loss": _json_float(self.loss),
            "dictionary_size": self.dictionary_size,
            "num_detections": self.num_detections,
            "num_valid": self.num_valid,
            "num_positives": self.num_positives,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("precision_at_10", "linmatch_accuracy", "mean_ap", "loss"):
            if d[key] is None:
                d[key] = float("nan")
        return cls(**d)


def _json_float(v):
    v = float(v)
    return None if math.isnan(v) else v


def _rounded_dictionary(dictionary, config):
    protos = [Prototype(p.id, formats.as_f32(p.tensor), p.assigned_count) for p in dictionary.prototypes]
    return PrototypeDictionary(protos, config.K_max, config.diversity_thresh)


def _rounded_transform(t):
    return FeatureTransform(formats.as_f32(t.weights), formats.as_f32(t.bias))


def _detector_from(dictionary, ids, box_size, config):
    templates = tuple(_unit(dictionary.get(k).tensor) for k in ids)
    return Detector(templates, tuple(int(k) for k in ids), tuple(float(v) for v in box_size), config.stride,
                    config.detector_conf, config.nms_iou, config.refine)


def detect_all(scenes, detector, transform, config):
    f = None if transform.is_identity() else transform
    rots = config.rots
    return tuple(tuple(detect(s.grid, detector, rots, occupied=s.occ.occupied, transform=f)) for s in scenes)


def training_proposals(scenes, detections, config):
    """Per-scene union of detections and triangulated boxes after NMS."""
    out = []
    for s, dets in zip(scenes, detections):
        props = [Proposal(b, 1.0) for b in s.triangulated] + list(dets)
        out.append(nms_3d(props, config.nms_iou))
    return out


def eval_objects(scenes):
    """GT-box object tensors and category labels of every scene."""
    tensors, labels = [], []
    for s in scenes:
        for o in (s.gt.objects if s.gt is not None else []):
            tensors.append(s.object_tensor(o.box))
            labels.append(o.category)
    return tensors, labels


def evaluate_state(state, scenes, config, loss, flags=(), num_valid=0, num_positives=0, eval_set=None):
    """Score a state against the synthetic ground truth."""
    tensors, labels = eval_set if eval_set is not None else eval_objects(scenes)
    f = state.transform
    feats = [f(t) for t in tensors]
    flags = list(flags)
    lin = float("nan")
    prec = float("nan")
    if feats:
        assigns = assign_all(feats, state.dictionary, config.rots)
        lin = linmatch_accuracy(ConfusionMatrix.from_labels([a.k_star for a in assigns], labels))
        queries, pool = feats[0::2], feats[1::2]
        if len(pool) >= config.eval_k:
            prec = precision_at_k(queries, labels[0::2], pool, labels[1::2], rots=config.rots, k=config.eval_k)
        else:
            flags.append("retrieval_pool_too_small")
    gts = [s.gt.boxes() if s.gt is not None else [] for s in scenes]
    return IterationReport(
        state.iteration, prec, lin, mean_ap([list(d) for d in state.detections], gts), float(loss),
        len(state.dictionary), sum(len(d) for d in state.detections), num_valid, num_positives, flags,
    )


def few_shot_eval(state, eval_set, config, per_category=2):
    """Few-shot label propagation accuracy on the evaluation objects.

    ``per_category`` objects of every category are drawn (seeded) as labeled
    exemplars; accuracy is measured on the remaining objects, counting
    objects whose prototype received no label as wrong.  Returns
    ``(accuracy, number of scored objects)``.
    """
    tensors, labels = eval_set
    feats = [state.transform(t) for t in tensors]
    rng = np.random.default_rng([config.seed, 3])
    chosen = set()
    for cat in sorted(set(labels)):
        idx = [i for i, lab in enumerate(labels) if lab == cat]
        pick = rng.choice(len(idx), size=min(per_category, len(idx)), replace=False)
        chosen.update(idx[int(j)] for j in pick)
    exemplars = [(feats[i], labels[i]) for i in sorted(chosen)]
    rest = [i for i in range(len(feats)) if i not in chosen]
    if not exemplars or not rest:
        raise EmptyDataset("not enough objects for few-shot evaluation")
    assigns = assign_all([feats[i] for i in rest], state.dictionary, config.rots)
    _, preds = few_shot_propagate(exemplars, state.dictionary, config.rots, assigns)
    hits = sum(p == labels[i] for p, i in zip(preds, rest))
    return hits / len(rest), len(rest)


def bootstrap(scenes, config):
    """Initial state (iteration 0) and its report from triangulated proposals.

    ``scenes`` is a list of :class:`SceneData` (see :func:`prepare_scenes`).
    """
    if not scenes:
        raise EmptyDataset("no scenes to bootstrap from")
    rots = config.rots
    boxes = [(s, b) for s in scenes for b in s.triangulated]
    if not boxes:
        raise EmptyDataset("triangulation produced no proposals")
    objects = [s.object_tensor(b) for s, b in boxes]
    dictionary = _rounded_dictionary(init_dictionary(objects, config.K_max, config.diversity_thresh, rots), config)
    box_size = square_footprint(np.median([s.canonical(b).size for s, b in boxes], axis=0))
    detector = _detector_from(dictionary, dictionary.ids(), box_size, config)
    transform = FeatureTransform.identity(objects[0].shape[-1])
    dets = detect_all(scenes, detector, transform, config)
    state = PipelineState(0, dictionary, transform, detector, dets)
    assigns = assign_all(objects, dictionary, rots)
    loss = quantization_loss(list(zip(objects, assigns)), dictionary)
    return state, evaluate_state(state, scenes, config, loss)


def run_iteration(state, scenes, config, eval_set=None):
    """One pass of the loop; returns ``(new state, IterationReport)``."""
    it = state.iteration + 1
    rots = config.rots
    rng = np.random.default_rng([config.seed, it])
    flags = []

    # (i) detection results of the current detector, merged with the bootstrap boxes
    props = training_proposals(scenes, state.detections, config)
    refs = [(s, p) for s, ps in zip(scenes, props) for p in ps]
    if not refs:
        raise EmptyDataset("no proposals to learn from")
    raw = [s.object_tensor(p.box) for s, p in refs]

    # (ii) correspondence mining and transform fitting
    transform = state.transform
    num_pos = 0
    qi, ti = build_pools(raw, config.pool_size, rng)
    mine_seed = int(rng.integers(2 ** 31))
    if qi and ti and config.mining_rounds > 0:
        corrs = mine_correspondences(
            [raw[i] for i in qi], [raw[i] for i in ti], rots, config.top_n, config.top_retrievals,
            config.negatives_per_positive, config.mining_rounds, mine_seed, config.min_patch_norm,
        )
        num_pos = sum(c.polarity == POSITIVE for c in corrs)
        try:
            transform = _rounded_transform(contrastive_fit(
                state.transform, corrs, config.margin, config.neg_margin, config.learning_rate, config.epochs,
                fit_bias=config.fit_bias,
            ))
        except (NoPositives, NoNegatives) as exc:
            flags.append(f"transform_unchanged: {exc}")
        log.info("iteration %d: %d positives mined", it, num_pos)
    else:
        flags.append("transform_unchanged: pools empty")

    # (iii) prototype update on transformed object tensors
    objects = [transform(t) for t in raw]
    history = []
    dictionary, assigns = em_fit(objects, config.K_max, config.diversity_thresh, rots, config.em_iters,
                                 config.em_tol, history)
    dictionary = _rounded_dictionary(dictionary, config)
    assigns = assign_all(objects, dictionary, rots)
    loss = quantization_loss(list(zip(objects, assigns)), dictionary)

    # (iv) pseudo-labels and detector refit
    f = None if transform.is_identity() else transform
    labeled = []
    for s, ps in zip(scenes, props):
        canon = [Proposal(s.canonical(p.box), p.confidence) for p in ps]
        labeled.extend(label_proposals(canon, s.grid, dictionary, rots, config.valid_thresh, config.invalid_thresh,
                                       transform=f))
    num_valid = sum(lp.label == VALID for lp in labeled)
    try:
        detector = refit_detector(labeled, dictionary, None, config.stride, config.detector_conf, config.nms_iou,
                                  config.refine, config.per_template_sizes)
    except NoValidProposals:
        flags.append("detector_templates_reset: no valid proposals")
        detector = _detector_from(dictionary, dictionary.ids(), state.detector.box_size, config)

    dets = detect_all(scenes, detector, transform, config)
    new = PipelineState(it, dictionary, transform, detector, dets)
    return new, evaluate_state(new, scenes, config, loss, flags, num_valid, num_pos, eval_set)


# state directories

def iteration_dir(root, iteration):
    return os.path.join(root, f"iter_{iteration:02d}")


def save_state(root, state, report):
    d = iteration_dir(root, state.iteration)
    os.makedirs(d, exist_ok=True)
    formats.write_dictionary(os.path.join(d, "prototypes.pro1"), state.dictionary)
    formats.write_transform(os.path.join(d, "transform.ftr1"), state.transform)
    formats.write_atomic(os.path.join(d, "detector.json"), json.dumps(state.detector.to_dict(), indent=1,
                                                                      sort_keys=True))
    formats.write_atomic(os.path.join(d, "report.json"), json.dumps(report.to_dict(), indent=1, sort_keys=True))
    recs = []
    for i, dets in enumerate(state.detections):
        for p in dets:
            recs.append(dict(formats.proposal_record(p), scene=i))
    formats.write_atomic(os.path.join(d, "detections.jsonl"), formats.dumps_jsonl(recs))
    return d


def load_state(root, iteration, config, num_scenes=None):
    """Read a saved iteration back; returns ``(state, report)``.

    Detections are grouped into ``num_scenes`` lists (default: as many as
    the highest scene index recorded).
    """
    d = iteration_dir(root, iteration)
    dictionary = formats.read_dictionary(os.path.join(d, "prototypes.pro1"), config.K_max, config.diversity_thresh)
    transform = formats.read_transform(os.path.join(d, "transform.ftr1"))
    with open(os.path.join(d, "detector.json")) as fh:
        dj = json.load(fh)
    detector = Detector(
        tuple(_unit(dictionary.get(k).tensor) for k in dj["template_ids"]), tuple(dj["template_ids"]),
        tuple(dj["box_size"]), dj["stride"], dj["confidence_threshold"], dj["nms_iou"], dj["refine"],
        tuple(tuple(v) for v in dj.get("box_sizes", [])),
    )
    with open(os.path.join(d, "detections.jsonl")) as fh:
        recs = formats.loads_jsonl(fh.read())
    if num_scenes is None:
        num_scenes = max((r["scene"] for r in recs), default=-1) + 1
    per = [[] for _ in range(num_scenes)]
    for r in recs:
        per[r["scene"]].append(formats.proposal_from_record(r))
    with open(os.path.join(d, "report.json")) as fh:
        report = IterationReport.from_dict(json.load(fh))
    state = PipelineState(iteration, dictionary, transform, detector, tuple(tuple(p) for p in per))
    return state, report


def run(scenes, config, iterations, state_dir=None, start=None):
    """Bootstrap (unless ``start`` is given) and run ``iterations`` passes.

    ``scenes`` are prepared :class:`SceneData`.  With ``state_dir`` every
    iteration is written to ``state_dir/iter_%02d``.  Returns the final state
    and the reports of every iteration produced, in order.
    """
    reports = []
    if start is None:
        state, rep = bootstrap(scenes, config)
        reports.append(rep)
        if state_dir:
            save_state(state_dir, state, rep)
    else:
        state = start
    eval_set = eval_objects(scenes)
    for _ in range(iterations):
        state, rep = run_iteration(state, scenes, config, eval_set)
        log.info("iteration %d: %s", state.iteration, rep.to_dict())
        reports.append(rep)
        if state_dir:
            save_state(state_dir, state, rep)
    return state, reports
