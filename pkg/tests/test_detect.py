import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proto3d.detect import (
    INVALID,
    UNLABELED,
    VALID,
    Box2D,
    Box3D,
    Detector,
    LabeledProposal,
    Proposal,
    _unit,
    center_surround_sim,
    detect,
    iou_3d,
    label_proposals,
    nms_3d,
    refine_box,
    refit_detector,
    score_windows,
    triangulate_boxes,
    window_crops,
)
from proto3d.errors import EmptyDictionary, NoValidProposals
from proto3d.geometry import GridSpec, VoxelGrid, unproject_image
from proto3d.mine import FeatureTransform
from proto3d.quantize import Prototype, PrototypeDictionary
from proto3d.synth import SynthConfig, generate_scene, gt_boxes_2d
from proto3d.voxel import RotationSet, crop_resize

from oracles import cosine, crop_resize_naive, iou_naive, nms_greedy, rotate_lattice


# boxes and IoU

def test_iou_examples():
    a = Box3D((0, 0, 0), (1, 1, 1))
    assert iou_3d(a, a) == 1.0
    assert iou_3d(a, Box3D((2, 2, 2), (3, 3, 3))) == 0.0
    assert iou_3d(a, Box3D((0.5, 0, 0), (1.5, 1, 1))) == pytest.approx(1 / 3)


coord = st.floats(-2, 2, allow_nan=False)
edge = st.floats(0.05, 2, allow_nan=False)


def box_strategy():
    return st.tuples(coord, coord, coord, edge, edge, edge).map(
        lambda v: Box3D(v[:3], (v[0] + v[3], v[1] + v[4], v[2] + v[5]))
    )


@settings(max_examples=100, deadline=None)
@given(box_strategy(), box_strategy())
def test_iou_properties(a, b):
    v = iou_3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_3d(b, a), abs=1e-12)
    assert v == pytest.approx(iou_naive(a.lo, a.hi, b.lo, b.hi), abs=1e-12)
    if a != b:
        assert v < 1.0 or np.allclose(a.lo, b.lo) and np.allclose(a.hi, b.hi)


def test_box2d_invariant():
    from proto3d.errors import DegenerateBox

    with pytest.raises(DegenerateBox):
        Box2D(5, 5, 5, 9)


# NMS

def test_nms_examples():
    p = Proposal(Box3D((0, 0, 0), (1, 1, 1)), 0.5)
    assert nms_3d([p], 0.3) == [p]
    hi = Proposal(Box3D((0, 0, 0), (1, 1, 1)), 0.9)
    lo = Proposal(Box3D((0, 0, 0), (1, 1, 1)), 0.8)
    assert nms_3d([lo, hi], 0.3) == [hi]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(box_strategy(), st.sampled_from([0.2, 0.5, 0.7, 0.9, 1.0])), max_size=20))
def test_nms_matches_greedy_oracle(items):
    props = [Proposal(b, c) for b, c in items]
    kept = nms_3d(props, 0.3)
    want = nms_greedy([(b.lo, b.hi) for b, _ in items], [c for _, c in items], 0.3)
    assert kept == [props[i] for i in want]
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert iou_3d(a.box, b.box) <= 0.3


# triangulation

def test_triangulate_empty():
    assert triangulate_boxes([], [], GridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))) == []


def _scene_boxes(gt, views):
    return [b for i, v in enumerate(views) for b in gt_boxes_2d(gt, i, v.intrinsics, v.pose)]


def test_triangulate_single_object():
    cfg = SynthConfig(num_objects=(1, 1))
    views, gt = generate_scene(3, cfg)
    occs = [unproject_image(v, cfg.grid_spec)[1] for v in views]
    boxes = triangulate_boxes(_scene_boxes(gt, views), [(v.intrinsics, v.pose) for v in views], cfg.grid_spec,
                              min_views=6, occupancies=occs)
    assert len(boxes) == 1
    assert iou_3d(boxes[0], gt.objects[0].box) >= 0.5


def test_triangulate_separated_objects():
    cfg = SynthConfig(num_objects=(2, 2), min_gap=0.25)
    for seed in range(20):
        views, gt = generate_scene(seed, cfg)
        a, b = gt.objects[0].box, gt.objects[1].box
        gap = np.max(np.maximum(a.lo - b.hi, b.lo - a.hi))
        if gap > np.linalg.norm(a.size):
            break
    else:
        pytest.skip("no well separated pair in the first seeds")
    occs = [unproject_image(v, cfg.grid_spec)[1] for v in views]
    boxes = triangulate_boxes(_scene_boxes(gt, views), [(v.intrinsics, v.pose) for v in views], cfg.grid_spec,
                              occupancies=occs)
    assert len(boxes) == 2
    spec = cfg.grid_spec
    for bx in boxes:
        assert np.all(bx.lo >= spec.lo - 1e-9) and np.all(bx.hi <= spec.hi + 1e-9)


# center-surround saliency

SPEC = GridSpec((0, 0, 0), (1.2, 1.2, 1.2), (24, 24, 24))


def test_center_surround_constant_grid():
    g = VoxelGrid(SPEC, np.ones((24, 24, 24, 2)))
    assert center_surround_sim(g, Box3D((0.4, 0.4, 0.4), (0.8, 0.8, 0.8))) == pytest.approx(1.0, abs=1e-12)


def test_center_surround_object_on_zero_background():
    d = np.zeros((24, 24, 24, 2))
    d[10:14, 10:14, 10:14] = 1.0  # a voxel clear of the faces, so no tap reaches a neighbor
    g = VoxelGrid(SPEC, d)
    assert center_surround_sim(g, Box3D((0.45, 0.45, 0.45), (0.75, 0.75, 0.75))) == pytest.approx(0.0, abs=1e-9)


def test_center_surround_matches_six_crop_oracle():
    rng = np.random.default_rng(0)
    g = VoxelGrid(SPEC, rng.normal(size=(24, 24, 24, 2)))
    box = Box3D((0.1, 0.3, 0.5), (0.5, 0.6, 0.9))
    center = crop_resize(g, box)
    sims = []
    for axis in range(3):
        for sign in (-1, 1):
            lo, hi = box.lo.copy(), box.hi.copy()
            lo[axis] += sign * box.size[axis]
            hi[axis] += sign * box.size[axis]
            lo, hi = np.maximum(lo, SPEC.lo), np.minimum(hi, SPEC.hi)
            sims.append(cosine(center, crop_resize(g, Box3D(tuple(lo), tuple(hi)))) if np.all(hi > lo) else 0.0)
    assert center_surround_sim(g, box) == pytest.approx(np.mean(sims), abs=1e-6)


# labeling

def blob_grid(centers, sigma=1.5, seed=0):
    rng = np.random.default_rng(seed)
    idx = np.stack(np.meshgrid(*(np.arange(24),) * 3, indexing="ij"), -1)
    d = np.zeros((24, 24, 24, 2))
    for c in centers:
        w = np.exp(-np.sum((idx - np.asarray(c)) ** 2, -1) / (2 * sigma ** 2))
        d += w[..., None] * rng.uniform(0.5, 1.0, 2)
    return VoxelGrid(SPEC, d)


def dict_of(tensors):
    return PrototypeDictionary([Prototype(i, t, 1) for i, t in enumerate(tensors)], 10, 0.8)


def test_label_exact_prototype_is_valid():
    g = blob_grid([(12, 12, 12)])
    box = Box3D((0.4, 0.4, 0.4), (0.8, 0.8, 0.8))
    d = dict_of([crop_resize(g, box)])
    (lp,) = label_proposals([Proposal(box, 1.0)], g, d, RotationSet(10))
    assert lp.label == VALID and lp.prototype_sim == pytest.approx(1.0)


def test_label_uniform_region_invalid():
    g = VoxelGrid(SPEC, np.ones((24, 24, 24, 2)))
    proto = np.zeros((16, 16, 16, 2))
    proto[4:8, 4:8, 4:8, 0] = 1.0
    (lp,) = label_proposals([Proposal(Box3D((0.4, 0.4, 0.4), (0.8, 0.8, 0.8)), 1.0)], g, dict_of([proto]),
                            RotationSet(90))
    assert lp.surround_sim == pytest.approx(1.0) and lp.label == INVALID


def test_label_requires_dictionary():
    g = blob_grid([(12, 12, 12)])
    with pytest.raises(EmptyDictionary):
        label_proposals([Proposal(Box3D((0, 0, 0), (1, 1, 1)), 1.0)], g, PrototypeDictionary([]), RotationSet(90))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0.3, 0.95), st.floats(0.0, 0.3))
def test_label_partition_and_threshold_monotone(seed, t_hi, dt):
    rng = np.random.default_rng(seed)
    g = blob_grid([(8, 8, 8), (16, 14, 15)], seed=seed)
    props = [Proposal(Box3D(tuple(lo), tuple(lo + rng.uniform(0.2, 0.4, 3))), 1.0)
             for lo in rng.uniform(0.0, 0.7, (4, 3))]
    d = dict_of([crop_resize(g, Box3D((0.2, 0.2, 0.2), (0.6, 0.6, 0.6)))])
    hi = label_proposals(props, g, d, RotationSet(30), valid_thresh=t_hi)
    lo = label_proposals(props, g, d, RotationSet(30), valid_thresh=t_hi - dt)
    for a, b in zip(hi, lo):
        assert a.label in (VALID, INVALID, UNLABELED)
        if a.label == VALID:
            assert b.label == VALID


# refit

def _lp(pid, label=VALID, size=0.3):
    return LabeledProposal(Proposal(Box3D((0, 0, 0), (size, size, size)), 1.0), label, 0.9, 0.1, pid)


def _rand_dict(n):
    rng = np.random.default_rng(n)
    return PrototypeDictionary([Prototype(i, rng.normal(size=(16, 16, 16, 2)), 1) for i in range(n)])


def test_refit_single_template():
    d = _rand_dict(5)
    det = refit_detector([_lp(3), _lp(1, INVALID)], d)
    assert det.template_ids == (3,)
    np.testing.assert_allclose(det.templates[0], _unit(d.get(3).tensor))
    assert np.linalg.norm(det.templates[0]) == pytest.approx(1.0)


def test_refit_dedup():
    det = refit_detector([_lp(1), _lp(1), _lp(4)], _rand_dict(5))
    assert det.template_ids == (1, 4)


def test_refit_needs_valid():
    with pytest.raises(NoValidProposals):
        refit_detector([_lp(1, UNLABELED)], _rand_dict(2))


def test_refit_per_template_sizes():
    det = refit_detector([_lp(0, size=0.2), _lp(1, size=0.4), _lp(1, size=0.5)], _rand_dict(2),
                         per_template_sizes=True)
    assert det.window_size(0) == pytest.approx((0.2, 0.2, 0.2))
    assert det.window_size(1) == pytest.approx((0.45, 0.45, 0.45))


# detection

def test_detect_exact_template_instance():
    g = blob_grid([(12, 12, 12)], sigma=1.2)
    box = Box3D((0.4, 0.4, 0.4), (0.8, 0.8, 0.8))  # window-aligned for stride 4 at pitch 0.05
    det = Detector((_unit(crop_resize(g, box)),), (0,), (0.4, 0.4, 0.4), stride=4)
    props = detect(g, det, RotationSet(10))
    assert len(props) == 1
    assert props[0].confidence >= 0.999
    assert np.allclose(props[0].box.lo, box.lo) and np.allclose(props[0].box.hi, box.hi)


def test_detect_empty_grid():
    g = VoxelGrid(SPEC, np.zeros((24, 24, 24, 2)))
    det = Detector((_unit(np.ones((16, 16, 16, 2))),), (0,), (0.4, 0.4, 0.4))
    assert detect(g, det, RotationSet(10)) == []


def test_detect_outputs_below_nms_threshold():
    g = blob_grid([(6, 6, 6), (12, 12, 12), (17, 16, 18)], sigma=2.0)
    det = Detector((_unit(crop_resize(g, Box3D((0.4, 0.4, 0.4), (0.8, 0.8, 0.8)))),), (0,), (0.4, 0.4, 0.4),
                   stride=2, confidence_threshold=0.5)
    props = detect(g, det, RotationSet(30))
    assert props
    for i, a in enumerate(props):
        for b in props[i + 1:]:
            assert iou_3d(a.box, b.box) <= det.nms_iou


def test_detect_skips_windows_without_surface():
    # a constant field matches a constant template everywhere
    g = VoxelGrid(SPEC, np.ones((24, 24, 24, 2)))
    det = Detector((_unit(np.ones((16, 16, 16, 2))),), (0,), (0.4, 0.4, 0.4), refine=False)
    assert len(detect(g, det, RotationSet(90))) > 0
    occ = np.zeros((24, 24, 24), dtype=bool)
    assert detect(g, det, RotationSet(90), occupied=occ) == []
    occ[10:13, 10:13, 10:13] = True
    props = detect(g, det, RotationSet(90), occupied=occ)
    assert props and all(p.box.lo[0] <= 13 * 0.05 and p.box.hi[0] >= 10 * 0.05 for p in props)


def test_refine_snaps_to_whole_component():
    occ = np.zeros((24, 24, 24), dtype=bool)
    occ[4:16, 0:6, 4:16] = True
    occ[20:23, 0:3, 20:23] = True
    # a small window on one corner of the large block
    got = refine_box(occ, SPEC, Box3D((0.2, 0.0, 0.2), (0.3, 0.1, 0.3)))
    assert np.allclose(got.lo, (0.2, 0.0, 0.2)) and np.allclose(got.hi, (0.8, 0.3, 0.8))
    empty = Box3D((0.85, 0.6, 0.05), (0.95, 0.7, 0.15))
    assert refine_box(occ, SPEC, empty) is empty


@pytest.mark.parametrize("with_transform", [False, True])
def test_score_map_matches_bruteforce(with_transform):
    rng = np.random.default_rng(7)
    spec = GridSpec((0, 0, 0), (0.6, 0.45, 0.6), (12, 9, 12))
    g = VoxelGrid(spec, rng.normal(size=(12, 9, 12, 2)))
    temps = tuple(_unit(rng.normal(size=(16, 16, 16, 2))) for _ in range(2))
    det = Detector(temps, (0, 1), (0.3, 0.3, 0.3), stride=3)
    tf = FeatureTransform(np.eye(2) + 0.3 * rng.normal(size=(2, 2)), rng.normal(size=2)) if with_transform else None
    rots = RotationSet(90)
    ((members, boxes, scores, angles),) = score_windows(g, det, rots, tf)
    assert len(boxes) == 3 * 2 * 3  # starts 0,3,6 in x and z, 0,3 in y
    for w, box in enumerate(boxes):
        crop = crop_resize_naive(g.data, spec.lo, spec.pitch, box.lo, box.hi)
        if tf is not None:
            crop = crop @ tf.weights.T + tf.bias
        for t in members:
            sims = [cosine(temps[t], rotate_lattice(crop, q)) for q in range(4)]
            assert scores[w, t] == pytest.approx(max(sims), abs=1e-6)
            assert angles[w, t] == 90.0 * int(np.argmax(sims))


def test_window_crops_match_crop_resize():
    rng = np.random.default_rng(3)
    g = VoxelGrid(SPEC, rng.normal(size=(24, 24, 24, 2)))
    boxes, crops = window_crops(g, (0.5, 0.35, 0.45), 5)
    for i in (0, len(boxes) // 2, len(boxes) - 1):
        np.testing.assert_allclose(crops[i], crop_resize(g, boxes[i]), atol=1e-12)
