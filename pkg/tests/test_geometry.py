import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from proto3d.errors import BehindCamera, SpecMismatch
from proto3d.geometry import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    CameraIntrinsics,
    CameraPose,
    GridSpec,
    OccupancyGrid,
    PosedImage,
    VoxelGrid,
    back_project,
    fuse_views,
    project_point,
    raycast_freespace,
    render_view,
    unproject_image,
    view_prediction_loss,
)

from oracles import project_homogeneous

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


def random_pose(rng):
    rot = Rotation.random(random_state=int(rng.integers(2 ** 31))).as_matrix()
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = rng.uniform(-1, 1, 3)
    return CameraPose(t)


def test_project_on_axis():
    assert project_point(K100, CameraPose(np.eye(4)), (0, 0, 2)) == (50.0, 50.0, 2.0)


def test_project_off_axis():
    assert project_point(K100, CameraPose(np.eye(4)), (1, 0, 2)) == (100.0, 50.0, 2.0)


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(K100, CameraPose(np.eye(4)), (0, 0, -1))


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        pose = random_pose(rng)
        pt = rng.uniform(-2, 2, 3)
        if (pose.transform @ np.append(pt, 1))[2] <= 0.1:
            continue
        got = project_point(K100, pose, pt)
        want = project_homogeneous(K100.matrix, pose.transform, pt)
        np.testing.assert_allclose(got, want, atol=1e-9)
        checked += 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_project_back_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng)
    pt = pose.inverse() @ np.append(rng.uniform(-1, 1, 2).tolist() + [rng.uniform(0.3, 4.0)], 1.0)
    u, v, z = project_point(K100, pose, pt[:3])
    np.testing.assert_allclose(back_project(K100, pose, u, v, z), pt[:3], atol=1e-6)


def test_pose_invariants():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        CameraPose(bad)
    refl = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        CameraPose(refl)
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)


def test_gridspec_invariants():
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (1, 0, 1), (4, 4, 4))
    with pytest.raises(ValueError):
        GridSpec((0, 0, 0), (1, 1, 1), (1, 4, 4))


def wall_scene(depth=1.0, color=(0.2, 0.6, 0.9), size=21):
    """Camera at the origin looking down +z at a fronto-parallel wall."""
    k = CameraIntrinsics(20.0, 20.0, (size - 1) / 2, (size - 1) / 2, size, size)
    rgb = np.broadcast_to(np.asarray(color), (size, size, 3)).copy()
    return PosedImage(rgb, np.full((size, size), depth), k, CameraPose(np.eye(4)))


# voxels of 0.1 m centered on the optical axis, z in [0.05, 1.25]
AXIS_SPEC = GridSpec((-0.15, -0.15, 0.05), (0.15, 0.15, 1.25), (3, 3, 12))


def test_wall_occupied_with_color_and_free_in_front():
    img = wall_scene(depth=1.0)
    grid, occ = unproject_image(img, AXIS_SPEC)
    # wall at z = 1.0 falls in voxel k = 9 (0.95..1.05)
    assert np.all(occ.labels[:, :, 9] == OCCUPIED)
    assert np.all(occ.labels[:, :, :9] == FREE)
    np.testing.assert_allclose(grid.data[1, 1, 9, :3], [0.2, 0.6, 0.9])
    assert grid.data[1, 1, 9, 3] == 1.0


def test_zero_depth_is_all_unknown():
    img = wall_scene()
    img = PosedImage(img.rgb, np.zeros_like(img.depth), img.intrinsics, img.pose)
    grid, occ = unproject_image(img, AXIS_SPEC, visible_only=True)
    assert np.all(occ.labels == UNKNOWN)
    assert not grid.data.any()


def test_single_pixel_depth_marks_axis_voxel():
    img = wall_scene(depth=0.62)
    depth = np.zeros_like(img.depth)
    c = img.intrinsics.width // 2
    depth[c, c] = 0.62
    img = PosedImage(img.rgb, depth, img.intrinsics, img.pose)
    occ = raycast_freespace(img, AXIS_SPEC)
    # oracle: the only occupied voxel is the one containing the back-projected point
    want = np.zeros(AXIS_SPEC.resolution, dtype=bool)
    want[tuple(AXIS_SPEC.world_to_index(back_project(img.intrinsics, img.pose, c, c, 0.62)))] = True
    np.testing.assert_array_equal(occ.occupied, want)
    # free corridor: every axis voxel in front of the hit
    assert np.all(occ.labels[1, 1, :5] == FREE)


def test_depth_beyond_grid_all_free():
    occ = raycast_freespace(wall_scene(depth=3.0), AXIS_SPEC)
    assert not occ.occupied.any()
    assert np.all(occ.labels[1, 1] == FREE)


def test_free_path_is_connected():
    from scipy import ndimage

    spec = GridSpec((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0), (20, 20, 20))
    k = CameraIntrinsics(20.0, 20.0, 10.0, 10.0, 21, 21)
    pose = CameraPose.look_at((0.3, 0.2, 0.02), (-0.2, -0.3, 0.9))
    depth = np.zeros((21, 21))
    depth[4, 15] = 0.9
    occ = raycast_freespace(PosedImage(np.zeros((21, 21, 3)), depth, k, pose), spec)
    _, n = ndimage.label(occ.labels > UNKNOWN, structure=np.ones((3, 3, 3)))
    assert n == 1


def two_views():
    rng = np.random.default_rng(1)
    spec = GridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))
    a = np.zeros((4, 4, 4, 4))
    b = np.zeros((4, 4, 4, 4))
    a[:2, ..., :3] = rng.uniform(size=(2, 4, 4, 3))
    a[:2, ..., 3] = 1
    b[2:, ..., :3] = rng.uniform(size=(2, 4, 4, 3))
    b[2:, ..., 3] = 1
    la = np.where(a[..., 3] > 0, OCCUPIED, FREE)
    lb = np.where(b[..., 3] > 0, OCCUPIED, UNKNOWN)
    return spec, (VoxelGrid(spec, a), OccupancyGrid(spec, la)), (VoxelGrid(spec, b), OccupancyGrid(spec, lb))


def test_fuse_singleton_identity():
    _, va, _ = two_views()
    g, o = fuse_views([va])
    np.testing.assert_array_equal(g.data, va[0].data)
    np.testing.assert_array_equal(o.labels, va[1].labels)


def test_fuse_identical_pair():
    _, va, _ = two_views()
    g, _ = fuse_views([va, va])
    np.testing.assert_allclose(g.data, va[0].data, atol=1e-15)


def test_fuse_disjoint_halves():
    _, va, vb = two_views()
    g, o = fuse_views([va, vb])
    np.testing.assert_array_equal(g.data[:2], va[0].data[:2])
    np.testing.assert_array_equal(g.data[2:], vb[0].data[2:])
    assert np.all(g.data[..., 3] == 1)
    assert np.all(o.labels == OCCUPIED)


def test_fuse_weighted_mean_oracle():
    rng = np.random.default_rng(2)
    spec = GridSpec((0, 0, 0), (1, 1, 1), (3, 3, 3))
    views = []
    for _ in range(4):
        d = np.zeros((3, 3, 3, 4))
        d[..., 3] = rng.integers(0, 2, (3, 3, 3))
        d[..., :3] = rng.uniform(size=(3, 3, 3, 3)) * d[..., 3:]
        views.append((VoxelGrid(spec, d), OccupancyGrid(spec, rng.integers(0, 3, (3, 3, 3)))))
    g, o = fuse_views(views)
    for idx in np.ndindex(3, 3, 3):
        w = [v[0].data[idx][3] for v in views]
        if sum(w) == 0:
            assert not g.data[idx].any()
            continue
        want = sum(wi * v[0].data[idx][:3] for wi, v in zip(w, views)) / sum(w)
        np.testing.assert_allclose(g.data[idx][:3], want, atol=1e-12)
        assert o.labels[idx] == max(v[1].labels[idx] for v in views)


def test_fuse_permutation_invariant_bitwise():
    rng = np.random.default_rng(3)
    spec = GridSpec((0, 0, 0), (1, 1, 1), (3, 3, 3))
    views = []
    for _ in range(5):
        d = rng.uniform(size=(3, 3, 3, 4))
        d[..., 3] = rng.integers(0, 2, (3, 3, 3))
        views.append((VoxelGrid(spec, d), OccupancyGrid(spec, rng.integers(0, 3, (3, 3, 3)))))
    ref, _ = fuse_views(views)
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        g, _ = fuse_views([views[i] for i in perm])
        assert g.data.tobytes() == ref.data.tobytes()


def test_fuse_spec_mismatch():
    _, va, _ = two_views()
    other = GridSpec((0, 0, 0), (2, 1, 1), (4, 4, 4))
    with pytest.raises(SpecMismatch):
        fuse_views([va, (VoxelGrid(other, va[0].data), OccupancyGrid(other, va[1].labels))])


def test_render_empty_grid():
    spec = GridSpec((-1, -1, 1), (1, 1, 3), (8, 8, 8))
    rgb, occ = render_view(VoxelGrid(spec, np.ones((8, 8, 8, 4))), OccupancyGrid.unknown(spec), K100,
                           CameraPose(np.eye(4)))
    assert not occ.any() and not rgb.any()


def test_render_single_voxel_ray_box_oracle():
    spec = GridSpec((-0.5, -0.5, 1.0), (0.5, 0.5, 2.0), (5, 5, 5))
    labels = np.zeros((5, 5, 5))
    labels[2, 2, 2] = OCCUPIED
    data = np.zeros((5, 5, 5, 4))
    data[2, 2, 2, :3] = (1.0, 0.5, 0.25)
    k = CameraIntrinsics(30.0, 30.0, 15.0, 15.0, 31, 31)
    pose = CameraPose(np.eye(4))
    rgb, occ = render_view(VoxelGrid(spec, data), OccupancyGrid(spec, labels), k, pose)
    lo = spec.lo + 2 * spec.pitch
    hi = lo + spec.pitch
    want = np.zeros((31, 31))
    for v in range(31):
        for u in range(31):
            d = np.array([(u - 15.0) / 30.0, (v - 15.0) / 30.0, 1.0])
            # slab test from the origin
            t0, t1 = 0.0, np.inf
            for a in range(3):
                ta, tb = lo[a] / d[a] if d[a] else -np.inf, hi[a] / d[a] if d[a] else np.inf
                if not d[a] and not lo[a] <= 0 <= hi[a]:
                    t0, t1 = 1.0, 0.0
                t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
            want[v, u] = t0 < t1
    np.testing.assert_array_equal(occ, want)
    np.testing.assert_allclose(rgb[occ > 0], np.tile([1.0, 0.5, 0.25], (int(want.sum()), 1)))


def test_render_reprojects_lifted_occupancy():
    from proto3d.synth import SynthConfig, generate_scene

    views, _ = generate_scene(5, SynthConfig(num_objects=(2, 2), num_views=4))
    spec = SynthConfig().grid_spec
    per = [unproject_image(v, spec) for v in views]
    grid, occ = fuse_views(per)
    first, _ = render_view(grid, occ, views[0].intrinsics, views[0].pose)
    _, occ_img = render_view(grid, occ, views[0].intrinsics, views[0].pose)
    hit = views[0].depth > 0
    inside = np.zeros_like(hit)
    # pixels whose surface lies inside the grid should render as occupied
    rows, cols = np.nonzero(hit)
    pts = back_project(views[0].intrinsics, views[0].pose, cols, rows, views[0].depth[rows, cols])
    ok = np.all((pts >= spec.lo + spec.pitch) & (pts <= spec.hi - spec.pitch), axis=1)
    inside[rows[ok], cols[ok]] = True
    assert occ_img[inside].mean() >= 0.99
    assert np.abs(first[inside] - views[0].rgb[inside]).mean() < 0.05


def test_view_loss_examples():
    rng = np.random.default_rng(0)
    rgb = rng.uniform(size=(4, 5, 3))
    labels = np.where(rng.uniform(size=(4, 5)) > 0.5, 1.0, -1.0)
    l1, occ = view_prediction_loss(rgb, np.zeros((4, 5)), rgb, labels)
    assert l1 == 0.0
    assert occ == pytest.approx(np.log(2.0))


def test_view_loss_scalar_oracle():
    rng = np.random.default_rng(1)
    pred, gt = rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4, 3))
    logits = rng.normal(size=(3, 4))
    labels = np.where(rng.uniform(size=(3, 4)) > 0.4, 1.0, -1.0)
    labels[0, 0] = 0.0  # invalid
    l1, occ = view_prediction_loss(pred, logits, gt, labels)
    assert l1 == pytest.approx(np.mean(np.abs(pred - gt)), abs=1e-12)
    per_class = []
    for cls in (1.0, -1.0):
        terms = [np.log1p(np.exp(-cls * logits[i, j])) for i in range(3) for j in range(4) if labels[i, j] == cls]
        per_class.append(sum(terms) / len(terms))
    assert occ == pytest.approx(np.mean(per_class), abs=1e-9)


def test_view_loss_decreases_toward_labels():
    labels = np.array([[1.0, -1.0], [1.0, -1.0]])
    prev = np.inf
    for s in (0.0, 0.5, 1.0, 2.0, 4.0):
        _, occ = view_prediction_loss(np.zeros((2, 2, 3)), s * labels, np.zeros((2, 2, 3)), labels)
        assert 0 <= occ < prev
        prev = occ


def test_unproject_translation_equivariant():
    img = wall_scene(depth=0.8, size=31)
    spec = GridSpec((-0.2, -0.2, 0.3), (0.2, 0.2, 1.1), (8, 8, 16))
    pitch = spec.pitch
    g0, o0 = unproject_image(img, spec)
    shifted = CameraPose(np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, -pitch[2]], [0, 0, 0, 1.0]]))
    img1 = PosedImage(img.rgb, img.depth, img.intrinsics, shifted)
    g1, o1 = unproject_image(img1, spec.shifted((0, 0, pitch[2])))
    np.testing.assert_array_equal(o1.labels[2:-2, 2:-2, 1:-1], o0.labels[2:-2, 2:-2, 1:-1])
    np.testing.assert_allclose(g1.data[2:-2, 2:-2, 1:-1], g0.data[2:-2, 2:-2, 1:-1], atol=1e-9)
