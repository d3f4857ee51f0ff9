import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_min_circle, raster_iou
from tfhead.geometry import (
    BehindCameraError,
    BevGrid,
    Box3D,
    CameraCalib,
    box_corners,
    decode_box,
    encode_box,
    locate_fov,
    look_at_calib,
    min_enclosing_circle,
    normalize_yaw,
    project_box,
    project_point,
    project_points,
    rotated_bev_iou,
)


def pinhole(f, cx, cy, E=None, size=(100, 100), stride=1):
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return CameraCalib(K, np.eye(4) if E is None else E, size, stride)


def random_box(rng, spread=10.0):
    return Box3D(tuple(rng.uniform(-spread, spread, 3)), tuple(rng.uniform(0.3, 5.0, 3)),
                 rng.uniform(-math.pi, math.pi), tuple(rng.normal(size=2)), int(rng.integers(3)))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# types ------------------------------------------------------------------------
def test_box_validation_and_yaw_wrap():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1))
    assert Box3D((0, 0, 0), (1, 1, 1), yaw=-math.pi).yaw == math.pi
    assert Box3D((0, 0, 0), (1, 1, 1), yaw=3 * math.pi).yaw == pytest.approx(math.pi)
    assert normalize_yaw(2 * math.pi + 0.25) == pytest.approx(0.25)


def test_box_dict_round_trip():
    b = random_box(np.random.default_rng(0))
    assert Box3D.from_dict(b.to_dict()) == b


def test_grid_extents_must_be_integral():
    assert BevGrid.square(16, 1.0).extents == (32, 32)
    with pytest.raises(ValueError):
        BevGrid((0, 10), (0, 10), (3.0, 1.0))


def test_calib_invariants():
    with pytest.raises(ValueError):
        CameraCalib(np.eye(3) * 2, np.eye(4), (10, 10))
    E = np.eye(4)
    E[0, 0] = -1  # reflection
    with pytest.raises(ValueError):
        CameraCalib(np.eye(3), E, (10, 10))
    c = look_at_calib(0.3, 1.5, 100.0, (64, 96))
    np.testing.assert_allclose(c.camera_center, [0, 0, 1.5], atol=1e-12)
    assert c.feature_size == (8, 12)


# projection -------------------------------------------------------------------
def test_project_point_examples():
    assert project_point(pinhole(1, 0, 0), (0, 0, 1)) == (0.0, 0.0, 1.0)
    assert project_point(pinhole(100, 50, 50), (1, 0, 2)) == pytest.approx((100, 50, 2))
    with pytest.raises(BehindCameraError):
        project_point(pinhole(1, 0, 0), (0, 0, -1))
    with pytest.raises(BehindCameraError):
        project_point(pinhole(1, 0, 0), (0, 0, 1e-7))


def test_project_points_matches_scalar():
    rng = np.random.default_rng(1)
    E = np.eye(4)
    E[:3, :3] = random_rotation(rng)
    E[:3, 3] = [0.1, -0.2, 5.0]
    c = pinhole(80, 40, 30, E)
    pts = rng.uniform(-1, 1, (20, 3))
    uv, depth = project_points(c, pts)
    for p, q, d in zip(pts, uv, depth):
        u, v, dd = project_point(c, p)
        np.testing.assert_allclose([u, v, dd], [q[0], q[1], d], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_point_equivariant_under_shared_translation(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = rng.normal(size=3)
    cam = pinhole(120, 60, 40, E)
    p = cam.camera_center + R.T @ np.array([*rng.uniform(-1, 1, 2), rng.uniform(1, 10)])
    d = rng.normal(size=3) * 5
    # translating the LiDAR frame by d: p -> p + d, camera must move with it
    E2 = E.copy()
    E2[:3, 3] = E[:3, 3] - R @ d
    moved = pinhole(120, 60, 40, E2)
    np.testing.assert_allclose(project_point(moved, p + d), project_point(cam, p), atol=1e-9)


# corners ----------------------------------------------------------------------
def test_unit_cube_corners():
    c = box_corners(Box3D((0, 0, 0), (1, 1, 1)))
    assert c.shape == (8, 3)
    assert sorted(map(tuple, c)) == sorted(
        (x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5))


def test_quarter_turn_swaps_footprint_axes():
    a = box_corners(Box3D((0, 0, 0), (4, 2, 1), yaw=0.0))
    b = box_corners(Box3D((0, 0, 0), (4, 2, 1), yaw=math.pi / 2))
    np.testing.assert_allclose(np.ptp(a[:, :2], axis=0), [4, 2], atol=1e-12)
    np.testing.assert_allclose(np.ptp(b[:, :2], axis=0), [2, 4], atol=1e-12)


def test_corner_centroid_is_center():
    rng = np.random.default_rng(2)
    for _ in range(200):
        b = random_box(rng)
        np.testing.assert_allclose(box_corners(b).mean(axis=0), b.center, atol=1e-12)


# enclosing circle ---------------------------------------------------------------
@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=9))
def test_min_circle_matches_brute_force(points):
    cx, cy, r = min_enclosing_circle(points)
    ref = brute_min_circle(points)
    if ref is not None:
        assert r == pytest.approx(ref[2], abs=1e-7)
    for p in points:
        assert math.hypot(p[0] - cx, p[1] - cy) <= r + 1e-9 * max(1.0, r)
    # minimal: a smaller circle at the same centre leaves something out
    if r > 1e-6:
        assert any(math.hypot(p[0] - cx, p[1] - cy) > r - 1e-6 for p in points)


def test_min_circle_degenerate():
    assert min_enclosing_circle([(1.0, 2.0)]) == (1.0, 2.0, 0.0)
    assert min_enclosing_circle([(0, 0), (1, 0), (2, 0)])[2] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        min_enclosing_circle(np.zeros((0, 2)))


# project_box ------------------------------------------------------------------------
def test_project_box_on_axis_hits_principal_point():
    cam = pinhole(100, 64, 48, size=(96, 128), stride=8)
    pb = project_box(cam, Box3D((0, 0, 10), (1, 1, 1)))
    assert (pb.cx, pb.cy) == pytest.approx((8.0, 6.0))


def test_project_box_radius_facing_cube():
    cam = pinhole(100, 0, 0, stride=1)
    pb = project_box(cam, Box3D((0, 0, 10), (2, 2, 2)))
    # the near face dominates: a square of side 100*2/9 pixels
    half_side = 100 * 1 / 9
    assert pb.r == pytest.approx(math.sqrt(2) * half_side, abs=1e-9)
    uv, _ = project_points(cam, box_corners(Box3D((0, 0, 10), (2, 2, 2))))
    assert pb.r == pytest.approx(brute_min_circle(uv)[2], abs=1e-9)


def test_project_box_radius_scales_with_focal():
    rng = np.random.default_rng(3)
    for _ in range(20):
        b = Box3D((*rng.uniform(-2, 2, 2), rng.uniform(8, 20)), tuple(rng.uniform(0.5, 3, 3)),
                  rng.uniform(-3, 3))
        r1 = project_box(pinhole(50, 0, 0, stride=4), b).r
        r2 = project_box(pinhole(100, 0, 0, stride=4), b).r
        assert r2 == pytest.approx(2 * r1, rel=1e-9)


def test_project_box_errors():
    cam = pinhole(100, 0, 0)
    with pytest.raises(BehindCameraError):
        project_box(cam, Box3D((0, 0, -5), (1, 1, 1)))
    # a box is centrally symmetric, so a centre in front keeps >= 4 corners in front
    pb = project_box(cam, Box3D((0, 0, 0.01), (10, 10, 10)))
    assert pb.r > 0


# FOV ---------------------------------------------------------------------------------
def test_locate_fov_examples():
    cam = look_at_calib(0.0, 1.0, 50.0, (64, 64))
    assert locate_fov([cam], Box3D((10, 0, 1), (1, 1, 1))) == 0
    assert locate_fov([cam], Box3D((-10, 0, 1), (1, 1, 1))) is None


def test_locate_fov_overlap_prefers_nearest_image_center():
    cams = [look_at_calib(0.0, 1.0, 40.0, (64, 64)), look_at_calib(0.5, 1.0, 40.0, (64, 64))]
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(300):
        ang = rng.uniform(-0.3, 0.8)
        dist = rng.uniform(5, 20)
        b = Box3D((dist * math.cos(ang), dist * math.sin(ang), 1.0), (1, 1, 1))
        seen = {}
        for i, c in enumerate(cams):
            try:
                u, v, _ = project_point(c, b.center)
            except BehindCameraError:
                continue
            if 0 <= u < 64 and 0 <= v < 64:
                seen[i] = math.hypot(u - 32, v - 32)
        expect = min(seen, key=seen.get) if seen else None
        assert locate_fov(cams, b) == expect
        checked += len(seen) == 2
    assert checked > 20


# IoU ---------------------------------------------------------------------------------
def test_iou_examples():
    a = Box3D((0, 0, 0), (1, 1, 1))
    assert rotated_bev_iou(a, a) == 1.0
    assert rotated_bev_iou(a, Box3D((100, 0, 0), (1, 1, 1))) == 0.0
    assert rotated_bev_iou(a, Box3D((0.5, 0, 0), (1, 1, 1))) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_matches_raster_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = Box3D((*rng.uniform(-1, 1, 2), 0), (*rng.uniform(0.5, 4, 2), 1), rng.uniform(-3.2, 3.2))
        b = Box3D((*rng.uniform(-1, 1, 2), 0), (*rng.uniform(0.5, 4, 2), 1), rng.uniform(-3.2, 3.2))
        assert rotated_bev_iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-3)


box_st = st.builds(
    lambda x, y, l, w, yaw: Box3D((x, y, 0.0), (l, w, 1.0), yaw),
    st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-4, 4))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    v = rotated_bev_iou(a, b)
    assert v == rotated_bev_iou(b, a)
    assert 0.0 <= v <= 1.0


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_axis_aligned_analytic(a, b):
    a = Box3D(a.center, a.size, 0.0)
    b = Box3D(b.center, b.size, 0.0)
    ox = max(0.0, min(a.center[0] + a.size[0] / 2, b.center[0] + b.size[0] / 2)
             - max(a.center[0] - a.size[0] / 2, b.center[0] - b.size[0] / 2))
    oy = max(0.0, min(a.center[1] + a.size[1] / 2, b.center[1] + b.size[1] / 2)
             - max(a.center[1] - a.size[1] / 2, b.center[1] - b.size[1] / 2))
    inter = ox * oy
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    assert rotated_bev_iou(a, b) == pytest.approx(inter / union, abs=1e-9)


# box coding ----------------------------------------------------------------------------
GRID = BevGrid.square(16, 0.5)


def test_encode_at_cell_center_and_unit_size():
    qx, qy = GRID.cell_center(10, 20)
    x, y = GRID.to_world(qx, qy)
    t = encode_box(Box3D((x, y, 0.3), (1, 1, 1), 0.4), (qx, qy), GRID)
    assert t[0] == pytest.approx(0, abs=1e-12) and t[1] == pytest.approx(0, abs=1e-12)
    np.testing.assert_array_equal(t[3:6], 0.0)


def test_encode_rejects_outside_grid():
    with pytest.raises(ValueError):
        encode_box(Box3D((100, 0, 0), (1, 1, 1)), (0, 0), GRID)


def test_round_trip_1000_boxes():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        b = Box3D((*rng.uniform(-15.9, 15.9, 2), rng.uniform(-2, 2)), tuple(rng.uniform(0.1, 10, 3)),
                  rng.uniform(-math.pi, math.pi), tuple(rng.normal(size=2)), int(rng.integers(3)))
        q = (float(rng.integers(64)) + 0.5, float(rng.integers(64)) + 0.5)
        d = decode_box(q, encode_box(b, q, GRID), GRID, b.class_id)
        dyaw = abs(math.remainder(d.yaw - b.yaw, 2 * math.pi))
        err = max(np.abs(np.subtract(d.center, b.center)).max(),
                  np.abs(np.subtract(d.size, b.size)).max(),
                  np.abs(np.subtract(d.velocity, b.velocity)).max(), dyaw)
        worst = max(worst, err)
        assert d.class_id == b.class_id
    assert worst < 1e-9


def test_decode_normalizes_yaw_vector(caplog):
    a = np.zeros(10)
    a[6], a[7] = 3.0, 3.0
    assert decode_box((0, 0), a, GRID).yaw == pytest.approx(math.pi / 4)
    a[6] = a[7] = 0.0
    assert decode_box((0, 0), a, GRID).yaw == 0.0
    assert "yaw" in caplog.text
