import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_peaks
from tfhead import tensor as T
from tfhead.geometry import BevGrid, Box3D, look_at_calib
from tfhead.nn import Linear
from tfhead.query_init import (
    Heatmap,
    HeatmapHead,
    ImageGuidedHeatmap,
    collapse_image_features,
    draw_gaussian,
    gt_center_cell,
    heatmap_head,
    init_queries,
    local_max_mask,
    render_gt_heatmap,
    select_peaks,
)
from tfhead.tensor import Tensor, grad_check

GRID = BevGrid.square(8, 1.0)  # 16 x 16


def features(rng, d=8, grid=GRID):
    return Tensor(rng.normal(size=(*grid.extents, d)))


# heatmap head ------------------------------------------------------------------------
def test_zero_head_gives_half_everywhere():
    rng = np.random.default_rng(0)
    head = HeatmapHead(8, 3, rng).zero_()
    hm = heatmap_head(features(rng), head, GRID)
    assert hm.values.shape == (16, 16, 3)
    np.testing.assert_array_equal(hm.values.data, 0.5)


def test_head_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(T.ShapeError):
        heatmap_head(Tensor(np.zeros((4, 4, 8))), HeatmapHead(8, 3, rng), GRID)


def test_head_grad_check():
    rng = np.random.default_rng(1)
    grid = BevGrid.square(2, 1.0)
    head = HeatmapHead(4, 2, rng)
    F = features(rng, 4, grid)
    w = rng.normal(size=(4, 4, 2))
    err = grad_check(lambda: T.tsum(heatmap_head(F, head, grid).values * w),
                     [F, head.mlp.fc1.weight, head.mlp.fc2.bias])
    assert err < 1e-6


# ground-truth heatmap ------------------------------------------------------------
def test_gt_heatmap_peak_and_empty():
    b = Box3D((0.3, -2.7, 0), (2, 1, 1), class_id=1)
    heat = render_gt_heatmap([b], GRID, 3)
    assert heat[gt_center_cell(b, GRID) + (1,)] == 1.0
    assert heat[..., [0, 2]].max() == 0.0
    assert heat.max() == 1.0
    assert not render_gt_heatmap([], GRID, 3).any()


def test_gt_heatmap_distant_objects_are_independent_splats():
    a = Box3D((-6, -6, 0), (1, 1, 1), class_id=0)
    b = Box3D((6, 5, 0), (1, 1, 1), class_id=0)
    together = render_gt_heatmap([a, b], GRID, 2)
    apart = render_gt_heatmap([a], GRID, 2) + render_gt_heatmap([b], GRID, 2)
    np.testing.assert_array_equal(together, apart)


def test_gt_heatmap_overlap_keeps_max():
    a = Box3D((0, 0, 0), (1, 1, 1))
    b = Box3D((1, 0, 0), (1, 1, 1))
    both = render_gt_heatmap([a, b], GRID, 1)
    np.testing.assert_array_equal(
        both, np.maximum(render_gt_heatmap([a], GRID, 1), render_gt_heatmap([b], GRID, 1)))


def test_draw_gaussian_clips_at_border():
    canvas = np.zeros((5, 5))
    draw_gaussian(canvas, (0, 0), 2)
    assert canvas[0, 0] == 1.0 and canvas[4, 4] == 0.0
    assert canvas[2, 0] == pytest.approx(np.exp(-4 / (2 * (5 / 6) ** 2)))


def test_gt_heatmap_rejects_outside_box():
    with pytest.raises(ValueError):
        render_gt_heatmap([Box3D((50, 0, 0), (1, 1, 1))], GRID, 1)


# peaks ----------------------------------------------------------------------------------
def test_single_peak():
    v = np.zeros((6, 6, 2))
    v[2, 3, 1] = 0.9
    (c,) = select_peaks(v, 1)
    assert (c.cell, c.class_id, c.heat) == ((2, 3), 1, 0.9)


def test_plateau_all_qualify_and_tie_break():
    v = np.zeros((8, 8, 1))
    v[2:5, 3:6, 0] = 0.7
    assert local_max_mask(v)[2:5, 3:6, 0].all()
    cells = [c.cell for c in select_peaks(v, 9)]
    assert cells == [(ix, iy) for ix in range(2, 5) for iy in range(3, 6)]


def test_exempt_class_contributes_every_cell():
    v = np.zeros((4, 4, 2))
    v[:, :, 1] = np.arange(16).reshape(4, 4) / 16
    assert len(select_peaks(v, 100)) == 16 + 1
    assert len(select_peaks(v, 100, local_max_exempt=[1])) == 16 + 16


def test_peaks_accept_heatmap_and_reject_bad_n():
    v = np.random.default_rng(0).uniform(size=(4, 4, 2))
    assert select_peaks(Heatmap(Tensor(v), BevGrid.square(2, 1.0)), 3) == select_peaks(v, 3)
    with pytest.raises(ValueError):
        select_peaks(v, 0)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.booleans())
def test_peaks_match_exhaustive_oracle(seed, N, quantised):
    rng = np.random.default_rng(seed)
    v = rng.uniform(size=(5, 5, 2))
    if quantised:
        v = np.round(v * 4) / 4  # plenty of ties and plateaus
    exempt = (1,) if seed % 3 == 0 else ()
    got = [(c.cell, c.class_id) for c in select_peaks(v, N, exempt)]
    assert got == brute_peaks(v, N, exempt)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(0, 30))
def test_peaks_prefix_property(seed, N, extra):
    v = np.round(np.random.default_rng(seed).uniform(size=(8, 8, 3)) * 3) / 3
    small = select_peaks(v, N)
    big = select_peaks(v, N + extra)
    assert big[:len(small)] == small
    keep = local_max_mask(v)
    for c in big:
        assert keep[c.cell + (c.class_id,)]


# query features ----------------------------------------------------------------------------
def test_init_queries_zero_embedding_and_class_difference():
    rng = np.random.default_rng(2)
    F = features(rng)
    embed = Linear(3, 8, rng).zero_()
    cands = select_peaks(rng.uniform(size=(16, 16, 3)), 10)
    qb = init_queries(cands, F, embed)
    assert len(qb) == 10
    for i, c in enumerate(cands):
        np.testing.assert_array_equal(qb.features.data[i], F.data[c.cell])
        assert qb[i].position == (c.cell[0] + 0.5, c.cell[1] + 0.5)
        assert 0 <= qb[i].position[0] < 16 and 0 <= qb[i].position[1] < 16

    embed = Linear(3, 8, rng)
    v = np.zeros((16, 16, 3))
    v[4, 4, :] = [0.9, 0.8, 0.7]
    qb = init_queries(select_peaks(v, 2), F, embed)
    np.testing.assert_allclose(qb.features.data[0] - qb.features.data[1],
                               embed.weight.data[0] - embed.weight.data[1], atol=1e-12)


def test_init_queries_gradient_reaches_embedding():
    rng = np.random.default_rng(3)
    F = features(rng)
    F.requires_grad = True
    embed = Linear(3, 8, rng)
    qb = init_queries(select_peaks(rng.uniform(size=(16, 16, 3)), 5), F, embed)
    T.backward(T.tsum(qb.features * qb.features))
    assert np.abs(embed.weight.grad).sum() > 0
    assert np.count_nonzero(np.abs(F.grad).sum(axis=-1)) == 5


# height collapse ----------------------------------------------------------------------------
def test_collapse():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 5, 3))
    np.testing.assert_array_equal(collapse_image_features(Tensor(x)).data, x[0])
    np.testing.assert_allclose(collapse_image_features(Tensor(np.full((4, 5, 3), 2.5))).data, 2.5)
    x = rng.normal(size=(6, 5, 3))
    np.testing.assert_allclose(collapse_image_features(Tensor(x)).data, x.sum(axis=0) / 6, atol=1e-12)
    np.testing.assert_array_equal(collapse_image_features(Tensor(x), "max").data, x.max(axis=0))
    with pytest.raises(ValueError):
        collapse_image_features(Tensor(x), "median")


# image-guided heatmap ------------------------------------------------------------------------------
def guided_setup(num_cameras=1, seed=5):
    rng = np.random.default_rng(seed)
    grid = BevGrid.square(4, 1.0)
    calibs = [look_at_calib(1.0 * v, 1.0, 20.0, (32, 48)) for v in range(num_cameras)]
    F_L = features(rng, 8, grid)
    F_C = [Tensor(rng.normal(size=(*c.feature_size, 8))) for c in calibs]
    mod = ImageGuidedHeatmap(8, 2, num_cameras, 3, rng)
    lidar = HeatmapHead(8, 3, rng)(F_L, grid)
    return mod, F_L, F_C, calibs, lidar, grid


def test_guided_zero_head_averages_with_half():
    mod, F_L, F_C, calibs, lidar, _ = guided_setup()
    mod.head.zero_()
    out = mod(F_L, [Tensor(np.zeros_like(f.data)) for f in F_C], calibs, lidar)
    np.testing.assert_allclose(out.values.data, (lidar.values.data + 0.5) / 2, atol=1e-15)


def test_guided_without_cameras_is_identity():
    mod, F_L, _, _, lidar, _ = guided_setup()
    assert mod(F_L, [], [], lidar) is lidar


def test_guided_camera_count_mismatch():
    mod, F_L, F_C, calibs, lidar, _ = guided_setup(2)
    with pytest.raises(T.ShapeError):
        mod(F_L, F_C[:1], calibs[:1], lidar)


def test_guided_duplicate_camera_doubles_fusion():
    mod1, F_L, F_C, calibs, lidar, grid = guided_setup(1)
    mod2, *_ = guided_setup(2)
    mod2.pos = mod1.pos
    mod2.attn = [mod1.attn[0], mod1.attn[0]]
    one = mod1.fuse(F_L, F_C, calibs, grid).data
    two = mod2.fuse(F_L, F_C * 2, calibs * 2, grid).data
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


def test_guided_self_consistency_and_range():
    mod, F_L, F_C, calibs, lidar, grid = guided_setup(2)
    out = mod(F_L, F_C, calibs, lidar)
    assert out.values.data.min() >= 0 and out.values.data.max() <= 1
    # an image branch that reproduces the LiDAR heatmap leaves it unchanged
    mod.head = lambda fused, g: Heatmap(Tensor(lidar.values.data.copy()), g)
    np.testing.assert_array_equal(mod(F_L, F_C, calibs, lidar).values.data, lidar.values.data)
