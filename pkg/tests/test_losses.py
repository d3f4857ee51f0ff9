import math

import numpy as np
import pytest

from tfhead import tensor as T
from tfhead.assignment import Assignment, MatchWeights
from tfhead.decoder import PredictionSet
from tfhead.geometry import BevGrid, Box3D, encode_box
from tfhead.losses import (
    LossConfig,
    assign,
    detection_loss,
    heatmap_loss,
    sigmoid_focal_loss,
    total_loss,
)
from tfhead.model import Detector, toy_config
from tfhead.scenes import SceneSpec, generate_scene
from tfhead.tensor import Tensor, grad_check
from tfhead.training import Optimizer, TrainConfig, loss_on, prepare_stage

GRID = BevGrid.square(16, 1.0)


def random_preds(rng, n=3, K=3):
    pos = rng.integers(4, 28, (n, 2)) + 0.5
    attrs = rng.normal(scale=0.5, size=(n, 10))
    return PredictionSet(Tensor(attrs), Tensor(rng.normal(size=(n, K))), pos.astype(float), np.ones(n), GRID)


# focal loss ------------------------------------------------------------------------------------
def test_focal_matches_formula():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=3, size=(4, 3))
    t = (rng.uniform(size=(4, 3)) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-x))
    ref = -(0.25 * t * (1 - p) ** 2 * np.log(p) + 0.75 * (1 - t) * p ** 2 * np.log(1 - p)).sum()
    assert sigmoid_focal_loss(Tensor(x), t).item() == pytest.approx(ref, rel=1e-12)


def test_focal_extreme_logits_stay_finite():
    x = Tensor(np.array([[-800.0, 800.0]]))
    assert np.isfinite(sigmoid_focal_loss(x, np.array([[1.0, 0.0]])).item())


def test_focal_grad_check():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)))
    t = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    assert grad_check(lambda: sigmoid_focal_loss(x, t), [x]) < 1e-6


# heatmap loss -------------------------------------------------------------------------------------
def test_heatmap_loss_hand_formula():
    target = np.array([[[1.0], [0.6]], [[0.2], [0.0]]])
    pred = Tensor(np.full((2, 2, 1), 0.5))
    pos = 0.25 * math.log(0.5)
    neg = sum((1 - t) ** 4 * 0.25 * math.log(0.5) for t in (0.6, 0.2, 0.0))
    assert heatmap_loss(pred, target).item() == pytest.approx(-(pos + neg), rel=1e-12)


def test_heatmap_loss_minimum_and_normalisation():
    target = np.zeros((4, 4, 2))
    target[1, 1, 0] = target[2, 3, 1] = 1.0
    assert heatmap_loss(Tensor(target.copy()), target).item() < 1e-6
    pred = Tensor(np.full((4, 4, 2), 0.3))
    two = heatmap_loss(pred, target).item()
    one_peak = target.copy()
    one_peak[2, 3, 1] = 0.999
    # normalised by peak count: with one peak the same raw sum is not halved
    assert heatmap_loss(pred, one_peak).item() > two
    assert heatmap_loss(pred, np.zeros((4, 4, 2))).item() > 0


def test_heatmap_loss_errors():
    with pytest.raises(T.ShapeError):
        heatmap_loss(Tensor(np.zeros((2, 2, 1))), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        heatmap_loss(Tensor(np.full((2, 2, 1), 1.5)), np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        heatmap_loss(Tensor(np.zeros((2, 2, 1))), np.full((2, 2, 1), -0.1))


def test_heatmap_loss_grad_check():
    rng = np.random.default_rng(2)
    target = rng.uniform(size=(3, 3, 2))
    target[1, 1, 0] = 1.0
    pred = Tensor(rng.uniform(0.1, 0.9, size=(3, 3, 2)))
    assert grad_check(lambda: heatmap_loss(pred, target), [pred]) < 1e-6


# detection loss ----------------------------------------------------------------------------------
def test_detection_loss_no_gts():
    rng = np.random.default_rng(3)
    ps = random_preds(rng)
    total, parts = detection_loss(ps, [], Assignment([], [0, 1, 2]))
    assert parts["reg"] == 0.0
    assert parts["cls"] == pytest.approx(sigmoid_focal_loss(ps.cls_logits, np.zeros((3, 3))).item())
    assert total.item() == pytest.approx(parts["cls"])


def test_detection_loss_perfect_predictions():
    gts = [Box3D((2.3, -4.1, 0.5), (3, 1.5, 1.2), 0.4, class_id=2),
           Box3D((-7.2, 6.6, 0.1), (1, 1, 2), -1.0, class_id=0)]
    pos = np.array([[18.5, 11.5], [8.5, 22.5], [1.5, 1.5]])
    attrs = np.zeros((3, 10))
    logits = np.full((3, 3), -40.0)
    for t, g in enumerate(gts):
        attrs[t] = encode_box(g, pos[t], GRID)
        logits[t, g.class_id] = 40.0
    ps = PredictionSet(Tensor(attrs), Tensor(logits), pos, np.ones(3), GRID)
    a = Assignment([(0, 0), (1, 1)], [2])
    total, _ = detection_loss(ps, gts, a)
    assert total.item() < 1e-6
    assert assign(ps, gts, MatchWeights()).pairs == [(0, 0), (1, 1)]


def test_detection_loss_components_and_grad():
    rng = np.random.default_rng(4)
    ps = random_preds(rng)
    gts = [Box3D((1, 2, 0), (2, 1, 1), 0.5, class_id=1), Box3D((-3, -5, 0), (1, 1, 1), class_id=2)]
    a = Assignment([(0, 1), (2, 0)], [1])
    cfg = LossConfig(w_cls=0.7, w_reg=0.3)
    total, parts = detection_loss(ps, gts, a, cfg)
    targets = np.zeros((3, 3))
    targets[0, 2] = targets[2, 1] = 1.0
    cls = sigmoid_focal_loss(ps.cls_logits, targets).item() / 2
    reg = (np.abs(ps.attrs.data[0] - encode_box(gts[1], ps.positions[0], GRID)).sum()
           + np.abs(ps.attrs.data[2] - encode_box(gts[0], ps.positions[2], GRID)).sum()) / 2
    assert parts["cls"] == pytest.approx(cls, rel=1e-12)
    assert parts["reg"] == pytest.approx(reg, rel=1e-12)
    assert total.item() == pytest.approx(0.7 * cls + 0.3 * reg, rel=1e-12)
    err = grad_check(lambda: detection_loss(ps, gts, a, cfg)[0], [ps.attrs, ps.cls_logits])
    assert err < 1e-5


def test_assign_strategies():
    rng = np.random.default_rng(5)
    ps = random_preds(rng, 4)
    gts = [Box3D((0, 0, 0), (1, 1, 1), class_id=0)]
    assert len(assign(ps, gts, MatchWeights()).pairs) == 1
    assert assign(ps, [], MatchWeights()).unmatched_preds == [0, 1, 2, 3]
    assign(ps, gts, MatchWeights(), "heuristic")
    with pytest.raises(ValueError):
        assign(ps, gts, MatchWeights(), "greedy")


# total loss -----------------------------------------------------------------------------------------
def test_total_loss_symmetry_and_zero_weights():
    rng = np.random.default_rng(6)
    ps = random_preds(rng, 4)
    gts = [Box3D((1, 2, 0), (2, 1, 1), class_id=1)]
    target = np.zeros((32, 32, 3))
    target[17, 18, 1] = 1.0
    hm = Tensor(rng.uniform(0.01, 0.99, (32, 32, 3)))
    _, parts = total_loss(ps, ps, gts, hm, target)
    assert parts["initial_cls"] == parts["final_cls"] and parts["initial_reg"] == parts["final_reg"]
    assert parts["total"] == pytest.approx(
        parts["heatmap"] + 2 * (parts["initial_cls"] + 0.25 * parts["initial_reg"]))
    zero = LossConfig(w_heatmap=0, w_cls=0, w_reg=0)
    total, parts = total_loss(ps, ps, gts, hm, target, cfg=zero)
    assert total.item() == 0.0 and "heatmap" not in parts


@pytest.mark.parametrize("seed", range(10))
def test_one_step_decreases_loss(seed):
    model = Detector(toy_config(hidden=16, heads=2, ffn_hidden=16, num_queries=10, seed=seed))
    inputs = model.prepare(generate_scene(SceneSpec(seed=seed, num_objects=3)))
    cfg = TrainConfig(stage=1, iters=1, lr=1e-3, clip=None)
    params = prepare_stage(model, 1)
    before, _ = loss_on(model, inputs, cfg)
    T.backward(before)
    Optimizer(params, "sgd", 1e-3, None).step()
    after, _ = loss_on(model, inputs, cfg)
    assert after.item() < before.item()
