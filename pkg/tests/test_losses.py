import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadkit import diffkernels as dk
from tadkit.config import model_config_from_dict
from tadkit.core import ConfigError, Interval, tiou
from tadkit.losses import LossConfig, detection_loss, diou_loss, diou_terms, focal_loss, total_loss
from tadkit.network import TADNet
from tadkit.targets import CandidateGrid

from gradsuite import TINY_MODEL


def logit(p):
    return math.log(p / (1 - p))


def test_focal_single_positive():
    val, _ = focal_loss(np.array([[logit(0.9)]]), np.array([[1.0]]))
    assert val == pytest.approx(-0.25 * 0.01 * math.log(0.9), rel=1e-12)
    assert val == pytest.approx(2.634e-4, abs=1e-7)


def test_focal_confident_is_near_zero():
    val, _ = focal_loss(np.array([[30.0, -30.0]]), np.array([[1.0, 0.0]]))
    assert val < 1e-12


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((20, 4))
    t = (rng.random((20, 4)) < 0.3).astype(float)
    p = 1 / (1 + np.exp(-z))
    bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum()
    val, _ = focal_loss(z, t, gamma=0.0, alpha=0.5)
    assert val == pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_weight_masks_candidates():
    z = np.array([[0.3], [2.0]])
    t = np.array([[1.0], [0.0]])
    full, _ = focal_loss(z, t)
    first, g = focal_loss(z, t, weight=np.array([[1.0], [0.0]]))
    assert first == pytest.approx(focal_loss(z[:1], t[:1])[0])
    assert first < full and g[1, 0] == 0


@given(st.floats(-8, 8), st.booleans())
@settings(max_examples=100, deadline=None)
def test_focal_gradient_matches_difference(z, positive):
    t = np.array([[float(positive)]])
    _, g = focal_loss(np.array([[z]]), t)
    h = 1e-6
    num = (focal_loss(np.array([[z + h]]), t)[0] - focal_loss(np.array([[z - h]]), t)[0]) / (2 * h)
    assert g[0, 0] == pytest.approx(num, rel=1e-5, abs=1e-9)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
@settings(max_examples=100, deadline=None)
def test_focal_decreases_in_pt_for_positives(p1, p2):
    lo, hi = sorted((p1, p2))
    if hi - lo < 1e-6:
        return
    a = focal_loss(np.array([[logit(lo)]]), np.array([[1.0]]))[0]
    b = focal_loss(np.array([[logit(hi)]]), np.array([[1.0]]))[0]
    assert b < a


def test_diou_examples():
    assert diou_loss(Interval(1, 3), Interval(1, 3)) == 0.0
    assert diou_loss(Interval(0, 2), Interval(2, 4)) == pytest.approx(1.25)
    assert diou_loss(Interval(0, 4), Interval(1, 3)) == pytest.approx(0.5)


intervals = st.tuples(st.floats(-50, 50), st.floats(0.01, 30)).map(lambda t: Interval(t[0], t[0] + t[1]))


@given(intervals, intervals)
@settings(max_examples=300, deadline=None)
def test_diou_symmetric_and_bounded(a, b):
    v = diou_loss(a, b)
    assert v == pytest.approx(diou_loss(b, a), abs=1e-12)
    assert 0 <= v < 2


@given(intervals, st.floats(0.01, 30))
@settings(max_examples=100, deadline=None)
def test_diou_concentric_is_one_minus_tiou(a, length):
    c = a.center
    b = Interval(c - length / 2, c + length / 2)
    assert diou_loss(a, b) == pytest.approx(1 - tiou(a, b), abs=1e-9)


def test_diou_gradient_matches_difference():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 10, (200, 2))
    pred = np.stack([s[:, 0], s[:, 0] + rng.uniform(0.5, 6, 200)], 1)
    gt = np.stack([s[:, 1], s[:, 1] + rng.uniform(0.5, 6, 200)], 1)
    _, g = diou_terms(pred, gt)
    h = 1e-6
    for j in range(2):
        d = np.zeros_like(pred)
        d[:, j] = h
        num = (diou_terms(pred + d, gt)[0] - diou_terms(pred - d, gt)[0]) / (2 * h)
        np.testing.assert_allclose(g[:, j], num, rtol=1e-4, atol=1e-7)


def test_total_loss_linearity():
    assert total_loss(0.3, 0.2, LossConfig(alpha_weight=1.0)) == pytest.approx(0.5)
    assert total_loss(0.3, 0.2, LossConfig(alpha_weight=0.0)) == 0.3


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(focal_alpha=1.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(focal_gamma=-1).validate()


def _batch(head, seed=0):
    cfg = model_config_from_dict(TINY_MODEL, head)
    cfg.precision = "float64"
    model = TADNet(cfg, seed)
    grid = CandidateGrid(cfg.head, cfg.level_strides(), 32, 1.0)
    x = np.random.default_rng(seed).standard_normal((2, 6, 32))
    gts = [(np.array([[2.0, 9.0], [14.0, 30.0]]), np.array([0, 2])), (np.zeros((0, 2)), np.zeros(0, int))]
    return model, grid, x, gts


@pytest.mark.parametrize("head", ["ab", "af"])
def test_gradient_of_total_is_sum_of_parts(head):
    model, grid, x, gts = _batch(head)
    grads = {}
    for w in (0.0, 1.0, 2.5):
        model.zero_grad()
        out = model(x)
        detection_loss(out, grid, gts, LossConfig(alpha_weight=w)).total.backward()
        grads[w] = {k: p.grad_or_zeros().copy() for k, p in model.params.items()}
    for k in grads[0.0]:
        reg = grads[1.0][k] - grads[0.0][k]
        np.testing.assert_allclose(grads[2.5][k], grads[0.0][k] + 2.5 * reg, atol=1e-10)


def test_no_positives_normalizes_by_one():
    model, grid, x, _ = _batch("af")
    empty = [(np.zeros((0, 2)), np.zeros(0, int))] * 2
    lb = detection_loss(model(x), grid, empty, LossConfig())
    assert lb.num_positives == 0 and lb.reg == 0.0
    cls = grid.flatten(model(x).cls_logits, grid.num_classes)
    expected = sum(focal_loss(c, np.zeros_like(c))[0] for c in cls)
    assert lb.cls == pytest.approx(expected)


@pytest.mark.parametrize("head", ["ab", "af"])
def test_detection_loss_grad_check(head):
    model, grid, x, gts = _batch(head, seed=1)

    def f():
        return detection_loss(model(x), grid, gts, LossConfig()).total

    assert dk.grad_check(f, list(model.params.values()), n_coords=200, eps=1e-4) < 1e-4
