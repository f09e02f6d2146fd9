import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadkit.config import model_config_from_dict
from tadkit.core import ConfigError, DataError, Detection, Interval, tiou
from tadkit.inference import (Detector, FusionStage, PostConfig, Suppressor, WindowPlan, detections_from_json,
                              fuse_views, nms, nms_indices, nmw, nmw_arrays, plan_windows, read_detections,
                              suppress_arrays, write_detections)
from tadkit.network import TADNet

from gradsuite import TINY_MODEL
from oracles import nms_oracle, random_nms_instance


def det(s, e, score, c=0):
    return Detection(Interval(s, e), c, score)


def test_window_plan_examples():
    p = plan_windows(240, 96)
    assert p.stride == 24
    assert p.starts == [0, 24, 48, 72, 96, 120, 144]
    assert plan_windows(96, 96).starts == [0]
    assert plan_windows(50, 96).starts == [0]
    assert plan_windows(240, 96, "backward").starts == [144, 120, 96, 72, 48, 24, 0]


def test_window_plan_clamps_last_and_covers():
    p = plan_windows(250, 96)
    assert p.starts[-1] == 154
    covered = np.zeros(250, bool)
    for s in p.starts:
        covered[s:s + 96] = True
    assert covered.all()


def test_bidirectional_is_union():
    f, b = plan_windows(250, 96, "forward"), plan_windows(250, 96, "backward")
    assert plan_windows(250, 96, "bidirectional").starts == sorted(set(f.starts) | set(b.starts))
    with pytest.raises(ConfigError):
        plan_windows(250, 96, "sideways")


def test_nms_example():
    out = nms([det(0, 10, 0.9), det(1, 11, 0.8), det(20, 30, 0.7)])
    assert [d.score for d in out] == [0.9, 0.7]
    assert nms([det(0, 1, 0.5)]) == [det(0, 1, 0.5)]
    assert nms([]) == []


def test_nms_tie_breaks_by_start_then_index():
    b = np.array([[4.0, 12.0], [0.0, 8.0], [0.0, 8.0]])
    assert nms_indices(b, [0.5, 0.5, 0.5], 0.5).tolist() == [1, 0]


def test_nms_matches_oracle():
    for seed in range(500):
        b, s = random_nms_instance(seed)
        assert nms_indices(b, s, 0.5).tolist() == nms_oracle(b.tolist(), s.tolist(), 0.5)


@given(st.integers(0, 10 ** 6), st.floats(0.1, 0.9))
@settings(max_examples=100, deadline=None)
def test_nms_subset_and_idempotent(seed, thr):
    b, s = random_nms_instance(seed)
    keep = nms_indices(b, s, thr)
    assert set(keep.tolist()) <= set(range(len(s)))
    again = nms_indices(b[keep], s[keep], thr)
    assert again.tolist() == list(range(len(keep)))


def test_nmw_example():
    out = nmw([det(0, 10, 0.9), det(1, 11, 0.8)])
    assert len(out) == 1
    w = [0.9, 0.8 * 9 / 11]
    start = w[1] / sum(w)
    assert out[0].interval.start == pytest.approx(start)
    assert out[0].interval.start == pytest.approx(0.421, abs=1e-3)
    assert out[0].interval.end == pytest.approx(10 + start)
    assert out[0].score == 0.9


def test_nmw_singleton_and_identical():
    assert nmw([det(3, 4, 0.2)]) == [det(3, 4, 0.2)]
    out = nmw([det(3, 7, 0.2), det(3, 7, 0.6), det(3, 7, 0.4)])
    assert out == [det(3, 7, 0.6)]


@given(st.integers(0, 10 ** 6))
@settings(max_examples=200, deadline=None)
def test_nmw_inside_cluster_hull(seed):
    b, s = random_nms_instance(seed)
    merged, _, seeds = nmw_arrays(b, s, 0.5)
    for m, i in zip(merged, seeds):
        members = [j for j in range(len(s)) if tiou(Interval(*b[i]), Interval(*b[j])) >= 0.5]
        assert b[members, 0].min() <= m[0] and m[1] <= b[members, 1].max()


def test_suppression_is_per_class():
    b = np.array([[0.0, 10.0], [0.0, 10.0]])
    out_b, _, out_c = suppress_arrays(b, np.array([0.9, 0.8]), np.array([0, 1]), Suppressor.NMS, 0.5)
    assert sorted(out_c.tolist()) == [0, 1]


def test_post_config_defaults():
    from tadkit.network import HeadKind
    p = PostConfig()
    assert p.resolved(HeadKind.ANCHOR_BASED) is Suppressor.NMW
    assert p.resolved(HeadKind.ANCHOR_FREE) is Suppressor.NMS
    assert PostConfig(suppressor="nms").resolved(HeadKind.ANCHOR_BASED) is Suppressor.NMS
    with pytest.raises(ConfigError):
        PostConfig(nms_tiou=0).validate()


def tiny_model(head="af", seed=0):
    cfg = model_config_from_dict(TINY_MODEL, head)
    cfg.precision = "float64"
    return TADNet(cfg, seed)


@pytest.mark.parametrize("stage", list(FusionStage))
@pytest.mark.parametrize("head", ["ab", "af"])
def test_identical_views_match_single_view(stage, head):
    model = tiny_model(head)
    x = np.random.default_rng(0).standard_normal((6, 80))
    one = Detector(model, 2.0, 32, fusion_stage=stage).detect([x], 40.0)
    three = Detector(model, 2.0, 32, fusion_stage=stage).detect([x, x, x], 40.0)
    if stage is FusionStage.POST:
        # pooled duplicates collapse under suppression
        assert [(d.class_id, d.score) for d in one] == [(d.class_id, d.score) for d in three]
    assert len(one) == len(three)
    for a, b in zip(one, three):
        assert a.class_id == b.class_id
        assert abs(a.score - b.score) <= 1e-9
        assert abs(a.interval.start - b.interval.start) <= 1e-9
        assert abs(a.interval.end - b.interval.end) <= 1e-9


def test_fuse_views_rejects_shape_mismatch():
    model = tiny_model()
    with pytest.raises(ConfigError):
        fuse_views(model, [np.zeros((1, 6, 32)), np.zeros((1, 6, 64))], "NECK")


def test_neck_fusion_is_mean_of_features():
    model = tiny_model()
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((1, 6, 32)), rng.standard_normal((1, 6, 32))
    fused = fuse_views(model, [a, b], FusionStage.NECK)
    na = model.neck_forward(model.backbone_forward(a))
    nb = model.neck_forward(model.backbone_forward(b))
    from tadkit.diffkernels import Tensor
    ref = model.head_forward([Tensor((x.data + y.data) / 2) for x, y in zip(na, nb)])
    for u, v in zip(fused.cls_logits, ref.cls_logits):
        np.testing.assert_allclose(u.data, v.data, atol=1e-12)


def test_untrained_model_on_zero_features_stays_below_half():
    model = tiny_model("af")
    dets = Detector(model, 2.0, 32).detect(np.zeros((6, 96)), 48.0)
    assert len(dets) <= 200
    assert all(d.score < 0.5 for d in dets)


def test_duplicate_windows_equal_single_window():
    model = tiny_model("ab")
    x = np.random.default_rng(2).standard_normal((6, 32))
    d = Detector(model, 2.0, 32, post=PostConfig(suppressor="NMS"))
    one = d.detect(x, 16.0, WindowPlan(32, 0, [0]))
    two = d.detect(x, 16.0, WindowPlan(32, 0, [0, 0]))
    assert one == two


@pytest.mark.parametrize("head", ["ab", "af"])
def test_detections_shift_with_video(head):
    model = tiny_model(head, seed=3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 96))
    k = 10
    shifted = np.concatenate([rng.standard_normal((6, k)), x], axis=1)
    d = Detector(model, 2.0, 32)
    plan = plan_windows(96, 32)
    a = d.detect(x, 48.0, plan)
    b = d.detect(shifted, 48.0 + k / 2.0, WindowPlan(32, plan.stride, [s + k for s in plan.starts]))
    assert len(a) == len(b)
    for u, v in zip(a, b):
        assert u.class_id == v.class_id and u.score == pytest.approx(v.score, abs=1e-12)
        assert v.interval.start - u.interval.start == pytest.approx(k / 2.0, abs=1e-9)
        assert v.interval.end - u.interval.end == pytest.approx(k / 2.0, abs=1e-9)


def test_detections_json_round_trip(tmp_path):
    res = {"v2": [det(1.0, 2.5, 0.75, 3)], "v1": []}
    p = tmp_path / "d.json"
    write_detections(p, res)
    assert read_detections(p) == res
    assert list(json.loads(p.read_text())) == ["v1", "v2"]


@pytest.mark.parametrize("doc,pointer", [
    ([], ""),
    ({"a": {}}, "/a"),
    ({"a": [{"start": 0, "end": 1, "class": 0}]}, "/a/0/score"),
    ({"a": [{"start": 2, "end": 1, "class": 0, "score": 0.5}]}, "/a/0/end"),
    ({"a/b": [{"start": 0, "end": 1, "class": -1, "score": 0.5}]}, "/a~1b/0/class"),
])
def test_bad_detection_documents_name_the_field(doc, pointer):
    with pytest.raises(DataError) as e:
        detections_from_json(doc)
    assert str(e.value).startswith(pointer + ":")


def test_missing_detection_file(tmp_path):
    with pytest.raises(DataError):
        read_detections(tmp_path / "nope.json")
