import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ecvt.errors import ConfigError
from ecvt.evaluation import (
    ACTIVITYNET_THRESHOLDS,
    EvalReport,
    average_precision,
    evaluate,
    map_at,
    rank_order,
    t_iou,
)
from ecvt.head_losses import ActionInstance as A


def test_t_iou_values():
    assert t_iou((0, 2), (0, 2)) == 1.0
    assert t_iou((0, 1), (2, 3)) == 0.0
    assert t_iou((0, 2), (1, 3)) == pytest.approx(1 / 3, abs=1e-12)


def test_ap_single_hit_and_single_miss():
    gt = [A(1, 0.0, 10.0)]
    assert average_precision([A(1, 0.0, 7.5, 0.9)], gt, 0.5) == 1.0  # tIoU 0.75
    assert average_precision([A(1, 0.0, 6.0, 0.9)], gt, 0.5) == 1.0  # tIoU 0.6
    assert average_precision([A(1, 20.0, 30.0, 0.9)], gt, 0.5) == 0.0


def test_ap_hit_miss_hit_is_five_sixths():
    gts = [A(1, 0.0, 10.0), A(1, 20.0, 30.0)]
    preds = [A(1, 0.0, 10.0, 0.9), A(1, 40.0, 50.0, 0.8), A(1, 20.0, 30.0, 0.7)]
    assert average_precision(preds, gts, 0.5) == pytest.approx(5 / 6, abs=1e-12)
    as_tuples = [(p.score, p.start_sec, p.end_sec, "") for p in preds]
    assert oracles.brute_force_ap(as_tuples, [(g.start_sec, g.end_sec, "") for g in gts], 0.5) == pytest.approx(5 / 6)


def test_ap_edge_cases():
    assert math.isnan(average_precision([], [], 0.5))
    assert average_precision([A(1, 0, 1, 0.5)], [], 0.5) == 0.0
    assert average_precision([], [A(1, 0, 1)], 0.5) == 0.0


def test_duplicate_detections_count_once():
    gts = [A(1, 0.0, 10.0)]
    preds = [A(1, 0.0, 10.0, 0.9), A(1, 0.0, 10.0, 0.8)]
    assert average_precision(preds, gts, 0.5) == 1.0
    gts2 = gts + [A(1, 50.0, 60.0)]
    assert average_precision(preds, gts2, 0.5) == pytest.approx(0.5)


def test_matching_stays_within_video():
    gts = [A(1, 0.0, 10.0, video_id="a")]
    assert average_precision([A(1, 0.0, 10.0, 0.9, "b")], gts, 0.5) == 0.0


def test_perfect_predictions_score_one_everywhere():
    gts = [A(1, 0, 5), A(2, 6, 9), A(1, 12, 20, video_id="x")]
    preds = [A(g.class_id, g.start_sec, g.end_sec, 1.0, g.video_id) for g in gts]
    rep = evaluate(preds, gts, ACTIVITYNET_THRESHOLDS)
    assert all(v == 1.0 for v in rep.per_threshold_map.values())
    assert rep.average_map == 1.0


def test_no_predictions_scores_zero():
    rep = evaluate([], [A(1, 0, 5)], (0.5,))
    assert rep.per_threshold_map[0.5] == 0.0


def test_empty_ground_truth_is_flagged():
    rep = evaluate([A(1, 0, 5, 0.3)], [], (0.5, 0.7))
    assert rep.undefined and rep.average_map is None
    assert rep.per_threshold_map == {0.5: None, 0.7: None}


def test_report_json_shape_and_round_trip():
    rep = evaluate([A(1, 0, 5, 0.9)], [A(1, 0, 5), A(2, 1, 2)], (0.5, 0.75))
    obj = rep.to_json()
    assert list(obj) == ["per_threshold_map", "average_map", "per_class_ap", "counts"]
    assert obj["per_threshold_map"] == {"0.50": 0.5, "0.75": 0.5}
    assert obj["per_class_ap"]["1@0.50"] == 1.0 and obj["per_class_ap"]["2@0.75"] == 0.0
    again = EvalReport.from_json(obj)
    assert again.to_json() == obj
    assert map_at(rep, 0.75) == 0.5


def test_bad_thresholds():
    with pytest.raises(ConfigError):
        evaluate([], [A(1, 0, 1)], ())
    with pytest.raises(ConfigError):
        evaluate([], [A(1, 0, 1)], (1.5,))


def test_rank_order_tie_break():
    ps = [A(2, 3.0, 4.0, 0.5), A(1, 3.0, 4.0, 0.5), A(1, 1.0, 4.0, 0.5), A(1, 9.0, 10.0, 0.9)]
    assert [(p.class_id, p.start_sec) for p in rank_order(ps)] == [(1, 9.0), (1, 1.0), (1, 3.0), (2, 3.0)]


def _random_instance(seed):
    r = np.random.default_rng(seed)
    classes = int(r.integers(1, 4))
    preds, gts = [], []
    for c in range(1, classes + 1):
        for _ in range(int(r.integers(1, 5))):
            s = float(r.uniform(0, 20))
            gts.append((c, s, s + float(r.uniform(0.5, 6)), str(r.integers(2))))
        for _ in range(int(r.integers(0, 7))):
            s = float(r.uniform(0, 20))
            preds.append((c, float(r.uniform()), s, s + float(r.uniform(0.5, 6)), str(r.integers(2))))
    return preds, gts


@pytest.mark.parametrize("thresh", [0.3, 0.5, 0.7])
def test_evaluate_matches_brute_force_oracle(thresh):
    for seed in range(250):
        preds, gts = _random_instance(seed)
        got = evaluate([A(c, s, e, sc, v) for c, sc, s, e, v in preds], [A(c, s, e, 1.0, v) for c, s, e, v in gts],
                       (thresh,)).per_threshold_map[thresh]
        assert abs(got - oracles.brute_force_map(preds, gts, thresh)) < 1e-9, seed


@given(st.integers(0, 100_000))
def test_map_non_increasing_in_threshold(seed):
    preds, gts = _random_instance(seed)
    rep = evaluate([A(c, s, e, sc, v) for c, sc, s, e, v in preds], [A(c, s, e, 1.0, v) for c, s, e, v in gts],
                   ACTIVITYNET_THRESHOLDS)
    vals = [rep.per_threshold_map[t] for t in ACTIVITYNET_THRESHOLDS]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 100_000), st.sampled_from(["affine", "cube", "exp"]))
def test_ap_invariant_under_monotone_rescaling(seed, kind):
    f = {"affine": lambda s: 3 * s + 7, "cube": lambda s: s**3, "exp": math.exp}[kind]
    preds, gts = _random_instance(seed)
    g = [A(c, s, e, 1.0, v) for c, s, e, v in gts]
    a = evaluate([A(c, s, e, sc, v) for c, sc, s, e, v in preds], g, (0.5,)).per_threshold_map[0.5]
    b = evaluate([A(c, s, e, f(sc), v) for c, sc, s, e, v in preds], g, (0.5,)).per_threshold_map[0.5]
    assert a == pytest.approx(b, abs=1e-12)
