import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from incdet.boxes import BoundingBox
from incdet.evaluation import (ForgettingMatrix, MissingCheckpointError, ap_from_pr, average_precision,
                               forgetting_matrix, format_table, mean_ap, per_class_ap, write_results)
from incdet.trainer import SequenceResult


def G(x1, y1, x2, y2, label=0):
    return BoundingBox(x1, y1, x2, y2, label=label)


def D(x1, y1, x2, y2, score, label=0):
    return BoundingBox(x1, y1, x2, y2, label=label, score=score)


# -- hand examples ------------------------------------------------------------


def test_perfect_detections():
    gts = [G(0, 0, 10, 10), G(20, 20, 30, 30)]
    dets = [D(*g.coords(), score=0.9) for g in gts]
    assert average_precision(dets, gts, 0) == 1.0


def test_no_detections():
    assert average_precision([], [G(0, 0, 10, 10)], 0) == 0.0


def test_tp_fp_tp():
    gts = [G(0, 0, 10, 10), G(20, 20, 30, 30)]
    dets = [D(0, 0, 10, 10, 0.9), D(50, 50, 60, 60, 0.8), D(20, 20, 30, 30, 0.7)]
    assert average_precision(dets, gts, 0) == pytest.approx(1 * 0.5 + (2 / 3) * 0.5, abs=1e-12)
    assert average_precision(dets, gts, 0) == pytest.approx(0.8333, abs=1e-4)


def test_duplicate_detection_is_false_positive():
    gts = [G(0, 0, 10, 10)]
    dets = [D(0, 0, 10, 10, 0.9), D(0, 0, 10, 10, 0.8)]
    assert average_precision(dets, gts, 0) == 1.0
    dets = [D(0, 0, 10, 10, 0.8), D(0, 0, 10, 10, 0.9), D(30, 30, 40, 40, 0.95)]
    assert average_precision(dets, gts, 0) == pytest.approx(0.5)


def test_below_threshold_is_false_positive():
    gts = [G(0, 0, 10, 10)]
    assert average_precision([D(0, 0, 10, 4, 0.9)], gts, 0) == 0.0
    assert average_precision([D(0, 0, 10, 4, 0.9)], gts, 0, iou_thr=0.3) == 1.0


def test_absent_class_semantics():
    assert average_precision([], [G(0, 0, 1, 1, label=1)], 0) == 1.0
    assert average_precision([D(0, 0, 1, 1, 0.5)], [], 0) == 0.0
    # absent classes are left out of the mean
    gts = {"i": [G(0, 0, 10, 10)]}
    dets = {"i": [D(0, 0, 10, 10, 0.9), D(0, 0, 10, 10, 0.9, label=1)]}
    assert per_class_ap(dets, gts, 2) == {0: 1.0}
    assert mean_ap(dets, gts, 2) == 100.0


def test_mean_ap_requires_gt():
    with pytest.raises(ValueError):
        mean_ap({}, {"i": []}, 2)


def test_voc07_metric():
    gts = [G(0, 0, 10, 10), G(20, 20, 30, 30)]
    dets = [D(0, 0, 10, 10, 0.9), D(50, 50, 60, 60, 0.8), D(20, 20, 30, 30, 0.7)]
    # recall >= t for t in 0..0.5: max precision 1 (6 points); t in 0.6..1.0: 2/3 (5 points)
    assert average_precision(dets, gts, 0, use_07_metric=True) == pytest.approx((6 + 5 * 2 / 3) / 11)


def test_ap_from_pr_monotone_envelope():
    import numpy as np
    assert ap_from_pr(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(5 / 6)


# -- oracle equivalence -------------------------------------------------------

CANDIDATES = [(0, 0, 10, 10), (0, 0, 10, 7), (0, 0, 10, 4), (2, 2, 12, 12), (30, 30, 40, 40), (31, 30, 40, 41)]


@st.composite
def fixtures(draw, max_images=3, max_dets=4):
    n_img = draw(st.integers(1, max_images))
    gts = []
    for i in range(n_img):
        for box in draw(st.lists(st.sampled_from(CANDIDATES), max_size=3)):
            gts.append((i, box, draw(st.integers(0, 1))))
    n_det = draw(st.integers(0, max_dets))
    dets = []
    for _ in range(n_det):
        i = draw(st.integers(0, n_img - 1))
        dets.append((i, draw(st.sampled_from(CANDIDATES)), draw(st.integers(0, 1)),
                     draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))))
    return n_img, dets, gts


def to_dicts(n_img, dets, gts):
    d = {f"im{i}": [] for i in range(n_img)}
    g = {f"im{i}": [] for i in range(n_img)}
    for i, box, lab, score in dets:
        d[f"im{i}"].append(BoundingBox(*box, label=lab, score=score))
    for i, box, lab in gts:
        g[f"im{i}"].append(BoundingBox(*box, label=lab))
    return d, g


@settings(max_examples=500, deadline=None)
@given(fixtures())
def test_ap_matches_exhaustive_oracle(fx):
    n_img, dets, gts = fx
    dets = sorted(dets, key=lambda t: t[0])  # same tie order as the per-image dict
    d, g = to_dicts(n_img, dets, gts)
    for cls in (0, 1):
        assert average_precision(d, g, cls) == pytest.approx(oracles.exhaustive_ap(dets, gts, cls), abs=1e-9)


def test_map_matches_oracle_on_five_images():
    rng = random.Random(0)
    gts = [(i, rng.choice(CANDIDATES), rng.randint(0, 2)) for i in range(5) for _ in range(3)]
    dets = sorted([(rng.randrange(5), rng.choice(CANDIDATES), rng.randint(0, 2), rng.random()) for _ in range(20)],
                  key=lambda t: t[0])
    d, g = to_dicts(5, dets, gts)
    present = sorted({lab for _, _, lab in gts})
    expected = 100 * sum(oracles.exhaustive_ap(dets, gts, c) for c in present) / len(present)
    assert mean_ap(d, g, 3) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(fixtures(max_dets=6), st.randoms(use_true_random=False))
def test_ap_invariant_to_input_order(fx, rnd):
    n_img, dets, gts = fx
    # distinct scores so the order among equal confidences cannot matter
    dets = [(i, b, lab, s + k * 1e-3) for k, (i, b, lab, s) in enumerate(dets)]
    d, g = to_dicts(n_img, dets, gts)
    shuffled = {k: rnd.sample(v, len(v)) for k, v in reversed(list(d.items()))}
    for cls in (0, 1):
        assert average_precision(shuffled, g, cls) == average_precision(d, g, cls)


@settings(max_examples=200, deadline=None)
@given(fixtures())
def test_lowest_confidence_false_positive_never_increases_ap(fx):
    n_img, dets, gts = fx
    d, g = to_dicts(n_img, dets, gts)
    extra = {k: list(v) for k, v in d.items()}
    extra["im0"].append(BoundingBox(100, 100, 110, 110, label=0, score=0.01))
    assert average_precision(extra, g, 0) <= average_precision(d, g, 0)
    ap = average_precision(d, g, 0)
    assert 0.0 <= ap <= 1.0


# -- forgetting ---------------------------------------------------------------


def test_forgetting_two_tasks():
    res = SequenceResult(["A", "B"], [[70.0, 50.0], [None, 80.0]])
    fm = forgetting_matrix(res)
    assert fm.values[0][1] == -20.0
    assert fm.row_sums == [-20.0, 0.0]
    assert fm.total == -20.0


def test_forgetting_unchanged_task_is_zero_row():
    res = SequenceResult(["A", "B", "C"], [[60.0, 60.0, 60.0], [None, 50.0, 45.0], [None, None, 70.0]])
    fm = forgetting_matrix(res)
    assert fm.values[0] == [None, 0.0, 0.0]
    assert fm.row_sums == [0.0, -5.0, 0.0]


def test_row_sums_equal_accumulated_final_drops():
    res = SequenceResult(["A", "B", "C"], [[60.0, 40.0, 30.0], [None, 50.0, 45.0], [None, None, 70.0]])
    fm = forgetting_matrix(res)
    assert fm.row_sums == [(40 - 60) + (30 - 60), 45 - 50, 0.0]


def test_joint_result_gives_empty_matrix():
    res = SequenceResult(["A", "B"], [[70.0], [60.0]], joint=True)
    assert forgetting_matrix(res).empty


def test_missing_entry_raises():
    res = SequenceResult(["A", "B"], [[70.0, None], [None, 80.0]])
    with pytest.raises(MissingCheckpointError, match="after task B"):
        forgetting_matrix(res)


def test_write_results(tmp_path):
    res = SequenceResult(["A", "B"], [[70.0, 50.0], [None, 80.0]])
    path = write_results(res, tmp_path / "r.json")
    blob = json.loads(path.read_text())
    assert blob["forgetting"]["row_sums"] == [-20.0, 0.0]
    assert "A=-20.0" in (tmp_path / "r.txt").read_text()
    assert "after B" in format_table(res)
    assert isinstance(ForgettingMatrix(["A"], [[None]]).to_dict(), dict)
