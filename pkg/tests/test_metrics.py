import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from surgctx.metrics import (
    Segment,
    accuracy,
    edit_score,
    gesture_scores,
    levenshtein,
    report_csv,
    report_text,
    segment_iou,
    segments,
    series_iou,
    state_variable_report,
    value_iou,
)
from surgctx.trial_io import ContextFrame

labels = st.lists(st.sampled_from("ABC"), max_size=25)


@given(labels, labels)
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == oracles.levenshtein(a, b)


@given(labels, labels)
def test_edit_score_uses_segments(a, b):
    ra, rb = oracles.run_labels(a), oracles.run_labels(b)
    n = max(len(ra), len(rb))
    want = 100.0 if n == 0 else (1 - oracles.levenshtein(ra, rb) / n) * 100
    assert edit_score(a, b) == pytest.approx(want)


def test_edit_score_ignores_durations():
    assert edit_score(list("AAAB"), list("ABBB")) == 100.0
    assert edit_score(["G1", "G2", "G3"], ["G1", "G3"]) == pytest.approx(66.6667, abs=1e-3)


def test_accuracy_and_length_mismatch_warning():
    assert accuracy(list("ABCD"), list("ABCC")) == 75.0
    with pytest.warns(UserWarning, match="truncated to 2"):
        assert accuracy(list("AB"), list("ABC")) == 100.0


def test_segments_skip_none():
    assert segments(["A", "A", None, "B"]) == [Segment(0, 2, "A"), Segment(3, 4, "B")]
    with pytest.raises(ValueError):
        Segment(3, 3, "A")


def test_segment_iou_matching():
    gt = [Segment(0, 10, "A"), Segment(10, 20, "B")]
    pred = [Segment(0, 5, "A"), Segment(5, 20, "B")]
    per_class, mean = segment_iou(gt, pred)
    assert per_class == {"A": pytest.approx(0.5), "B": pytest.approx(10 / 15)}
    assert mean == pytest.approx((0.5 + 10 / 15) / 2)


def test_segment_iou_unmatched_and_missing_classes():
    gt = [Segment(0, 10, "A"), Segment(10, 20, "C")]
    pred = [Segment(0, 10, "A"), Segment(10, 15, "A"), Segment(15, 20, "B")]
    per_class, mean = segment_iou(gt, pred)
    assert per_class["A"] == pytest.approx(0.5)  # second A prediction finds no partner
    assert per_class["B"] == 0.0
    assert per_class["C"] == 0.0  # ground truth only
    assert mean == pytest.approx(0.5 / 3)


def test_series_iou_identical_is_one():
    s = list("AABBBCA")
    assert series_iou(s, s)[1] == 1.0


def test_value_iou_counts_samples():
    per, mean = value_iou([0, 0, 2, 2], [0, 2, 2, 2])
    assert per == {0: 0.5, 2: pytest.approx(2 / 3)}
    assert mean == pytest.approx((0.5 + 2 / 3) / 2)


def test_state_variable_report_columns():
    gt = [ContextFrame.from_code(c) for c in ("00000", "20001", "20002")]
    row = state_variable_report(gt, gt)
    assert list(row) == ["Left Hold", "Left Contact", "Right Hold", "Right Contact", "Needle or Knot", "Avg"]
    assert all(v == 1.0 for v in row.values())


def test_gesture_scores_perfect():
    s = gesture_scores(list("AABB"), list("AABB"))
    assert (s.accuracy, s.edit, s.iou) == (100.0, 100.0, 1.0)


def test_reports_format():
    rows = [{"Trial": "t1", "Acc": 0.5}, {"Trial": "Overall", "Acc": 0.25}]
    assert report_csv(rows, ["Trial", "Acc"]) == "Trial,Acc\nt1,0.5000\nOverall,0.2500\n"
    text = report_text(rows, ["Trial", "Acc"])
    assert text.splitlines()[0].split() == ["Trial", "Acc"]
    assert text.splitlines()[2].split() == ["t1", "0.50"]
