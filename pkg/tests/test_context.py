import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from surgctx.config import ConfigError, Thresholds, parse_structured_text
from surgctx.context import (
    FeatureVector,
    compile_condition,
    compute_features,
    default_rules,
    downsample,
    grasper_open,
    infer_state,
    infer_trial_context,
    parse_rules,
    rolling_mode,
)
from surgctx.geometry import ObjectPolygons
from surgctx.synth import synth_trial
from surgctx.trial_io import ContextFrame, ObjectClass, Task, load_manifest


def _rules(body, task="Suturing"):
    return parse_rules(parse_structured_text(f"task = {task}\n{body}"))


def test_shipped_rule_sets_parse():
    for task in Task:
        rs = default_rules(task)
        assert rs.task is task
    assert ("LG", "N") in default_rules("Suturing").required_distances


@pytest.mark.parametrize(
    "body, match",
    [
        ("[left_hold]\n2 D(LG, N) < 1\n", "expected '<value>: <condition>'"),
        ("[left_hold]\nx: D(LG, N) < 1\n", "must be an integer"),
        ("[left_hold]\n2: D(LG, Q) < 1\n", "two object names"),
        ("[left_hold]\n2: foo(LG, N) < 1\n", "only D"),
        ("[left_hold]\n2: D(LG, N) <\n", "bad rule condition"),
        ("[left_hold]\n2: __import__\n", "unknown name"),
        ("[left_hold]\n1: D(LG, N) < 1\n", "not valid for Suturing"),
        ("[left_hold]\n2: D(LG, R) < 1\n", "does not provide"),
        ("[wrist]\n2: D(LG, N) < 1\n", "unknown state variable"),
    ],
)
def test_rule_errors(body, match):
    with pytest.raises(ConfigError, match=match):
        _rules(body)


def test_condition_collects_features():
    c = compile_condition("(Inter(Ts, N) <= overlap_px2 or N.x >= Ts.x) and D(RG, T) > touch_px")
    assert c.intersections == {("Ts", "N")}
    assert c.distances == {("RG", "T")}
    assert c.midpoints == {"N", "Ts"}


def test_first_matching_rule_wins():
    rs = _rules("[left_hold]\n2: D(LG, N) < 5\n3: D(LG, N) < 10\n")
    v = FeatureVector(0, distances={("LG", "N"): 3.0})
    assert infer_state(v, rs).left_hold == 2
    v = FeatureVector(0, distances={("LG", "N"): 7.0})
    assert infer_state(v, rs).left_hold == 3
    v = FeatureVector(0, distances={("LG", "N"): 12.0})
    assert infer_state(v, rs).left_hold == 0


def test_threshold_names_follow_overrides():
    rs = _rules("[left_hold]\n2: D(LG, N) < touch_px\n")
    v = FeatureVector(0, distances={("LG", "N"): 2.0})
    assert infer_state(v, rs).left_hold == 0
    assert infer_state(v, rs, Thresholds(touch_px=3.0)).left_hold == 2


def test_absent_objects_never_satisfy_comparisons():
    rs = _rules("[left_hold]\n2: D(LG, N) > 1\n3: not (D(LG, N) <= 1)\n")
    v = compute_features({}, rs)
    assert math.isinf(v.D("LG", "N"))
    assert infer_state(v, rs).left_hold == 3  # only the negation holds


def test_empty_frame_is_all_zero():
    for task in (Task.SUTURING, Task.NEEDLE_PASSING, Task.KNOT_TYING):
        rs = default_rules(task)
        polys = {o: ObjectPolygons(o) for o in ObjectClass}
        assert infer_state(compute_features(polys, rs), rs).code == "00000"


def test_grasper_open_threshold():
    assert not grasper_open(((0, 0), (0, 17.9)))
    assert grasper_open(((0, 0), (0, 18)))
    assert grasper_open(((0, 0), (10, 0)), threshold_px=5)


def test_rolling_mode_tie_goes_to_latest():
    assert rolling_mode([1, 1, 2, 2]) == 2
    assert rolling_mode([2, 1, 1, 2]) == 2
    assert rolling_mode([2, 2, 1, 1]) == 1
    assert rolling_mode([3, 2, 3]) == 3


@given(st.lists(st.integers(0, 3), max_size=80), st.integers(1, 12), st.integers(1, 12))
def test_downsample_matches_oracle(series, window, stride):
    frames = [ContextFrame(v, 0, 0, 0, 0) for v in series]
    got = [f.left_hold for f in downsample(frames, window, stride)]
    assert got == oracles.downsample(series, window, stride)


def test_downsample_100_frames_to_10():
    frames = [ContextFrame.from_code("00000")] * 95 + [ContextFrame.from_code("20000")] * 5
    out = downsample(frames)
    assert len(out) == 10
    assert [f.timestamp for f in out] == list(range(10))
    assert out[-1].code == "20000"  # 5/5 tie resolved to the later value


def test_threaded_inference_matches_serial(tmp_path):
    mp = synth_trial("Suturing", tmp_path, random.Random(3), "t", n_samples=12)
    m = load_manifest(mp)
    assert infer_trial_context(m, jobs=3) == infer_trial_context(m)


def test_rule_task_must_match_trial(tmp_path):
    mp = synth_trial("NeedlePassing", tmp_path, random.Random(4), "t", n_samples=3)
    with pytest.raises(ConfigError, match="rule set is for Suturing"):
        infer_trial_context(load_manifest(mp), default_rules("Suturing"))
