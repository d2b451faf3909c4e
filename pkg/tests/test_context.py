import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import truth_tables as tt
from conftest import synthetic
from surgctx.context import (ContextState, FeatureVector, RuleError, RuleSet, Scene, Task, build_features,
                             estimate_jaw_ends, grasper_open, infer_context, infer_left_contact, infer_left_hold,
                             infer_needle_state, infer_right_contact, infer_right_hold, load_rules,
                             scene_from_masks)
from surgctx.geometry import (AbsentObjectError, ObjectClass, Point, Polygon, PolygonSet, polygons_from_ring,
                              set_distance, set_intersection_area, set_midpoint)
from surgctx.masks import rasterize
from surgctx.synth import JAW_WIDTH, GrasperPose

LG, RG, N, T, TS, R = (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER, ObjectClass.NEEDLE,
                       ObjectClass.THREAD, ObjectClass.TISSUE_POINTS, ObjectClass.RING)
SUT = load_rules(Task.SUTURING)


def box(cls, x, y, w=10, h=10):
    return PolygonSet(cls, (Polygon([(x, y), (x + w, y), (x + w, y + h), (x, y + h)]),))


def pose_set(cls, deg, pivot=(160.0, 120.0), direction=(0.6, 0.8)):
    pose = GrasperPose(np.array(pivot), np.array(direction), math.radians(deg))
    return pose, PolygonSet(cls, tuple(polygons_from_ring(pose.outline())))


# -- openness ------------------------------------------------------------------------

def test_annotated_jaws_open():
    g = box(LG, 0, 0)
    assert grasper_open(g, 18, (Point(0, 0), Point(25, 0)))


def test_annotated_jaws_closed():
    g = box(LG, 0, 0)
    assert not grasper_open(g, 18, (Point(0, 0), Point(10, 0)))


def test_empty_grasper_raises():
    with pytest.raises(AbsentObjectError):
        grasper_open(PolygonSet(LG))


@pytest.mark.parametrize("direction", [(0.6, 0.8), (-0.6, 0.8), (1.0, 0.0), (0.0, -1.0)])
def test_opening_sweep_is_monotone(direction):
    angles = np.arange(0, 81, 2)
    gaps, verdicts, annotated = [], [], []
    for deg in angles:
        pose, g = pose_set(LG, deg, direction=direction)
        a, b = estimate_jaw_ends(g)
        gaps.append(math.dist(a, b))
        verdicts.append(grasper_open(g, 18.0))
        annotated.append(math.dist(*pose.jaw_ends()))
    assert all(x <= y + 1e-9 for x, y in zip(gaps, gaps[1:]))
    flip = verdicts.index(True)
    assert not any(verdicts[:flip]) and all(verdicts[flip:])
    # the estimate measures the inner gap, so the flip lags the centreline by at most a jaw width
    assert 18.0 <= annotated[flip] <= 18.0 + JAW_WIDTH + 2 * (annotated[1] - annotated[0])


def test_closed_pose_has_coincident_ends():
    _, g = pose_set(LG, 0)
    a, b = estimate_jaw_ends(g)
    assert a == b


# -- features ---------------------------------------------------------------------

def test_graspers_only_scene_features():
    scene = Scene({LG: box(LG, 0, 0), RG: box(RG, 50, 0)})
    fv = build_features(scene, SUT)
    assert fv.D(LG, N) == math.inf and fv.Inter(LG, T) == 0.0
    assert fv.D(RG, T) == math.inf and fv.Inter(TS, N) == 0.0


def test_overlap_gives_positive_intersection():
    scene = Scene({LG: box(LG, 0, 0), T: box(T, 5, 5)})
    assert build_features(scene, SUT).Inter(LG, T) > 0


def test_synthetic_features_match_direct_geometry():
    vid = synthetic("suturing")
    for f in (0, 40, 95, 130, 165):
        scene = vid.scene(f)
        fv = build_features(scene, SUT)
        for (a, b), d in fv.distance.items():
            want = set_distance(scene.get(a), scene.get(b)) if scene.present(a) and scene.present(b) else math.inf
            assert d == want
        for (a, b), v in fv.intersection.items():
            assert v == set_intersection_area(scene.get(a), scene.get(b))
        for c, m in fv.midpoint.items():
            assert m == set_midpoint(scene.get(c))
        assert all(d >= 0 for d in fv.distance.values())
        assert all(v >= 0 for v in fv.intersection.values())


# -- rule examples ----------------------------------------------------------------------

def fv_left(d=5.0, inter=0.0, is_open=False, **kw):
    return FeatureVector.from_values(distance={("LG", "N"): d}, intersection={("LG", "T"): inter},
                                     openness={"LG": is_open}, **kw)


def fv_right(d=5.0, inter=0.0, is_open=False):
    return FeatureVector.from_values(distance={("RG", "N"): d}, intersection={("RG", "T"): inter},
                                     openness={"RG": is_open})


def test_left_hold_examples():
    assert infer_left_hold(fv_left(d=0.5)) == 2
    assert infer_left_hold(fv_left(d=0.5, inter=4)) == 2
    assert infer_left_hold(fv_left(d=0.5, inter=4, is_open=True)) == 0


def test_left_contact_examples():
    assert infer_left_contact(fv_left(d=0.5, is_open=True)) == 2
    assert infer_left_contact(fv_left(d=50, inter=2, is_open=True)) == 3
    assert infer_left_contact(fv_left(d=0.5, inter=2)) == 0


def test_right_examples():
    assert infer_right_hold(fv_right(d=0.5)) == 2
    assert infer_right_contact(fv_right(inter=3, is_open=True)) == 3
    empty = FeatureVector.from_values(present=set())
    assert infer_right_hold(empty) == 0 and infer_right_contact(empty) == 0


def test_needle_state_examples():
    fv_in = FeatureVector.from_values(intersection={("Ts", "N"): 5}, midpoint={"N": (10, 0), "Ts": (20, 0)},
                                      distance={("RG", "T"): 0.0, ("LG", "N"): 0.0})
    assert infer_needle_state(fv_in) == 2
    fv_far = FeatureVector.from_values(intersection={("Ts", "N"): 0}, midpoint={"N": (10, 0), "Ts": (20, 0)},
                                       distance={("RG", "T"): 40.0, ("LG", "N"): 40.0})
    assert infer_needle_state(fv_far) == 1


def test_absent_needle_gives_zero():
    fv = FeatureVector.from_values(distance={("RG", "T"): 40.0}, midpoint={"Ts": (20, 0)},
                                   present={"RG", "T", "Ts", "LG"})
    assert infer_needle_state(fv) == 0


# -- truth tables ---------------------------------------------------------------------

@pytest.mark.parametrize("task", list(Task))
@pytest.mark.parametrize("state,table", [
    ("S1", lambda: tt.hold_table("left")), ("S2", lambda: tt.contact_table("left")),
    ("S3", lambda: tt.hold_table("right")), ("S4", lambda: tt.contact_table("right")),
])
def test_hand_truth_tables(task, state, table):
    rules = load_rules(task)
    rows = table()
    assert len(rows) == 32
    for atoms, fv, code in rows:
        assert rules.evaluate(state, fv) == code, atoms


@pytest.mark.parametrize("task,target", [(Task.SUTURING, "Ts"), (Task.NEEDLE_PASSING, "R")])
def test_needle_truth_table(task, target):
    rules = load_rules(task)
    rows = tt.needle_table(target)
    assert len(rows) == 16
    for atoms, fv, code in rows:
        assert rules.evaluate("S5", fv) == code, atoms


def test_knot_truth_table():
    rules = load_rules(Task.KNOT_TYING)
    rows = tt.knot_table(rules.thresholds["loop"])
    assert len(rows) == 32
    for atoms, fv, code in rows:
        assert rules.evaluate("S5", fv) == code, atoms


# -- scenes ------------------------------------------------------------------------------

def test_empty_scene_all_zero():
    for task in Task:
        assert infer_context(Scene(), load_rules(task)) == ContextState(0, 0, 0, 0, 0)


def test_left_grasper_holding_needle():
    vid = synthetic("suturing")
    f = next(f for f in range(vid.n_frames) if vid.hand_action(f, "left") == ("hold", "needle"))
    assert infer_context(vid.scene(f + 5), SUT).s1_left_hold == 2


def test_synthetic_interior_frames_match():
    vid = synthetic("suturing", seconds=12)
    events = vid.event_frames()
    for f in range(0, vid.n_frames, 3):
        if min(abs(f - e) for e in events) <= 1:
            continue
        assert tuple(infer_context(vid.scene(f), SUT)) == vid.gt_state(f), f


def test_deterministic():
    scene = synthetic("suturing").scene(100)
    assert infer_context(scene, SUT) == infer_context(scene, SUT)


@settings(max_examples=25)
@given(st.integers(0, 599), st.floats(-60, 60), st.floats(-60, 60))
def test_translation_invariance(f, dx, dy):
    scene = synthetic("suturing", seconds=20).scene(f)
    assert infer_context(scene.translate(dx, dy), SUT) == infer_context(scene, SUT)


@settings(max_examples=25)
@given(st.integers(0, 599), st.floats(0.0, 20.0), st.floats(0.0, 20.0))
def test_raising_hold_threshold_is_monotone(f, lo, extra):
    scene = synthetic("suturing", seconds=20).scene(f)
    a = infer_context(scene, SUT.with_thresholds(hold=lo))
    b = infer_context(scene, SUT.with_thresholds(hold=lo + extra))
    for before, after in ((a.s1_left_hold, b.s1_left_hold), (a.s3_right_hold, b.s3_right_hold)):
        assert before != 2 or after == 2


def test_scene_from_masks_matches_polygons():
    vid = synthetic("suturing")
    f = 50
    scene = scene_from_masks(vid.masks(f), f, SUT, vid.jaws(f))
    assert tuple(infer_context(scene, SUT)) == vid.gt_state(f)


def cut_grasper(deg):
    pose, g = pose_set(LG, deg, direction=(1.0, 0.0))
    m = rasterize(g, 320, 240)
    tip = pose.jaw_ends()[0]
    m[:, int(tip[0]) - 12:int(tip[0]) - 9] = False   # a thin stripe across both jaws
    return m


@pytest.mark.parametrize("deg,is_open", [(0, False), (75, True)])
def test_cut_grasper_mask_keeps_openness(deg, is_open):
    scene = scene_from_masks({LG: cut_grasper(deg)}, 0, SUT)
    assert len(scene.get(LG)) > 1
    assert grasper_open(scene.get(LG), 18.0, scene.jaws[LG]) is is_open


def test_annotated_jaws_win_over_estimate():
    ends = (Point(0, 0), Point(30, 0))
    scene = scene_from_masks({LG: cut_grasper(0)}, 0, SUT, {LG: ends})
    assert scene.jaws[LG] == ends


# -- rule sets -------------------------------------------------------------------------

@pytest.mark.parametrize("task", list(Task))
def test_rules_round_trip(task, tmp_path):
    rules = load_rules(task)
    again = RuleSet.loads(rules.dumps())
    assert again.to_dict() == rules.to_dict()
    path = tmp_path / "r.json"
    path.write_text(rules.dumps())
    assert load_rules(path).to_dict() == rules.to_dict()


def test_threshold_override():
    assert SUT.with_thresholds(hold=3.0).thresholds["hold"] == 3.0
    assert SUT.thresholds["hold"] == 1.0


@pytest.mark.parametrize("bad", [
    {"task": "suturing", "states": {"S1": [{"code": 0}]}},
    {"task": "suturing", "states": {s: [{"when": "D(LG, N) <", "code": 2}, {"code": 0}]
                                    for s in ("S1", "S2", "S3", "S4", "S5")}},
    {"task": "suturing", "states": {s: [{"when": "D(LG, N) < 1", "code": 2}] for s in ("S1", "S2", "S3", "S4", "S5")}},
    {"task": "suturing", "states": {s: [{"when": "D(LG, N) < nope", "code": 2}, {"code": 0}]
                                    for s in ("S1", "S2", "S3", "S4", "S5")}},
    {"task": "suturing", "states": {s: [{"when": "D(LG, Scalpel) < 1", "code": 2}, {"code": 0}]
                                    for s in ("S1", "S2", "S3", "S4", "S5")}},
    {"task": "suturing", "states": {s: [{"when": "__import__('os')", "code": 2}, {"code": 0}]
                                    for s in ("S1", "S2", "S3", "S4", "S5")}},
])
def test_bad_rule_sets_rejected(bad):
    with pytest.raises((RuleError, ValueError)):
        RuleSet.from_dict(bad)


def test_unknown_task():
    with pytest.raises((ValueError, OSError)):
        load_rules("juggling")
