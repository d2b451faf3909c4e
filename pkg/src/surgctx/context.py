"""Rule-based surgical context inference from per-frame polygon sets.

Rules are ordered ``condition -> code`` cases per state variable, written as
small boolean expressions over named geometric features::

    D(LG, N) < hold and not open(LG)
    Inter(Ts, N) > 0 and N.x < Ts.x

Available features: ``D(A, B)`` (average part-to-part minimum distance),
``Inter(A, B)`` (intersection area), ``open(G)`` (grasper openness),
``Loop(A)`` (largest inscribed radius, used to spot thread loops) and the
vertex-mean midpoint coordinates ``A.x`` / ``A.y``. Bare names refer to the
rule set's thresholds. Any comparison touching an absent object is unknown,
and an unknown condition never fires.
"""

from __future__ import annotations

import ast
import enum
import functools
import json
import math
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull

from .geometry import (
    AbsentObjectError,
    ObjectClass,
    Point,
    PolygonSet,
    inscribed_radius,
    set_distance,
    set_intersection_area,
    set_midpoint,
)
from .masks import mask_to_polygons

STATE_NAMES = ("S1", "S2", "S3", "S4", "S5")

DEFAULT_THRESHOLDS = {
    "hold": 1.0,
    "far": 1.0,
    "open": 18.0,
    "min_area": 15.0,
    "min_component": 15.0,
    "rdp_epsilon": 1.0,
    "loop": 5.0,
    "jaw_close": 5.0,
}


class Task(str, enum.Enum):
    SUTURING = "suturing"
    NEEDLE_PASSING = "needle_passing"
    KNOT_TYING = "knot_tying"


TASK_CLASSES = {
    Task.SUTURING: (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER, ObjectClass.NEEDLE,
                    ObjectClass.THREAD, ObjectClass.TISSUE_POINTS),
    Task.NEEDLE_PASSING: (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER, ObjectClass.NEEDLE,
                          ObjectClass.THREAD, ObjectClass.RING),
    Task.KNOT_TYING: (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER, ObjectClass.THREAD),
}


class ContextState(NamedTuple):
    s1_left_hold: int = 0
    s2_left_contact: int = 0
    s3_right_hold: int = 0
    s4_right_contact: int = 0
    s5_task_state: int = 0


JawEnds = tuple[Point, Point]


@dataclass
class Scene:
    """Polygon sets of one frame; classes not listed are absent."""

    objects: dict[ObjectClass, PolygonSet] = field(default_factory=dict)
    frame_index: int = 0
    jaws: dict[ObjectClass, JawEnds] = field(default_factory=dict)

    def __post_init__(self):
        self.objects = {ObjectClass.parse(k): v for k, v in self.objects.items()}
        self.jaws = {ObjectClass.parse(k): v for k, v in self.jaws.items()}

    def get(self, cls) -> PolygonSet:
        cls = ObjectClass.parse(cls)
        return self.objects.get(cls) or PolygonSet(cls)

    def present(self, cls) -> bool:
        return not self.get(cls).empty

    def translate(self, dx: float, dy: float) -> "Scene":
        return Scene(
            {k: v.translate(dx, dy) for k, v in self.objects.items()},
            self.frame_index,
            {k: (Point(a.x + dx, a.y + dy), Point(b.x + dx, b.y + dy)) for k, (a, b) in self.jaws.items()},
        )


# -- grasper openness -------------------------------------------------------------

_POCKET_RATIO = 0.3


def estimate_jaw_ends(g: PolygonSet) -> JawEnds:
    """Guess the two jaw tips of a grasper outline.

    Open jaws leave a V-shaped notch between them. The notch is the deepest
    pocket between the outline and its convex hull, and the hull edge bridging
    it joins the jaw tips (their inner corners). A pocket only counts as a
    notch when its depth is at least ``_POCKET_RATIO`` times its mouth width;
    otherwise the jaws are taken as closed and both ends coincide at the
    vertex farthest from the vertex mean.
    """
    if g.empty:
        raise AbsentObjectError("grasper has no parts")
    best = None
    for part in g.parts:
        v = part.vertices
        n = len(v)
        hull = sorted(int(i) for i in ConvexHull(v).vertices)
        for a, b in zip(hull, hull[1:] + [hull[0] + n]):
            if b - a < 2:
                continue
            p, q = v[a % n], v[b % n]
            ex, ey = q - p
            mouth = math.hypot(ex, ey)
            inner = v[np.arange(a + 1, b) % n] - p
            depth = float(np.abs(ex * inner[:, 1] - ey * inner[:, 0]).max()) / mouth
            if depth >= _POCKET_RATIO * mouth and (best is None or depth > best[0]):
                best = (depth, p, q)
    if best is None:
        v = g.vertices()
        tip = v[int(np.argmax(np.hypot(*(v - v.mean(axis=0)).T)))]
        return Point(float(tip[0]), float(tip[1])), Point(float(tip[0]), float(tip[1]))
    _, p, q = best
    return Point(float(p[0]), float(p[1])), Point(float(q[0]), float(q[1]))


def grasper_open(g: PolygonSet, open_threshold: float = 18.0, jaw_ends: JawEnds | None = None) -> bool:
    """True when the jaw-end separation exceeds ``open_threshold`` pixels."""
    if g.empty:
        raise AbsentObjectError(f"{g.class_id.abbrev} has no parts")
    a, b = jaw_ends if jaw_ends is not None else estimate_jaw_ends(g)
    return math.hypot(a[0] - b[0], a[1] - b[1]) > open_threshold


# -- features ---------------------------------------------------------------------

def _pair(a, b) -> tuple[ObjectClass, ObjectClass]:
    return ObjectClass.parse(a), ObjectClass.parse(b)


@dataclass
class FeatureVector:
    """Geometric features of one frame, keyed by object class.

    Absent objects carry distance ``inf`` and intersection ``0``; the rule
    evaluator checks ``present`` before trusting any value.
    """

    present: frozenset = frozenset()
    distance: dict = field(default_factory=dict)
    intersection: dict = field(default_factory=dict)
    midpoint: dict = field(default_factory=dict)
    openness: dict = field(default_factory=dict)
    loop: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, distance=None, intersection=None, midpoint=None, openness=None,
                    loop=None, present=None) -> "FeatureVector":
        """Build a vector by hand, e.g. ``distance={("LG", "N"): 0.5}``."""
        distance = {_pair(*k): float(v) for k, v in (distance or {}).items()}
        intersection = {_pair(*k): float(v) for k, v in (intersection or {}).items()}
        midpoint = {ObjectClass.parse(k): Point(*v) for k, v in (midpoint or {}).items()}
        openness = {ObjectClass.parse(k): bool(v) for k, v in (openness or {}).items()}
        loop = {ObjectClass.parse(k): float(v) for k, v in (loop or {}).items()}
        if present is None:
            seen = set(midpoint) | set(openness) | set(loop)
            for a, b in list(distance) + list(intersection):
                seen.update((a, b))
            present = seen
        return cls(frozenset(ObjectClass.parse(p) for p in present), distance, intersection,
                   midpoint, openness, loop)

    @staticmethod
    def _lookup(table, name, a, b) -> float:
        a, b = _pair(a, b)
        for key in ((a, b), (b, a)):
            if key in table:
                return table[key]
        raise KeyError(f"{name}({a.abbrev}, {b.abbrev}) was not computed")

    def D(self, a, b) -> float:
        return self._lookup(self.distance, "D", a, b)

    def Inter(self, a, b) -> float:
        return self._lookup(self.intersection, "Inter", a, b)


# -- rule expressions -----------------------------------------------------------------

_CMP = {
    ast.Lt: operator.lt, ast.LtE: operator.le, ast.Gt: operator.gt,
    ast.GtE: operator.ge, ast.Eq: operator.eq, ast.NotEq: operator.ne,
}
_FUNCS = {"D": 2, "Inter": 2, "open": 1, "Loop": 1}


class RuleError(ValueError):
    pass


def _and(values):
    if any(v is False for v in values):
        return False
    if any(v is None for v in values):
        return None
    return True


def _or(values):
    if any(v is True for v in values):
        return True
    if any(v is None for v in values):
        return None
    return False


class Condition:
    """A compiled rule condition; call it with features and thresholds."""

    def __init__(self, text: str):
        self.text = text.strip()
        try:
            self._tree = ast.parse(self.text, mode="eval").body
        except SyntaxError as exc:
            raise RuleError(f"cannot parse condition {text!r}: {exc.msg}") from None
        self.needs: set[tuple] = set()
        self.names: set[str] = set()
        self._check(self._tree)

    def _obj(self, node) -> ObjectClass:
        if not isinstance(node, ast.Name):
            raise RuleError(f"{self.text!r}: expected an object name")
        try:
            return ObjectClass.parse(node.id)
        except ValueError:
            raise RuleError(f"{self.text!r}: unknown object {node.id!r}") from None

    def _check(self, node) -> None:
        if isinstance(node, ast.BoolOp):
            for v in node.values:
                self._check(v)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            self._check(node.operand)
        elif isinstance(node, ast.Compare):
            if not all(type(op) in _CMP for op in node.ops):
                raise RuleError(f"{self.text!r}: unsupported comparison")
            for v in [node.left, *node.comparators]:
                self._check(v)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise RuleError(f"{self.text!r}: unknown feature call")
            if len(node.args) != _FUNCS[node.func.id]:
                raise RuleError(f"{self.text!r}: {node.func.id} takes {_FUNCS[node.func.id]} objects")
            self.needs.add((node.func.id, *(self._obj(a) for a in node.args)))
        elif isinstance(node, ast.Attribute):
            if node.attr not in ("x", "y"):
                raise RuleError(f"{self.text!r}: only .x and .y are available")
            self.needs.add(("mid", self._obj(node.value)))
        elif isinstance(node, ast.Name):
            self.names.add(node.id)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            pass
        else:
            raise RuleError(f"{self.text!r}: unsupported syntax {type(node).__name__}")

    @property
    def objects(self) -> set[ObjectClass]:
        return {o for need in self.needs for o in need[1:]}

    def __call__(self, fv: FeatureVector, thresholds: Mapping[str, float]) -> bool:
        return self._eval(self._tree, fv, thresholds) is True

    def _eval(self, node, fv, th):
        if isinstance(node, ast.BoolOp):
            vals = [self._eval(v, fv, th) for v in node.values]
            return _and(vals) if isinstance(node.op, ast.And) else _or(vals)
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, fv, th)
            return None if v is None else not v
        if isinstance(node, ast.Compare):
            vals = [self._eval(v, fv, th) for v in [node.left, *node.comparators]]
            if any(v is None for v in vals):
                return None
            return bool(all(_CMP[type(op)](a, b) for op, a, b in zip(node.ops, vals, vals[1:])))
        if isinstance(node, ast.Call):
            objs = [self._obj(a) for a in node.args]
            if not all(o in fv.present for o in objs):
                return None
            name = node.func.id
            if name == "D":
                return fv.D(*objs)
            if name == "Inter":
                return fv.Inter(*objs)
            if name == "open":
                return bool(fv.openness[objs[0]])
            return fv.loop[objs[0]]
        if isinstance(node, ast.Attribute):
            obj = self._obj(node.value)
            if obj not in fv.present:
                return None
            return getattr(fv.midpoint[obj], node.attr)
        if isinstance(node, ast.Name):
            try:
                return th[node.id]
            except KeyError:
                raise RuleError(f"{self.text!r}: unknown threshold {node.id!r}") from None
        return node.value

    def __repr__(self) -> str:
        return f"Condition({self.text!r})"


class Case(NamedTuple):
    condition: Condition | None
    code: int


@dataclass
class RuleSet:
    task: Task
    thresholds: dict[str, float]
    states: dict[str, list[Case]]

    def __post_init__(self):
        self.task = Task(self.task)
        self.thresholds = {**DEFAULT_THRESHOLDS, **{k: float(v) for k, v in self.thresholds.items()}}
        missing = [s for s in STATE_NAMES if s not in self.states]
        if missing:
            raise RuleError(f"rule set lacks cases for {missing}")
        for name in STATE_NAMES:
            cases = self.states[name]
            if not cases or cases[-1].condition is not None:
                raise RuleError(f"{name}: the last case must be an unconditional default")
            if any(c.condition is None for c in cases[:-1]):
                raise RuleError(f"{name}: only the last case may be unconditional")
            for c in cases[:-1]:
                unknown = c.condition.names - set(self.thresholds)
                if unknown:
                    raise RuleError(f"{name}: unknown thresholds {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "RuleSet":
        states = {}
        for name, cases in data["states"].items():
            states[name] = [Case(Condition(c["when"]) if c.get("when") else None, int(c["code"]))
                            for c in cases]
        return cls(data["task"], dict(data.get("thresholds", {})), states)

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "thresholds": dict(self.thresholds),
            "states": {
                name: [({"when": c.condition.text} if c.condition else {}) | {"code": c.code}
                       for c in self.states[name]]
                for name in STATE_NAMES
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "RuleSet":
        return cls.from_dict(json.loads(text))

    def with_thresholds(self, **overrides) -> "RuleSet":
        data = self.to_dict()
        data["thresholds"].update({k: v for k, v in overrides.items() if v is not None})
        return RuleSet.from_dict(data)

    def needs(self) -> set[tuple]:
        out = set()
        for cases in self.states.values():
            for c in cases:
                if c.condition is not None:
                    out |= c.condition.needs
        return out

    def evaluate(self, state: str, fv: FeatureVector) -> int:
        for case in self.states[state]:
            if case.condition is None or case.condition(fv, self.thresholds):
                return case.code
        raise AssertionError("unreachable: last case is unconditional")


@functools.lru_cache(maxsize=None)
def _bundled_text(task: Task) -> str:
    return resources.files("surgctx").joinpath("rules").joinpath(f"{task.value}.json").read_text()


def load_rules(task_or_path: "Task | str | Path" = Task.SUTURING) -> RuleSet:
    """Load a bundled task rule set by name, or a JSON rule file by path."""
    try:
        task = Task(task_or_path)
    except ValueError:
        return RuleSet.loads(Path(task_or_path).read_text())
    return RuleSet.loads(_bundled_text(task))


# -- evaluation -------------------------------------------------------------------

def build_features(scene: Scene, rules: RuleSet) -> FeatureVector:
    """Compute every feature the rule set refers to."""
    present = frozenset(c for c in ObjectClass if scene.present(c))
    fv = FeatureVector(present=present)
    for need in sorted(rules.needs(), key=lambda n: (n[0], *[int(o) for o in n[1:]])):
        kind, objs = need[0], need[1:]
        ok = all(o in present for o in objs)
        if kind == "D":
            fv.distance[objs] = set_distance(scene.get(objs[0]), scene.get(objs[1])) if ok else math.inf
        elif kind == "Inter":
            fv.intersection[objs] = set_intersection_area(scene.get(objs[0]), scene.get(objs[1])) if ok else 0.0
        elif kind == "open":
            g = objs[0]
            fv.openness[g] = ok and grasper_open(scene.get(g), rules.thresholds["open"], scene.jaws.get(g))
        elif kind == "Loop":
            fv.loop[objs[0]] = inscribed_radius(scene.get(objs[0])) if ok else 0.0
        elif kind == "mid" and ok:
            fv.midpoint[objs[0]] = set_midpoint(scene.get(objs[0]))
    return fv


def infer_states(fv: FeatureVector, rules: RuleSet) -> ContextState:
    return ContextState(*(rules.evaluate(name, fv) for name in STATE_NAMES))


def infer_context(scene: Scene, rules: RuleSet) -> ContextState:
    return infer_states(build_features(scene, rules), rules)


_SUTURING: RuleSet | None = None


def _default(rules):
    global _SUTURING
    if rules is not None:
        return rules
    if _SUTURING is None:
        _SUTURING = load_rules(Task.SUTURING)
    return _SUTURING


def infer_left_hold(fv: FeatureVector, rules: RuleSet | None = None) -> int:
    return _default(rules).evaluate("S1", fv)


def infer_left_contact(fv: FeatureVector, rules: RuleSet | None = None) -> int:
    return _default(rules).evaluate("S2", fv)


def infer_right_hold(fv: FeatureVector, rules: RuleSet | None = None) -> int:
    return _default(rules).evaluate("S3", fv)


def infer_right_contact(fv: FeatureVector, rules: RuleSet | None = None) -> int:
    return _default(rules).evaluate("S4", fv)


def infer_needle_state(fv: FeatureVector, rules: RuleSet | None = None) -> int:
    return _default(rules).evaluate("S5", fv)


_GRASPERS = (ObjectClass.LEFT_GRASPER, ObjectClass.RIGHT_GRASPER)


def _closed(m: np.ndarray, radius: float) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    pad = np.pad(np.asarray(m, bool), r + 1)
    return ndimage.binary_closing(pad, x * x + y * y <= radius * radius)[r + 1:-r - 1, r + 1:-r - 1]


def scene_from_masks(masks: Mapping, frame_index: int = 0, rules: RuleSet | None = None,
                     jaws: Mapping | None = None) -> Scene:
    """Reduce per-class binary masks to a Scene using the rule set's clean-up settings.

    Graspers without annotated jaw ends get estimated ends taken from the mask
    after a closing of radius ``jaw_close``. Objects drawn across a grasper
    (thread over a jaw, say) can cut a segmented mask into pieces, and a cut
    grasper has no notch to find. The closing only feeds the jaw estimate; the
    grasper polygons themselves are left as segmented.
    """
    th = _default(rules).thresholds
    jaws = {ObjectClass.parse(k): v for k, v in (jaws or {}).items()}
    objects = {}
    for cls, m in masks.items():
        cls = ObjectClass.parse(cls)
        args = (int(th["min_component"]), th["min_area"], th["rdp_epsilon"])
        objects[cls] = mask_to_polygons(m, cls, *args)
        if cls in _GRASPERS and cls not in jaws and objects[cls] and th["jaw_close"] > 0:
            shape = mask_to_polygons(_closed(m, th["jaw_close"]), cls, *args)
            jaws[cls] = estimate_jaw_ends(shape if shape else objects[cls])
    return Scene(objects, frame_index, jaws)
