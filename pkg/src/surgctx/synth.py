"""Scripted synthetic surgical scenes with analytic ground truth.

A :class:`Script` lists interaction events (a hand holding or touching the
needle or thread, the needle going into the tissue point or ring, the thread
forming a loop). :func:`generate` turns it into a :class:`SyntheticVideo` that
renders polygons, masks, grayscale frames and jaw-end annotations per frame,
together with the context timeline implied by the events. The timeline is
derived from the events alone, never from the rule engine.

Graspers travel from their rest pose to the interaction pose over
``approach`` frames before an event and back afterwards, so every motion is
continuous; contact starts exactly on the event's first frame.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import LineString
from shapely.geometry import Polygon as _ShapelyPolygon
from shapely.ops import unary_union

from .context import STATE_NAMES, TASK_CLASSES, Scene, Task
from .evaluation import Timeline
from .geometry import ObjectClass, Point, Polygon, PolygonSet
from .masks import rasterize

HANDS = ("left", "right")
KINDS = ("hold", "contact", "insert", "loop")

INTENSITY = {
    None: 0.10,
    ObjectClass.TISSUE_POINTS: 0.30,
    ObjectClass.RING: 0.45,
    ObjectClass.RIGHT_GRASPER: 0.84,
    ObjectClass.LEFT_GRASPER: 0.72,
    ObjectClass.THREAD: 0.60,
    ObjectClass.NEEDLE: 0.96,
}
# back to front
PAINT_ORDER = (ObjectClass.TISSUE_POINTS, ObjectClass.RING, ObjectClass.RIGHT_GRASPER,
               ObjectClass.LEFT_GRASPER, ObjectClass.THREAD, ObjectClass.NEEDLE)

CLOSED_ANGLE = math.radians(8.0)
OPEN_ANGLE = math.radians(70.0)
JAW_LENGTH = 22.0
JAW_WIDTH = 4.0
SHAFT_LENGTH = 50.0
SHAFT_WIDTH = 8.0
NEEDLE_RADIUS = 14.0
NEEDLE_THICKNESS = 6.0
THREAD_HALF_WIDTH = 2.0
TISSUE_RADIUS = 8.0
RING_RADIUS = 16.0
LOOP_RADIUS = 14.0
INSERT_DEPTH = 1.5
LIFT = 20.0
# grips reach past the gripped strand's centreline by this much
GRIP_DEPTH = 5.0


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    kind: str
    start: int
    end: int
    hand: str | None = None
    target: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScriptError(f"unknown event kind {self.kind!r}")
        if self.end <= self.start or self.start < 0:
            raise ScriptError(f"bad event interval [{self.start}, {self.end})")
        if self.kind in ("hold", "contact"):
            if self.hand not in HANDS or self.target not in ("needle", "thread"):
                raise ScriptError(f"{self.kind} events need a hand and a needle/thread target")

    def active(self, f: int) -> bool:
        return self.start <= f < self.end


@dataclass
class Script:
    task: Task
    duration: int
    events: list[Event] = field(default_factory=list)
    width: int = 320
    height: int = 240
    fps: float = 30.0
    approach: int = 4
    wobble: float = 0.0
    noise: float = 0.02

    def __post_init__(self):
        self.task = Task(self.task)
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        starts = [e.start for e in self.events]
        if starts != sorted(starts):
            raise ScriptError("events must be ordered by start frame")
        for e in self.events:
            if e.end > self.duration:
                raise ScriptError(f"event {e} runs past the script duration {self.duration}")
            if self.task is Task.KNOT_TYING and (e.target == "needle" or e.kind == "insert"):
                raise ScriptError("knot tying scripts have no needle")
            if self.task is not Task.KNOT_TYING and e.kind == "loop":
                raise ScriptError("loop events belong to knot tying scripts")
        for hand in HANDS:
            evs = self.hand_events(hand)
            for a, b in zip(evs, evs[1:]):
                if b.start - a.end < 2 * self.approach:
                    raise ScriptError(f"{hand} hand events {a} and {b} leave no time to move")
        inserts = [e for e in self.events if e.kind == "insert"]
        for a, b in zip(inserts, inserts[1:]):
            if b.start - a.end < 2 * self.approach:
                raise ScriptError("insert events too close together")

    def hand_events(self, hand: str) -> list[Event]:
        return [e for e in self.events if e.hand == hand]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        d["events"] = [{k: v for k, v in asdict(e).items() if v is not None} for e in self.events]
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "Script":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "Script":
        return cls.loads(Path(path).read_text())


# -- canned scripts ----------------------------------------------------------------------

def _cycles(duration: int, period: int, template) -> list[Event]:
    events = []
    for c in range(0, duration - period + 1, period):
        for kind, s, e, hand, target in template:
            events.append(Event(kind, c + s, c + e, hand, target))
    return sorted(events, key=lambda e: (e.start, e.end))


_NEEDLE_CYCLE = [
    ("hold", 10, 70, "right", "needle"),
    ("insert", 30, 70, None, None),
    ("contact", 80, 100, "left", "thread"),
    ("hold", 110, 160, "left", "needle"),
    ("hold", 120, 150, "right", "thread"),
    ("contact", 160, 170, "right", "needle"),
]

_KNOT_CYCLE = [
    ("hold", 10, 80, "left", "thread"),
    ("loop", 30, 80, None, None),
    ("hold", 50, 80, "right", "thread"),
    ("contact", 100, 130, "right", "thread"),
    ("contact", 140, 160, "left", "thread"),
]


def suturing_script(seconds: float = 60.0, fps: float = 30.0, **kw) -> Script:
    n = int(round(seconds * fps))
    return Script(Task.SUTURING, n, _cycles(n, 180, _NEEDLE_CYCLE), fps=fps, **{"wobble": 2.0, **kw})


def needle_passing_script(seconds: float = 60.0, fps: float = 30.0, **kw) -> Script:
    n = int(round(seconds * fps))
    return Script(Task.NEEDLE_PASSING, n, _cycles(n, 180, _NEEDLE_CYCLE), fps=fps, **{"wobble": 2.0, **kw})


def knot_tying_script(seconds: float = 60.0, fps: float = 30.0, **kw) -> Script:
    n = int(round(seconds * fps))
    return Script(Task.KNOT_TYING, n, _cycles(n, 180, _KNOT_CYCLE), fps=fps, **{"wobble": 2.0, **kw})


def script_for(task, **kw) -> Script:
    return {Task.SUTURING: suturing_script, Task.NEEDLE_PASSING: needle_passing_script,
            Task.KNOT_TYING: knot_tying_script}[Task(task)](**kw)


# -- shapes -----------------------------------------------------------------------------

def _unit(v) -> np.ndarray:
    v = np.asarray(v, float)
    return v / np.hypot(*v)


def _rot(v: np.ndarray, a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _bar(a: np.ndarray, b: np.ndarray, width: float) -> np.ndarray:
    n = _rot(_unit(b - a), math.pi / 2) * (width / 2)
    return np.array([a + n, b + n, b - n, a - n])


def _exterior(geom) -> np.ndarray:
    if geom.geom_type == "MultiPolygon":
        geom = max(geom.geoms, key=lambda g: g.area)
    return np.asarray(geom.exterior.coords)[:-1]


def _disc(c, r, n=24) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([c[0] + r * np.cos(t), c[1] + r * np.sin(t)])


@dataclass(frozen=True)
class GrasperPose:
    pivot: np.ndarray
    direction: np.ndarray
    angle: float

    def jaw_ends(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.pivot + JAW_LENGTH * _rot(self.direction, self.angle / 2),
                self.pivot + JAW_LENGTH * _rot(self.direction, -self.angle / 2))

    def outline(self) -> np.ndarray:
        j1, j2 = self.jaw_ends()
        shaft = _bar(self.pivot - SHAFT_LENGTH * self.direction, self.pivot, SHAFT_WIDTH)
        parts = [_ShapelyPolygon(shaft), _ShapelyPolygon(_bar(self.pivot, j1, JAW_WIDTH)),
                 _ShapelyPolygon(_bar(self.pivot, j2, JAW_WIDTH))]
        return _exterior(unary_union(parts))


def grasper_pose(anchor: np.ndarray, direction: np.ndarray, mode: str) -> GrasperPose:
    """Pose whose grip point sits on ``anchor``.

    Closed graspers put the midpoint of the jaw ends on the anchor; open ones
    put the first jaw end on it.
    """
    if mode == "contact":
        angle = OPEN_ANGLE
        pivot = anchor - JAW_LENGTH * _rot(direction, angle / 2)
    else:
        angle = CLOSED_ANGLE
        pivot = anchor - JAW_LENGTH * math.cos(angle / 2) * direction
    return GrasperPose(pivot, direction, angle)


def needle_outline(centre: np.ndarray) -> np.ndarray:
    t = np.linspace(0, np.pi, 17)
    ro, ri = NEEDLE_RADIUS + NEEDLE_THICKNESS / 2, NEEDLE_RADIUS - NEEDLE_THICKNESS / 2
    outer = np.column_stack([centre[0] + ro * np.cos(t), centre[1] - ro * np.sin(t)])
    inner = np.column_stack([centre[0] + ri * np.cos(t[::-1]), centre[1] - ri * np.sin(t[::-1])])
    return np.vstack([outer, inner])


def needle_point(centre: np.ndarray, degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    return centre + NEEDLE_RADIUS * np.array([math.cos(a), -math.sin(a)])


def _path_point(points: np.ndarray, frac: float) -> np.ndarray:
    line = LineString(points)
    p = line.interpolate(frac, normalized=True)
    return np.array([p.x, p.y])


def thread_outline(points: np.ndarray) -> np.ndarray:
    geom = LineString(points).buffer(THREAD_HALF_WIDTH, quad_segs=3)
    return _exterior(shapely.set_precision(geom, 0.0))


# -- the video ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    """Rest positions for one seed."""

    lg_home: np.ndarray
    rg_home: np.ndarray
    needle_rest: np.ndarray
    target: np.ndarray
    anchor: np.ndarray
    phase: float


_LG_DIR = _unit((1.0, 1.2))
_RG_DIR = _unit((-1.0, 1.2))


def _layout(script: Script, seed: int) -> Layout:
    rng = np.random.default_rng(seed)
    sx, sy = script.width / 320.0, script.height / 240.0

    def jit(x, y, r):
        return np.array([x * sx, y * sy]) + rng.uniform(-r, r, size=2)

    return Layout(
        lg_home=jit(70, 80, 4), rg_home=jit(250, 80, 4),
        needle_rest=jit(140, 100, 3), target=jit(200, 150, 3),
        anchor=jit(230, 225, 3), phase=float(rng.uniform(0, 2 * np.pi)),
    )


class TrajectoryError(ValueError):
    pass


class SyntheticVideo:
    """Deterministic per-frame renderer for a script and seed."""

    def __init__(self, script: Script, seed: int = 0):
        self.script = script
        self.seed = int(seed)
        self.layout = _layout(script, seed)
        self.classes = TASK_CLASSES[script.task]
        self._check_bounds()
        self.gt_context = self._gt_timeline()

    # time structure --------------------------------------------------------------

    @property
    def n_frames(self) -> int:
        return self.script.duration

    def __len__(self) -> int:
        return self.n_frames

    width = property(lambda self: self.script.width)
    height = property(lambda self: self.script.height)

    def _active(self, f: int, kind: str, hand: str | None = None, target: str | None = None):
        for e in self.script.events:
            if e.kind == kind and e.active(f) and (hand is None or e.hand == hand) \
                    and (target is None or e.target == target):
                return e
        return None

    def hand_action(self, f: int, hand: str) -> tuple[str, str] | None:
        for e in self.script.hand_events(hand):
            if e.active(f):
                return e.kind, e.target
        return None

    def _offset(self, f: int) -> np.ndarray:
        w = self.script.wobble
        if w == 0:
            return np.zeros(2)
        a = 2 * np.pi * f / 90.0 + self.layout.phase
        return np.array([w * math.sin(a), w * math.cos(0.7 * a)])

    # object placement ------------------------------------------------------------

    def _insert_centre(self) -> np.ndarray:
        radius = RING_RADIUS if self.script.task is Task.NEEDLE_PASSING else TISSUE_RADIUS
        edge = self.layout.target[0] - radius
        x = edge + INSERT_DEPTH - (NEEDLE_RADIUS + NEEDLE_THICKNESS / 2)
        return np.array([x, self.layout.target[1]])

    def _blend(self, f: int, events, rest, live) -> np.ndarray:
        """Rest position, moving to ``live(event, frame)`` around each event."""
        a = self.script.approach
        for e in events:
            if e.active(f):
                return live(e, f)
            if e.start - a <= f < e.start:
                t = (f - (e.start - a)) / a
                return (1 - t) * rest + t * live(e, e.start)
            if e.end <= f < e.end + a:
                t = (f - e.end + 1) / a
                return (1 - t) * live(e, e.end - 1) + t * rest
        return rest

    def _transit(self, f: int, events) -> float:
        a = self.script.approach
        for e in events:
            if e.start - a <= f < e.start:
                return (f - (e.start - a)) / a
            if e.end <= f < e.end + a:
                return (f - e.end + 1) / a
        return 0.0

    def needle_centre(self, f: int) -> np.ndarray:
        inserts = [e for e in self.script.events if e.kind == "insert"]
        centre = self._insert_centre()
        return self._blend(f, inserts, self.layout.needle_rest, lambda e, g: centre)

    def _thread_path(self, f: int) -> np.ndarray:
        L = self.layout
        if self.script.task is Task.KNOT_TYING:
            start = np.array([L.target[0] - 40, L.target[1] + 55])
            end = np.array([L.lg_home[0] - 5, start[1] - 5])
            base = [start, start + (end - start) * 0.3 + np.array([0, 4]),
                    start + (end - start) * 0.6 + np.array([0, -2]), end]
            if self._active(f, "loop") is None:
                return np.array(base)
            # a full turn rising off the middle of the strand
            mid = base[1] * 0.5 + base[2] * 0.5
            centre = mid + np.array([0.0, -(LOOP_RADIUS + 2)])
            t = np.linspace(np.pi / 2, 2.5 * np.pi, 25)
            circle = np.column_stack([centre[0] + LOOP_RADIUS * np.cos(t), centre[1] + LOOP_RADIUS * np.sin(t)])
            return np.vstack([base[:2], [mid], circle, [mid + np.array([-3.0, 0.0])], base[2:]])
        eye = needle_point(self.needle_centre(f), 180.0)
        return np.array([eye, eye + np.array([-12.0, 35.0]), 0.5 * (eye + L.anchor) + np.array([-15.0, 20.0]),
                         L.anchor])

    def _thread_anchor(self, f: int, hand: str, mode: str) -> np.ndarray:
        path = self._thread_path(f)
        if self.script.task is Task.KNOT_TYING:
            base = np.vstack([path[:2], path[-2:]]) if len(path) > 4 else path
            frac = {"left": 0.85, "right": 0.2}[hand] if mode == "hold" else {"left": 0.7, "right": 0.35}[hand]
            return _path_point(base, frac)
        frac = {"left": 0.2, "right": 0.8}[hand] if mode == "hold" else {"left": 0.2, "right": 0.75}[hand]
        return _path_point(path, frac)

    def grasper(self, f: int, hand: str) -> GrasperPose:
        direction = _LG_DIR if hand == "left" else _RG_DIR
        home = self.layout.lg_home if hand == "left" else self.layout.rg_home

        def grip(e, g):
            if e.target == "needle":
                p = needle_point(self.needle_centre(g), 135.0 if hand == "left" else 45.0)
            else:
                p = self._thread_anchor(g, hand, e.kind)
            return grasper_pose(p + GRIP_DEPTH * direction, direction, e.kind).pivot

        events = self.script.hand_events(hand)
        pivot = self._blend(f, events, grasper_pose(home, direction, "hold").pivot, grip)
        # lift clear of the scene while travelling
        pivot = pivot - LIFT * math.sin(math.pi * self._transit(f, events)) * direction
        e = next((e for e in events if e.active(f)), None)
        angle = OPEN_ANGLE if e is not None and e.kind == "contact" else CLOSED_ANGLE
        return GrasperPose(pivot, direction, angle)

    # per-frame outputs -------------------------------------------------------------

    @functools.lru_cache(maxsize=64)
    def _raw(self, f: int) -> dict:
        if not 0 <= f < self.n_frames:
            raise IndexError(f"frame {f} outside 0..{self.n_frames - 1}")
        off = self._offset(f)
        out = {}
        for hand, cls in (("left", ObjectClass.LEFT_GRASPER), ("right", ObjectClass.RIGHT_GRASPER)):
            pose = self.grasper(f, hand)
            out[cls] = ([pose.outline() + off], tuple(j + off for j in pose.jaw_ends()))
        if ObjectClass.NEEDLE in self.classes:
            out[ObjectClass.NEEDLE] = ([needle_outline(self.needle_centre(f)) + off], None)
        out[ObjectClass.THREAD] = ([thread_outline(self._thread_path(f)) + off], None)
        if ObjectClass.TISSUE_POINTS in self.classes:
            out[ObjectClass.TISSUE_POINTS] = ([_disc(self.layout.target, TISSUE_RADIUS) + off], None)
        if ObjectClass.RING in self.classes:
            out[ObjectClass.RING] = ([_disc(self.layout.target, RING_RADIUS, 32) + off], None)
        return out

    def polygons(self, f: int) -> dict[ObjectClass, PolygonSet]:
        return {cls: PolygonSet(cls, tuple(Polygon(r) for r in rings)) for cls, (rings, _) in self._raw(f).items()}

    def jaws(self, f: int) -> dict[ObjectClass, tuple[Point, Point]]:
        return {cls: tuple(Point(float(p[0]), float(p[1])) for p in ends)
                for cls, (_, ends) in self._raw(f).items() if ends is not None}

    def scene(self, f: int) -> Scene:
        return Scene(self.polygons(f), f, self.jaws(f))

    def masks(self, f: int) -> dict[ObjectClass, np.ndarray]:
        w, h = self.script.width, self.script.height
        return {cls: rasterize(ps, w, h) for cls, ps in self.polygons(f).items()}

    def image(self, f: int) -> np.ndarray:
        w, h = self.script.width, self.script.height
        img = np.full((h, w), INTENSITY[None])
        masks = self.masks(f)
        for cls in PAINT_ORDER:
            if cls in masks:
                img[masks[cls]] = INTENSITY[cls]
        if self.script.noise > 0:
            rng = np.random.default_rng([self.seed, f])
            img = img + rng.normal(0.0, self.script.noise, size=img.shape)
        return np.clip(img, 0.0, 1.0)

    def frames(self, start: int = 0, stop: int | None = None):
        for f in range(start, self.n_frames if stop is None else stop):
            yield self.image(f)

    # ground truth ------------------------------------------------------------------

    def gt_state(self, f: int) -> tuple[int, ...]:
        codes = {"needle": 2, "thread": 3}
        act = {hand: self.hand_action(f, hand) for hand in HANDS}

        def code(hand, kind):
            a = act[hand]
            return codes[a[1]] if a is not None and a[0] == kind else 0

        s = [code("left", "hold"), code("left", "contact"), code("right", "hold"), code("right", "contact")]
        if self.script.task is Task.KNOT_TYING:
            if self._active(f, "loop") is None:
                s5 = 0
            elif act["left"] == ("hold", "thread") and act["right"] == ("hold", "thread"):
                s5 = 2
            else:
                s5 = 1
        elif self._active(f, "insert") is not None:
            s5 = 2
        else:
            left_on_needle = act["left"] is not None and act["left"][1] == "needle"
            right_on_thread = act["right"] is not None and act["right"][1] == "thread"
            s5 = 0 if left_on_needle and right_on_thread else 1
        return (*s, s5)

    def _gt_timeline(self) -> Timeline:
        frames = np.arange(self.n_frames)
        states = np.array([self.gt_state(f) for f in frames], dtype=np.int64).reshape(-1, len(STATE_NAMES))
        return Timeline(frames, states, self.script.fps, self.script.fps)

    def event_frames(self) -> list[int]:
        """Frames where some scripted event starts or ends."""
        return sorted({e.start for e in self.script.events} | {e.end for e in self.script.events})

    def _check_bounds(self) -> None:
        w, h = self.script.width, self.script.height
        for f in range(self.n_frames):
            for cls, (rings, _) in self._raw(f).items():
                for r in rings:
                    if r.min() < 0 or r[:, 0].max() > w or r[:, 1].max() > h:
                        raise TrajectoryError(f"frame {f}: {cls.slug} leaves the {w}x{h} frame")


def generate(script: Script, seed: int = 0, dims: tuple[int, int] | None = None) -> SyntheticVideo:
    """Build the synthetic video for ``script``; deterministic in ``(script, seed)``.

    ``dims`` is an optional ``(width, height)`` overriding the script's frame size.
    Frames, masks, jaws and the ground-truth timeline are read from the returned
    object, rendered lazily per frame.
    """
    if dims is not None:
        script = replace(script, width=int(dims[0]), height=int(dims[1]))
    return SyntheticVideo(script, seed)
