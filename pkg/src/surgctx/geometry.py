"""Planar polygon primitives used by the context rules.

Coordinates are image pixels: ``x`` grows to the right, ``y`` grows downwards,
origin at the top-left corner of the frame.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import shapely
from shapely.geometry import Polygon as _ShapelyPolygon
from shapely.ops import unary_union


class DegenerateInputError(ValueError):
    """Raised when a ring has too few points to describe an area."""


class AbsentObjectError(ValueError):
    """Raised when an operation needs an object that has no polygon parts."""


class ObjectClass(enum.IntEnum):
    """Scene object classes; values double as label indices in a LabelFrame."""

    LEFT_GRASPER = 1
    RIGHT_GRASPER = 2
    NEEDLE = 3
    THREAD = 4
    RING = 5
    TISSUE_POINTS = 6

    @property
    def abbrev(self) -> str:
        return _ABBREV[self]

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: "str | ObjectClass") -> "ObjectClass":
        """Accept an abbreviation (``LG``), a slug (``left_grasper``), a name or a label value."""
        if isinstance(text, ObjectClass):
            return text
        if isinstance(text, (int, np.integer)) and not isinstance(text, bool):
            try:
                return cls(int(text))
            except ValueError:
                raise ValueError(f"unknown object class {text!r}") from None
        key = str(text).strip()
        for member in cls:
            if key in (member.abbrev, member.slug, member.name):
                return member
        raise ValueError(f"unknown object class {text!r}")


_ABBREV = {
    ObjectClass.LEFT_GRASPER: "LG",
    ObjectClass.RIGHT_GRASPER: "RG",
    ObjectClass.NEEDLE: "N",
    ObjectClass.THREAD: "T",
    ObjectClass.RING: "R",
    ObjectClass.TISSUE_POINTS: "Ts",
}


class Point(NamedTuple):
    x: float
    y: float


def _as_ring(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DegenerateInputError(f"expected an (n, 2) array of points, got shape {arr.shape}")
    return arr


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class Polygon:
    """Closed simple ring, stored counter-clockwise without the closing vertex.

    Rings that self-intersect or touch themselves raise :class:`DegenerateInputError`;
    :func:`polygons_from_ring` repairs such rings instead.
    """

    __slots__ = ("_vertices", "_shape")

    def __init__(self, vertices):
        ring = _as_ring(vertices)
        if not np.all(np.isfinite(ring)):
            raise ValueError("polygon vertices must be finite")
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        keep = np.any(ring != np.roll(ring, 1, axis=0), axis=1)
        if len(ring) > 1:
            ring = ring[keep]
        if len(ring) < 3:
            raise DegenerateInputError("a polygon needs at least 3 distinct vertices")
        if _signed_area(ring) < 0:
            ring = ring[::-1]
        shape = _ShapelyPolygon(ring)
        if not shape.is_valid:
            raise DegenerateInputError(f"polygon ring is not simple: {shapely.is_valid_reason(shape)}")
        ring.setflags(write=False)
        self._vertices = ring
        self._shape = shape

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def shape(self) -> _ShapelyPolygon:
        return self._shape

    @property
    def area(self) -> float:
        return polygon_area(self)

    def translate(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self._vertices + np.array([dx, dy]))

    def __len__(self) -> int:
        return len(self._vertices)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polygon) and np.array_equal(self._vertices, other._vertices)

    def __hash__(self) -> int:
        return hash(self._vertices.tobytes())

    def __repr__(self) -> str:
        return f"Polygon({len(self)} vertices, area={self.area:.2f})"


@dataclass(frozen=True)
class PolygonSet:
    """All polygon parts of one object class in one frame."""

    class_id: ObjectClass
    parts: tuple[Polygon, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "class_id", ObjectClass.parse(self.class_id))
        parts = tuple(p if isinstance(p, Polygon) else Polygon(p) for p in self.parts)
        for p in parts:
            if polygon_area(p) <= 0:
                raise DegenerateInputError("polygon parts must have positive area")
        object.__setattr__(self, "parts", parts)

    @property
    def empty(self) -> bool:
        return not self.parts

    def __len__(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    @property
    def area(self) -> float:
        """Area of the union of the parts."""
        if self.empty:
            return 0.0
        return float(unary_union([p.shape for p in self.parts]).area)

    def union(self):
        return unary_union([p.shape for p in self.parts])

    def translate(self, dx: float, dy: float) -> "PolygonSet":
        return PolygonSet(self.class_id, tuple(p.translate(dx, dy) for p in self.parts))

    def vertices(self) -> np.ndarray:
        if self.empty:
            return np.empty((0, 2))
        return np.concatenate([p.vertices for p in self.parts])


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom == 0.0:
        return np.hypot(*(points - a).T)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(points - proj).T)


def _rdp_chain(chain: np.ndarray, epsilon: float) -> list[int]:
    """Indices kept by Ramer-Douglas-Peucker on an open chain (endpoints always kept)."""
    keep = [0, len(chain) - 1]
    stack = [(0, len(chain) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        inner = chain[lo + 1:hi]
        d = _point_segment_distance(inner, chain[lo], chain[hi])
        k = int(np.argmax(d))
        if d[k] >= epsilon:
            mid = lo + 1 + k
            keep.append(mid)
            stack.append((lo, mid))
            stack.append((mid, hi))
    return sorted(set(keep))


def rdp_simplify(ring, epsilon: float) -> list[Point]:
    """Simplify a closed ring with Ramer-Douglas-Peucker.

    The ring is split at its first point and at the vertex farthest from it;
    each half is simplified as an open chain. Points at distance ``>= epsilon``
    from the current chord are kept, so ``epsilon=0`` returns the ring as is.
    """
    pts = _as_ring(ring)
    if len(pts) < 3:
        raise DegenerateInputError("rdp_simplify needs at least 3 points")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    if far == 0:
        return [Point(float(pts[0, 0]), float(pts[0, 1]))]
    closed = np.vstack([pts, pts[:1]])
    first = _rdp_chain(closed[: far + 1], epsilon)
    second = _rdp_chain(closed[far:], epsilon)
    idx = first + [far + i for i in second[1:-1]]
    return [Point(float(pts[i, 0]), float(pts[i, 1])) for i in idx]


def polygon_area(p: Polygon) -> float:
    return abs(_signed_area(p.vertices))


def polygons_from_ring(ring, epsilon: float = 0.0) -> list[Polygon]:
    """Turn a raw ring into valid simple polygons.

    Optionally RDP-simplifies first. Self-intersections introduced by the
    simplification are repaired by splitting into simple parts; rings that
    collapse to zero area are discarded.
    """
    pts = _as_ring(ring)
    if len(pts) < 3:
        return []
    if epsilon > 0:
        pts = np.asarray(rdp_simplify(pts, epsilon), dtype=float)
        if len(pts) < 3:
            return []
    shape = _ShapelyPolygon(pts)
    if shape.is_valid:
        geoms = [shape]
    else:
        repaired = shapely.make_valid(shape)
        geoms = list(getattr(repaired, "geoms", [repaired]))
    out = []
    for geom in geoms:
        if geom.geom_type != "Polygon" or geom.area <= 0:
            continue
        try:
            out.append(Polygon(np.asarray(geom.exterior.coords)[:-1]))
        except DegenerateInputError:
            continue
    return out


def polygon_distance(a: Polygon, b: Polygon) -> float:
    """Minimum Euclidean distance between two polygons, 0 when they overlap or touch."""
    return float(a.shape.distance(b.shape))


def set_distance(i: PolygonSet, j: PolygonSet) -> float:
    """Average of the part-to-part minimum distances over all part pairs."""
    if i.empty or j.empty:
        raise AbsentObjectError(f"set_distance needs both objects present ({i.class_id.abbrev}, {j.class_id.abbrev})")
    d = [polygon_distance(a, b) for a, b in itertools.product(i.parts, j.parts)]
    return float(np.mean(d))


def set_intersection_area(i: PolygonSet, j: PolygonSet) -> float:
    if i.empty or j.empty:
        return 0.0
    return float(i.union().intersection(j.union()).area)


def set_midpoint(i: PolygonSet) -> Point:
    """Vertex mean over every part (not the area centroid)."""
    if i.empty:
        raise AbsentObjectError(f"{i.class_id.abbrev} has no parts")
    v = i.vertices()
    return Point(float(v[:, 0].mean()), float(v[:, 1].mean()))


def inscribed_radius(i: PolygonSet) -> float:
    """Largest inscribed-circle radius over the parts; 0 for an empty set."""
    best = 0.0
    for p in i.parts:
        line = shapely.maximum_inscribed_circle(p.shape, tolerance=0.25)
        best = max(best, float(line.length))
    return best
