import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_distance, pixel_count_intersection, point_segment_distances, random_star, rings_overlap
from surgctx.geometry import (AbsentObjectError, DegenerateInputError, ObjectClass, Point, Polygon, PolygonSet,
                              polygon_area, polygons_from_ring, rdp_simplify, set_distance,
                              set_intersection_area, set_midpoint)

N, T = ObjectClass.NEEDLE, ObjectClass.THREAD


def square(x, y, s=1.0):
    return [(x, y), (x + s, y), (x + s, y + s), (x, y + s)]


def pset(*rings, cls=N):
    return PolygonSet(cls, tuple(Polygon(r) for r in rings))


def ring_distance_to_point(ring, p):
    ring = np.asarray(ring, float)
    n = len(ring)
    return min(float(point_segment_distances(p[None, :], ring[k], ring[(k + 1) % n])[0]) for k in range(n))


stars = st.builds(lambda seed, cx, cy: random_star(np.random.default_rng(seed), (cx, cy)),
                  st.integers(0, 2**32 - 1), st.floats(0, 80), st.floats(0, 80))


# -- construction --------------------------------------------------------------

def test_polygon_normalises_orientation_and_closure():
    cw = [(0, 0), (0, 1), (1, 1), (1, 0), (0, 0)]
    p = Polygon(cw)
    assert len(p) == 4
    x, y = p.vertices[:, 0], p.vertices[:, 1]
    assert np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) > 0


def test_polygon_drops_repeated_vertices():
    assert len(Polygon([(0, 0), (0, 0), (2, 0), (2, 2), (2, 2)])) == 3


@pytest.mark.parametrize("ring", [[(0, 0), (1, 1)], [(0, 0), (0, 0), (0, 0)]])
def test_polygon_rejects_too_few_vertices(ring):
    with pytest.raises(DegenerateInputError):
        Polygon(ring)


def test_polygon_rejects_bow_tie():
    with pytest.raises(DegenerateInputError):
        Polygon([(0, 0), (2, 2), (2, 0), (0, 2)])


def test_polygons_from_ring_repairs_bow_tie():
    parts = polygons_from_ring([(0, 0), (2, 2), (2, 0), (0, 2)])
    assert len(parts) == 2
    assert sum(polygon_area(p) for p in parts) == pytest.approx(2.0)


def test_polygons_from_ring_discards_zero_area():
    assert polygons_from_ring([(0, 0), (1, 0), (2, 0)]) == []


def test_polygon_rejects_non_finite():
    with pytest.raises(ValueError):
        Polygon([(0, 0), (1, math.nan), (1, 1)])


# -- rdp -----------------------------------------------------------------------------

def test_rdp_drops_collinear_point():
    assert rdp_simplify([(0, 0), (1, 0), (2, 0), (2, 2)], 0.1) == [(0, 0), (2, 0), (2, 2)]


def test_rdp_zero_epsilon_is_identity():
    ring = random_star(np.random.default_rng(3), (0, 0), n_lo=30, n_hi=30)
    assert np.array_equal(np.asarray(rdp_simplify(ring, 0.0)), ring)


def test_rdp_needs_three_points():
    with pytest.raises(DegenerateInputError):
        rdp_simplify([(0, 0), (1, 1)], 1.0)


def test_rdp_rejects_negative_epsilon():
    with pytest.raises(ValueError):
        rdp_simplify(square(0, 0), -1.0)


def test_rdp_fifty_vertex_ring_error_bound():
    ring = random_star(np.random.default_rng(11), (50, 50), n_lo=50, n_hi=50)
    out = np.asarray(rdp_simplify(ring, 1.0))
    assert len(out) < len(ring)
    assert max(ring_distance_to_point(out, p) for p in ring) <= 1.0


@given(stars, st.floats(0.0, 6.0))
def test_rdp_keeps_first_point_and_subsequence(ring, eps):
    out = [tuple(p) for p in rdp_simplify(ring, eps)]
    src = [tuple(p) for p in ring]
    assert out[0] == src[0]
    pos = [src.index(p) for p in out]
    assert pos == sorted(pos) and len(set(pos)) == len(pos)


@given(stars, st.floats(0.0, 6.0))
def test_rdp_idempotent(ring, eps):
    once = rdp_simplify(ring, eps)
    if len(once) >= 3:
        assert rdp_simplify(once, eps) == once


# -- area --------------------------------------------------------------------------

def test_area_unit_square():
    assert polygon_area(Polygon(square(0, 0))) == 1.0


def test_area_rectangle():
    assert polygon_area(Polygon([(0, 0), (4, 0), (4, 5), (0, 5)])) == 20.0


def test_area_matches_pixel_count():
    rng = np.random.default_rng(5)
    for _ in range(10):
        ring = random_star(rng, (20, 20))
        ref = pixel_count_intersection(ring, ring, cell=0.05)
        assert polygon_area(Polygon(ring)) == pytest.approx(ref, rel=0.02)


# -- distance --------------------------------------------------------------------

def test_distance_overlapping_squares():
    assert set_distance(pset(square(0, 0, 2)), pset(square(1, 1, 2), cls=T)) == 0.0


def test_distance_gap_of_three():
    assert set_distance(pset(square(0, 0)), pset(square(4, 0), cls=T)) == pytest.approx(3.0)


def test_distance_touching_edge_is_zero():
    assert set_distance(pset(square(0, 0)), pset(square(1, 0), cls=T)) == 0.0


def test_distance_averages_all_part_pairs():
    rng = np.random.default_rng(8)
    a = [random_star(rng, c, r_hi=6) for c in ((10, 10), (60, 15))]
    b = [random_star(rng, c, r_hi=6) for c in ((30, 40), (80, 60), (5, 70))]
    expected = np.mean([dense_distance(r1, r2) for r1 in a for r2 in b])
    assert set_distance(pset(*a), pset(*b, cls=T)) == pytest.approx(expected, abs=1e-3)


def test_distance_absent_object():
    with pytest.raises(AbsentObjectError):
        set_distance(PolygonSet(N), pset(square(0, 0), cls=T))


@given(stars, stars)
def test_distance_symmetric(r1, r2):
    a, b = pset(r1), pset(r2, cls=T)
    assert abs(set_distance(a, b) - set_distance(b, a)) <= 1e-9


@given(stars, stars)
def test_distance_zero_iff_overlap(r1, r2):
    d = set_distance(pset(r1), pset(r2, cls=T))
    # random stars touch without overlapping with probability zero
    assert (d == 0.0) == rings_overlap(r1, r2)


@given(stars, stars, st.floats(-50, 50), st.floats(-50, 50))
def test_translation_invariance(r1, r2, dx, dy):
    a, b = pset(r1), pset(r2, cls=T)
    at, bt = a.translate(dx, dy), b.translate(dx, dy)
    assert abs(set_distance(a, b) - set_distance(at, bt)) <= 1e-9
    assert abs(set_intersection_area(a, b) - set_intersection_area(at, bt)) <= 1e-9


# -- intersection -----------------------------------------------------------------

def test_intersection_disjoint():
    assert set_intersection_area(pset(square(0, 0)), pset(square(5, 5), cls=T)) == 0.0


def test_intersection_self():
    assert set_intersection_area(pset(square(0, 0)), pset(square(0, 0), cls=T)) == 1.0


def test_intersection_empty_set_is_zero():
    assert set_intersection_area(PolygonSet(N), pset(square(0, 0), cls=T)) == 0.0


def test_intersection_convex_quads_match_pixel_count():
    rng = np.random.default_rng(21)
    for _ in range(10):
        q1 = random_star(rng, (10, 10), r_lo=6, r_hi=9, n_lo=4, n_hi=4)
        q2 = random_star(rng, (14, 12), r_lo=6, r_hi=9, n_lo=4, n_hi=4)
        ref = pixel_count_intersection(q1, q2, cell=0.02)
        got = set_intersection_area(pset(q1), pset(q2, cls=T))
        small = min(polygon_area(Polygon(q1)), polygon_area(Polygon(q2)))
        assert abs(got - ref) <= 0.02 * small


@given(stars, stars)
def test_intersection_bounded_and_symmetric(r1, r2):
    a, b = pset(r1), pset(r2, cls=T)
    ab, ba = set_intersection_area(a, b), set_intersection_area(b, a)
    assert ab >= 0
    assert abs(ab - ba) <= 1e-9
    assert ab <= min(a.area, b.area) + 1e-9


# -- midpoint -----------------------------------------------------------------------

def test_midpoint_unit_square():
    assert set_midpoint(pset(square(0, 0))) == Point(0.5, 0.5)


def test_midpoint_triangle():
    assert set_midpoint(pset([(0, 0), (3, 0), (0, 3)])) == pytest.approx((1.0, 1.0))


def test_midpoint_two_parts_is_vertex_mean():
    rng = np.random.default_rng(2)
    r1, r2 = random_star(rng, (10, 10)), random_star(rng, (60, 40))
    xs = [p[0] for p in Polygon(r1).vertices] + [p[0] for p in Polygon(r2).vertices]
    ys = [p[1] for p in Polygon(r1).vertices] + [p[1] for p in Polygon(r2).vertices]
    m = set_midpoint(pset(r1, r2))
    assert m.x == pytest.approx(math.fsum(xs) / len(xs), abs=1e-12)
    assert m.y == pytest.approx(math.fsum(ys) / len(ys), abs=1e-12)


def test_midpoint_absent_object():
    with pytest.raises(AbsentObjectError):
        set_midpoint(PolygonSet(N))


def test_object_class_parse():
    assert ObjectClass.parse("needle") is N
    assert ObjectClass.parse(N.slug) is N
    assert ObjectClass.parse(int(N)) is N
    with pytest.raises(ValueError):
        ObjectClass.parse("scalpel")
