from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import random_star
from surgctx.geometry import ObjectClass, Polygon, PolygonSet, polygon_area
from surgctx.masks import (AGGREGATION_PRIORITY, DimensionMismatchError, aggregate, denoise, drop_small,
                           extract_contours, mask_iou, mask_to_polygons, rasterize, read_image, read_labels,
                           read_mask, split_labels, write_image, write_labels, write_mask)

N, LG = ObjectClass.NEEDLE, ObjectClass.LEFT_GRASPER

small_masks = arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24)))


def flood_components(m):
    """8-connected components by breadth-first flood fill."""
    seen = np.zeros_like(m, bool)
    h, w = m.shape
    comps = []
    for r in range(h):
        for c in range(w):
            if m[r, c] and not seen[r, c]:
                q, comp = deque([(r, c)]), []
                seen[r, c] = True
                while q:
                    y, x = q.popleft()
                    comp.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and m[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                q.append((yy, xx))
                comps.append(comp)
    return comps


def blob(rng, shape=(60, 60)):
    ring = random_star(rng, (shape[1] / 2, shape[0] / 2), r_lo=6, r_hi=25)
    return rasterize([Polygon(ring)], shape[1], shape[0])


# -- denoise --------------------------------------------------------------------

def test_denoise_removes_speckle():
    m = np.zeros((20, 20), bool)
    m[3, 3:6] = True
    assert not denoise(m, 5).any()


def test_denoise_keeps_large_blob():
    m = np.zeros((20, 20), bool)
    m[5:15, 5:15] = True
    assert np.array_equal(denoise(m, 5), m)


def test_denoise_diagonal_pixels_form_one_component():
    m = np.eye(6, dtype=bool)
    assert np.array_equal(denoise(m, 6), m)


@given(small_masks, st.integers(1, 12))
def test_denoise_matches_flood_fill(m, k):
    expected = np.zeros_like(m)
    for comp in flood_components(m):
        if len(comp) >= k:
            for y, x in comp:
                expected[y, x] = True
    assert np.array_equal(denoise(m, k), expected)


@given(small_masks, st.integers(1, 12))
def test_denoise_idempotent_and_monotone(m, k):
    once = denoise(m, k)
    assert not (once & ~m).any()
    assert np.array_equal(denoise(once, k), once)


# -- contours ---------------------------------------------------------------------

def test_contour_of_square():
    m = np.zeros((10, 10), bool)
    m[2:8, 2:8] = True
    ps = extract_contours(m, N)
    assert len(ps) == 1
    assert len(ps.parts[0]) == 4
    assert polygon_area(ps.parts[0]) == pytest.approx(36.0)


def test_contour_of_empty_mask():
    assert extract_contours(np.zeros((8, 8), bool), N).empty


def test_contour_one_polygon_per_component():
    m = np.zeros((30, 30), bool)
    m[2:6, 2:6] = True
    m[10:20, 10:12] = True
    m[25, 25] = True
    assert len(extract_contours(m, N)) == 3


def test_contour_fills_holes():
    m = np.zeros((12, 12), bool)
    m[2:10, 2:10] = True
    m[4:8, 4:8] = False
    ps = extract_contours(m, N)
    assert len(ps) == 1 and polygon_area(ps.parts[0]) == pytest.approx(64.0)


def test_contour_round_trip_random_blobs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = blob(rng)
        back = rasterize(extract_contours(m, N), *m.shape[::-1])
        assert np.mean(back == m) >= 0.95
        assert mask_iou(back, m) >= 0.95


@given(small_masks)
def test_contour_round_trip_exact_on_hole_free_masks(m):
    from scipy import ndimage

    # 8-connected foreground pairs with 4-connected background
    filled = ndimage.binary_fill_holes(m)
    back = rasterize(extract_contours(m, N), *m.shape[::-1])
    assert np.array_equal(back, filled)


# -- drop_small ---------------------------------------------------------------------

def test_drop_small_threshold_is_strict():
    keep = Polygon([(0, 0), (5, 0), (5, 3), (0, 3)])
    lose = Polygon([(10, 0), (10 + 14.9, 0), (10 + 14.9, 1), (10, 1)])
    out = drop_small(PolygonSet(N, (keep, lose)))
    assert out.parts == (keep,)


def test_drop_small_mixed_set():
    rng = np.random.default_rng(4)
    parts = tuple(Polygon(random_star(rng, (40 * i, 0), r_lo=1, r_hi=5)) for i in range(12))
    out = drop_small(PolygonSet(N, parts), 15.0)
    assert out.parts == tuple(p for p in parts if polygon_area(p) >= 15.0)


# -- rasterize ------------------------------------------------------------------

def test_rasterize_scaled_square():
    m = rasterize([Polygon([(0.3, 0.3), (10.3, 0.3), (10.3, 10.3), (0.3, 10.3)])], 20, 20)
    assert abs(int(m.sum()) - 100) <= 40


def test_rasterize_empty_set():
    assert not rasterize(PolygonSet(N), 8, 6).any()


def test_rasterize_clips_to_frame():
    m = rasterize([Polygon([(-5, -5), (5, -5), (5, 5), (-5, 5)])], 10, 10)
    assert m.sum() == 25


def test_rasterize_round_trip_polygons():
    rng = np.random.default_rng(9)
    for _ in range(20):
        ps = PolygonSet(N, (Polygon(random_star(rng, (32, 32), r_lo=5, r_hi=28)),))
        m = rasterize(ps, 64, 64)
        again = rasterize(extract_contours(m, N), 64, 64)
        assert mask_iou(again, m) >= 0.95


def test_mask_to_polygons_pipeline():
    m = np.zeros((40, 40), bool)
    m[5:20, 5:20] = True
    m[30, 30:33] = True
    ps = mask_to_polygons(m, N)
    assert len(ps) == 1
    assert polygon_area(ps.parts[0]) == pytest.approx(225.0)


# -- aggregate --------------------------------------------------------------------

def test_aggregate_disjoint_masks():
    a = np.zeros((5, 5), bool)
    b = np.zeros((5, 5), bool)
    a[0] = True
    b[4] = True
    out = aggregate({N: a, LG: b})
    assert (out[0] == int(N)).all() and (out[4] == int(LG)).all() and (out[1:4] == 0).all()


def test_aggregate_all_empty():
    assert not aggregate({c: np.zeros((4, 4), bool) for c in ObjectClass}).any()


def test_aggregate_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        aggregate({N: np.zeros((4, 4), bool), LG: np.zeros((4, 5), bool)})


@given(st.lists(arrays(bool, (6, 6)), min_size=6, max_size=6))
def test_aggregate_priority_and_split(stack):
    masks = dict(zip(ObjectClass, stack))
    out = aggregate(masks)
    back = split_labels(out)
    for r in range(6):
        for c in range(6):
            claimants = [cls for cls in AGGREGATION_PRIORITY if masks[cls][r, c]]
            assert out[r, c] == (int(claimants[0]) if claimants else 0)
    for cls, m in masks.items():
        assert not (back[cls] & ~m).any()
    union = np.any(stack, axis=0)
    assert np.array_equal(out > 0, union)


def test_needle_wins_over_grasper():
    g = np.ones((3, 3), bool)
    n = np.zeros((3, 3), bool)
    n[1, 1] = True
    out = aggregate({LG: g, N: n})
    assert out[1, 1] == int(N) and (out[g & ~n] == int(LG)).all()


# -- iou ------------------------------------------------------------------------------

def test_iou_identical():
    m = np.zeros((5, 5), bool)
    m[1:3] = True
    assert mask_iou(m, m) == 1.0


def test_iou_both_empty():
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_iou_disjoint():
    a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
    a[0], b[3] = True, True
    assert mask_iou(a, b) == 0.0


def test_iou_half_overlap():
    a, b = np.zeros((10, 10), bool), np.zeros((10, 10), bool)
    a[0:4, 0:4] = True
    b[0:4, 2:6] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)


def test_iou_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_iou_symmetric_and_one_iff_equal(a, b):
    assert mask_iou(a, b) == mask_iou(b, a)
    if a.any() or b.any():
        assert (mask_iou(a, b) == 1.0) == np.array_equal(a, b)


# -- files -------------------------------------------------------------------------

@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_mask_file_round_trip(tmp_path, ext):
    m = np.random.default_rng(1).random((12, 17)) > 0.5
    write_mask(tmp_path / f"m.{ext}", m)
    assert np.array_equal(read_mask(tmp_path / f"m.{ext}"), m)


def test_label_file_round_trip(tmp_path):
    labels = np.random.default_rng(2).integers(0, 7, (9, 11)).astype(np.uint8)
    write_labels(tmp_path / "l.png", labels)
    assert np.array_equal(read_labels(tmp_path / "l.png"), labels)


def test_label_values_checked(tmp_path):
    with pytest.raises(ValueError):
        write_labels(tmp_path / "l.png", np.full((2, 2), 7))


def test_image_round_trip_quantises(tmp_path):
    img = np.random.default_rng(3).random((6, 6))
    write_image(tmp_path / "f.png", img)
    assert np.abs(read_image(tmp_path / "f.png") - img).max() <= 0.5 / 255 + 1e-12
