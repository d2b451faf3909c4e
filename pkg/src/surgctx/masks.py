"""Raster masks <-> polygon sets, aggregation into label frames, and mask IOU."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import ObjectClass, Polygon, PolygonSet, polygon_area, polygons_from_ring


class DimensionMismatchError(ValueError):
    pass


# front-to-back: the first class listed wins a contested pixel
AGGREGATION_PRIORITY = (
    ObjectClass.NEEDLE,
    ObjectClass.THREAD,
    ObjectClass.RING,
    ObjectClass.LEFT_GRASPER,
    ObjectClass.RIGHT_GRASPER,
    ObjectClass.TISSUE_POINTS,
)

_EIGHT = np.ones((3, 3), dtype=bool)


def as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"a mask must be a non-empty 2-D array, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")


def denoise(m, min_component_px: int = 15) -> np.ndarray:
    """Remove 8-connected foreground components smaller than ``min_component_px``."""
    m = as_mask(m)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return m.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_component_px
    keep[0] = False
    return keep[labels]


# direction vectors in (dx, dy) with y pointing down
_E, _S, _W, _N = (1, 0), (0, 1), (-1, 0), (0, -1)
_SADDLE_NUDGE = 0.01


def _trace_outer(filled: np.ndarray) -> np.ndarray:
    """Follow pixel cracks around one 8-connected, hole-free component.

    Vertices sit on pixel corners; only direction changes are emitted. Where
    the component is joined through a single diagonal corner, both passes
    through that corner are pushed apart by ``_SADDLE_NUDGE`` so the ring stays
    simple while still enclosing the diagonal bridge.
    """
    h, w = filled.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = filled

    def fg(col: int, row: int) -> bool:
        return pad[row + 1, col + 1]

    rows, cols = np.nonzero(filled)
    r0, c0 = int(rows[0]), int(cols[0])
    start = (c0, r0)
    x, y = start
    d = _E
    verts = []
    while True:
        x, y = x + d[0], y + d[1]
        dx, dy = d
        lx, ly = dy, -dx
        rx, ry = -dy, dx
        ahead_left = fg(x + (dx + lx - 1) // 2, y + (dy + ly - 1) // 2)
        ahead_right = fg(x + (dx + rx - 1) // 2, y + (dy + ry - 1) // 2)
        if ahead_left:
            nd = (lx, ly)
        elif ahead_right:
            nd = d
        else:
            nd = (rx, ry)
        if nd != d:
            vx, vy = float(x), float(y)
            if ahead_left and not ahead_right:
                vx += _SADDLE_NUDGE * (nd[0] - dx)
                vy += _SADDLE_NUDGE * (nd[1] - dy)
            verts.append((vx, vy))
        d = nd
        if (x, y) == start and d == _E:
            break
    ring = np.asarray(verts)
    # rotate so the ring starts at the top-left corner of the first pixel
    k = int(np.argmin(np.hypot(ring[:, 0] - c0, ring[:, 1] - r0)))
    return np.roll(ring, -k, axis=0)


def extract_contours(m, class_id=ObjectClass.NEEDLE) -> PolygonSet:
    """One polygon per outer boundary of each 8-connected component.

    Holes are filled before tracing, so the polygons carry outer boundaries
    only. Vertex coordinates are pixel corners.
    """
    m = as_mask(m)
    labels, n = ndimage.label(m, structure=_EIGHT)
    parts: list[Polygon] = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = ndimage.binary_fill_holes(labels[sl] == i)
        ring = _trace_outer(comp)
        ring[:, 0] += sl[1].start
        ring[:, 1] += sl[0].start
        parts.extend(polygons_from_ring(ring))
    return PolygonSet(class_id, tuple(parts))


def drop_small(ps: PolygonSet, min_area: float = 15.0) -> PolygonSet:
    """Remove parts whose area is strictly below ``min_area``."""
    return PolygonSet(ps.class_id, tuple(p for p in ps.parts if polygon_area(p) >= min_area))


def smooth(ps: PolygonSet, epsilon: float) -> PolygonSet:
    if epsilon <= 0:
        return ps
    parts = []
    for p in ps.parts:
        parts.extend(polygons_from_ring(p.vertices, epsilon=epsilon))
    return PolygonSet(ps.class_id, tuple(parts))


def mask_to_polygons(m, class_id, min_component_px: int = 15, min_area: float = 15.0,
                     epsilon: float = 1.0) -> PolygonSet:
    """Full mask clean-up chain: denoise, trace, drop small parts, RDP-smooth."""
    ps = extract_contours(denoise(m, min_component_px), class_id)
    ps = drop_small(ps, min_area)
    return smooth(ps, epsilon)


def _fill_polygon(out: np.ndarray, verts: np.ndarray) -> None:
    """Even-odd fill of one ring, sampling each pixel at its centre."""
    h, w = out.shape
    x0, y0 = verts.min(axis=0)
    x1, y1 = verts.max(axis=0)
    r_lo, r_hi = max(int(np.floor(y0 - 0.5)), 0), min(int(np.ceil(y1 - 0.5)), h - 1)
    c_lo, c_hi = max(int(np.floor(x0 - 0.5)), 0), min(int(np.ceil(x1 - 0.5)), w - 1)
    if r_lo > r_hi or c_lo > c_hi:
        return
    a = verts
    b = np.roll(verts, -1, axis=0)
    yc = np.arange(r_lo, r_hi + 1) + 0.5
    xc = np.arange(c_lo, c_hi + 1) + 0.5
    ay, by = a[:, 1][None, :], b[:, 1][None, :]
    crosses = (ay <= yc[:, None]) != (by <= yc[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (yc[:, None] - ay) / (by - ay)
    xi = a[:, 0][None, :] + t * (b[:, 0] - a[:, 0])[None, :]
    xi = np.where(crosses, xi, np.inf)
    # crossings strictly left of each pixel centre, per row
    count = (xi[:, None, :] < xc[None, :, None]).sum(axis=2)
    out[r_lo:r_hi + 1, c_lo:c_hi + 1] |= (count % 2).astype(bool)


def rasterize(ps: PolygonSet | Sequence[Polygon], width: int, height: int) -> np.ndarray:
    """Pixels whose centre falls inside any part (even-odd per part); clipped to the frame."""
    parts = ps.parts if isinstance(ps, PolygonSet) else ps
    out = np.zeros((height, width), dtype=bool)
    for p in parts:
        verts = p.vertices if isinstance(p, Polygon) else np.asarray(p, dtype=float)
        _fill_polygon(out, verts)
    return out


def aggregate(masks: Mapping[ObjectClass, np.ndarray], priority=AGGREGATION_PRIORITY) -> np.ndarray:
    """Merge per-class binary masks into one label frame (0 = background)."""
    masks = {ObjectClass.parse(k): as_mask(v) for k, v in masks.items()}
    if not masks:
        raise ValueError("no masks to aggregate")
    shapes = {m.shape for m in masks.values()}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"masks have differing shapes: {sorted(shapes)}")
    (shape,) = shapes
    out = np.zeros(shape, dtype=np.uint8)
    for cls in reversed(priority):
        if cls in masks:
            out[masks[cls]] = int(cls)
    return out


def split_labels(labels, classes=tuple(ObjectClass)) -> dict[ObjectClass, np.ndarray]:
    labels = np.asarray(labels)
    return {ObjectClass.parse(c): labels == int(ObjectClass.parse(c)) for c in classes}


def mask_iou(pred, gt) -> float:
    """Pixel IOU; 1.0 when both masks are empty."""
    pred, gt = as_mask(pred), as_mask(gt)
    _same_shape(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


# -- file I/O -----------------------------------------------------------------

def read_mask(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM mask; any value above 127 is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_mask(path, m) -> None:
    m = as_mask(m)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(path)


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L")).copy()
    if arr.max(initial=0) > max(ObjectClass):
        raise ValueError(f"{path}: label values must be in 0..{max(ObjectClass)}")
    return arr


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.max(initial=0) > max(ObjectClass):
        raise ValueError("label values must be in 0..6")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels, mode="L").save(path)


def read_image(path) -> np.ndarray:
    """Read a frame as float grayscale in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_image(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mode="L").save(path)
