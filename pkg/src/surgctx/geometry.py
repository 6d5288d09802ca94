"""Mask-to-polygon conversion and the distance/intersection primitives.

Polygons use pixel-edge coordinates: the pixel at column ``x``, row ``y``
covers the unit square ``[x, x+1] x [y, y+1]``, so the outline of a solid
block has the same area as its pixel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import cv2
import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry

from .trial_io import Mask, ObjectClass

INF = math.inf


class Polygon:
    """Closed ring of 2-D points; the closing edge is implicit."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) > 1 and pts[0, 0] == pts[-1, 0] and pts[0, 1] == pts[-1, 1]:
            pts = pts[:-1]
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"Polygon({self.points.tolist()!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Polygon) and np.array_equal(self.points, other.points)

    @cached_property
    def area(self) -> float:
        return area(self)

    @cached_property
    def shape(self) -> BaseGeometry:
        """Valid shapely geometry for this ring (self-touching rings are split)."""
        return _shapes([self])[0]

    def bounds(self) -> tuple[float, float, float, float]:
        mn, mx = self.points.min(axis=0), self.points.max(axis=0)
        return float(mn[0]), float(mn[1]), float(mx[0]), float(mx[1])


def _shapes(polygons: Sequence[Polygon]) -> list[BaseGeometry]:
    out: list[BaseGeometry | None] = [None] * len(polygons)
    rings = [k for k, p in enumerate(polygons) if len(p.points) >= 3]
    for k, p in enumerate(polygons):
        if len(p.points) < 3:
            out[k] = shapely.LineString(p.points) if len(p.points) == 2 else shapely.Point(p.points[0])
    if rings:
        coords = np.concatenate([polygons[k].points for k in rings])
        index = np.repeat(np.arange(len(rings)), [len(polygons[k].points) for k in rings])
        polys = shapely.polygons(shapely.linearrings(coords, indices=index))  # rings are closed here
        valid = shapely.is_valid(polys)
        for k, poly, ok in zip(rings, polys, valid):
            out[k] = poly if ok else shapely.make_valid(poly)
    return out


def build_shapes(objects: Iterable["ObjectPolygons"]) -> None:
    """Create the shapely geometry of every component in one batch.

    Per-geometry construction is dominated by call overhead, so callers that
    are about to measure many objects build them all at once.
    """
    pending = [c for obj in objects for c in obj.components if "shape" not in c.__dict__]
    for c, shp in zip(pending, _shapes(pending)):
        c.__dict__["shape"] = shp


@dataclass
class ObjectPolygons:
    object_class: ObjectClass
    components: list[Polygon] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.components)

    @cached_property
    def shapes(self) -> np.ndarray:
        build_shapes([self])
        return np.array([c.shape for c in self.components], dtype=object)

    @cached_property
    def union(self) -> BaseGeometry:
        shapes = self.shapes
        return shapely.unary_union(shapes) if len(shapes) > 1 else shapes[0]

    @property
    def midpoint(self) -> tuple[float, float]:
        return midpoint(self)


# ---------------------------------------------------------------- contours


def _drop_redundant(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Remove repeated vertices and vertices in the middle of straight runs."""
    pts = [p for k, p in enumerate(ring) if p != ring[k - 1]] if len(ring) > 1 else list(ring)
    if len(pts) < 3:
        return pts
    out = []
    n = len(pts)
    for k in range(n):
        (px, py), (x, y), (nx, ny) = pts[k - 1], pts[k], pts[(k + 1) % n]
        ax, ay, bx, by = x - px, y - py, nx - x, ny - y
        # a straight continuation carries no shape; a reversal (spike) does
        if ax * by - ay * bx == 0 and ax * bx + ay * by > 0:
            continue
        out.append((x, y))
    return out


def _first_pixel(p: Polygon) -> tuple[float, float]:
    pts = p.points
    row = pts[:, 1].min()
    return row, pts[pts[:, 1] == row, 0].min()


def extract_contours(mask: Mask | np.ndarray) -> list[Polygon]:
    """Outer boundary of every 8-connected component, in scanline order.

    Border following runs on the foreground blown up 2x, where traced pixel
    centres map back onto pixel corners of the original grid. Only top-level
    (outer) borders are kept, so holes are ignored but a component sitting
    inside another's hole is still reported.
    """
    bits = np.ascontiguousarray(mask.bits if isinstance(mask, Mask) else mask)
    if bits.dtype != bool:
        bits = bits != 0
    rows = np.flatnonzero(bits.any(axis=1))
    if not len(rows):
        return []
    y, y1 = int(rows[0]), int(rows[-1]) + 1
    cols = np.flatnonzero(bits[y:y1].any(axis=0))
    x, x1 = int(cols[0]), int(cols[-1]) + 1
    crop = bits[y:y1, x:x1].view(np.uint8)
    big = cv2.resize(crop, (2 * (x1 - x), 2 * (y1 - y)), interpolation=cv2.INTER_NEAREST)
    found, hierarchy = cv2.findContours(big, cv2.RETR_CCOMP, cv2.CHAIN_APPROX_SIMPLE)
    polygons = []
    for c, link in zip(found, hierarchy[0]):
        if link[3] != -1:
            continue
        ring = ((c[:, 0, :] + 1) // 2 + (x, y)).tolist()
        polygons.append(Polygon(_drop_redundant([tuple(p) for p in ring])))
    polygons.sort(key=_first_pixel)
    return polygons


def rasterize(polygons: Iterable[Polygon], width: int, height: int) -> np.ndarray:
    """Fill polygons on the pixel grid (a pixel is set when its centre is inside)."""
    # Fill on a doubled grid: pixel centres land on odd coordinates, so they
    # never sit on an axis-aligned edge, which fillPoly would count as inside.
    canvas = np.zeros((2 * height + 1, 2 * width + 1), np.uint8)
    for p in polygons:
        pts = np.round(p.points * 512).astype(np.int32)
        cv2.fillPoly(canvas, [pts], 1, lineType=cv2.LINE_8, shift=8)
    return canvas[1::2, 1::2][:height, :width].astype(bool)


# ---------------------------------------------------------------- simplification


def _segment_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(pts - a).T)
    ap = pts - a
    t = (ap @ ab) / denom
    # |cross|/|ab| is exact on integer grids, unlike the projected-point form
    d = np.abs(ap[:, 0] * ab[1] - ap[:, 1] * ab[0]) / math.sqrt(denom)
    d = np.where(t < 0, np.hypot(*ap.T), d)
    return np.where(t > 1, np.hypot(*(pts - b).T), d)


def _rdp_small(pts: list, lo: int, hi: int, epsilon: float, keep: list) -> None:
    stack = [(lo, hi)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        ax, ay = pts[lo]
        bx, by = pts[hi]
        dx, dy = bx - ax, by - ay
        denom = dx * dx + dy * dy
        best, k = -1.0, lo
        for i in range(lo + 1, hi):
            px, py = pts[i]
            if denom == 0.0:
                d = math.hypot(px - ax, py - ay)
            else:
                t = ((px - ax) * dx + (py - ay) * dy) / denom
                if t < 0:
                    d = math.hypot(px - ax, py - ay)
                elif t > 1:
                    d = math.hypot(px - bx, py - by)
                else:
                    d = abs((px - ax) * dy - (py - ay) * dx) / math.sqrt(denom)
            if d > best:
                best, k = d, i
        if best >= epsilon:
            keep[k] = True
            stack.append((k, hi))
            stack.append((lo, k))


def rdp(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker on an open polyline; both endpoints are kept.

    A point survives when its distance to the current chord segment is at
    least ``epsilon``, so ``epsilon == 0`` keeps every point.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        return pts.copy()
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    if n <= 64:
        # numpy call overhead dominates on short rings
        flags = keep.tolist()
        _rdp_small(pts.tolist(), 0, n - 1, epsilon, flags)
        return pts[np.array(flags)]
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _segment_distances(pts[lo + 1:hi], pts[lo], pts[hi])
        k = int(np.argmax(d))
        if d[k] >= epsilon:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((mid, hi))
            stack.append((lo, mid))
    return pts[keep]


def simplify(polygon: Polygon, epsilon: float) -> Polygon | None:
    """RDP on the closed ring, anchored at its first vertex.

    Returns None when fewer than three vertices survive.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    pts = polygon.points
    if len(pts) < 3:
        return None
    closed = np.vstack([pts, pts[:1]])
    out = rdp(closed, epsilon)[:-1]
    return Polygon(out) if len(out) >= 3 else None


# ---------------------------------------------------------------- measures


def area(polygon: Polygon) -> float:
    """Shoelace area (absolute value)."""
    pts = polygon.points
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(x[:-1] @ y[1:] - y[:-1] @ x[1:] + x[-1] * y[0] - y[-1] * x[0]))


def filter_small(components: Sequence[Polygon], min_area: float = 15.0) -> list[Polygon]:
    return [c for c in components if c.area >= min_area]


def component_distance(i: Polygon, j: Polygon) -> float:
    """Minimum distance between two rings; 0 when they touch, cross or nest."""
    return float(i.shape.distance(j.shape))


def object_distance(a: ObjectPolygons, b: ObjectPolygons) -> float:
    """Mean component distance over all component pairs; +inf if either is empty."""
    if not a.components or not b.components:
        return INF
    return float(shapely.distance(a.shapes[:, None], b.shapes[None, :]).mean())


def intersection_area(a: ObjectPolygons, b: ObjectPolygons) -> float:
    if not a.components or not b.components:
        return 0.0
    ua, ub = a.union, b.union
    if not ua.intersects(ub):
        return 0.0
    return float(ua.intersection(ub).area)


def midpoint(obj: ObjectPolygons) -> tuple[float, float]:
    if not obj.components:
        raise ValueError(f"{obj.object_class.value}: midpoint of an object without polygons")
    pts = np.vstack([c.points for c in obj.components])
    if len(pts) == 0:
        raise ValueError(f"{obj.object_class.value}: midpoint of an object without points")
    m = pts.mean(axis=0)
    return float(m[0]), float(m[1])


# ---------------------------------------------------------------- pipelines


def object_polygons(
    mask: Mask | np.ndarray,
    object_class: ObjectClass,
    epsilon: float = 1.5,
    min_area: float = 15.0,
) -> ObjectPolygons:
    """Contours, then RDP, then degenerate/small-component removal."""
    simplified = [simplify(p, epsilon) for p in extract_contours(mask)]
    kept = filter_small([p for p in simplified if p is not None], min_area)
    return ObjectPolygons(object_class, kept)


def marker_polygons(points: Iterable[tuple[float, float]], object_class: ObjectClass, half: float = 4.0) -> ObjectPolygons:
    """Axis-aligned squares centred on point annotations."""
    comps = [
        Polygon([(x - half, y - half), (x + half, y - half), (x + half, y + half), (x - half, y + half)])
        for x, y in points
    ]
    return ObjectPolygons(object_class, comps)
