import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from surgctx.geometry import (
    INF,
    ObjectPolygons,
    Polygon,
    extract_contours,
    intersection_area,
    marker_polygons,
    midpoint,
    object_distance,
    object_polygons,
    rasterize,
    rdp,
    simplify,
)
from surgctx.trial_io import ObjectClass

N = ObjectClass.NEEDLE

masks = arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def _pixels(bits):
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(bits))}


@settings(max_examples=300, deadline=None)
@given(masks)
def test_contours_fill_to_components(bits):
    comps = oracles.components(bits.tolist())
    polys = extract_contours(bits)
    assert len(polys) == len(comps)
    h, w = bits.shape
    for poly, comp in zip(polys, comps):
        assert _pixels(rasterize([poly], w, h)) == oracles.fill_holes(comp)
        assert poly.area == len(oracles.fill_holes(comp))


def test_square_block_outline():
    bits = np.zeros((6, 6), bool)
    bits[1:4, 2:5] = True
    (p,) = extract_contours(bits)
    assert sorted(map(tuple, p.points.tolist())) == [(2, 1), (2, 4), (5, 1), (5, 4)]
    assert p.area == 9


def test_diagonal_pixels_are_one_component():
    bits = np.eye(4, dtype=bool)
    assert len(extract_contours(bits)) == 1


def test_component_in_hole_is_reported():
    bits = np.zeros((7, 7), bool)
    bits[0:7, 0:7] = True
    bits[1:6, 1:6] = False
    bits[3, 3] = True
    polys = extract_contours(bits)
    assert [p.area for p in polys] == [49, 1]


def test_empty_mask():
    assert extract_contours(np.zeros((4, 4), bool)) == []


polylines = st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=2, max_size=120)


@settings(max_examples=300, deadline=None)
@given(polylines, st.floats(0.05, 20))
def test_rdp_matches_recursive(pts, eps):
    got = [tuple(p) for p in rdp(np.array(pts), eps).tolist()]
    want = [tuple(p) for p in oracles.rdp_recursive(pts, eps)]
    assert got == want


@given(polylines)
def test_rdp_zero_epsilon_keeps_everything(pts):
    assert rdp(np.array(pts), 0.0).tolist() == [list(p) for p in pts]


def test_rdp_keeps_point_at_exactly_epsilon():
    pts = np.array([[0, 0], [5, 3], [10, 0]], float)
    assert len(rdp(pts, 3.0)) == 3
    assert len(rdp(pts, 3.0001)) == 2


def test_simplify_degenerate_returns_none():
    thin = Polygon([(0, 0), (10, 0), (10, 0.1), (0, 0.1)])
    assert simplify(thin, 1.0) is None
    with pytest.raises(ValueError):
        simplify(thin, -1)


def test_object_distance_is_mean_over_pairs():
    a = ObjectPolygons(N, [Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])])
    b = ObjectPolygons(N, [
        Polygon([(3, 0), (4, 0), (4, 1), (3, 1)]),
        Polygon([(0, 5), (1, 5), (1, 6), (0, 6)]),
    ])
    assert object_distance(a, b) == pytest.approx((2 + 4) / 2)
    assert object_distance(a, ObjectPolygons(N)) == INF


def test_touching_and_nested_are_distance_zero():
    outer = marker_polygons([(10, 10)], N, half=5)
    inner = marker_polygons([(10, 10)], N, half=1)
    edge = marker_polygons([(20, 10)], N, half=5)
    assert object_distance(outer, inner) == 0
    assert object_distance(outer, edge) == 0
    assert intersection_area(outer, edge) == 0


def test_intersection_uses_unions():
    a = ObjectPolygons(N, [
        Polygon([(0, 0), (4, 0), (4, 4), (0, 4)]),
        Polygon([(2, 0), (6, 0), (6, 4), (2, 4)]),
    ])
    b = ObjectPolygons(N, [Polygon([(1, 1), (5, 1), (5, 3), (1, 3)])])
    assert intersection_area(a, b) == pytest.approx(8)
    assert intersection_area(a, ObjectPolygons(N)) == 0


def test_midpoint_is_vertex_mean():
    obj = marker_polygons([(2, 2), (8, 4)], N, half=1)
    assert midpoint(obj) == (5.0, 3.0)
    with pytest.raises(ValueError):
        midpoint(ObjectPolygons(N))


def test_object_polygons_drops_small_components():
    bits = np.zeros((20, 20), bool)
    bits[1:3, 1:3] = True       # 4 px
    bits[10:15, 10:15] = True   # 25 px
    obj = object_polygons(bits, N, epsilon=1.5, min_area=15)
    assert len(obj.components) == 1
    assert obj.components[0].area == 25
    assert not math.isnan(obj.midpoint[0])
