import numpy as np
import pytest
from numpy.testing import assert_allclose

from roadkf import geo


def test_enu_rejects_non_finite():
    with pytest.raises(ValueError):
        geo.enu(np.nan, 0.0)


def test_segment_properties():
    s = geo.Segment(np.array([0.0, 0.0]), np.array([0.0, 10.0]))
    assert s.length == 10.0
    assert_allclose(s.heading, np.pi / 2)
    assert_allclose(s.midpoint, [0.0, 5.0])
    with pytest.raises(ValueError):
        geo.Segment(np.zeros(2), np.zeros(2))


def test_heading_wraps_to_unit_circle():
    s = geo.Segment(np.array([0.0, 0.0]), np.array([0.0, -1.0]))
    assert_allclose(s.heading, 1.5 * np.pi)
    assert 0.0 <= geo.wrap_heading(-1e-12) < 2 * np.pi


def test_distance_on_interior_is_zero():
    s = geo.Segment(np.array([0.0, 0.0]), np.array([25.0, 0.0]))
    assert_allclose(geo.point_segment_distance(np.array([7.0, 0.0, 3.0]), s), 0.0, atol=1e-12)


def test_distance_perpendicular_from_midpoint():
    s = geo.Segment(np.array([0.0, 0.0]), np.array([25.0, 0.0]))
    assert_allclose(geo.point_segment_distance(np.array([12.5, 3.0]), s), 3.0)


def test_distance_past_endpoint_matches_dense_sampling():
    s = geo.Segment(np.array([-25.0, 0.0]), np.array([0.0, 0.0]))
    p = s.b + np.array([5.0, 0.0])
    d = geo.point_segment_distance(p, s)
    assert_allclose(d, 5.0)
    t = np.linspace(0.0, 1.0, 1_000_001)[:, None]
    pts = s.a + t * (s.b - s.a)
    assert_allclose(d, np.min(np.hypot(*(pts - p).T)), atol=1e-9)


def test_batched_distances_match_scalar(rng):
    a = rng.uniform(-50, 50, (40, 2))
    b = a + rng.uniform(-30, 30, (40, 2))
    p = rng.uniform(-60, 60, (7, 2))
    grid = geo.points_segments_distance(p, a, b)
    for i in range(7):
        row = geo.point_segments_distance(p[i], a, b)
        assert np.array_equal(grid[i], row)
        for j in range(40):
            assert_allclose(row[j], geo.point_segment_distance(p[i], geo.Segment(a[j], b[j])), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("du, expected", [(0.0, 0.0), (np.pi / 2, 1.0), (np.pi / 3, 0.5), (np.pi, 0.0)])
def test_heading_cost(du, expected):
    assert_allclose(geo.heading_cost(0.3 + du, 0.3), expected, atol=1e-12)


def test_rotation_to_road():
    assert_allclose(geo.rotation_to_road(0.0), np.eye(2))
    assert_allclose(geo.rotation_to_road(np.pi / 2), [[0, 1], [-1, 0]], atol=1e-15)
    for th in np.random.default_rng(0).uniform(0, 2 * np.pi, 100):
        r = geo.rotation_to_road(th)
        assert_allclose(r @ r.T, np.eye(2), atol=1e-12)
        # the road direction maps onto (1, 0)
        assert_allclose(r @ [np.cos(th), np.sin(th)], [1.0, 0.0], atol=1e-12)


def test_closest_point_on_segment():
    s = geo.Segment(np.array([0.0, 0.0]), np.array([10.0, 0.0]))
    assert_allclose(geo.closest_point_on_segment(np.array([4.0, 3.0]), s), [4.0, 0.0])
    assert_allclose(geo.closest_point_on_segment(np.array([-4.0, 3.0]), s), [0.0, 0.0])
