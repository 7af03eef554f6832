"""Planar geometry in a local East-North-Up frame.

Headings are measured counterclockwise from East, in radians, wrapped to
[0, 2*pi).  Road geometry is horizontal; the up component of points is
carried along but ignored by every distance here.
"""

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def enu(east, north, up=0.0):
    """Build an EnuPoint as a float64 array ``[east, north, up]``."""
    p = np.array([east, north, up], dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite coordinates: {p}")
    return p


def wrap_heading(theta):
    return np.mod(theta, TWO_PI)


def heading_of(dx, dy):
    """Azimuth of a direction vector, counterclockwise from East."""
    return wrap_heading(np.arctan2(dy, dx))


@dataclass(frozen=True)
class Segment:
    """Straight road center-line piece from ``a`` to ``b``."""

    a: np.ndarray
    b: np.ndarray
    length: float = field(init=False)
    heading: float = field(init=False)
    midpoint: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)[:2]
        b = np.asarray(self.b, dtype=np.float64)[:2]
        d = b - a
        length = float(np.hypot(d[0], d[1]))
        if not length > 0.0:
            raise ValueError("degenerate segment: endpoints coincide")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "heading", float(heading_of(d[0], d[1])))
        object.__setattr__(self, "midpoint", 0.5 * (a + b))


def point_segment_distance(p, s):
    """Horizontal distance from point ``p`` to segment ``s`` in meters."""
    return float(point_segments_distance(p, s.a[None, :], s.b[None, :])[0])


def point_segments_distance(p, a, b):
    """Distances from one point to many segments.

    ``a`` and ``b`` are (N, 2) endpoint arrays.  Only elementwise IEEE
    operations are used so results do not depend on the batch layout.
    """
    px, py = float(p[0]), float(p[1])
    ax, ay = a[:, 0], a[:, 1]
    dx = b[:, 0] - ax
    dy = b[:, 1] - ay
    wx = px - ax
    wy = py - ay
    t = (wx * dx + wy * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    ex = wx - t * dx
    ey = wy - t * dy
    return np.sqrt(ex * ex + ey * ey)


def points_segments_distance(p, a, b):
    """Distances from C points (C, 2+) to N segments, shape (C, N)."""
    px = p[:, 0][:, None]
    py = p[:, 1][:, None]
    ax, ay = a[None, :, 0], a[None, :, 1]
    dx = b[None, :, 0] - ax
    dy = b[None, :, 1] - ay
    wx = px - ax
    wy = py - ay
    t = (wx * dx + wy * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    ex = wx - t * dx
    ey = wy - t * dy
    return np.sqrt(ex * ex + ey * ey)


def closest_point_on_segment(p, s):
    d = s.b - s.a
    t = np.clip(np.dot(np.asarray(p[:2]) - s.a, d) / np.dot(d, d), 0.0, 1.0)
    return s.a + t * d


def heading_cost(theta_user, theta_road):
    """1 - |cos(difference)|: zero when aligned in either direction."""
    return 1.0 - np.abs(np.cos(theta_user - theta_road))


def rotation_to_road(theta_road):
    """Clockwise rotation taking the road direction onto (1, 0).

    Row 0 gives the component parallel to the road, row 1 the
    perpendicular component.
    """
    c, s = np.cos(theta_road), np.sin(theta_road)
    return np.array([[c, s], [-s, c]])
