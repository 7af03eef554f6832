"""Road network representation: splitting, dual graph, neighborhoods.

The primal network has intersections as nodes and roads as edges.  After
splitting long roads into short pieces, the network is turned into its
dual: every piece becomes a node and two pieces are connected when they
share an endpoint.
"""

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from roadkf.geo import Segment, heading_of, point_segments_distance

# One-hot road categories; anything else falls into the trailing bucket.
ROAD_TYPES = (
    "motorway",
    "motorway_link",
    "trunk",
    "trunk_link",
    "primary",
    "primary_link",
    "secondary",
    "secondary_link",
    "tertiary",
    "tertiary_link",
    "unclassified",
    "residential",
    "living_street",
    "service",
)
N_ROAD_TYPES = len(ROAD_TYPES) + 1

DEFAULT_LANES = 1
DEFAULT_MAX_SPEED = 13.9  # m/s, 50 km/h
DEFAULT_FOV_RADIUS = 50.0
DEFAULT_FOV_CAP = 128
SEGMENT_MAX_LEN = 25.0

_KEY_DECIMALS = 6


def road_type_index(road_type):
    try:
        return ROAD_TYPES.index(road_type)
    except ValueError:
        return len(ROAD_TYPES)


def road_type_onehot(road_type):
    v = np.zeros(N_ROAD_TYPES)
    v[road_type_index(road_type)] = 1.0
    return v


@dataclass(frozen=True)
class RawRoad:
    """One primal edge.  When ``oneway`` is true, travel is legal from a to b only."""

    a: tuple
    b: tuple
    lanes: int | None = None
    max_speed: float | None = None
    road_type: str = "unclassified"
    oneway: bool | None = None
    source: int = -1

    def __post_init__(self):
        a = (float(self.a[0]), float(self.a[1]))
        b = (float(self.b[0]), float(self.b[1]))
        if a == b:
            raise ValueError(f"road endpoints coincide at {a}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self):
        return math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])


@dataclass(frozen=True)
class RoadSegment:
    id: int
    geometry: Segment
    lanes: int
    max_speed: float
    road_type_onehot: np.ndarray
    oneway: int
    heading_sincos: tuple


def split_segments(roads, max_len=SEGMENT_MAX_LEN):
    """Cut every road longer than ``max_len`` into equal chained pieces."""
    if not max_len > 0:
        raise ValueError("max_len must be positive")
    out = []
    for idx, road in enumerate(roads):
        src = road.source if road.source >= 0 else idx
        n = max(1, math.ceil(road.length / max_len))
        if n == 1:
            out.append(replace(road, source=src))
            continue
        ax, ay = road.a
        dx, dy = road.b[0] - ax, road.b[1] - ay
        pts = [road.a]
        for k in range(1, n):
            f = k / n
            pts.append((ax + f * dx, ay + f * dy))
        pts.append(road.b)
        for k in range(n):
            out.append(replace(road, a=pts[k], b=pts[k + 1], source=src))
    return out


def _endpoint_key(p):
    return (round(p[0], _KEY_DECIMALS), round(p[1], _KEY_DECIMALS))


@dataclass
class RoadGraph:
    """Dual road graph; immutable by convention after construction."""

    roads: list
    adjacency: np.ndarray
    directed_adjacency: np.ndarray
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    length: np.ndarray = field(repr=False)
    heading: np.ndarray = field(repr=False)
    midpoint: np.ndarray = field(repr=False)
    lanes: np.ndarray = field(repr=False)
    max_speed: np.ndarray = field(repr=False)
    oneway: np.ndarray = field(repr=False)
    type_index: np.ndarray = field(repr=False)
    _successors: list = field(default=None, repr=False)
    _reach: dict = field(default_factory=dict, repr=False)
    _segments: list = field(default=None, repr=False)
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.roads)

    @property
    def n(self):
        return len(self.roads)

    @property
    def successors(self):
        if self._successors is None:
            self._successors = [np.flatnonzero(row) for row in self.directed_adjacency]
        return self._successors

    @property
    def segments(self):
        if self._segments is None:
            self._segments = [self.segment(i) for i in range(self.n)]
        return self._segments

    def segment(self, i):
        if not 0 <= i < self.n:
            raise KeyError(f"unknown segment id {i}")
        th = self.heading[i]
        return RoadSegment(
            id=i,
            geometry=Segment(self.a[i], self.b[i]),
            lanes=int(self.lanes[i]),
            max_speed=float(self.max_speed[i]),
            road_type_onehot=np.eye(N_ROAD_TYPES)[self.type_index[i]],
            oneway=int(self.oneway[i]),
            heading_sincos=(float(np.sin(th)), float(np.cos(th))),
        )

    def reach(self, k):
        """Dense boolean matrix M with M[j, i] true iff i is in k_hop(j, k)."""
        if k < 0:
            raise ValueError("k must be non-negative")
        if k not in self._reach:
            step = sparse.identity(self.n, format="csr", dtype=np.int32)
            step = step + sparse.csr_matrix(self.directed_adjacency.astype(np.int32))
            r = sparse.identity(self.n, format="csr", dtype=np.int32)
            for _ in range(k):
                r = r @ step
                r.data[:] = 1
            self._reach[k] = r.toarray().astype(bool)
        return self._reach[k]

    def distances(self, pos):
        return point_segments_distance(pos, self.a, self.b)


def to_dual_graph(roads, defaults=None):
    """Build the dual graph: one node per road piece, edges at shared endpoints.

    A directed edge i -> j exists when a vehicle leaving i through the shared
    endpoint may legally enter j there: a oneway i can only be left at its
    ``b`` end, a oneway j can only be entered at its ``a`` end.
    """
    if not roads:
        raise ValueError("empty road list")
    d = {"lanes": DEFAULT_LANES, "max_speed": DEFAULT_MAX_SPEED}
    if defaults:
        d.update(defaults)
    n = len(roads)
    a = np.array([r.a for r in roads], dtype=np.float64)
    b = np.array([r.b for r in roads], dtype=np.float64)
    delta = b - a
    length = np.hypot(delta[:, 0], delta[:, 1])
    heading = heading_of(delta[:, 0], delta[:, 1])
    lanes = np.array([d["lanes"] if r.lanes is None else r.lanes for r in roads], dtype=np.int64)
    max_speed = np.array(
        [d["max_speed"] if r.max_speed is None else r.max_speed for r in roads], dtype=np.float64
    )
    oneway = np.array([1 if r.oneway else 0 for r in roads], dtype=np.int64)
    type_index = np.array([road_type_index(r.road_type) for r in roads], dtype=np.int64)

    incidence = defaultdict(list)
    for i, r in enumerate(roads):
        incidence[_endpoint_key(r.a)].append((i, 0))
        incidence[_endpoint_key(r.b)].append((i, 1))

    adj = np.zeros((n, n), dtype=bool)
    directed = np.zeros((n, n), dtype=bool)
    for ends in incidence.values():
        if len(ends) < 2:
            continue
        for i, ei in ends:
            for j, ej in ends:
                if i == j:
                    continue
                adj[i, j] = True
                can_exit = not oneway[i] or ei == 1
                can_enter = not oneway[j] or ej == 0
                if can_exit and can_enter:
                    directed[i, j] = True

    return RoadGraph(
        roads=list(roads),
        adjacency=adj,
        directed_adjacency=directed,
        a=a,
        b=b,
        length=length,
        heading=heading,
        midpoint=0.5 * (a + b),
        lanes=lanes,
        max_speed=max_speed,
        oneway=oneway,
        type_index=type_index,
    )


def build_graph(roads, max_len=SEGMENT_MAX_LEN, defaults=None):
    return to_dual_graph(split_segments(roads, max_len), defaults=defaults)


def k_hop(graph, r, k):
    """Segments reachable from ``r`` in at most ``k`` directed hops, including ``r``."""
    if not 0 <= r < graph.n:
        raise KeyError(f"unknown segment id {r}")
    if k < 0:
        raise ValueError("k must be non-negative")
    seen = {r}
    frontier = deque([(r, 0)])
    succ = graph.successors
    while frontier:
        node, depth = frontier.popleft()
        if depth == k:
            continue
        for nxt in succ[node]:
            nxt = int(nxt)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, depth + 1))
    return seen


def select_fov(dist, radius, cap, ids=None):
    """Apply the field-of-view rule to precomputed distances.

    Keeps entries with distance <= radius; if more than ``cap`` remain the
    nearest ``cap`` are kept (ties by id).  Result is sorted by id.
    """
    if ids is None:
        ids = np.arange(dist.shape[0])
    inside = np.flatnonzero(dist <= radius)
    if inside.size > cap:
        order = np.lexsort((ids[inside], dist[inside]))
        inside = np.sort(inside[order[:cap]])
    return ids[inside]


def field_of_view(graph, pos, radius=DEFAULT_FOV_RADIUS, cap=DEFAULT_FOV_CAP):
    """Candidate segment ids within ``radius`` meters of ``pos``, sorted by id."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    return select_fov(graph.distances(pos), radius, cap)


def is_strongly_connected(graph):
    from scipy.sparse.csgraph import connected_components

    ncomp, _ = connected_components(
        sparse.csr_matrix(graph.directed_adjacency), directed=True, connection="strong"
    )
    return ncomp == 1
