"""Input features for the road-selection network."""

from dataclasses import dataclass

import numpy as np

from roadkf.roadnet import N_ROAD_TYPES
from roadkf.selection import EmissionParams, heading_costs, position_costs, user_heading

POS_SCALE = 100.0  # m
SPEED_SCALE = 30.0  # m/s
VAR_SCALE = 100.0  # m^2
LENGTH_SCALE = 25.0  # m
LANES_SCALE = 4.0

USER_DIM = 6

# Column groups of the road feature matrix; used for feature-subset ablations.
_T0 = 2
ROAD_GROUPS = {
    "distances": [0, 1],
    "road_type": list(range(_T0, _T0 + N_ROAD_TYPES)),
    "max_speed": [_T0 + N_ROAD_TYPES],
    "heading": [_T0 + N_ROAD_TYPES + 1, _T0 + N_ROAD_TYPES + 2],
    "oneway": [_T0 + N_ROAD_TYPES + 3],
    "shape": [_T0 + N_ROAD_TYPES + 4, _T0 + N_ROAD_TYPES + 5],
}
PRIOR_COL = _T0 + N_ROAD_TYPES + 6
STATIC_DIM = PRIOR_COL - _T0


def road_dim(k_max=2):
    return PRIOR_COL + 1 + k_max


def feature_mask(groups, k_max=2):
    """Column mask keeping only the named groups (``prior`` covers all prior columns)."""
    mask = np.zeros(road_dim(k_max))
    for g in groups:
        if g == "prior":
            mask[PRIOR_COL:] = 1.0
        elif g in ROAD_GROUPS:
            mask[ROAD_GROUPS[g]] = 1.0
        else:
            raise KeyError(f"unknown feature group {g!r}")
    return mask


def static_features(graph):
    """Per-segment columns that do not depend on the user (cached on the graph)."""
    feats = graph.cache.get("static_features")
    if feats is None:
        n = graph.n
        feats = np.zeros((n, STATIC_DIM))
        feats[np.arange(n), graph.type_index] = 1.0
        c = N_ROAD_TYPES
        feats[:, c] = graph.max_speed / SPEED_SCALE
        feats[:, c + 1] = np.sin(graph.heading)
        feats[:, c + 2] = np.cos(graph.heading)
        feats[:, c + 3] = graph.oneway
        feats[:, c + 4] = graph.length / LENGTH_SCALE
        feats[:, c + 5] = graph.lanes / LANES_SCALE
        graph.cache["static_features"] = feats
    return feats


def user_features(est):
    theta, speed = user_heading(est.mean)
    p = est.cov
    return np.array(
        [
            np.sin(theta),
            np.cos(theta),
            speed / SPEED_SCALE,
            p[0, 0] / VAR_SCALE,
            p[0, 1] / VAR_SCALE,
            p[1, 1] / VAR_SCALE,
        ]
    )


def prior_features(candidates, graph, prev_ids, prev_probs, k_max):
    """Previous-step probability of each candidate and its k-hop maxima.

    Column 0 is the candidate's own previous probability (0 if it was not a
    candidate); column k is the largest previous probability among segments
    from which the candidate is reachable in at most k directed hops.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    out = np.zeros((cand.size, 1 + k_max))
    if prev_ids is None or len(prev_ids) == 0 or cand.size == 0:
        return out
    prev_ids = np.asarray(prev_ids, dtype=np.int64)
    prev_probs = np.asarray(prev_probs, dtype=np.float64)
    own = prev_ids[:, None] == cand[None, :]
    out[:, 0] = np.max(np.where(own, prev_probs[:, None], 0.0), axis=0)
    for k in range(1, k_max + 1):
        allowed = graph.reach(k)[np.ix_(prev_ids, cand)]
        out[:, k] = np.max(np.where(allowed, prev_probs[:, None], 0.0), axis=0)
    return out


def local_adjacency(graph, candidates):
    cand = np.asarray(candidates, dtype=np.int64)
    return graph.adjacency[np.ix_(cand, cand)]


@dataclass
class Features:
    user: np.ndarray  # (USER_DIM,)
    road: np.ndarray  # (N, D)
    adjacency: np.ndarray  # (N, N) bool


def build_features(est, candidates, graph, prev=None, p=EmissionParams(), mask=None):
    """Features for one epoch.

    ``prev`` is ``(ids, probs)`` from the previous step, or None on the
    first epoch.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    k_max = p.k
    road = np.zeros((cand.size, road_dim(k_max)))
    if cand.size:
        road[:, 0] = position_costs(est.mean, graph, cand) / POS_SCALE
        road[:, 1] = heading_costs(est.mean, graph, cand, p)
        road[:, _T0:PRIOR_COL] = static_features(graph)[cand]
        prev_ids, prev_probs = prev if prev is not None else (None, None)
        road[:, PRIOR_COL:] = prior_features(cand, graph, prev_ids, prev_probs, k_max)
    if mask is not None:
        road = road * mask
    return Features(user_features(est), road, local_adjacency(graph, cand))


def normalized_adjacency(adj):
    """D^-1/2 (A + I) D^-1/2 for a dense boolean adjacency."""
    a = adj.astype(np.float64) + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]
