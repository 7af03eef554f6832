"""Classical road-segment selection: nearest segment and Viterbi decoding."""

from dataclasses import dataclass

import numpy as np

from roadkf.geo import heading_cost, point_segments_distance
from roadkf.kalman import KfEstimate
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, field_of_view


@dataclass(frozen=True)
class EmissionParams:
    beta: float = 0.01  # 1/m
    epsilon: float = 0.01
    k: int = 2
    min_speed: float = 0.5  # m/s; below this the heading cost is dropped

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be at least 1")


def _mean_of(est):
    return est.mean if isinstance(est, KfEstimate) else np.asarray(est, dtype=np.float64)


def user_heading(mean):
    """Heading from the filter's horizontal velocity and the planar speed."""
    ve, vn = float(mean[3]), float(mean[4])
    return float(np.arctan2(vn, ve)), float(np.hypot(ve, vn))


def position_costs(pos, graph, ids):
    ids = np.asarray(ids, dtype=np.int64)
    return point_segments_distance(pos, graph.a[ids], graph.b[ids])


def heading_costs(mean, graph, ids, p=EmissionParams()):
    theta, speed = user_heading(mean)
    if speed < p.min_speed:
        return np.zeros(len(ids))
    return heading_cost(theta, graph.heading[np.asarray(ids, dtype=np.int64)])


def emissions(mean, graph, ids, p=EmissionParams()):
    """Emission probabilities for candidate segments ``ids``."""
    j_pos = position_costs(mean, graph, ids)
    j_th = heading_costs(mean, graph, ids, p)
    return np.maximum(1.0 - (p.beta * j_pos + j_th) / 2.0, p.epsilon)


def emission(est, segment, p=EmissionParams()):
    """Emission probability of a single ``RoadSegment`` given a filter estimate."""
    geom = segment.geometry
    j_pos = point_segments_distance(est.mean, geom.a[None], geom.b[None])[0]
    theta, speed = user_heading(est.mean)
    j_th = 0.0 if speed < p.min_speed else heading_cost(theta, geom.heading)
    return float(max(1.0 - (p.beta * j_pos + j_th) / 2.0, p.epsilon))


def instant_select(candidates, est, graph):
    """Nearest candidate segment, lowest id on ties; None when there are no candidates."""
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        return None
    d = position_costs(est.mean, graph, cand)
    best = np.flatnonzero(d == d.min())
    return int(cand[best].min())


@dataclass(frozen=True)
class ViterbiBelief:
    """Log-probabilities over the current candidates, max normalized to 0."""

    ids: np.ndarray
    logp: np.ndarray

    def probabilities(self):
        w = np.exp(self.logp)
        return w / w.sum()


def _log_transition(graph, prev_ids, cand, k):
    allowed = graph.reach(k)[np.ix_(prev_ids, cand)]
    return np.where(allowed, 0.0, -np.inf)


def _argmax_lowest(ids, values):
    best = np.flatnonzero(values == values.max())
    return int(ids[best].min())


def viterbi_step(belief, candidates, est, graph, p=EmissionParams()):
    """One online Viterbi recursion step.

    Returns ``(belief, selected)``.  With no candidates the belief is carried
    over unchanged and ``selected`` is None.
    """
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        return belief, None
    log_em = np.log(emissions(est.mean, graph, cand, p))
    if belief is None:
        score = log_em
    else:
        prior = np.max(belief.logp[:, None] + _log_transition(graph, belief.ids, cand, p.k), axis=0)
        prior = np.where(np.isneginf(prior), np.log(p.epsilon), prior)
        score = prior + log_em
    top = score.max()
    if not np.isfinite(top):
        score = np.zeros_like(score)
        top = 0.0
    score = score - top
    new = ViterbiBelief(cand, score)
    return new, _argmax_lowest(cand, score)


class OnlineViterbi:
    """Stateful wrapper around ``viterbi_step`` for one drive."""

    def __init__(self, graph, params=EmissionParams()):
        self.graph = graph
        self.params = params
        self.belief = None

    def step(self, candidates, est):
        self.belief, sel = viterbi_step(self.belief, candidates, est, self.graph, self.params)
        return sel

    def prior_probabilities(self):
        """Normalized belief as {segment id: probability}."""
        if self.belief is None:
            return {}
        probs = self.belief.probabilities()
        return dict(zip(self.belief.ids.tolist(), probs.tolist()))


def bidirectional_viterbi(
    estimates,
    graph,
    p=EmissionParams(),
    radius=DEFAULT_FOV_RADIUS,
    cap=DEFAULT_FOV_CAP,
    candidates=None,
):
    """Offline max-product decode over the whole drive.

    ``estimates`` is a sequence of filter means (or KfEstimates).  Epochs
    without candidates get label -1.  Returns an int array of segment ids.
    """
    means = [_mean_of(e) for e in estimates]
    if not means:
        raise ValueError("empty drive")
    steps = []  # (epoch, ids, score, backptr)
    prev = None
    log_eps = np.log(p.epsilon)
    for t, mean in enumerate(means):
        cand = field_of_view(graph, mean, radius, cap) if candidates is None else candidates[t]
        cand = np.asarray(cand, dtype=np.int64)
        if cand.size == 0:
            continue
        log_em = np.log(emissions(mean, graph, cand, p))
        if prev is None:
            score = log_em
            back = np.full(cand.size, -1)
        else:
            _, pids, pscore, _ = prev
            m = pscore[:, None] + _log_transition(graph, pids, cand, p.k)
            back = np.argmax(m, axis=0)
            best = m[back, np.arange(cand.size)]
            floored = np.isneginf(best)
            back[floored] = -1
            score = np.where(floored, log_eps, best) + log_em
        score = score - score.max()
        prev = (t, cand, score, back)
        steps.append(prev)

    labels = np.full(len(means), -1, dtype=np.int64)
    if not steps:
        return labels
    idx = int(np.argmax(steps[-1][2]))
    for s in range(len(steps) - 1, -1, -1):
        t, ids, score, back = steps[s]
        labels[t] = ids[idx]
        if s > 0:
            idx = int(back[idx])
            if idx < 0:
                idx = int(np.argmax(steps[s - 1][2]))
    return labels


def path_log_score(path, means, graph, p=EmissionParams()):
    """Sum of log emissions and log transitions along a segment path."""
    total = 0.0
    reach = graph.reach(p.k)
    prev = None
    for r, mean in zip(path, means):
        r = int(r)
        if r < 0:
            continue
        total += float(np.log(emissions(_mean_of(mean), graph, [r], p)[0]))
        if prev is not None and not reach[prev, r]:
            return -np.inf
        prev = r
    return total
