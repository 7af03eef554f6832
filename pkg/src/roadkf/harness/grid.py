"""Grid search over fixed road variances.

All variance combinations of a method are filtered side by side on one
drive: the filter state gets a leading combination axis and road
selection is vectorized, so the full grid costs little more than a
single run.
"""

import numpy as np

from roadkf import kalman as kf
from roadkf.geo import point_segments_distance, points_segments_distance
from roadkf.harness.metrics import he95
from roadkf.roadnet import select_fov

SIGMA_PERP2 = tuple(float(v) for v in range(0, 11))
# The parallel grid runs 1..10, 100..1000 and infinity: 21 values.
SIGMA_PAR2 = (
    tuple(float(v) for v in range(1, 11))
    + tuple(float(v) for v in range(100, 1001, 100))
    + (kf.INF_VARIANCE,)
)
GRID_METHODS = ("KF+Instant", "KF+Viterbi")


def sigma_grid():
    """All (par2, perp2) pairs, ordered by perp2 then par2."""
    return [(sp, sq) for sq in SIGMA_PERP2 for sp in SIGMA_PAR2]


def run_batched(drive, graph, method, sigmas, emission, radius, cap, q=kf.ProcessNoise(), aiding_std=kf.AIDING_STD):
    """Horizontal errors (C, T) of ``method`` for each variance pair in ``sigmas``."""
    if method not in GRID_METHODS:
        raise ValueError(f"grid search supports {GRID_METHODS}, not {method!r}")
    sig = np.asarray(sigmas, dtype=np.float64)
    n_c = sig.shape[0]
    n_t = len(drive)
    errors = np.zeros((n_c, n_t))
    viterbi = method == "KF+Viterbi"
    log_eps = np.log(emission.epsilon)
    reach = graph.reach(emission.k)
    belief = np.full((n_c, graph.n), -np.inf)
    started = np.zeros(n_c, dtype=bool)
    aided = np.zeros(n_c, dtype=bool)

    est = kf.initialize(drive.epochs[0])
    mean = np.repeat(est.mean[None], n_c, axis=0)
    cov = np.repeat(est.cov[None], n_c, axis=0)
    for t, ep in enumerate(drive.epochs):
        if t > 0:
            mean, cov = kf.predict_batch(mean, cov, ep.time - drive.epochs[t - 1].time, q)
            mean, cov = kf.gnss_update_batch(mean, cov, ep)
        pos = mean[:, :2]
        centre = pos.mean(axis=0)
        spread = float(np.max(np.hypot(*(pos - centre).T)))
        near = np.flatnonzero(point_segments_distance(centre, graph.a, graph.b) <= radius + spread + 1e-6)
        dist = points_segments_distance(pos, graph.a[near], graph.b[near])
        aided |= np.sqrt(cov[:, 0, 0] + cov[:, 1, 1]) <= aiding_std
        inside = (dist <= radius) & aided[:, None]
        over = np.flatnonzero(inside.sum(axis=1) > cap)
        for c in over:
            keep = select_fov(dist[c], radius, cap, near)
            inside[c] = np.isin(near, keep)
        has = inside.any(axis=1)
        roads = np.full(n_c, -1)
        if not has.any():
            pass
        elif not viterbi:
            masked = np.where(inside, dist, np.inf)
            roads[has] = near[np.argmin(masked[has], axis=1)]
        else:
            theta = np.arctan2(mean[:, 4], mean[:, 3])
            speed = np.hypot(mean[:, 3], mean[:, 4])
            j_th = 1.0 - np.abs(np.cos(theta[:, None] - graph.heading[near][None, :]))
            j_th[speed < emission.min_speed] = 0.0
            em = np.maximum(1.0 - (emission.beta * dist + j_th) / 2.0, emission.epsilon)
            score = np.log(em)
            prev = np.flatnonzero(np.isfinite(belief).any(axis=0))
            if prev.size and started.any():
                trans = np.where(reach[np.ix_(prev, near)], 0.0, -np.inf)
                prior = np.max(belief[:, prev][:, :, None] + trans[None], axis=1)
                prior = np.where(np.isneginf(prior), log_eps, prior)
                score = np.where(started[:, None], prior + score, score)
            score = np.where(inside, score, -np.inf)
            rows = np.flatnonzero(has)
            top = score[rows].max(axis=1)
            norm = score[rows] - top[:, None]
            belief[rows] = -np.inf
            sub = belief[rows]
            sub[:, near] = norm
            belief[rows] = sub
            started[rows] = True
            roads[rows] = near[np.argmax(norm, axis=1)]
        upd = np.flatnonzero(roads >= 0)
        if upd.size:
            r = roads[upd]
            heading = graph.heading[r]
            resid = kf.road_residuals(pos[upd], graph.midpoint[r], heading, graph.length[r])
            h = np.zeros((upd.size, 2, kf.N_STATE))
            c, s = np.cos(heading), np.sin(heading)
            h[:, 0, 0], h[:, 0, 1] = c, s
            h[:, 1, 0], h[:, 1, 1] = -s, c
            m, p = kf.road_update_batch(mean[upd], cov[upd], h, resid, sig[upd])
            mean[upd], cov[upd] = m, p
        errors[:, t] = kf.horizontal_error(mean, drive.truth[t])
    return errors


def grid_search_sigma(drives, graphs, method, emission, radius, cap, q=kf.ProcessNoise(), grid=None):
    """Pick the variance pair with the lowest pooled training HE@95.

    Returns ``(best_pair, table)`` where table lists (par2, perp2, he95) for
    every evaluated combination.  Ties go to the smaller perp2, then the
    smaller par2.
    """
    if not drives:
        raise ValueError("grid search needs at least one training drive")
    pairs = sigma_grid() if grid is None else list(grid)
    errs = [run_batched(d, g, method, pairs, emission, radius, cap, q) for d, g in zip(drives, graphs)]
    pooled = np.concatenate(errs, axis=1)
    scores = np.array([he95(row) for row in pooled])
    order = sorted(range(len(pairs)), key=lambda i: (scores[i], pairs[i][1], pairs[i][0]))
    best = pairs[order[0]]
    table = [(sp, sq, float(scores[i])) for i, (sp, sq) in enumerate(pairs)]
    return best, table


__all__ = ["GRID_METHODS", "SIGMA_PAR2", "SIGMA_PERP2", "grid_search_sigma", "run_batched", "sigma_grid"]
