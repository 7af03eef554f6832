"""Per-drive positioning pipelines for every method."""

from dataclasses import dataclass, field

import numpy as np

from roadkf import kalman as kf
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, field_of_view
from roadkf.selection import EmissionParams, OnlineViterbi, instant_select

METHODS = ("LS", "KF", "KF+Instant", "KF+Viterbi", "KF+Oracle", "KF+TGNN", "KF+GNN", "KF+MLP")
LEARNED = {"KF+TGNN": "TGNN", "KF+GNN": "GNN", "KF+MLP": "MLP"}


@dataclass(frozen=True)
class MethodConfig:
    method: str
    sigma: object = (1.0, 1.0)  # (par2, perp2) in m^2, or "learned"
    emission: EmissionParams = EmissionParams()
    radius: float = DEFAULT_FOV_RADIUS
    cap: int = DEFAULT_FOV_CAP
    groups: tuple = None  # feature subset for learned methods
    process_noise: kf.ProcessNoise = field(default_factory=kf.ProcessNoise)
    aiding_std: float = kf.AIDING_STD  # road updates wait until the filter is this certain

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.sigma == "learned":
            if self.method not in LEARNED:
                raise ValueError("learned road variances need a network-based method")
        else:
            sp, sq = (float(v) for v in self.sigma)
            if sp < 0 or sq < 0:
                raise ValueError("road variances must be non-negative")


@dataclass
class PipelineResult:
    means: np.ndarray  # (T, 8); LS fills position and clock bias only
    selected: np.ndarray  # (T,) road used in the update, -1 if none
    errors: np.ndarray  # (T,) horizontal error in m


def run_ls(drive):
    n = len(drive)
    means = np.full((n, kf.N_STATE), np.nan)
    x0 = None
    for t, ep in enumerate(drive.epochs):
        pos, bias = kf.least_squares_fix(ep, x0)
        means[t, :3] = pos
        means[t, kf.BIAS] = bias
        x0 = np.concatenate([pos, [bias]])
    return PipelineResult(means, np.full(n, -1, dtype=np.int64), kf.horizontal_error(means, drive.truth))


def gnss_only_means(drive, q=kf.ProcessNoise()):
    """Filter means after each GNSS update, without road updates."""
    return run_pipeline(drive, None, MethodConfig("KF", process_noise=q)).means


def run_pipeline(drive, graph, method, labels=None, model=None):
    """Filter ``drive`` with the road selection of ``method``.

    Each epoch: predict, GNSS update, then select a road among the
    field-of-view candidates and apply the road update when one is chosen.
    """
    if method.method == "LS":
        return run_ls(drive)
    if method.method in LEARNED:
        from roadkf.tgnn.rollout import RolloutOptions, run_model

        if model is None:
            raise ValueError(f"{method.method} needs a trained model")
        opts = RolloutOptions(
            sigma=method.sigma,
            emission=method.emission,
            radius=method.radius,
            cap=method.cap,
            groups=method.groups,
            process_noise=method.process_noise,
            aiding_std=method.aiding_std,
        )
        r = run_model(model, [drive], [graph], opts)[0]
        return PipelineResult(r.means, r.selected, r.errors)
    if method.method == "KF+Oracle":
        if labels is None:
            raise ValueError("KF+Oracle needs oracle labels")
        if len(labels) != len(drive):
            raise ValueError(f"label count {len(labels)} does not match drive length {len(drive)}")
        sigma = (0.0, 0.0)
    else:
        sigma = tuple(float(v) for v in method.sigma)

    n = len(drive)
    means = np.zeros((n, kf.N_STATE))
    selected = np.full(n, -1, dtype=np.int64)
    viterbi = OnlineViterbi(graph, method.emission) if method.method == "KF+Viterbi" else None
    est = None
    aided = False
    for t, ep in enumerate(drive.epochs):
        if est is None:
            est = kf.initialize(ep)
        else:
            est = kf.predict(est, ep.time - drive.epochs[t - 1].time, method.process_noise)
            est = kf.gnss_update(est, ep)
        road = None
        aided = aided or kf.converged(est.cov, method.aiding_std)
        if not aided:
            pass
        elif method.method == "KF+Oracle":
            road = int(labels[t]) if labels[t] >= 0 else None
        elif method.method != "KF":
            cand = field_of_view(graph, est.mean, method.radius, method.cap)
            if viterbi is not None:
                road = viterbi.step(cand, est)
            else:
                road = instant_select(cand, est, graph)
        if road is not None:
            obs = kf.build_road_observation(est, graph.segments[road], *sigma)
            est = kf.road_update(est, obs)
            selected[t] = road
        means[t] = est.mean
    return PipelineResult(means, selected, kf.horizontal_error(means, drive.truth))
