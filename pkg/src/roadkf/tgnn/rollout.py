"""Closed-loop filtering with the network choosing the road and its variances.

Several drives run in lockstep so that every epoch needs a single network
call.  The same loop serves evaluation and the rollouts that feed training.
"""

from dataclasses import dataclass, field

import numpy as np

from roadkf import kalman as kf
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, field_of_view
from roadkf.selection import EmissionParams, OnlineViterbi
from roadkf.tgnn.features import build_features, feature_mask
from roadkf.tgnn.model import adjacency_coo, make_batch

MODES = ("argmax", "teacher")
PRIORS = ("model", "viterbi")


@dataclass(frozen=True)
class RolloutOptions:
    mode: str = "argmax"  # road used in the update: model argmax or oracle label
    sigma: object = "learned"  # "learned" or a fixed (par2, perp2) pair
    prior: str = "model"  # previous-step probabilities from the network or classical Viterbi
    emission: EmissionParams = EmissionParams()
    radius: float = DEFAULT_FOV_RADIUS
    cap: int = DEFAULT_FOV_CAP
    groups: tuple = None  # feature groups kept; None keeps all
    process_noise: kf.ProcessNoise = kf.ProcessNoise()
    aiding_std: float = kf.AIDING_STD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown rollout mode {self.mode!r}")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior source {self.prior!r}")
        if self.sigma != "learned" and len(tuple(self.sigma)) != 2:
            raise ValueError("sigma must be 'learned' or a (par2, perp2) pair")


@dataclass
class DriveRollout:
    """Per-epoch outputs of one drive; training records are filled on request."""

    means: np.ndarray  # (T, 8) estimate after all updates
    selected: np.ndarray  # (T,) segment used in the road update, -1 if none
    variances: np.ndarray  # (T, 2) road variances used, nan if none
    errors: np.ndarray  # (T,) horizontal error
    # training records (epoch-aligned)
    user: list = field(default_factory=list)
    road: list = field(default_factory=list)
    adj: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    prior_mean: np.ndarray = None  # (T, 2) horizontal mean before the road update
    prior_cov: np.ndarray = None  # (T, 2, 2) horizontal covariance before the road update
    cand_heading: list = field(default_factory=list)
    cand_resid: list = field(default_factory=list)
    label_local: np.ndarray = None  # (T,) label index among candidates, -1 if absent
    label_heading: np.ndarray = None  # (T,) heading of the labeled road, nan if unlabeled
    label_resid: np.ndarray = None  # (T, 2)
    truth: np.ndarray = None  # (T, 2)
    state: np.ndarray = None  # (T, blocks, 2, hidden) LSTM state entering each epoch


def _gnss_step(est, prev_time, epoch, q):
    if est is None:
        return kf.initialize(epoch)
    return kf.gnss_update(kf.predict(est, epoch.time - prev_time, q), epoch)


def run_model(model, drives, graphs, opts=RolloutOptions(), labels=None, record=False, starts=None, lengths=None, init=None):
    """Run the network-in-the-loop filter over ``drives`` (graphs[i] belongs to drives[i]).

    By default each drive runs from its first epoch to its end.  ``starts``
    and ``lengths`` restrict run i to epochs starts[i] .. starts[i]+lengths[i]-1
    and ``init`` supplies the filter estimate at the first of them (already
    GNSS-updated); the same drive may appear several times.  ``labels``
    (per-drive arrays) are required in teacher mode and when recording.
    Returns one DriveRollout per run, indexed relative to its start.
    """
    n_drives = len(drives)
    if len(graphs) != n_drives:
        raise ValueError("one graph per drive is required")
    if (opts.mode == "teacher" or record) and labels is None:
        raise ValueError("labels are required for teacher forcing and for training records")
    cfg = model.config
    mask = None if opts.groups is None else feature_mask(opts.groups, opts.emission.k)
    starts = [0] * n_drives if starts is None else [int(s) for s in starts]
    if lengths is None:
        lengths = [len(d) - s for d, s in zip(drives, starts)]
    lengths = [int(n) for n in lengths]
    for d, s, n in zip(drives, starts, lengths):
        if s < 0 or n < 1 or s + n > len(d):
            raise ValueError(f"run [{s}, {s + n}) does not fit a drive of {len(d)} epochs")
    t_max = max(lengths)
    outs = []
    for d, s, n in zip(drives, starts, lengths):
        r = DriveRollout(
            means=np.zeros((n, kf.N_STATE)),
            selected=np.full(n, -1, dtype=np.int64),
            variances=np.full((n, 2), np.nan),
            errors=np.zeros(n),
        )
        if record:
            r.prior_mean = np.zeros((n, 2))
            r.prior_cov = np.zeros((n, 2, 2))
            r.label_local = np.full(n, -1, dtype=np.int64)
            r.label_heading = np.full(n, np.nan)
            r.label_resid = np.zeros((n, 2))
            r.truth = d.truth[s : s + n, :2].copy()
            r.state = np.zeros((n, cfg.blocks, 2, cfg.hidden))
        outs.append(r)
    ests = [None] * n_drives if init is None else list(init)
    aided = [False] * n_drives
    prev = [None] * n_drives
    viterbi = [OnlineViterbi(g, opts.emission) for g in graphs] if opts.prior == "viterbi" else None
    stateful = cfg.kind == "TGNN"
    h_state = np.zeros((cfg.blocks, n_drives, cfg.hidden))
    c_state = np.zeros((cfg.blocks, n_drives, cfg.hidden))

    for t in range(t_max):
        active = [i for i in range(n_drives) if t < lengths[i]]
        feats, cands = [], []
        for i in active:
            d, g = drives[i], graphs[i]
            e = starts[i] + t
            if t > 0 or init is None:
                prev_time = d.epochs[e - 1].time if t > 0 else None
                ests[i] = _gnss_step(ests[i], prev_time, d.epochs[e], opts.process_noise)
            aided[i] = aided[i] or kf.converged(ests[i].cov, opts.aiding_std)
            cand = field_of_view(g, ests[i].mean, opts.radius, opts.cap) if aided[i] else np.zeros(0, dtype=np.int64)
            p_prev = prev[i]
            if viterbi is not None:
                pp = viterbi[i].prior_probabilities()
                p_prev = (np.array(list(pp.keys()), dtype=np.int64), np.array(list(pp.values()))) if pp else None
            f = build_features(ests[i], cand, g, p_prev, opts.emission, mask)
            feats.append(f)
            cands.append(cand)
        adjs = [adjacency_coo(f.adjacency) for f in feats]
        batch = make_batch([f.user for f in feats], [f.road for f in feats], adjs, 1, len(active))
        state = None
        if stateful:
            state = [(h_state[l][active], c_state[l][active]) for l in range(cfg.blocks)]
        probs, var, new_state = model.forward(batch, training=False, state=state)
        probs, var = probs.value, var.value

        for k, i in enumerate(active):
            d, g, r = drives[i], graphs[i], outs[i]
            cand, est = cands[k], ests[i]
            n = cand.size
            p_i = probs[k, :n]
            if record:
                r.user.append(feats[k].user)
                r.road.append(feats[k].road)
                r.adj.append(adjs[k])
                r.candidates.append(cand)
                r.prior_mean[t] = est.mean[:2]
                r.prior_cov[t] = est.cov[:2, :2]
                r.cand_heading.append(g.heading[cand])
                r.cand_resid.append(kf.road_residuals(est.mean[:2], g.midpoint[cand], g.heading[cand], g.length[cand]))
                lab = int(labels[i][starts[i] + t])
                if lab >= 0 and aided[i]:
                    hit = np.flatnonzero(cand == lab)
                    r.label_local[t] = int(hit[0]) if hit.size else -1
                    r.label_heading[t] = g.heading[lab]
                    r.label_resid[t] = kf.road_residual(est.mean, g.midpoint[lab], g.heading[lab], g.length[lab])
                if stateful:
                    for l in range(cfg.blocks):
                        r.state[t, l, 0] = h_state[l][i]
                        r.state[t, l, 1] = c_state[l][i]
            if viterbi is not None:
                viterbi[i].step(cand, est)
            if opts.mode == "teacher":
                lab = int(labels[i][starts[i] + t])
                road = lab if lab >= 0 and aided[i] else None
            else:
                road = int(cand[int(np.argmax(p_i))]) if n else None
            if n:
                prev[i] = (cand, p_i.copy())
            if road is not None:
                v = var[k] if opts.sigma == "learned" else np.asarray(opts.sigma, dtype=np.float64)
                obs = kf.build_road_observation(est, g.segments[road], v[0], v[1])
                est = kf.road_update(est, obs)
                ests[i] = est
                r.selected[t] = road
                r.variances[t] = v
            r.means[t] = est.mean
            r.errors[t] = kf.horizontal_error(est.mean, d.truth[starts[i] + t])
        if stateful:
            for l in range(cfg.blocks):
                h_state[l][active] = new_state[l][0]
                c_state[l][active] = new_state[l][1]

    return outs
