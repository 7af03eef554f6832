"""Losses and the training loop.

Training alternates between two phases.  A rollout runs the current
network inside the filter over every training drive and records, per
epoch, the network inputs, the filter prior entering the road update and
the LSTM state.  Optimization then samples short windows from those
records, replays the network over each window starting from the recorded
LSTM state and takes one Adam step per batch of windows.  Rollouts are
refreshed periodically so that the recorded priors and states follow the
network as it learns.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np

from roadkf import autodiff as ad
from roadkf.harness.metrics import percentile
from roadkf.harness.oracle import filter_pass
from roadkf.tgnn.model import make_batch
from roadkf.tgnn.rollout import MODES, PRIORS, RolloutOptions, run_model

LAMBDA = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch: int = 8
    window: int = 4  # epochs per window
    lr: float = 1e-3
    weight_decay: float = 1e-3
    decoupled: bool = True
    lam: float = LAMBDA
    refresh_every: int = 1000  # iterations between rollouts; 0 rolls out once
    rollout_len: int = 32  # epochs per rollout segment
    segments_per_drive: int = 12  # rollout segments drawn per drive and refresh
    mode: str = "teacher"  # road used in the KF update of rollouts: oracle label or model argmax
    loss_road: str = "argmax"  # road whose posterior enters the position loss
    prior: str = "model"  # previous-step probabilities fed back as features
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.window < 1:
            raise ValueError("iterations must be >= 0, batch and window >= 1")
        if self.rollout_len < 1 or self.segments_per_drive < 1:
            raise ValueError("rollout_len and segments_per_drive must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.loss_road not in MODES:
            raise ValueError(f"unknown loss road {self.loss_road!r}")
        if self.prior not in PRIORS:
            raise ValueError(f"unknown prior source {self.prior!r}")

    def to_dict(self):
        return asdict(self)


def rotations(heading):
    """Road-frame rotations (G, 2, 2) for headings (G,)."""
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


def road_posterior(prior_mean, prior_cov, heading, resid, variances):
    """Horizontal mean after the road update, differentiable in ``variances``.

    x+ = x + P R^T (R P R^T + diag(v))^-1 r, with P the horizontal prior
    covariance, R the road rotation and r the road residual.  The prior is
    a constant.  Returns a (G, 2) tensor.
    """
    rot = rotations(np.asarray(heading, dtype=np.float64))
    pr = np.asarray(prior_cov) @ np.swapaxes(rot, 1, 2)  # P R^T
    s0 = rot @ pr
    s = ad.add(s0, ad.mul(ad.reshape(variances, (-1, 2, 1)), np.eye(2)[None]))
    y = ad.solve2x2(s, np.asarray(resid, dtype=np.float64))
    delta = ad.sum(ad.mul(ad.reshape(y, (-1, 1, 2)), pr), axis=2)
    return ad.add(delta, np.asarray(prior_mean, dtype=np.float64))


def combined_loss(probs, variances, labels, prior_mean, prior_cov, heading, resid, truth, lam=LAMBDA, mse_rows=None):
    """CE + lam * MSE over a batch of epochs.

    ``labels`` holds candidate indices (-1 where the label is not among the
    candidates; such rows are skipped in the CE term).  ``mse_rows`` selects
    the epochs that contribute to the position term (default: all).
    Returns ``(loss, parts)`` with parts = dict(ce, mse, acc, n_ce, n_mse).
    """
    labels = np.asarray(labels, dtype=np.int64)
    ce_rows = np.flatnonzero(labels >= 0)
    mse_rows = np.arange(labels.size) if mse_rows is None else np.asarray(mse_rows, dtype=np.int64)
    terms = []
    parts = {"ce": 0.0, "mse": 0.0, "acc": float("nan"), "n_ce": int(ce_rows.size), "n_mse": int(mse_rows.size)}
    if ce_rows.size:
        picked = ad.take_rows(probs, ce_rows)
        ce = ad.mean(ad.cross_entropy(picked, labels[ce_rows]))
        terms.append(ce)
        parts["ce"] = float(ce.value)
        pv = probs.value[ce_rows]
        parts["acc"] = float(np.mean(np.argmax(pv, axis=1) == labels[ce_rows]))
    if mse_rows.size and lam:
        post = road_posterior(
            np.asarray(prior_mean)[mse_rows],
            np.asarray(prior_cov)[mse_rows],
            np.asarray(heading)[mse_rows],
            np.asarray(resid)[mse_rows],
            ad.take_rows(variances, mse_rows),
        )
        err = ad.sub(post, np.asarray(truth)[mse_rows])
        mse = ad.mean(ad.sum(ad.square(err), axis=1))
        terms.append(ad.mul(mse, lam))
        parts["mse"] = float(mse.value)
    if not terms:
        return None, parts
    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, parts


def sample_windows(rollouts, count, window, rng):
    """Draw ``count`` (drive, start) pairs; drives uniformly, starts uniformly."""
    picks = []
    for _ in range(count):
        i = int(rng.integers(len(rollouts)))
        n = len(rollouts[i].user)
        w = min(window, n)
        s = int(rng.integers(n - w + 1))
        picks.append((i, s))
    return picks


def window_batch(model, rollouts, picks, window, mode="teacher"):
    """GraphBatch and loss targets for the sampled windows (graph g = t * B + b)."""
    steps = min(window, min(len(rollouts[i].user) for i, _ in picks))
    users, roads, adjs = [], [], []
    tgt = {k: [] for k in ("label", "mean", "cov", "heading", "resid", "truth", "cand_heading", "cand_resid")}
    for t in range(steps):
        for i, s in picks:
            r = rollouts[i]
            k = s + t
            users.append(r.user[k])
            roads.append(r.road[k])
            adjs.append(r.adj[k])
            tgt["label"].append(r.label_local[k])
            tgt["mean"].append(r.prior_mean[k])
            tgt["cov"].append(r.prior_cov[k])
            tgt["heading"].append(r.label_heading[k])
            tgt["resid"].append(r.label_resid[k])
            tgt["truth"].append(r.truth[k])
            tgt["cand_heading"].append(r.cand_heading[k])
            tgt["cand_resid"].append(r.cand_resid[k])
    batch = make_batch(users, roads, adjs, steps, len(picks))
    state = None
    if model.config.kind == "TGNN":
        init = np.stack([rollouts[i].state[s] for i, s in picks])  # (B, blocks, 2, H)
        state = [(init[:, l, 0], init[:, l, 1]) for l in range(model.config.blocks)]
    return batch, state, tgt


def _mse_targets(tgt, probs, mode, has_label):
    """Heading, residual and row set of the road used in the update."""
    if mode == "teacher":
        return np.asarray(tgt["heading"]), np.asarray(tgt["resid"]), np.flatnonzero(has_label)
    g = len(tgt["cand_heading"])
    heading = np.zeros(g)
    resid = np.zeros((g, 2))
    rows = []
    for k in range(g):
        n = tgt["cand_heading"][k].size
        if n == 0:
            continue
        j = int(np.argmax(probs[k, :n]))
        heading[k] = tgt["cand_heading"][k][j]
        resid[k] = tgt["cand_resid"][k][j]
        rows.append(k)
    return heading, resid, np.array(rows, dtype=np.int64)


def train_step(model, batch, state, tgt, cfg, opt_state):
    """Forward, loss, backward and one Adam step.  Returns the loss parts."""
    params = model.params
    with ad.Tape() as tape:
        probs, var, _ = model.forward(batch, training=True, state=state)
        labels = np.asarray(tgt["label"], dtype=np.int64)
        has_label = np.isfinite(np.asarray(tgt["heading"]))
        heading, resid, rows = _mse_targets(tgt, probs.value, cfg.loss_road, has_label)
        loss, parts = combined_loss(
            probs, var, labels, tgt["mean"], tgt["cov"], heading, resid, tgt["truth"], cfg.lam, rows
        )
    if loss is None:
        parts["loss"] = 0.0
        return parts
    wrt = list(params.values())
    grads = tape.backward(loss, wrt)
    named = {name: grads[p] for name, p in params.items() if p in grads}
    ad.adam_step(params, named, opt_state, lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=cfg.decoupled)
    parts["loss"] = float(loss.value)
    return parts


def rollout_options(cfg, base=None):
    base = RolloutOptions() if base is None else base
    return replace(base, mode=cfg.mode, prior=cfg.prior, sigma="learned")


def train(model, drives, graphs, labels, cfg=TrainConfig(), options=None, val=None, log=None):
    """Train ``model`` in place on labeled drives.

    Each refresh draws rollout segments at random drive offsets; a segment
    starts from the GNSS-only filter estimate at its offset and a zero LSTM
    state, so training sees the road-free states the filter must recover
    from as well as the converged road-aided ones.

    ``val`` is an optional ``(drives, graphs)`` pair evaluated at every
    rollout refresh.  ``log`` receives one dict per iteration and one per
    refresh.  Returns ``(model, opt_state, history)``.
    """
    if not drives:
        raise ValueError("training needs at least one labeled drive")
    if not (len(drives) == len(graphs) == len(labels)):
        raise ValueError("drives, graphs and labels must have equal length")
    opts = rollout_options(cfg, options)
    rng = np.random.default_rng(cfg.seed)
    opt_state = {}
    history = []

    def emit(rec):
        history.append(rec)
        if log is not None:
            log(rec)

    gnss_only = [filter_pass(d)[0] for d in drives]

    def refresh(it):
        seg_rng = np.random.default_rng([cfg.seed, it])
        idx, starts, lengths = [], [], []
        for i, d in enumerate(drives):
            n = min(cfg.rollout_len, len(d))
            for s in seg_rng.integers(0, len(d) - n + 1, size=cfg.segments_per_drive):
                idx.append(i)
                starts.append(int(s))
                lengths.append(n)
        outs = run_model(
            model,
            [drives[i] for i in idx],
            [graphs[i] for i in idx],
            opts,
            labels=[labels[i] for i in idx],
            record=True,
            starts=starts,
            lengths=lengths,
            init=[gnss_only[i][s] for i, s in zip(idx, starts)],
        )
        errs = np.concatenate([o.errors for o in outs])
        rec = {"kind": "rollout", "iteration": it, "train_he50_m": percentile(errs, 50), "train_he95_m": percentile(errs, 95)}
        if val is not None:
            vouts = run_model(model, val[0], val[1], replace(opts, mode="argmax"))
            verrs = np.concatenate([o.errors for o in vouts])
            rec["val_he50_m"] = percentile(verrs, 50)
            rec["val_he95_m"] = percentile(verrs, 95)
        emit(rec)
        return outs

    rollouts = refresh(0)
    for it in range(1, cfg.iterations + 1):
        picks = sample_windows(rollouts, cfg.batch, cfg.window, rng)
        batch, state, tgt = window_batch(model, rollouts, picks, cfg.window, cfg.mode)
        parts = train_step(model, batch, state, tgt, cfg, opt_state)
        emit({"kind": "step", "iteration": it, **parts})
        if cfg.refresh_every and it % cfg.refresh_every == 0 and it < cfg.iterations:
            rollouts = refresh(it)
    return model, opt_state, history
