"""Full-model gradient check against central finite differences.

A small network runs on a random packed batch; the loss is the combined
selection and position loss, with the position term taken after the road
update so the check covers the whole differentiable chain.
"""

import numpy as np

from roadkf import autodiff as ad
from roadkf.tgnn.model import TgnnConfig, TgnnModel, make_batch
from roadkf.tgnn.train import combined_loss


def random_instance(config, rng, steps=3, windows=2, max_cands=5):
    """Random GraphBatch, initial LSTM state and loss targets."""
    g = steps * windows
    users = rng.normal(size=(g, config.user_dim))
    counts = rng.integers(1, max_cands + 1, size=g)
    roads, adjs = [], []
    for n in counts:
        roads.append(rng.normal(size=(n, config.road_dim)))
        a = rng.random((n, n)) < 0.5
        a = np.triu(a, 1)
        adjs.append(a | a.T)
    batch = make_batch(list(users), roads, adjs, steps, windows)
    state = None
    if config.kind == "TGNN":
        state = [(rng.normal(size=(windows, config.hidden)) * 0.5, rng.normal(size=(windows, config.hidden)) * 0.5) for _ in range(config.blocks)]
    a = rng.normal(size=(g, 2, 2)) * 3.0
    tgt = {
        "labels": np.array([rng.integers(n) for n in counts]),
        "mean": rng.normal(size=(g, 2)) * 5.0,
        "cov": a @ np.swapaxes(a, 1, 2) + np.eye(2),
        "heading": rng.uniform(0.0, 2 * np.pi, g),
        "resid": rng.normal(size=(g, 2)) * 5.0,
        "truth": rng.normal(size=(g, 2)) * 5.0,
    }
    return batch, state, tgt


def instance_loss(model, batch, state, tgt, lam=0.01):
    probs, var, _ = model.forward(batch, training=True, state=state, update_stats=False)
    loss, _ = combined_loss(probs, var, tgt["labels"], tgt["mean"], tgt["cov"], tgt["heading"], tgt["resid"], tgt["truth"], lam)
    return loss


def perturb_heads(model, rng, scale=0.3):
    """Give the zero-initialized output heads random values so their paths carry gradient."""
    for name in ("out.w", "out.b", "sigma.w", "sigma.b"):
        p = model.params[name]
        p.value = rng.normal(size=p.value.shape) * scale


def gradcheck(seed=0, blocks=2, hidden=8, kind="TGNN", eps=1e-5, floor=1e-6):
    """Max elementwise relative error per parameter on one random instance.

    Relative error is |a - n| / max(|a|, |n|, floor) for analytic a and
    numeric n.  Returns ``{name: error}``.
    """
    rng = np.random.default_rng(seed)
    config = TgnnConfig(kind=kind, blocks=blocks, hidden=hidden)
    model = TgnnModel(config, seed=seed)
    perturb_heads(model, rng)
    batch, state, tgt = random_instance(config, rng)
    with ad.Tape() as tape:
        loss = instance_loss(model, batch, state, tgt)
    grads = tape.backward(loss, list(model.params.values()))
    out = {}
    for name, p in model.params.items():
        num = ad.numeric_gradient(lambda: instance_loss(model, batch, state, tgt).value, p, eps)
        ana = grads.get(p, np.zeros_like(p.value))
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        out[name] = float(np.max(np.abs(ana - num) / denom))
    return out


def run(instances=20, seed=0, **kwargs):
    """Worst relative error of every parameter over ``instances`` random instances."""
    worst = {}
    for i in range(instances):
        for name, err in gradcheck(seed=seed * 1000 + i, **kwargs).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
