import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from roadkf import autodiff as ad
from roadkf import kalman as kf
from roadkf import sim
from roadkf.geo import Segment
from roadkf.harness.oracle import label_drive
from roadkf.roadnet import build_graph, field_of_view
from roadkf.tgnn import features as ft
from roadkf.tgnn.gradcheck import gradcheck, perturb_heads, random_instance
from roadkf.tgnn.model import TgnnConfig, TgnnModel, ablation_variant, make_batch, single_batch
from roadkf.tgnn.rollout import RolloutOptions, run_model
from roadkf.tgnn.train import TrainConfig, combined_loss, road_posterior, train, train_step, window_batch, sample_windows

from conftest import line_graph


def _est(pos=(5.0, 1.0), vel=(3.0, 0.5), var=4.0):
    mean = np.zeros(kf.N_STATE)
    mean[:2] = pos
    mean[3:5] = vel
    return kf.KfEstimate(mean, np.eye(kf.N_STATE) * var)


def _grid_graph():
    cfg = sim.ScenarioConfig(grid_blocks=2, block=60.0, jitter=0.0, oneway_fraction=0.5, seed=3)
    return build_graph(sim.generate_roads(cfg))


def _random_features(rng, n, config):
    a = np.triu(rng.random((n, n)) < 0.4, 1)
    return ft.Features(rng.normal(size=config.user_dim), rng.normal(size=(n, config.road_dim)), a | a.T)


# features ------------------------------------------------------------------


def test_first_epoch_prior_columns_zero():
    g = _grid_graph()
    cand = field_of_view(g, np.array([30.0, 5.0]))
    f = ft.build_features(_est((30.0, 5.0)), cand, g)
    assert f.road.shape == (cand.size, ft.road_dim(2))
    assert np.all(f.road[:, ft.PRIOR_COL :] == 0.0)
    assert_array_equal(f.adjacency, g.adjacency[np.ix_(cand, cand)])


def test_selected_candidate_prior_and_khop():
    g = line_graph(5, 20.0)
    cand = np.arange(5)
    f = ft.build_features(_est((30.0, 0.0)), cand, g, prev=(np.array([2]), np.array([1.0])))
    assert_array_equal(f.road[:, ft.PRIOR_COL], [0, 0, 1, 0, 0])
    assert_array_equal(f.road[:, ft.PRIOR_COL + 1], [0, 1, 1, 1, 0])
    assert_array_equal(f.road[:, ft.PRIOR_COL + 2], [1, 1, 1, 1, 1])


def _bfs_within(graph, src, k):
    seen, frontier = {src}, {src}
    for _ in range(k):
        frontier = {int(j) for i in frontier for j in graph.successors[i]} - seen
        seen |= frontier
    return seen


def test_khop_prior_matches_bfs_oracle(rng):
    g = _grid_graph()
    for _ in range(20):
        prev_ids = rng.choice(g.n, size=6, replace=False)
        prev_probs = rng.dirichlet(np.ones(6))
        cand = rng.choice(g.n, size=8, replace=False)
        out = ft.prior_features(cand, g, prev_ids, prev_probs, 2)
        for c_i, c in enumerate(cand):
            own = prev_probs[prev_ids == c]
            assert out[c_i, 0] == (own[0] if own.size else 0.0)
            for k in (1, 2):
                vals = [p for i, p in zip(prev_ids, prev_probs) if c in _bfs_within(g, int(i), k)]
                assert out[c_i, k] == max(vals, default=0.0)
    assert np.all((out >= 0) & (out <= 1))


def test_user_features():
    est = _est(vel=(3.0, 4.0), var=2.0)
    u = ft.user_features(est)
    assert_allclose(u[:3], [0.8, 0.6, 5.0 / ft.SPEED_SCALE], atol=1e-12)
    assert_allclose(u[3:], [2.0 / ft.VAR_SCALE, 0.0, 2.0 / ft.VAR_SCALE])


def test_feature_mask():
    m = ft.feature_mask(["distances", "prior"])
    assert m.sum() == 2 + 3
    with pytest.raises(KeyError):
        ft.feature_mask(["colour"])


# model -----------------------------------------------------------------------


def test_default_parameter_count_below_50k():
    n = TgnnModel().n_parameters()
    assert 10_000 < n < 50_000


def test_single_candidate_prob_one(rng):
    model = TgnnModel(seed=1)
    perturb_heads(model, rng)
    probs, var, _ = model.forward(single_batch(_random_features(rng, 1, model.config)))
    assert_array_equal(probs.value, [[1.0]])
    assert np.all(var.value > 0)


def test_untrained_model_uniform_unit_sigma(rng):
    model = TgnnModel(seed=4)
    for n in (1, 3, 7):
        probs, var, _ = model.forward(single_batch(_random_features(rng, n, model.config)))
        assert_allclose(probs.value, np.full((1, n), 1.0 / n), rtol=1e-15)
        assert_allclose(var.value, [[1.0, 1.0]], rtol=1e-15)


@pytest.mark.parametrize("kind", ["TGNN", "GNN", "MLP"])
def test_softmax_normalized_and_positive_sigma(rng, kind):
    model = ablation_variant(kind, seed=2)
    perturb_heads(model, rng, scale=2.0)
    batch, state, _ = random_instance(model.config, rng, steps=4, windows=3, max_cands=9)
    probs, var, _ = model.forward(batch, state=state)
    assert_allclose(probs.value.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(var.value > 0)


@pytest.mark.parametrize("kind", ["TGNN", "GNN", "MLP"])
def test_permutation_equivariance(rng, kind):
    model = ablation_variant(kind, seed=5)
    perturb_heads(model, rng)
    f = _random_features(rng, 7, model.config)
    p0, v0, _ = model.forward(single_batch(f))
    for _ in range(25):
        perm = rng.permutation(7)
        g = ft.Features(f.user, f.road[perm], f.adjacency[np.ix_(perm, perm)])
        p1, v1, _ = model.forward(single_batch(g))
        assert_allclose(p1.value[0], p0.value[0, perm], rtol=1e-12, atol=1e-15)
        assert_allclose(v1.value, v0.value, rtol=1e-12)


def test_gnn_independent_of_epoch_order(rng):
    model = ablation_variant("GNN", seed=0)
    perturb_heads(model, rng)
    feats = [_random_features(rng, 4, model.config) for _ in range(5)]
    pack = lambda fs: make_batch([f.user for f in fs], [f.road for f in fs], [f.adjacency for f in fs], len(fs), 1)
    p, v, _ = model.forward(pack(feats))
    order = [3, 1, 4, 0, 2]
    q, w, _ = model.forward(pack([feats[i] for i in order]))
    assert_allclose(q.value, p.value[order], rtol=1e-12)
    assert_allclose(w.value, v.value[order], rtol=1e-12)


def test_tgnn_carries_state_across_epochs(rng):
    model = TgnnModel(seed=0)
    perturb_heads(model, rng)
    f = _random_features(rng, 4, model.config)
    h = model.config.hidden
    state = [(np.ones((1, h)), np.ones((1, h)))] * model.config.blocks
    _, v1, out = model.forward(single_batch(f))
    _, v2, _ = model.forward(single_batch(f), state=state)
    assert len(out) == model.config.blocks
    assert np.max(np.abs(np.log(v1.value / v2.value))) > 1e-3


def test_mlp_logits_rowwise_independent(rng):
    model = ablation_variant("MLP", seed=0)
    perturb_heads(model, rng)
    f = _random_features(rng, 5, model.config)
    g = ft.Features(f.user, f.road.copy(), f.adjacency)
    g.road[2:] = rng.normal(size=(3, model.config.road_dim))
    p = model.forward(single_batch(f))[0].value[0]
    q = model.forward(single_batch(g))[0].value[0]
    # candidates 0 and 1 keep their logits, so their ratio survives the softmax
    assert not np.allclose(p[:2], q[:2])
    assert_allclose(np.log(q[0] / q[1]), np.log(p[0] / p[1]), rtol=1e-12, atol=1e-14)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        ablation_variant("RNN")


# loss ------------------------------------------------------------------------


def test_loss_zero_at_perfect_prediction():
    probs = ad.Tensor(np.array([[0.0, 1.0, 0.0]]))
    var = ad.Tensor(np.array([[1.0, 1.0]]))
    truth = np.array([[3.0, 4.0]])
    loss, parts = combined_loss(
        probs, var, [1], truth, np.eye(2)[None], np.array([0.3]), np.zeros((1, 2)), truth
    )
    assert loss.value == 0.0
    assert parts["acc"] == 1.0


def test_uniform_ce_is_log_n():
    probs = ad.Tensor(np.full((2, 4), 0.25))
    loss, parts = combined_loss(probs, ad.Tensor(np.ones((2, 2))), [0, 3], np.zeros((2, 2)), np.zeros((2, 2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2)), lam=0.0)
    assert_allclose(loss.value, np.log(4.0), rtol=1e-15)


def test_road_posterior_matches_kalman_road_update(rng):
    for _ in range(20):
        p = np.eye(kf.N_STATE)
        p[:2, :2] = rng.normal(size=(2, 2))
        p[:2, :2] = p[:2, :2] @ p[:2, :2].T + np.eye(2)
        mean = np.zeros(kf.N_STATE)
        mean[:2] = rng.normal(size=2) * 5
        est = kf.KfEstimate(mean, p)
        a = rng.normal(size=2) * 20
        th = rng.uniform(0, 2 * np.pi)
        b = a + 25.0 * np.array([np.sin(th), np.cos(th)])
        v = rng.uniform(0.5, 10, size=2)
        seg = Segment(a, b)
        obs = kf.build_road_observation(est, seg, v[0], v[1])
        ref = kf.road_update(est, obs).mean[:2]
        resid = obs.z - obs.H @ mean
        out = road_posterior(mean[None, :2], p[None, :2, :2], np.array([seg.heading]), resid[None], ad.Tensor(v[None]))
        assert_allclose(out.value[0], ref, atol=1e-9)


def test_zero_lambda_no_sigma_gradient(rng):
    config = TgnnConfig(blocks=2, hidden=8)
    model = TgnnModel(config, seed=0)
    perturb_heads(model, rng)
    batch, state, tgt = random_instance(config, rng)
    with ad.Tape() as tape:
        probs, var, _ = model.forward(batch, training=True, state=state, update_stats=False)
        loss, _ = combined_loss(probs, var, tgt["labels"], tgt["mean"], tgt["cov"], tgt["heading"], tgt["resid"], tgt["truth"], lam=0.0)
    grads = tape.backward(loss, [model.params["sigma.w"], model.params["sigma.b"]])
    for p in (model.params["sigma.w"], model.params["sigma.b"]):
        assert np.all(grads.get(p, np.zeros_like(p.value)) == 0.0)


@pytest.mark.parametrize("kind", ["TGNN", "MLP"])
def test_full_model_gradcheck(kind):
    errs = gradcheck(seed=3, kind=kind)
    assert max(errs.values()) < 1e-4, errs


# training --------------------------------------------------------------------


@pytest.fixture(scope="module")
def open_drive():
    cfg = sim.open_sky(network="parallel", parallel_count=2, parallel_separation=80.0, parallel_length=400.0, duration=60.0, seed=1)
    graph = build_graph(sim.generate_roads(cfg))
    drive = sim.generate_drive(graph, cfg, 0)
    return graph, drive, label_drive(drive, graph)


def test_training_separable_scenario(open_drive):
    graph, drive, labels = open_drive
    model = TgnnModel(TgnnConfig(blocks=2, hidden=16), seed=0)
    cfg = TrainConfig(iterations=300, refresh_every=100, rollout_len=16, segments_per_drive=4, seed=0)
    _, _, hist = train(model, [drive], [graph], [labels], cfg)
    steps = [h for h in hist if h["kind"] == "step"]
    assert np.mean([h["acc"] for h in steps[-50:]]) > 0.99
    out = run_model(model, [drive], [graph])[0]
    ok = out.selected >= 0
    assert np.mean(out.selected[ok] == drive.segment[ok]) > 0.95


def test_training_bit_reproducible(open_drive):
    from roadkf.io import checkpoint_bytes

    graph, drive, labels = open_drive
    cfg = TrainConfig(iterations=20, refresh_every=10, rollout_len=8, segments_per_drive=2, seed=4)
    blobs = []
    for _ in range(2):
        model = TgnnModel(TgnnConfig(blocks=2, hidden=8), seed=4)
        _, opt, _ = train(model, [drive], [graph], [labels], cfg)
        blobs.append(checkpoint_bytes(model, opt))
    assert blobs[0] == blobs[1]


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        train(TgnnModel(), [], [], [])


def test_window_batch_teacher_targets(open_drive):
    graph, drive, labels = open_drive
    model = TgnnModel(TgnnConfig(blocks=2, hidden=8), seed=0)
    outs = run_model(model, [drive], [graph], RolloutOptions(mode="teacher"), labels=[labels], record=True)
    picks = sample_windows(outs, 3, 5, np.random.default_rng(0))
    batch, state, tgt = window_batch(model, outs, picks, 5)
    assert batch.steps == 5 and batch.windows == 3
    ok = np.asarray(tgt["label"]) >= 0
    assert ok.mean() > 0.9
    opt = {}
    parts = train_step(model, batch, state, tgt, TrainConfig(), opt)
    assert np.isfinite(parts["loss"])
