import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from roadkf import kalman as kf
from roadkf import sim
from roadkf.harness import evaluate as ev
from roadkf.harness.grid import SIGMA_PAR2, SIGMA_PERP2, grid_search_sigma, run_batched, sigma_grid
from roadkf.harness.metrics import cdf, he50, he95, mean_std, percentile
from roadkf.harness.oracle import label_accuracy, label_drive
from roadkf.harness.pipeline import MethodConfig, run_pipeline
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, build_graph
from roadkf.selection import EmissionParams
from roadkf.tgnn.model import TgnnConfig
from roadkf.tgnn.train import TrainConfig

from conftest import line_graph

FOV = (EmissionParams(), DEFAULT_FOV_RADIUS, DEFAULT_FOV_CAP)


# metrics ---------------------------------------------------------------------


def _sorted_percentile(values, q):
    # independent oracle: walk the order statistics
    x = sorted(float(v) for v in values)
    rank = (len(x) - 1) * q / 100.0
    i = int(rank)
    if i + 1 >= len(x):
        return x[-1]
    return x[i] * (1 - (rank - i)) + x[i + 1] * (rank - i)


def test_percentiles_match_sorted_oracle(rng):
    for n in (1, 2, 7, 100, 1001):
        e = rng.exponential(5.0, size=n)
        assert abs(he50(e) - _sorted_percentile(e, 50)) < 1e-9
        assert abs(he95(e) - _sorted_percentile(e, 95)) < 1e-9
    assert percentile([1.0, 2.0, 3.0, 4.0], 50) == 2.5
    assert he95([0.0, 10.0]) == 9.5
    with pytest.raises(ValueError):
        he50([])


def test_cdf_monotone_reaches_one(rng):
    x, y = cdf(rng.normal(size=50) ** 2)
    assert np.all(np.diff(x) >= 0) and np.all(np.diff(y) > 0)
    assert y[-1] == 1.0


def test_mean_std():
    assert mean_std([2.0]) == (2.0, 0.0)
    assert_allclose(mean_std([1.0, 3.0]), (2.0, 1.0))


# pipeline --------------------------------------------------------------------


def _quiet(**kw):
    return sim.ScenarioConfig(range_sigma=1e-4, rate_sigma=1e-5, p_mp=0.0, clock_bias_noise=0.0, clock_drift_noise=0.0, **kw)


def test_kf_noise_free_drive():
    g = line_graph(30, 25.0)
    d = sim.generate_drive(g, _quiet(duration=60.0), 0)
    assert he95(run_pipeline(d, g, MethodConfig("KF")).errors) < 1e-3
    assert he95(run_pipeline(d, None, MethodConfig("LS")).errors) < 1e-3


@pytest.fixture(scope="module")
def urban_fold():
    return ev.make_region(0, drives=2, duration=300.0)


def test_oracle_beats_kf_in_urban(urban_fold):
    f = urban_fold
    kf_err = np.concatenate([run_pipeline(d, f.graph, MethodConfig("KF")).errors for d in f.drives])
    orc = np.concatenate([run_pipeline(d, f.graph, MethodConfig("KF+Oracle"), labels=l).errors for d, l in zip(f.drives, f.labels)])
    assert he95(orc) < he95(kf_err)


def test_oracle_needs_labels(urban_fold):
    d = urban_fold.drives[0]
    with pytest.raises(ValueError, match="labels"):
        run_pipeline(d, urban_fold.graph, MethodConfig("KF+Oracle"))
    with pytest.raises(ValueError, match="model"):
        run_pipeline(d, urban_fold.graph, MethodConfig("KF+TGNN", sigma="learned"))


def test_method_config_validation():
    with pytest.raises(ValueError):
        MethodConfig("KF+Magic")
    with pytest.raises(ValueError):
        MethodConfig("KF+Viterbi", sigma="learned")
    with pytest.raises(ValueError):
        MethodConfig("KF+Viterbi", sigma=(-1.0, 0.0))


def test_batched_grid_matches_scalar_pipeline(urban_fold):
    d = urban_fold.drives[1]
    pairs = [(1.0, 0.0), (100.0, 4.0), (kf.INF_VARIANCE, 10.0)]
    for method in ("KF+Instant", "KF+Viterbi"):
        table = run_batched(d, urban_fold.graph, method, pairs, *FOV)
        for row, pair in zip(table, pairs):
            ref = run_pipeline(d, urban_fold.graph, MethodConfig(method, sigma=pair)).errors
            assert_allclose(row, ref, atol=1e-6)


# oracle labels -----------------------------------------------------------------


def test_oracle_labels_mostly_correct(urban_fold):
    acc = np.mean([label_accuracy(l, d.segment) for d, l in zip(urban_fold.drives, urban_fold.labels)])
    assert acc > 0.85
    again = label_drive(urban_fold.drives[0], urban_fold.graph)
    assert_array_equal(again, urban_fold.labels[0])


# grid search -----------------------------------------------------------------


def test_grid_has_231_combinations():
    g = sigma_grid()
    assert len(g) == 231 == len(SIGMA_PAR2) * len(SIGMA_PERP2)
    assert len(set(g)) == 231
    assert SIGMA_PERP2 == tuple(float(v) for v in range(11))
    assert kf.INF_VARIANCE in SIGMA_PAR2


def test_exact_road_huge_noise_selects_zero_perp():
    g = line_graph(40, 25.0)
    cfg = sim.ScenarioConfig(range_sigma=30.0, p_mp=0.0, duration=120.0)
    drives = [sim.generate_drive(g, cfg, i) for i in range(2)]
    best, table = grid_search_sigma(drives, [g, g], "KF+Instant", *FOV)
    assert len(table) == 231
    assert best[1] == 0.0


def test_decoy_parallel_roads_select_positive_perp():
    cfg = sim.urban(network="parallel", parallel_count=3, parallel_separation=8.0, parallel_length=1500.0, duration=120.0, mp_bias_low=20.0)
    g = build_graph(sim.generate_roads(cfg))
    drives = [sim.generate_drive(g, cfg, i) for i in range(2)]
    best, _ = grid_search_sigma(drives, [g, g], "KF+Instant", *FOV)
    assert best[1] > 0.0


def test_grid_tie_break_prefers_small_variances():
    # roads far outside the field of view: no road update, every pair ties
    from roadkf.roadnet import RawRoad

    g = line_graph(10, 25.0)
    far = build_graph([RawRoad((5000.0, 5000.0), (5025.0, 5000.0))])
    d = sim.generate_drive(g, _quiet(duration=20.0), 0)
    grid = [(5.0, 1.0), (9.0, 2.0), (3.0, 1.0), (1.0, 2.0)]
    best, table = grid_search_sigma([d], [far], "KF+Instant", *FOV, grid=grid)
    assert len({s for *_, s in table}) == 1
    assert best == (3.0, 1.0)


# evaluation ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_folds():
    return [ev.make_region(r, drives=2, duration=80.0, grid_blocks=3) for r in range(2)]


def test_evaluate_rows_and_zero_std(small_folds):
    methods = ["LS", "KF", "KF+Viterbi", "KF+Oracle"]
    rep = ev.evaluate(small_folds, methods, seeds=(0, 1, 2))
    assert len(rep.rows) == len(methods) * 2
    for m in methods:
        assert rep.seed_stats[m]["he95_m"][1] == 0.0
        assert rep.seed_stats[m]["he50_m"][1] == 0.0
    assert set(rep.grid_choice) == {("KF+Viterbi", "region0"), ("KF+Viterbi", "region1")}
    rows = ev.read_csv(rep.to_csv())
    assert [r["method"] for r in rows] == [r["method"] for r in rep.rows]
    assert all(r["seed"] == ev.NO_SEED for r in rows)
    assert rows[0]["he95_m"] == rep.rows[0]["he95_m"]
    assert rep.to_csv().splitlines()[0] == ",".join(ev.CSV_COLUMNS)
    # pooled holdout errors equal the per-fold row statistics
    kf_rows = [r for r in rep.rows if r["method"] == "KF"]
    assert rep.cdf["KF"].size == sum(r["epochs"] for r in kf_rows)
    assert "KF+Viterbi" in ev.table(rep)


def test_evaluate_learned_rows_per_seed(small_folds):
    rep = ev.evaluate(
        small_folds,
        ["KF+TGNN"],
        seeds=(0, 1),
        holdouts=[1],
        train_cfg=TrainConfig(iterations=3, rollout_len=8, segments_per_drive=2),
        model_cfg=TgnnConfig(blocks=1, hidden=8),
    )
    assert [(r["fold"], r["seed"]) for r in rep.rows] == [("region1", 0), ("region1", 1)]
    assert len(rep.seed_stats["KF+TGNN"]["he95_per_seed"]) == 2


def test_evaluate_needs_two_folds(small_folds):
    with pytest.raises(ValueError):
        ev.evaluate(small_folds[:1], ["KF"])
    with pytest.raises(ValueError):
        ev.evaluate(small_folds, ["KF+Nope"])


def test_plot_cdf_svg(tmp_path, rng):
    errs = {"KF": rng.exponential(10, 200), "KF+Viterbi": rng.exponential(3, 200)}
    p = tmp_path / "cdf.svg"
    ev.plot_cdf(errs, p)
    text = p.read_text()
    assert text.lstrip().startswith("<?xml") and "</svg>" in text
    assert "KF+Viterbi" in text
    ev.plot_cdf(errs, tmp_path / "again.svg")
    assert (tmp_path / "again.svg").read_bytes() == p.read_bytes()


def test_batched_grid_without_candidates_equals_kf():
    from roadkf.roadnet import RawRoad

    g = line_graph(10, 25.0)
    far = build_graph([RawRoad((5000.0, 5000.0), (5025.0, 5000.0))])
    d = sim.generate_drive(g, sim.ScenarioConfig(duration=30.0), 0)
    ref = run_pipeline(d, far, MethodConfig("KF")).errors
    for method in ("KF+Instant", "KF+Viterbi"):
        table = run_batched(d, far, method, [(1.0, 0.0), (2.0, 3.0)], *FOV)
        assert_allclose(table, np.stack([ref, ref]), atol=1e-9)
        assert_allclose(run_pipeline(d, far, MethodConfig(method)).errors, ref, atol=1e-9)
