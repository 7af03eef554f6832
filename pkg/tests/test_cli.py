import json

import pytest

from roadkf import io
from roadkf.cli import main, parse_config
from roadkf.harness.evaluate import read_csv

CONFIG = """\
# small desk scenario
scenario.duration = 40.0
scenario.grid_blocks = 3
train.iterations = 4
train.rollout_len = 8
train.segments_per_drive = 2
model.blocks = 1
model.hidden = 8
filter.radius = 50.0
"""


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(CONFIG)
    for r in range(2):
        fold = root / f"region{r}"
        assert main(["gen-network", "--region", str(r), "--config", str(cfg), "--out", str(fold / "network.jsonl")]) == 0
        assert main(["gen-drives", "--region", str(r), "--config", str(cfg), "--seed", str(r), "--count", "2", "--network", str(fold / "network.jsonl"), "--out", str(fold)]) == 0
        assert main(["label-oracle", "--fold", str(fold)]) == 0
    return root, cfg


def test_gen_drives_twice_identical(workspace, tmp_path):
    root, cfg = workspace
    net = root / "region0" / "network.jsonl"
    for d in ("a", "b"):
        assert main(["gen-drives", "--seed", "7", "--config", str(cfg), "--count", "2", "--network", str(net), "--out", str(tmp_path / d)]) == 0
    for name in ("drive-000.jsonl", "drive-001.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_label_oracle_deterministic(workspace, tmp_path, capsys):
    root, _ = workspace
    fold = root / "region1"
    before = (fold / "label-000.jsonl").read_bytes()
    code, out, _ = _run(capsys, "label-oracle", "--fold", fold)
    assert code == 0
    assert (fold / "label-000.jsonl").read_bytes() == before
    assert 0.0 <= json.loads(out)["label_accuracy"] <= 1.0


def test_train_checkpoints_byte_identical(workspace, tmp_path, capsys):
    root, cfg = workspace
    for name in ("a.ckpt", "b.ckpt"):
        code, out, _ = _run(capsys, "train", "--fold", root / "region0", "--config", cfg, "--seed", 3, "--out", tmp_path / name, "--log", tmp_path / (name + ".log"))
        assert code == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    model, _, meta = io.load_checkpoint(tmp_path / "a.ckpt")
    assert meta["train"]["iterations"] == 4
    assert model.config.blocks == 1
    steps = [json.loads(l) for l in (tmp_path / "a.ckpt.log").read_text().splitlines()]
    assert sum(r["kind"] == "step" for r in steps) == 4


def test_run_and_plot(workspace, tmp_path, capsys):
    root, cfg = workspace
    fold = root / "region0"
    code, out, _ = _run(capsys, "run", "--network", fold / "network.jsonl", "--drive", fold / "drive-000.jsonl", "--method", "KF+Viterbi", "--sigma", "1,0", "--config", cfg, "--out", tmp_path / "r.jsonl")
    assert code == 0
    assert json.loads(out)["epochs"] == 40
    code, out, _ = _run(capsys, "run", "--network", fold / "network.jsonl", "--drive", fold / "drive-000.jsonl", "--method", "KF+Oracle", "--labels", fold / "label-000.jsonl", "--out", tmp_path / "o.jsonl")
    assert code == 0
    code, _, _ = _run(capsys, "plot", tmp_path / "r.jsonl", tmp_path / "o.jsonl", "--out", tmp_path / "cdf.svg")
    assert code == 0
    assert "</svg>" in (tmp_path / "cdf.svg").read_text()


def test_grid_search_reports_231(workspace, tmp_path, capsys):
    root, _ = workspace
    code, out, _ = _run(capsys, "grid-search", "--fold", root / "region0", "--method", "KF+Instant", "--out", tmp_path / "grid.csv")
    assert code == 0
    assert json.loads(out)["combinations"] == 231
    assert len((tmp_path / "grid.csv").read_text().splitlines()) == 232


def test_evaluate_one_row_per_method_and_fold(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, out, _ = _run(capsys, "evaluate", "--fold", root / "region0", "--fold", root / "region1", "--methods", "KF,KF+Viterbi,KF+TGNN", "--seeds", "0", "--config", cfg, "--csv", tmp_path / "m.csv", "--svg", tmp_path / "m.svg")
    assert code == 0
    rows = read_csv((tmp_path / "m.csv").read_text())
    assert sorted((r["method"], r["fold"]) for r in rows) == sorted((m, f) for m in ("KF", "KF+Viterbi", "KF+TGNN") for f in ("region0", "region1"))
    assert "KF+TGNN" in out


def test_gradcheck_command(capsys):
    code, out, _ = _run(capsys, "gradcheck", "--instances", 1)
    assert code == 0
    assert json.loads(out)["max_relative_error"] < 1e-4


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-network", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_errors_one_line_exit_1(workspace, tmp_path, capsys):
    root, _ = workspace
    code, _, err = _run(capsys, "run", "--network", tmp_path / "none.jsonl", "--drive", tmp_path / "none.jsonl", "--method", "KF")
    assert code == 1
    assert err.count("\n") == 1 and err.startswith("error: ")
    code, _, err = _run(capsys, "run", "--network", root / "region0" / "network.jsonl", "--drive", root / "region0" / "drive-000.jsonl", "--method", "KF+Oracle")
    assert code == 1 and "labels" in err and err.count("\n") == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("scenario.warp = 9\n")
    code, _, err = _run(capsys, "gen-network", "--config", bad, "--out", tmp_path / "n.jsonl")
    assert code == 1 and "bad.cfg:1" in err


def test_parse_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("train.lr = 0.01  # comment\nmodel.kind = GNN\n\nemission.k = 3\n")
    cfg = parse_config(p)
    assert cfg["train"]["lr"][0] == 0.01
    assert cfg["model"]["kind"][0] == "GNN"
    assert cfg["emission"]["k"][0] == 3
