"""Leave-one-region-out evaluation, the reference benchmark and reports.

Every fold is one generated region.  For each holdout fold the remaining
folds tune the fixed road variances (grid search) or train the network,
then the holdout drives are filtered and their horizontal errors pooled.
Deterministic methods run once per holdout fold; learned methods repeat
for every seed.
"""

import csv
import io as _stdio
from dataclasses import dataclass, field, replace

import numpy as np

from roadkf import kalman as kf
from roadkf import sim
from roadkf.harness.grid import GRID_METHODS, run_batched, sigma_grid
from roadkf.harness.metrics import cdf, he50, he95, mean_std
from roadkf.harness.oracle import label_drive
from roadkf.harness.pipeline import LEARNED, METHODS, MethodConfig, run_pipeline
from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS, build_graph
from roadkf.selection import EmissionParams

CSV_COLUMNS = ("method", "fold", "seed", "he50_m", "he95_m", "epochs", "drives")
NO_SEED = "-"  # seed column of seed-independent methods

# reference desk-scale benchmark
REFERENCE_REGIONS = 3
REFERENCE_DRIVES = 6
REFERENCE_DURATION = 600.0  # s at 1 Hz
REFERENCE_SEEDS = tuple(range(10))
# The variance head of trained models starts from the classical road
# variances (m^2): exp(0) times this scale.
TRAIN_SIGMA_SCALE = (100.0, 4.0)


def default_model_config(kind="TGNN"):
    from roadkf.tgnn.model import TgnnConfig

    return TgnnConfig(kind=kind, sigma_scale=TRAIN_SIGMA_SCALE)


@dataclass
class Fold:
    name: str
    roads: list
    graph: object
    drives: list
    labels: list = None  # oracle labels per drive


def make_region(region, preset="urban", drives=REFERENCE_DRIVES, duration=REFERENCE_DURATION, label=True, **overrides):
    """One benchmark fold: a jittered city grid and its drives, oracle-labeled."""
    cfg = sim.region_config(region, preset, duration=duration, **overrides)
    roads = sim.generate_roads(cfg)
    graph = build_graph(roads)
    recs = sim.generate_drives(graph, cfg, drives, seed=region, network=f"region{region}")
    labels = [label_drive(d, graph) for d in recs] if label else None
    return Fold(f"region{region}", roads, graph, recs, labels)


def reference_benchmark(preset="urban", regions=REFERENCE_REGIONS, drives=REFERENCE_DRIVES, duration=REFERENCE_DURATION):
    """3 regions x 6 drives x 600 epochs, urban preset by default."""
    return [make_region(r, preset, drives, duration) for r in range(regions)]


@dataclass
class MetricsReport:
    rows: list  # CSV rows, one per (method, holdout fold, seed)
    cdf: dict  # method -> pooled holdout errors (all folds, all seeds)
    per_drive: list  # dicts: method, fold, seed, drive, he50_m, he95_m
    seed_stats: dict  # method -> {"he50_m": (mean, std), "he95_m": (mean, std)} over seeds
    grid_choice: dict = field(default_factory=dict)  # (method, fold) -> (par2, perp2)

    def summary(self, method):
        return self.seed_stats[method]

    def to_csv(self):
        buf = _stdio.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()


def read_csv(text):
    """Parse CSV produced by MetricsReport.to_csv."""
    rows = list(csv.DictReader(_stdio.StringIO(text)))
    for r in rows:
        if list(r) != list(CSV_COLUMNS):
            raise ValueError(f"unexpected CSV columns {list(r)}")
        r["he50_m"] = float(r["he50_m"])
        r["he95_m"] = float(r["he95_m"])
        r["epochs"] = int(r["epochs"])
        r["drives"] = int(r["drives"])
        r["seed"] = r["seed"] if r["seed"] == NO_SEED else int(r["seed"])
    return rows


class GridCache:
    """Per-drive error tables of the full variance grid, shared across folds."""

    def __init__(self, emission, radius, cap, q):
        self.pairs = sigma_grid()
        self.args = (emission, radius, cap, q)
        self.tables = {}

    def errors(self, method, fold_idx, drive_idx, drive, graph):
        key = (method, fold_idx, drive_idx)
        if key not in self.tables:
            emission, radius, cap, q = self.args
            self.tables[key] = run_batched(drive, graph, method, self.pairs, emission, radius, cap, q)
        return self.tables[key]

    def select(self, method, folds, train_idx):
        """Grid-search pick over the training folds (same rule as grid_search_sigma)."""
        errs = [self.errors(method, i, j, d, folds[i].graph) for i in train_idx for j, d in enumerate(folds[i].drives)]
        pooled = np.concatenate(errs, axis=1)
        scores = [he95(row) for row in pooled]
        best = min(range(len(self.pairs)), key=lambda c: (scores[c], self.pairs[c][1], self.pairs[c][0]))
        return best, self.pairs[best]


def train_learned(kind, folds, train_idx, seed, train_cfg=None, model_cfg=None, log=None):
    """Fresh model of ``kind`` trained on the labeled drives of ``train_idx``."""
    from roadkf.tgnn.model import TgnnModel
    from roadkf.tgnn.train import TrainConfig, train

    model_cfg = replace(model_cfg or default_model_config(), kind=kind)
    train_cfg = replace(train_cfg or TrainConfig(), seed=seed)
    model = TgnnModel(model_cfg, seed=seed)
    drives = [d for i in train_idx for d in folds[i].drives]
    graphs = [folds[i].graph for i in train_idx for _ in folds[i].drives]
    labels = [l for i in train_idx for l in folds[i].labels]
    _, opt_state, _ = train(model, drives, graphs, labels, train_cfg, log=log)
    return model, opt_state


def evaluate(
    folds,
    methods,
    seeds=(0,),
    holdouts=None,
    emission=EmissionParams(),
    radius=DEFAULT_FOV_RADIUS,
    cap=DEFAULT_FOV_CAP,
    q=kf.ProcessNoise(),
    train_cfg=None,
    model_cfg=None,
    models=None,
    log=None,
):
    """Cross-validated metrics of ``methods`` over ``folds``.

    ``holdouts`` restricts which folds are held out (default: all).
    ``models`` optionally maps (method, holdout, seed) to a trained model,
    which is then used instead of training.  ``log`` receives progress
    strings.  Returns a MetricsReport.
    """
    if len(folds) < 2:
        raise ValueError("evaluation needs at least two folds")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    holdouts = list(range(len(folds))) if holdouts is None else list(holdouts)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    models = models or {}
    say = log or (lambda msg: None)
    cache = GridCache(emission, radius, cap, q)
    rows, per_drive, grid_choice = [], [], {}
    pooled = {m: [] for m in methods}
    per_seed = {m: {s: [] for s in seeds} for m in methods}

    def record(method, h, seed, errs):
        fold = folds[h]
        allerr = np.concatenate(errs)
        rows.append(
            {
                "method": method,
                "fold": fold.name,
                "seed": seed,
                "he50_m": he50(allerr),
                "he95_m": he95(allerr),
                "epochs": int(allerr.size),
                "drives": len(errs),
            }
        )
        for j, e in enumerate(errs):
            per_drive.append({"method": method, "fold": fold.name, "seed": seed, "drive": j, "he50_m": he50(e), "he95_m": he95(e)})
        pooled[method].append(allerr)

    for h in holdouts:
        fold = folds[h]
        train_idx = [i for i in range(len(folds)) if i != h]
        for method in methods:
            if method in LEARNED:
                for seed in seeds:
                    model = models.get((method, h, seed))
                    if model is None:
                        say(f"training {method} holdout={fold.name} seed={seed}")
                        model, _ = train_learned(LEARNED[method], folds, train_idx, seed, train_cfg, model_cfg)
                    cfg = MethodConfig(method, sigma="learned", emission=emission, radius=radius, cap=cap, process_noise=q)
                    errs = [run_pipeline(d, fold.graph, cfg, model=model).errors for d in fold.drives]
                    record(method, h, seed, errs)
                    per_seed[method][seed].append(he95(np.concatenate(errs)))
                continue
            say(f"running {method} holdout={fold.name}")
            if method in GRID_METHODS:
                c, pair = cache.select(method, folds, train_idx)
                grid_choice[(method, fold.name)] = pair
                errs = [cache.errors(method, h, j, d, fold.graph)[c] for j, d in enumerate(fold.drives)]
            else:
                cfg = MethodConfig(method, emission=emission, radius=radius, cap=cap, process_noise=q)
                labels = fold.labels if method == "KF+Oracle" else [None] * len(fold.drives)
                errs = [run_pipeline(d, fold.graph, cfg, labels=l).errors for d, l in zip(fold.drives, labels)]
            record(method, h, NO_SEED, errs)
            for s in seeds:
                per_seed[method][s].append(he95(np.concatenate(errs)))

    seed_stats = {}
    for m in methods:
        he95s = [float(np.mean(per_seed[m][s])) for s in seeds]
        he50s = []
        for s in seeds:
            vals = [r["he50_m"] for r in rows if r["method"] == m and r["seed"] in (s, NO_SEED)]
            he50s.append(float(np.mean(vals)))
        seed_stats[m] = {"he50_m": mean_std(he50s), "he95_m": mean_std(he95s), "he95_per_seed": he95s}
    cdfs = {m: np.concatenate(v) for m, v in pooled.items()}
    return MetricsReport(rows, cdfs, per_drive, seed_stats, grid_choice)


def plot_cdf(errors_by_method, path, title="Horizontal error CDF", xmax=None):
    """Write a CDF plot of horizontal errors as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from roadkf.io import atomic_write

    with matplotlib.rc_context({"svg.hashsalt": "roadkf", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for method, errs in errors_by_method.items():
            x, y = cdf(errs)
            ax.step(np.concatenate([[0.0], x]), np.concatenate([[0.0], y]), where="post", label=method)
        ax.set_xlabel("horizontal error [m]")
        ax.set_ylabel("fraction of epochs")
        ax.set_ylim(0.0, 1.0)
        ax.set_xlim(0.0, xmax if xmax is not None else max(float(np.max(e)) for e in errors_by_method.values()))
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right")
        buf = _stdio.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    atomic_write(path, buf.getvalue())


def table(report):
    """Plain-text Table-1-style summary: method, HE@50 and HE@95 mean +- std."""
    lines = [f"{'method':<12} {'HE@50 [m]':>18} {'HE@95 [m]':>18}"]
    for m, st in report.seed_stats.items():
        (a, sa), (b, sb) = st["he50_m"], st["he95_m"]
        lines.append(f"{m:<12} {a:>9.2f} +- {sa:<5.2f} {b:>9.2f} +- {sb:<5.2f}")
    return "\n".join(lines)


__all__ = [
    "CSV_COLUMNS",
    "Fold",
    "default_model_config",
    "GridCache",
    "MetricsReport",
    "NO_SEED",
    "TRAIN_SIGMA_SCALE",
    "REFERENCE_SEEDS",
    "evaluate",
    "make_region",
    "plot_cdf",
    "read_csv",
    "reference_benchmark",
    "table",
    "train_learned",
]
