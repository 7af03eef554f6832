"""Command-line interface.

Data lives in fold directories::

    FOLD/network.jsonl          road network
    FOLD/drive-000.jsonl ...    drives
    FOLD/label-000.jsonl ...    oracle labels (written by label-oracle)

Every subcommand accepts ``--seed`` and ``--config FILE``.  A config file
holds ``section.key = value`` lines (``#`` starts a comment); sections are
``scenario`` (simulator), ``train``, ``model``, ``emission`` and ``filter``
(field-of-view radius and cap).  Values are Python literals; bare words are
read as strings.  Errors print one ``error: ...`` line and exit with 1;
usage errors exit with 2.
"""

import argparse
import ast
import glob
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from roadkf import io, sim
from roadkf.selection import EmissionParams

SECTIONS = ("scenario", "train", "model", "emission", "filter")
FILTER_KEYS = ("radius", "cap")


class CliError(Exception):
    pass


# config -------------------------------------------------------------------


def parse_config(path):
    """Read ``section.key = value`` lines into ``{section: {key: value}}``."""
    out = {s: {} for s in SECTIONS}
    if path is None:
        return out
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CliError(f"{path}: cannot read config: {exc.strerror}") from None
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{no}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise CliError(f"{path}:{no}: unknown config key {key!r}; sections are {', '.join(SECTIONS)}")
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            parsed = value
        out[section][name] = (parsed, f"{path}:{no}")
    return out


def _apply(cls_or_obj, values, section):
    """Dataclass instance updated with ``values`` ({key: (value, where)})."""
    obj = cls_or_obj() if isinstance(cls_or_obj, type) else cls_or_obj
    known = {f.name for f in fields(obj)}
    updates = {}
    for k, (v, where) in values.items():
        if k not in known:
            raise CliError(f"{where}: unknown {section} key {k!r}")
        updates[k] = v
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {section} config: {exc}") from None


def _filter_opts(cfg):
    from roadkf.roadnet import DEFAULT_FOV_CAP, DEFAULT_FOV_RADIUS

    out = {"radius": DEFAULT_FOV_RADIUS, "cap": DEFAULT_FOV_CAP}
    for k, (v, where) in cfg["filter"].items():
        if k not in FILTER_KEYS:
            raise CliError(f"{where}: unknown filter key {k!r}")
        out[k] = v
    return out


def scenario_config(args, cfg):
    if args.region is not None:
        base = sim.region_config(args.region, args.preset)
    else:
        base = sim.PRESETS[args.preset]()
    sc = _apply(base, cfg["scenario"], "scenario")
    if args.seed is not None and args.region is None:
        sc = replace(sc, seed=args.seed)
    return sc


# fold directories ---------------------------------------------------------


def fold_files(fold, pattern):
    return sorted(glob.glob(os.path.join(fold, pattern)))


def load_fold(fold, need_labels=False):
    from roadkf.harness.evaluate import Fold

    net = os.path.join(fold, "network.jsonl")
    roads, header = io.read_network(net)
    graph = io.load_graph(net)
    drive_files = fold_files(fold, "drive-*.jsonl")
    if not drive_files:
        raise CliError(f"{fold}: no drive-*.jsonl files")
    drives = [io.read_drive(p, graph) for p in drive_files]
    labels = None
    if need_labels:
        labels = []
        for p, d in zip(drive_files, drives):
            lp = os.path.join(fold, os.path.basename(p).replace("drive-", "label-"))
            if not os.path.exists(lp):
                raise CliError(f"{lp}: missing oracle labels (run label-oracle first)")
            labels.append(io.read_labels(lp, d, graph))
    return Fold(os.path.basename(os.path.normpath(fold)), roads, graph, drives, labels)


# subcommands --------------------------------------------------------------


def cmd_gen_network(args, cfg):
    sc = scenario_config(args, cfg)
    roads = sim.generate_roads(sc)
    io.write_network(args.out, roads)
    print(json.dumps({"roads": len(roads), "segments": io.build_graph(roads).n, "out": args.out}))


def cmd_gen_drives(args, cfg):
    sc = scenario_config(args, cfg)
    graph = io.load_graph(args.network)
    os.makedirs(args.out, exist_ok=True)
    seed = 0 if args.seed is None else args.seed
    name = os.path.basename(args.network)
    drives = sim.generate_drives(graph, sc, args.count, seed, network=name)
    for i, d in enumerate(drives):
        io.write_drive(os.path.join(args.out, f"drive-{i:03d}.jsonl"), d)
    print(json.dumps({"drives": len(drives), "epochs": [len(d) for d in drives], "out": args.out}))


def cmd_label_oracle(args, cfg):
    from roadkf.harness.oracle import label_accuracy, label_drive

    emission = _apply(EmissionParams, cfg["emission"], "emission")
    graph = io.load_graph(os.path.join(args.fold, "network.jsonl"))
    accs = []
    for p in fold_files(args.fold, "drive-*.jsonl"):
        d = io.read_drive(p, graph)
        labels = label_drive(d, graph, args.source, emission)
        io.write_labels(p.replace("drive-", "label-"), labels, os.path.basename(p), args.source)
        accs.append(label_accuracy(labels, d.segment))
    if not accs:
        raise CliError(f"{args.fold}: no drive-*.jsonl files")
    print(json.dumps({"drives": len(accs), "label_accuracy": float(np.mean(accs))}))


def _sigma(text):
    if text in ("learned",):
        return text
    try:
        par2, perp2 = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"--sigma expects 'par2,perp2' or 'learned', got {text!r}") from None
    return (par2, perp2)


def cmd_run(args, cfg):
    from roadkf.harness.metrics import summarize
    from roadkf.harness.pipeline import LEARNED, MethodConfig, run_pipeline

    emission = _apply(EmissionParams, cfg["emission"], "emission")
    fo = _filter_opts(cfg)
    graph = io.load_graph(args.network)
    drive = io.read_drive(args.drive, graph)
    labels = io.read_labels(args.labels, drive, graph) if args.labels else None
    model = io.load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    sigma = _sigma(args.sigma) if args.sigma else ("learned" if args.method in LEARNED else (1.0, 1.0))
    try:
        method = MethodConfig(args.method, sigma=sigma, emission=emission, **fo)
        res = run_pipeline(drive, graph, method, labels=labels, model=model)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        io.write_results(args.out, {args.method: (res.means[:, :2], res.errors)}, os.path.basename(args.drive))
    print(json.dumps({"method": args.method, **summarize(res.errors)}))


def cmd_grid_search(args, cfg):
    from roadkf.harness.grid import grid_search_sigma

    emission = _apply(EmissionParams, cfg["emission"], "emission")
    fo = _filter_opts(cfg)
    drives, graphs = [], []
    for f in args.fold:
        fold = load_fold(f)
        drives += fold.drives
        graphs += [fold.graph] * len(fold.drives)
    try:
        best, tab = grid_search_sigma(drives, graphs, args.method, emission, fo["radius"], fo["cap"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        lines = ["par2,perp2,he95_m"] + [f"{sp!r},{sq!r},{h!r}" for sp, sq, h in tab]
        io.atomic_write(args.out, "\n".join(lines) + "\n")
    print(json.dumps({"method": args.method, "par2": best[0], "perp2": best[1], "combinations": len(tab)}))


def _train_configs(args, cfg):
    from roadkf.harness.evaluate import default_model_config
    from roadkf.tgnn.train import TrainConfig

    tc = _apply(TrainConfig, cfg["train"], "train")
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    mc = _apply(default_model_config(), cfg["model"], "model")
    return tc, mc


def cmd_train(args, cfg):
    from roadkf.harness.evaluate import train_learned

    tc, mc = _train_configs(args, cfg)
    folds = [load_fold(f, need_labels=True) for f in args.fold]
    log = None
    if args.log:
        handle = open(args.log, "w", encoding="utf-8")

        def log(rec):
            handle.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        model, opt_state = train_learned(args.kind, folds, list(range(len(folds))), tc.seed, tc, mc, log=log)
    finally:
        if args.log:
            handle.close()
    io.save_checkpoint(args.out, model, opt_state, meta={"train": tc.to_dict(), "folds": [f.name for f in folds]})
    print(json.dumps({"kind": args.kind, "parameters": model.n_parameters(), "iterations": tc.iterations, "out": args.out}))


def _int_list(text, flag):
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise CliError(f"{flag} expects comma-separated integers, got {text!r}") from None


def cmd_evaluate(args, cfg):
    from roadkf.harness.evaluate import evaluate, plot_cdf, table

    tc, mc = _train_configs(args, cfg)
    emission = _apply(EmissionParams, cfg["emission"], "emission")
    fo = _filter_opts(cfg)
    methods = [m for m in args.methods.split(",") if m]
    seeds = _int_list(args.seeds, "--seeds")
    folds = [load_fold(f, need_labels=True) for f in args.fold]
    holdouts = _int_list(args.holdouts, "--holdouts") if args.holdouts else None
    say = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    try:
        report = evaluate(folds, methods, seeds, holdouts, emission, fo["radius"], fo["cap"], train_cfg=tc, model_cfg=mc, log=say)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    io.atomic_write(args.csv, report.to_csv())
    if args.svg:
        plot_cdf(report.cdf, args.svg)
    print(table(report))


def cmd_plot(args, cfg):
    from roadkf.harness.evaluate import plot_cdf

    pooled = {}
    for p in args.results:
        for m, (_, errs) in io.read_results(p).items():
            pooled.setdefault(m, []).append(errs)
    if not pooled:
        raise CliError("no results to plot")
    plot_cdf({m: np.concatenate(v) for m, v in pooled.items()}, args.out, xmax=args.xmax)
    print(json.dumps({"methods": list(pooled), "out": args.out}))


def cmd_gradcheck(args, cfg):
    from roadkf.tgnn import gradcheck

    seed = 0 if args.seed is None else args.seed
    worst = gradcheck.run(args.instances, seed, blocks=args.blocks, hidden=args.hidden)
    err = max(worst.values())
    print(json.dumps({"instances": args.instances, "parameters": len(worst), "max_relative_error": err, "tolerance": args.tol}))
    if not err <= args.tol:
        name = max(worst, key=worst.get)
        raise CliError(f"gradient of {name} off by relative error {err:.3g} > {args.tol:g}")


# parser -------------------------------------------------------------------


def build_parser():
    from roadkf.harness.pipeline import METHODS
    from roadkf.harness.oracle import SOURCES
    from roadkf.tgnn.model import KINDS

    p = argparse.ArgumentParser(prog="roadkf", description="Road-aided GNSS Kalman filtering")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        s = sub.add_parser(name, help=help_text, description=help_text)
        s.add_argument("--seed", type=int, default=None, help="random seed")
        s.add_argument("--config", default=None, help="section.key = value file")
        s.set_defaults(func=func)
        return s

    def scenario(s):
        s.add_argument("--preset", choices=sorted(sim.PRESETS), default="urban")
        s.add_argument("--region", type=int, default=None, help="use benchmark region settings (fixes the network seed)")

    s = add("gen-network", cmd_gen_network, "generate a road network")
    scenario(s)
    s.add_argument("--out", required=True, help="network file to write")

    s = add("gen-drives", cmd_gen_drives, "simulate drives on a network")
    scenario(s)
    s.add_argument("--network", required=True)
    s.add_argument("--count", type=int, default=6)
    s.add_argument("--out", required=True, help="fold directory for drive-NNN.jsonl")

    s = add("label-oracle", cmd_label_oracle, "write bidirectional-Viterbi labels for a fold")
    s.add_argument("--fold", required=True)
    s.add_argument("--source", choices=SOURCES, default="aided")

    s = add("run", cmd_run, "filter one drive with one method")
    s.add_argument("--network", required=True)
    s.add_argument("--drive", required=True)
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--sigma", default=None, help="par2,perp2 in m^2 or 'learned'")
    s.add_argument("--labels", default=None, help="label file (KF+Oracle)")
    s.add_argument("--checkpoint", default=None, help="model checkpoint (learned methods)")
    s.add_argument("--out", default=None, help="results file to write")

    s = add("grid-search", cmd_grid_search, "pick fixed road variances over the 11x21 grid")
    s.add_argument("--fold", action="append", required=True, help="training fold directory (repeatable)")
    s.add_argument("--method", choices=("KF+Instant", "KF+Viterbi"), required=True)
    s.add_argument("--out", default=None, help="CSV of all combinations")

    s = add("train", cmd_train, "train a road-selection network")
    s.add_argument("--fold", action="append", required=True, help="training fold directory (repeatable)")
    s.add_argument("--kind", choices=KINDS, default="TGNN")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--out", required=True, help="checkpoint to write")
    s.add_argument("--log", default=None, help="JSON-lines training log")

    s = add("evaluate", cmd_evaluate, "leave-one-fold-out evaluation")
    s.add_argument("--fold", action="append", required=True, help="fold directory (repeatable, at least two)")
    s.add_argument("--methods", default="LS,KF,KF+Instant,KF+Viterbi,KF+Oracle,KF+TGNN")
    s.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    s.add_argument("--holdouts", default=None, help="fold indices to hold out (default: all)")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--csv", required=True)
    s.add_argument("--svg", default=None)
    s.add_argument("--verbose", action="store_true")

    s = add("plot", cmd_plot, "CDF plot of result files")
    s.add_argument("results", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--xmax", type=float, default=None)

    s = add("gradcheck", cmd_gradcheck, "full-model gradient check")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--hidden", type=int, default=8)
    s.add_argument("--tol", type=float, default=1e-4)
    return p


def _one_line(exc):
    return " ".join(str(exc).split())


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        args.func(args, cfg)
    except (CliError, io.FormatError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
