"""mapcull command line: one subcommand per pipeline stage, all files under --workdir.

Layout of a work directory::

    config.json                effective configuration
    worlds/scene{i}.npz        synthetic worlds
    graphs/scene{i}.graph      map graphs (labels filled in by `label`)
    train/                     ckpt_epoch{N}.bin, best.bin, metrics.csv
    scores/scene{i}.csv        point scores of the trained model
    selections/selections.json method -> scene -> budget -> point ids
    eval/eval.csv              recall rows; eval/match_counts.csv
    report/                    table.csv, histogram.csv, *.svg

Exit codes: 0 success, 1 usage, 2 missing or bad data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig
from .evaluation import (THRESHOLDS, EvalReport, averaged, common_grid, evaluate_recall,
                         match_count_histogram, sparsify_by_scores)
from .experiment import (VARIANTS, baseline_selections, label_graph, make_scene, scene_seed,
                         scene_world_config, train_variant)
from .graph import GraphError, Split, load_graph, save_graph
from .kcover import KCoverError
from .plotting import histogram_chart, line_chart
from .scorer import ConfigurationError, load_checkpoint, save_checkpoint, score_graph
from .training import NumericalError
from .world import WorldConfigError, build_map_graph, generate_world, load_world, save_world

log = logging.getLogger("mapcull")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- workdir helpers -----------------------------------------------------------

def _stamp(cfg: PipelineConfig) -> str:
    return f"# mapcull {__version__} config={cfg.hash} seed={cfg.seed}\n"


def _read_csv(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return "".join(lines)


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _scenes(workdir):
    paths = sorted(glob.glob(os.path.join(workdir, "worlds", "scene*.npz")),
                   key=lambda p: int(os.path.basename(p)[5:-4]))
    if not paths:
        raise DataError(f"no worlds in {workdir}/worlds; run `mapcull generate --workdir {workdir}` first")
    return [os.path.basename(p)[:-4] for p in paths]


def _require(path, hint):
    if not os.path.exists(path):
        raise DataError(f"missing {path}; run `mapcull {hint}` first")


def _load_scene(workdir, name, cfg):
    world = load_world(os.path.join(workdir, "worlds", name + ".npz"))
    gpath = os.path.join(workdir, "graphs", name + ".graph")
    _require(gpath, f"build --workdir {workdir}")
    return make_scene(world, load_graph(gpath), name)


class _Stage:
    """Writes into a scratch directory and moves it into place only on success."""

    def __init__(self, workdir, name, cfg):
        self.final = os.path.join(workdir, name)
        self.tmp = os.path.join(workdir, f".{name}.partial")
        self.cfg = cfg

    def __enter__(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
        os.makedirs(self.tmp)
        _write_text(os.path.join(self.tmp, "config.json"), self.cfg.to_json())
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        shutil.rmtree(self.final, ignore_errors=True)
        os.replace(self.tmp, self.final)
        return False


def _config(args) -> PipelineConfig:
    workdir = args.workdir
    path = args.config or (os.path.join(workdir, "config.json") if args.command != "generate" else None)
    if path and os.path.exists(path):
        cfg = PipelineConfig.load(path)
    elif args.config:
        raise DataError(f"config file {args.config} not found")
    else:
        cfg = PipelineConfig()
    over = {"seed": args.seed}
    for name in ("epochs", "lr", "K", "lambda_l1", "g2", "heads", "n_scenes", "b", "n_desired"):
        over[name] = getattr(args, name, None)
    if getattr(args, "budgets", None):
        over["budgets"] = tuple(int(b) for b in args.budgets.split(","))
    return cfg.override(**over)


# -- commands ------------------------------------------------------------------

def cmd_generate(args, cfg):
    os.makedirs(args.workdir, exist_ok=True)
    with _Stage(args.workdir, "worlds", cfg) as out:
        for i in range(cfg.suite.n_scenes):
            world = generate_world(scene_world_config(cfg.suite, i), scene_seed(cfg.seed, i))
            world.meta.update({"config": cfg.hash, "seed": cfg.seed})
            save_world(world, os.path.join(out, f"scene{i}.npz"))
    _write_text(os.path.join(args.workdir, "config.json"), cfg.to_json())


def cmd_build(args, cfg):
    names = _scenes(args.workdir)
    with _Stage(args.workdir, "graphs", cfg) as out:
        for name in names:
            world = load_world(os.path.join(args.workdir, "worlds", name + ".npz"))
            g = build_map_graph(world)
            g.meta.update({"config": cfg.hash, "seed": cfg.seed})
            save_graph(g, os.path.join(out, name + ".graph"))


def cmd_label(args, cfg):
    names = _scenes(args.workdir)
    scenes = [_load_scene(args.workdir, n, cfg) for n in names]
    with _Stage(args.workdir, "graphs", cfg) as out:
        for s in scenes:
            g = label_graph(s.world, s.graph, s.observations, cfg.suite.b, cfg.suite.n_desired,
                            solver=args.solver)
            g.meta.update({"config": cfg.hash, "seed": cfg.seed, "labeled": True})
            save_graph(g, os.path.join(out, s.name + ".graph"))


def _labeled_scenes(args, cfg):
    scenes = [_load_scene(args.workdir, n, cfg) for n in _scenes(args.workdir)]
    for s in scenes:
        if not (s.graph.labels >= 0).any():
            raise DataError(f"{s.name} has no labels; run `mapcull label --workdir {args.workdir}` first")
    return scenes


def cmd_train(args, cfg):
    scenes = _labeled_scenes(args, cfg)
    variant = {v: k for k, v in VARIANTS.items()}[args.loss]
    with _Stage(args.workdir, "train", cfg) as out:
        res = train_variant(cfg.suite, scenes, variant, cfg.seed, out_dir=out)
        save_checkpoint(res.best_model, os.path.join(out, "best.bin"),
                        extra={"epoch": res.best_epoch, "variant": variant, "config": cfg.hash,
                               "seed": cfg.seed})
        with open(os.path.join(out, "metrics.csv")) as fh:
            body = fh.read()
        _write_text(os.path.join(out, "metrics.csv"), _stamp(cfg) + body)


def cmd_score(args, cfg):
    ckpt = args.checkpoint or os.path.join(args.workdir, "train", "best.bin")
    _require(ckpt, f"train --workdir {args.workdir}")
    model, extra = load_checkpoint(ckpt)
    names = _scenes(args.workdir)
    with _Stage(args.workdir, "scores", cfg) as out:
        _write_text(os.path.join(out, "model.json"), json.dumps(extra, sort_keys=True) + "\n")
        for name in names:
            g = load_graph(os.path.join(args.workdir, "graphs", name + ".graph"))
            s = score_graph(model, g)
            buf = io.StringIO()
            buf.write(_stamp(cfg))
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["point_id", "score"])
            for i, v in enumerate(s):
                w.writerow([i, repr(float(v))])
            _write_text(os.path.join(out, name + ".csv"), buf.getvalue())


def _load_scores(workdir, name):
    path = os.path.join(workdir, "scores", name + ".csv")
    _require(path, f"score --workdir {workdir}")
    rows = list(csv.DictReader(io.StringIO(_read_csv(path))))
    return np.array([float(r["score"]) for r in rows])


def cmd_sparsify(args, cfg):
    scenes = [_load_scene(args.workdir, n, cfg) for n in _scenes(args.workdir)]
    tests = [s for s in scenes if s.role == Split.TEST]
    if not tests:
        raise DataError("no test scenes in the work directory")
    methods = args.methods.split(",")
    sel = {}
    for s in tests:
        base = baseline_selections(cfg.suite, s, cfg.seed) if set(methods) - {"gnn"} else {}
        for m in methods:
            if m == "gnn":
                scores = _load_scores(args.workdir, s.name)
                area = s.area(Split.TEST)
                picks = {b: sparsify_by_scores(area, scores, b, cfg.suite.score_threshold, cfg.seed)
                         for b in cfg.suite.budgets if b <= len(area)}
            elif m in base:
                picks = base[m]
            else:
                raise UsageError(f"unknown method {m!r}")
            sel.setdefault(m, {})[s.name] = {str(b): [int(i) for i in ids] for b, ids in picks.items()}
    with _Stage(args.workdir, "selections", cfg) as out:
        doc = {"config": cfg.hash, "seed": cfg.seed, "selections": sel}
        _write_text(os.path.join(out, "selections.json"), json.dumps(doc, sort_keys=True) + "\n")


def cmd_eval(args, cfg):
    path = args.selections or os.path.join(args.workdir, "selections", "selections.json")
    _require(path, f"sparsify --workdir {args.workdir}")
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: {e}") from e
    sel = doc.get("selections", {})
    scenes = {n: _load_scene(args.workdir, n, cfg) for n in _scenes(args.workdir)}
    tests = [n for n, s in scenes.items() if s.role == Split.TEST]
    if not sel:
        # Nothing selected: evaluate the empty map once per test scene.
        sel = {"empty": {n: {"0": []} for n in tests}}
    report = EvalReport()
    for method in sorted(sel):
        for name in sorted(sel[method]):
            s = scenes[name]
            picks = {int(b): np.array(ids, dtype=np.int64) for b, ids in sel[method][name].items()}
            evaluate_recall(s.world, s.graph, s.queries(1), {method: picks}, scene=name,
                            seed=cfg.seed, report=report)
    with _Stage(args.workdir, "eval", cfg) as out:
        _write_text(os.path.join(out, "eval.csv"), _stamp(cfg) + report.to_csv())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "scene", "budget", "query", "matches"])
        for (m, scene, b), counts in sorted(report.match_counts.items()):
            for q, c in enumerate(counts):
                w.writerow([m, scene, b, q, int(c)])
        _write_text(os.path.join(out, "match_counts.csv"), _stamp(cfg) + buf.getvalue())


def _table_rows(report: EvalReport, scenes):
    methods = report.methods()
    rows = []
    try:
        grid = common_grid(report, methods, scenes)
    except ValueError:
        return [], None, methods
    for m in methods:
        c = averaged(report, m, scenes, grid)
        for k, r, cl in zip(grid, c.recall, c.clamped):
            rows.append([m, f"{k:.1f}", *(f"{x:.6f}" for x in r), int(cl)])
    return rows, grid, methods


def cmd_report(args, cfg):
    epath = os.path.join(args.workdir, "eval", "eval.csv")
    _require(epath, f"eval --workdir {args.workdir}")
    report = EvalReport.from_csv(_read_csv(epath))
    scenes = sorted({r["scene"] for r in report.rows})
    rows, grid, methods = _table_rows(report, scenes)
    counts = {}
    cpath = os.path.join(args.workdir, "eval", "match_counts.csv")
    if os.path.exists(cpath):
        for r in csv.DictReader(io.StringIO(_read_csv(cpath))):
            counts.setdefault((r["method"], int(r["budget"])), []).append(int(r["matches"]))
    caption = f"config {cfg.hash}, seed {cfg.seed}"
    with _Stage(args.workdir, "report", cfg) as out:
        buf = io.StringIO()
        buf.write(_stamp(cfg))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "kpts", "recall_0.25m_2deg", "recall_0.5m_5deg", "recall_5m_10deg", "clamped"])
        w.writerows(rows)
        _write_text(os.path.join(out, "table.csv"), buf.getvalue())
        for j, (t, r) in enumerate(THRESHOLDS):
            series = {}
            for m in methods:
                if grid is not None:
                    series[m] = (grid, averaged(report, m, scenes, grid).recall[:, j])
            _write_text(os.path.join(out, f"recall_{t}m_{r:g}deg.svg"),
                        line_chart(series, f"Recall at ({t} m, {r:g} deg)", "#kpts", "recall",
                                   ylim=(0.0, 1.0), caption=caption))
        hists = {}
        hbuf = io.StringIO()
        hbuf.write(_stamp(cfg))
        hw = csv.writer(hbuf, lineterminator="\n")
        hw.writerow(["method", "budget", "bin_low", "bin_high", "density"])
        if counts:
            hi = max(max(v) for v in counts.values())
            edges = np.linspace(0, max(hi, 1), 11)
            for (m, b), c in sorted(counts.items()):
                frac, e = match_count_histogram(c, edges)
                for lo, up, f in zip(e[:-1], e[1:], frac):
                    hw.writerow([m, b, f"{lo:.3f}", f"{up:.3f}", f"{f:.6f}"])
            mids = sorted({b for _, b in counts})
            mid = mids[len(mids) // 2]
            for (m, b), c in sorted(counts.items()):
                if b == mid:
                    frac, e = match_count_histogram(c, edges)
                    hists[m] = (e, frac)
        _write_text(os.path.join(out, "histogram.csv"), hbuf.getvalue())
        _write_text(os.path.join(out, "histogram.svg"),
                    histogram_chart(hists, "2D-3D matches per test query", "matches", caption=caption))


COMMANDS = {
    "generate": cmd_generate, "build": cmd_build, "label": cmd_label, "train": cmd_train,
    "score": cmd_score, "sparsify": cmd_sparsify, "eval": cmd_eval, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mapcull", description="Learned map sparsification on synthetic street scenes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, help=COMMANDS[name].__name__[4:] + " stage")
        s.add_argument("--workdir", required=True, help="pipeline work directory")
        s.add_argument("--config", help="JSON config file (default: <workdir>/config.json)")
        s.add_argument("--seed", type=int, help="global seed (default 0)")
        s.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name == "generate":
            s.add_argument("--n-scenes", dest="n_scenes", type=int, help="number of scenes (default 4)")
        if name == "train":
            s.add_argument("--epochs", type=int, help="training epochs (default 20)")
            s.add_argument("--lr", type=float, help="AdamW learning rate (default 0.001)")
            s.add_argument("--K", type=float, help="target selected points per image (default 30)")
            s.add_argument("--lambda", dest="lambda_l1", type=float, help="L1 weight (default 0.01)")
            s.add_argument("--g2", choices=["gat", "graphconv", "sage"], help="neighborhood layer (default gat)")
            s.add_argument("--heads", type=int, help="attention heads (default 4)")
            s.add_argument("--loss", choices=["bce", "kc", "both"], default="both",
                           help="loss terms (default both)")
        if name in ("label", "sparsify"):
            s.add_argument("--b", type=int, help="minimum selected points per image in the ILP (default 30)")
        if name == "label":
            s.add_argument("--n-desired", dest="n_desired", type=int,
                           help="positive labels per scene (default 500)")
            s.add_argument("--solver", choices=["auto", "exact", "greedy"], default="auto",
                           help="K-Cover solver (default auto: exact on small instances, else greedy)")
        if name == "score":
            s.add_argument("--checkpoint", help="checkpoint file (default: <workdir>/train/best.bin)")
        if name == "sparsify":
            s.add_argument("--methods", default="random,ilp_map,ilp_query,gnn",
                           help="comma-separated methods")
            s.add_argument("--budgets", help="comma-separated point budgets (default 100,...,900)")
        if name == "eval":
            s.add_argument("--selections", help="selection file (default: <workdir>/selections/selections.json)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"mapcull {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, KCoverError, ConfigurationError, WorldConfigError,
            FileNotFoundError, ValueError) as e:
        print(f"mapcull {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"mapcull {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
