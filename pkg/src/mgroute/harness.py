"""Command line front end, metric aggregation and run manifests.

Subcommands: ``gen``, ``solve``, ``train``, ``eval``, ``compare-fsasp``,
``aggregate`` and ``selftest``. Every run writes its outputs atomically and
drops a ``manifest.json`` recording the full argument set next to them.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from .core import ProblemSpec, Variant, evaluate_route, load_instance, save_instance
from .instancegen import GenConfig, calibrate_thresholds, generate
from .pareto import ParetoArchive, hypervolume_2d, pareto_insert, preference_grid

METRIC_COLUMNS = ["instance_id", "variant", "distribution", "method", "hv", "best_obj", "feasible_rate", "wall_ms"]
REQUIRED_COLUMNS = {"variant", "method", "hv", "best_obj", "feasible_rate", "wall_ms"}
HEURISTIC_FOR = {
    Variant.MOTSP: "nn",
    Variant.MOCVRP: "nn",
    Variant.RCTSP: "beam",
    Variant.OP: "greedy-op",
    Variant.MOOP: "greedy-moop",
    Variant.MOTSPTW: "insertion",
}


class SchemaError(ValueError):
    """Metric file lacks required columns or holds unparsable values."""


class UsageError(Exception):
    pass


# --- atomic output -------------------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_manifest(directory: str, command: str, args: dict, extra: dict | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    body = {"command": command, "version": __version__, "args": args, **(extra or {})}
    path = os.path.join(directory, "manifest.json")
    atomic_write_text(path, json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(path: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


# --- instance folders ----------------------------------------------------------------


def load_folder(directory: str):
    """Instances of a ``gen`` folder in index order, their spec and generator info."""
    files = sorted(f for f in os.listdir(directory) if f.startswith("inst_") and f.endswith(".json"))
    if not files:
        raise UsageError(f"no instance files in {directory}")
    instances, spec = [], None
    for f in files:
        inst, s = load_instance(os.path.join(directory, f))
        instances.append(inst)
        spec = spec or s
    if spec is None:
        raise UsageError(f"instances in {directory} carry no problem spec")
    info = {}
    mpath = os.path.join(directory, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            info = json.load(fh).get("args", {})
    return instances, spec, info


# --- heuristic solving ----------------------------------------------------------------


def _heuristic_route(method: str, inst, spec: ProblemSpec, pref):
    from . import baselines

    if method == "nn":
        return baselines.nearest_neighbor(inst, spec, pref)
    if method == "beam":
        return baselines.beam_search_rctsp(inst, spec)
    if method == "greedy-op":
        return baselines.greedy_op(inst, spec)
    if method == "greedy-moop":
        return baselines.greedy_moop(inst, spec, pref)
    if method == "insertion":
        return baselines.insertion_motsptw(inst, spec, pref)
    raise UsageError(f"unknown method {method!r}")


def solve_heuristic_one(job) -> dict:
    """Metric row for one instance; module level so worker processes can run it."""
    idx, inst, spec, method, prefs = job
    t0 = time.perf_counter()
    archive = ParetoArchive()
    best = None
    feasible = 0
    for pref in prefs:
        route = _heuristic_route(method, inst, spec, pref)
        ev = evaluate_route(inst, spec, route)
        feasible += ev.feasible
        if not ev.feasible:
            continue
        if spec.variant.multi_objective:
            pareto_insert(archive, ev.objectives)
        elif best is None or ev.objectives[0] < best:
            best = float(ev.objectives[0])
    hv = ""
    if spec.variant.multi_objective:
        hv = _archive_hv(archive, spec)
    return {
        "instance_id": idx,
        "variant": spec.variant.value,
        "method": method,
        "hv": hv,
        "best_obj": "" if best is None else best,
        "feasible_rate": feasible / len(prefs),
        "wall_ms": (time.perf_counter() - t0) * 1000.0,
    }


def _archive_hv(archive: ParetoArchive, spec: ProblemSpec) -> float:
    if spec.hv_reference is None:
        return float("nan")
    ref = np.asarray(spec.hv_reference)
    pts = archive.objectives()
    pts = pts[np.all(pts <= ref, axis=1)] if len(pts) else pts
    return hypervolume_2d(pts, ref) if len(pts) else 0.0


def _prefs_for(spec: ProblemSpec, count: int):
    if spec.variant.multi_objective:
        return [np.asarray(p) for p in preference_grid(count)]
    return [None]


def run_parallel(fn, jobs, workers: int) -> list:
    """Map ``fn`` over ``jobs``; results come back in job order whatever the worker count."""
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- aggregation -----------------------------------------------------------------------------


def read_metric_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = REQUIRED_COLUMNS - set(reader.fieldnames or [])
            if missing:
                raise SchemaError(f"{p}: missing columns {sorted(missing)}")
            rows.extend(reader)
    return rows


def _num(v, what):
    if v in ("", None):
        return None
    try:
        return float(v)
    except ValueError as exc:
        raise SchemaError(f"bad {what} value {v!r}") from exc


def aggregate_metrics(paths_or_rows) -> list[dict]:
    """One summary row per (variant, distribution, method).

    Gaps are relative to the best method of the same (variant, distribution):
    ``(best - value) / best`` for hypervolume, ``(value - best) / best`` for
    minimized objectives.
    """
    rows = paths_or_rows
    if rows and isinstance(rows[0], (str, os.PathLike)):
        rows = read_metric_rows(rows)
    groups: dict[tuple, dict] = defaultdict(lambda: {"hv": [], "obj": [], "feas": [], "time": 0.0})
    for r in rows:
        missing = REQUIRED_COLUMNS - set(r)
        if missing:
            raise SchemaError(f"row missing columns {sorted(missing)}")
        key = (r["variant"], r.get("distribution", "") or "", r["method"])
        g = groups[key]
        hv = _num(r["hv"], "hv")
        obj = _num(r["best_obj"], "best_obj")
        if hv is not None:
            g["hv"].append(hv)
        if obj is not None:
            g["obj"].append(obj)
        g["feas"].append(_num(r["feasible_rate"], "feasible_rate") or 0.0)
        g["time"] += _num(r["wall_ms"], "wall_ms") or 0.0
    summary = []
    for (variant, dist, method), g in groups.items():
        summary.append(
            {
                "variant": variant,
                "distribution": dist,
                "method": method,
                "instances": len(g["feas"]),
                "mean_hv": float(np.mean(g["hv"])) if g["hv"] else None,
                "mean_obj": float(np.mean(g["obj"])) if g["obj"] else None,
                "feasible_rate": float(np.mean(g["feas"])),
                "total_ms": g["time"],
            }
        )
    by_problem = defaultdict(list)
    for s in summary:
        by_problem[(s["variant"], s["distribution"])].append(s)
    for members in by_problem.values():
        hvs = [s["mean_hv"] for s in members if s["mean_hv"] is not None]
        objs = [s["mean_obj"] for s in members if s["mean_obj"] is not None]
        for s in members:
            if s["mean_hv"] is not None:
                best = max(hvs)
                s["gap"] = (best - s["mean_hv"]) / best if best else 0.0
            elif s["mean_obj"] is not None:
                best = min(objs)
                s["gap"] = (s["mean_obj"] - best) / best if best else 0.0
            else:
                s["gap"] = None
    summary.sort(key=lambda s: (s["variant"], s["distribution"], s["method"]))
    return summary


SUMMARY_COLUMNS = ["variant", "distribution", "method", "instances", "mean_hv", "mean_obj", "gap", "feasible_rate", "total_ms"]


# --- subcommands -----------------------------------------------------------------------------


def cmd_gen(a) -> int:
    cfg = GenConfig.parse(a.dist, a.n, a.variant, seed=a.seed)
    spec = calibrate_thresholds(cfg, samples=a.calibration_samples)
    os.makedirs(a.out, exist_ok=True)
    for i in range(a.count):
        path = os.path.join(a.out, f"inst_{i:05d}.json")
        save_instance(f"{path}.tmp", generate(cfg, i), spec)
        os.replace(f"{path}.tmp", path)
    write_manifest(a.out, "gen", vars(a), {"spec": spec.to_json()})
    print(f"wrote {a.count} instances to {a.out}")
    return 0


def cmd_solve(a) -> int:
    instances, spec, info = load_folder(a.inp)
    method = a.method
    if method == "heuristic":
        method = HEURISTIC_FOR[spec.variant]
    if method == "nepf":
        if not a.ckpt:
            raise UsageError("--method nepf needs --ckpt")
        rows = _nepf_rows(a, instances, spec)
    else:
        prefs = _prefs_for(spec, a.prefs)
        jobs = [(i, inst, spec, method, prefs) for i, inst in enumerate(instances)]
        rows = run_parallel(solve_heuristic_one, jobs, a.workers)
    for r in rows:
        r["distribution"] = info.get("dist", "")
    write_csv(a.out, rows, METRIC_COLUMNS)
    write_manifest(_out_dir(a.out), "solve", vars(a))
    print(f"wrote {len(rows)} rows to {a.out}")
    return 0


def _nepf_rows(a, instances, spec):
    from .model import load_model
    from .training import evaluate

    model, _ = load_model(a.ckpt)
    if model.config.variant != spec.variant.value:
        raise UsageError(f"checkpoint is for {model.config.variant}, instances are {spec.variant.value}")
    prefs = _prefs_for(spec, a.prefs)
    return evaluate(model, instances, spec, prefs=prefs, aug=a.aug, K2=a.k2, seed=a.seed)


def cmd_eval(a) -> int:
    a.method = "nepf"
    return cmd_solve(a)


def cmd_train(a) -> int:
    from .model import ModelConfig
    from .training import TrainConfig, train

    gen = GenConfig.parse(a.dist, a.n, a.variant, seed=a.seed)
    tc = TrainConfig(
        epochs=a.epochs,
        instances_per_epoch=a.instances,
        batch_size=a.batch,
        k1=a.k1,
        k2_train=a.k2_train,
        k2_eval=a.k2_eval,
        lr=a.lr,
        seed=a.seed,
        val_instances=a.val_instances,
    )
    make = ModelConfig.desk if a.desk else ModelConfig
    mc = make(a.variant, edge_stage=a.edge_stage, seed=a.seed)
    write_manifest(a.out, "train", vars(a), {"train_config": asdict(tc), "model_config": mc.to_json()})

    def progress(rec, secs):
        print(json.dumps({**{k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in rec.items()}, "seconds": round(secs, 2)}), flush=True)

    res = train(tc, gen, mc, out_dir=a.out, progress=progress)
    print(f"best checkpoint: {res.best_path}")
    return 0


def cmd_compare_fsasp(a) -> int:
    cfg = GenConfig.parse(a.dist, a.n, "motsp", seed=a.seed)
    prefs = preference_grid(a.prefs)
    if a.workers > 1:
        chunks = [(cfg, lo, min(lo + a.chunk, a.instances), prefs) for lo in range(0, a.instances, a.chunk)]
        parts = run_parallel(_gap_chunk, chunks, a.workers)
        cells = [c for part in parts for c in part[0]]
        hv_rows = [h for part in parts for h in part[1]]
    else:
        cells, hv_rows = _gap_chunk((cfg, 0, a.instances, prefs))
    write_csv(a.out, cells, ["instance", "lambda1", "cheb_greedy", "cheb_dp", "gap", "approximate"])
    hv_path = os.path.splitext(a.out)[0] + "_hv.csv"
    write_csv(hv_path, hv_rows, ["instance", "hv_greedy", "hv_dp", "hv_diff"])
    write_manifest(_out_dir(a.out), "compare-fsasp", vars(a))
    gaps = np.array([c["gap"] for c in cells])
    print(
        f"{len(cells)} cells: zero-gap share {np.mean(gaps == 0):.3f}, "
        f"p95 gap {np.percentile(gaps, 95):.4f}, max gap {gaps.max():.4f}"
    )
    return 0


def _gap_chunk(job):
    from .fsasp import fsasp_gap_study

    cfg, lo, hi, prefs = job
    return fsasp_gap_study(cfg, hi - lo, prefs, start=lo)


def cmd_aggregate(a) -> int:
    summary = aggregate_metrics(a.inputs)
    write_csv(a.out, summary, SUMMARY_COLUMNS)
    for s in summary:
        print(", ".join(f"{k}={s[k]}" for k in SUMMARY_COLUMNS))
    return 0


def cmd_selftest(a) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=not a.quiet) else 1


# --- parser --------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgroute", description="Multigraph routing: generation, heuristics, training and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)

    variants = [v.value for v in Variant]

    g = sub.add_parser("gen", help="generate an instance folder")
    g.add_argument("--variant", choices=variants, required=True)
    g.add_argument("--dist", default="flex2", help="flexN, fixN or realistic-{sc,wc,nc}")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--calibration-samples", type=int, default=500)
    g.add_argument("--out", required=True)
    common(g)
    g.set_defaults(fn=cmd_gen)

    def solve_args(sp, with_method):
        sp.add_argument("--in", dest="inp", required=True, help="instance folder from gen")
        sp.add_argument("--out", required=True, help="metric CSV")
        if with_method:
            sp.add_argument("--method", default="heuristic", choices=["heuristic", "nn", "beam", "greedy-op", "greedy-moop", "insertion", "nepf"])
            sp.add_argument("--ckpt")
        else:
            sp.add_argument("--ckpt", required=True)
        sp.add_argument("--prefs", type=int, default=101)
        sp.add_argument("--aug", type=int, default=1)
        sp.add_argument("--k2", type=int, default=50)
        common(sp)

    s = sub.add_parser("solve", help="solve an instance folder and write per-instance metrics")
    solve_args(s, True)
    s.set_defaults(fn=cmd_solve)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an instance folder")
    solve_args(e, False)
    e.set_defaults(fn=cmd_eval)

    t = sub.add_parser("train", help="train a model from scratch")
    t.add_argument("--variant", choices=variants, required=True)
    t.add_argument("--dist", default="flex2")
    t.add_argument("--n", type=int, default=10)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--instances", type=int, default=2000, help="instances per epoch")
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--k1", type=int)
    t.add_argument("--k2-train", type=int, default=20)
    t.add_argument("--k2-eval", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--desk", action="store_true", help="reduced widths for single-core training")
    t.add_argument("--edge-stage", choices=["auto", "learned", "greedy"], default="auto")
    t.add_argument("--val-instances", type=int, default=100)
    t.add_argument("--out", required=True)
    common(t)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compare-fsasp", help="greedy-linear vs exact edge selection on fixed permutations")
    c.add_argument("--dist", default="flex2")
    c.add_argument("--n", type=int, default=50)
    c.add_argument("--instances", type=int, default=200)
    c.add_argument("--prefs", type=int, default=101)
    c.add_argument("--chunk", type=int, default=10)
    c.add_argument("--out", required=True)
    common(c)
    c.set_defaults(fn=cmd_compare_fsasp)

    ag = sub.add_parser("aggregate", help="summarize metric CSVs")
    ag.add_argument("inputs", nargs="+")
    ag.add_argument("--out", required=True)
    ag.set_defaults(fn=cmd_aggregate)

    st = sub.add_parser("selftest", help="run the built-in oracle, gradient and invariant checks")
    st.add_argument("--quiet", action="store_true")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be positive")
        return int(args.fn(args) or 0)
    except UsageError as exc:
        print(f"mgroute: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except (SchemaError, ValueError, OSError) as exc:
        print(f"mgroute: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
