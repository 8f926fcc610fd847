"""Command-line entry point: ``fsail {generate-data,run,report,ablate}``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
``FSAIL_WORKERS`` sets how many sweep points run in parallel processes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .env import generate_demos, read_demo_set, write_demo_set
from .env.demos import DemoError
from .harness import (METHODS, DemoSource, HarnessError, RunSummary, load_summary, render_table,
                      run_protocol)

log = logging.getLogger("fsail")

WORKERS_ENV = "FSAIL_WORKERS"
SWEEPS = {
    "prompts": [{"model": {"n_prompts": n}} for n in (1, 3, 5, 7, 9)],
    "lambda": [{"train": {"lam1": a, "lam2": round(1 - a, 1)}} for a in (0.1, 0.2, 0.3, 0.4, 0.5)],
    "projection": [{"model": {"projection": m}}
                   for m in ("identity", "linear", "mlp", "average_pooling")],
    "base-tasks": [{"schedule": {"n_base_tasks": n}} for n in (0, 2, 4, 6, 8, 10)],
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ data layout

def base_dir(data_dir, seed: int) -> Path:
    return Path(data_dir) / f"seed{seed}" / "base"


def incremental_dir(data_dir, seed: int, q: int) -> Path:
    return Path(data_dir) / f"seed{seed}" / f"incremental_q{q}"


def _non_empty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


def generate_data(cfg: ExperimentConfig, force: bool = False, echo=print) -> None:
    catalog = cfg.catalog()
    env = cfg.env_params()
    for seed in cfg.seeds:
        sched = cfg.session_schedule(seed)
        targets = [(base_dir(cfg.data_dir, seed), sched.base_tasks, sched.base_demos, sched.base_seed),
                   (incremental_dir(cfg.data_dir, seed, sched.q), catalog.incremental, sched.q,
                    sched.fewshot_seed)]
        for directory, tasks, count, first_seed in targets:
            if _non_empty(directory) and not force:
                raise UsageError(f"{directory} already holds data; pass --force to overwrite")
            demos = [d for t in tasks for d in generate_demos(t, count, first_seed, env)]
            write_demo_set(directory, catalog, env, demos,
                           extra={"seed": seed, "demos_per_task": count, "first_seed": first_seed})
            for t in tasks:
                echo(f"{directory}: {t.task_id} {count} demos")


def load_demos(cfg: ExperimentConfig, seed: int) -> DemoSource:
    sched = cfg.session_schedule(seed)
    store = {}
    wanted = [("base", base_dir(cfg.data_dir, seed), sched.base_tasks, sched.base_demos),
              ("fewshot", incremental_dir(cfg.data_dir, seed, sched.q),
               [t for s in sched.incremental_sessions for t in s], sched.q)]
    for kind, directory, tasks, count in wanted:
        if not tasks:
            continue
        if not (directory / "manifest.json").exists():
            stage = "base-session" if kind == "base" else f"{sched.q}-shot incremental"
            raise HarnessError(f"missing {stage} demonstrations at {directory}; "
                               f"run `fsail generate-data --config ...` first")
        _, _, _, demos = read_demo_set(directory)
        for t in tasks:
            mine = [d for d in demos if d.task_id == t.task_id]
            if len(mine) < count:
                raise HarnessError(f"{directory}: {t.task_id} has {len(mine)} demos, need {count}")
            store[(kind, t.task_id)] = mine[:count]
    return DemoSource(sched, cfg.env_params(), store)


# ------------------------------------------------------------------ run

def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"{cfg.method}_seed{seed}"


def run_one(cfg: ExperimentConfig, seed: int, out: Optional[Path] = None,
            cache_dir: Optional[Path] = None) -> RunSummary:
    out = out or run_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    echoed = out / "config.json"
    resolved = cfg.with_overrides(seed=seed)
    if echoed.exists() and json.loads(echoed.read_text()) != resolved.to_dict():
        raise UsageError(f"{out} belongs to a different configuration; choose another --out")
    resolved.save(echoed)
    cache = cache_dir or Path(cfg.out_dir) / "cache"
    return run_protocol(cfg.session_schedule(seed), cfg.train_config(seed), out, cache,
                        load_demos(cfg, seed))


# ------------------------------------------------------------------ report

def _check_compatible(summaries: Sequence[RunSummary]):
    keys = {json.dumps({k: v for k, v in s.schedule.items() if k != "seed"}, sort_keys=True)
            for s in summaries}
    if len(keys) > 1:
        raise HarnessError("runs use incompatible session schedules and cannot be compared")


def curve_rows(summaries: Sequence[RunSummary]) -> list:
    methods = sorted({s.method for s in summaries})
    n = len(summaries[0].reports)
    rows = []
    for i in range(n):
        row = {"session": i}
        for m in methods:
            vals = [s.reports[i].average for s in summaries if s.method == m]
            row[m] = float(np.mean(vals))
        rows.append(row)
    return rows


def similarity_split(graph_record: dict, catalog_tasks: dict) -> dict:
    """Mean prompt similarity for task pairs that share a verb or object vs. the rest."""
    ids = graph_record["task_ids"]
    mat = np.asarray(graph_record["matrix"])
    related, disjoint = [], []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            ta, tb = catalog_tasks[ids[a]], catalog_tasks[ids[b]]
            shares = ta.verb == tb.verb or bool(set(ta.descriptors()) & set(tb.descriptors()))
            (related if shares else disjoint).append(mat[a, b])
    return {"related_mean": float(np.mean(related)) if related else math.nan,
            "disjoint_mean": float(np.mean(disjoint)) if disjoint else math.nan,
            "related_pairs": len(related), "disjoint_pairs": len(disjoint)}


def report(run_dirs: Sequence[str], out: Optional[str], echo=print) -> None:
    from .env import default_catalog

    summaries = [load_summary(d) for d in run_dirs]
    _check_compatible(summaries)
    table = render_table(summaries)
    echo(table, end="")
    out_path = Path(out) if out else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "table.txt").write_text(table)
        rows = curve_rows(summaries)
        with open(out_path / "session_curve.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    tasks = {t.task_id: t for t in default_catalog().all()}
    for d in run_dirs:
        sim_path = Path(d) / "similarity.json"
        if not sim_path.exists():
            continue
        rec = json.loads(sim_path.read_text())
        split = similarity_split(rec, tasks)
        echo(f"{d}: prompt similarity, pairs sharing a verb or object "
             f"{split['related_mean']:.3f} (n={split['related_pairs']}) vs disjoint "
             f"{split['disjoint_mean']:.3f} (n={split['disjoint_pairs']})")
        if out_path:
            name = Path(d).name
            with open(out_path / f"similarity_{name}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["task"] + rec["task_ids"])
                for tid, row in zip(rec["task_ids"], rec["matrix"]):
                    writer.writerow([tid] + [f"{v:.6f}" for v in row])
            (out_path / f"similarity_{name}.json").write_text(json.dumps({**rec, **split}, indent=1))


# ------------------------------------------------------------------ ablate

def _point_label(point: dict) -> str:
    return ",".join(f"{k}={v}" for section in point.values() for k, v in section.items())


def _run_point(args):
    cfg, seed, out = args
    return run_one(cfg, seed, out).to_record()


def ablate(cfg: ExperimentConfig, sweep: str, echo=print) -> list:
    if sweep not in SWEEPS:
        raise UsageError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    jobs = []
    for point in SWEEPS[sweep]:
        pcfg = cfg.with_overrides(**point)
        label = _point_label(point)
        for seed in cfg.seeds:
            jobs.append((label, (pcfg, seed, Path(cfg.out_dir) / sweep / label.replace("=", "")
                                 / f"{pcfg.method}_seed{seed}")))
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_point, [j for _, j in jobs]))
    else:
        results = [_run_point(j) for _, j in jobs]
    rows = {}
    for (label, _), rec in zip(jobs, results):
        rows.setdefault(label, []).append(RunSummary.from_record(rec).average)
    out = []
    for label, vals in rows.items():
        out.append({"sweep": sweep, "point": label, "average": float(np.mean(vals)),
                    "seeds": len(vals)})
        echo(f"{sweep} {label}: average accuracy {100 * np.mean(vals):.1f}% over {len(vals)} seed(s)")
    path = Path(cfg.out_dir) / sweep / "sweep_summary.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sweep", "point", "average", "seeds"])
        writer.writeheader()
        writer.writerows(out)
    return out


# ------------------------------------------------------------------ argparse

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsail", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--q", type=int, help="demonstrations per incremental task")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if seed:
            p.add_argument("--seed", type=int, help="run a single seed")

    g = sub.add_parser("generate-data", help="write base and incremental demonstration sets")
    common(g)
    g.add_argument("--force", action="store_true", help="overwrite existing data")

    r = sub.add_parser("run", help="run the incremental protocol for one method")
    common(r)
    r.add_argument("--method", choices=METHODS)

    rep = sub.add_parser("report", help="compare finished runs")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", help="directory for the table, curve and similarity files")

    a = sub.add_parser("ablate", help="run a parameter sweep")
    common(a)
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    out = args.out
    if args.command == "generate-data" and out is not None:
        # for data generation --out names the data directory
        cfg = replace(cfg, data_dir=out)
        out = None
    return cfg.with_overrides(method=getattr(args, "method", None), seed=getattr(args, "seed", None),
                              q=args.q, out_dir=out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            report(args.run_dirs, args.out)
            return 0
        cfg = _load_config(args)
        if args.command == "generate-data":
            generate_data(cfg, force=args.force)
        elif args.command == "run":
            summaries = []
            for seed in cfg.seeds:
                s = run_one(cfg, seed)
                summaries.append(s)
                print(f"{cfg.method} seed {seed}: average accuracy {100 * s.average:.1f}% "
                      f"-> {run_dir(cfg, seed)}")
            print(render_table(summaries), end="")
        elif args.command == "ablate":
            ablate(cfg, args.sweep)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"fsail: error: {exc}", file=sys.stderr)
        return 2
    except (HarnessError, DemoError, OSError, ValueError) as exc:
        print(f"fsail: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
