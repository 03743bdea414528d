"""Benchmark runner: ``igpc-bench run|summarize|regret|sweep-alpha|defaults``.

Every (agent, magnitude, seed) cell writes its own CSV files; the parent
merges them in a fixed order, so reruns produce byte-identical ledgers for
any worker count.  ``IGPC_WORKERS`` sets the worker count (default 1).

Exit codes: 0 success, 1 invalid input, 2 a cell failed at runtime.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, default_grid, load_config, save_config
from .dynamics import ConfigError
from .environments import make_environment
from .planner import PlannerMode, iterative_planner
from .policies import make_action_set
from .regret import comparator_solve, planning_regret

log = logging.getLogger("igpc.bench")

LEDGER_FIELDS = ["agent", "magnitude", "seed", "iteration", "real_rollouts", "alpha", "cost", "status"]
ROLLOUT_FIELDS = ["agent", "magnitude", "seed", "rollout", "iteration", "alpha", "cost", "accepted"]
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _num(x) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def _workers() -> int:
    raw = os.environ.get("IGPC_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"IGPC_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("IGPC_WORKERS must be >= 1")
    return n


# --- running cells ----------------------------------------------------------


def build_cell(cfg: ExperimentConfig, magnitude: float, seed: int):
    env = make_environment(cfg.environment["name"], **cfg.environment["params"])
    dist = env.disturbance(cfg.disturbance["kind"], magnitude, seed, **cfg.disturbance["params"])
    return env, dist


def run_cell(cfg: ExperimentConfig, agent: str, magnitude: float, seed: int, alpha_plus=None):
    """Run one agent on one cell; returns (ledger rows, rollout rows, ok)."""
    head = [agent, _num(magnitude), str(seed)]
    ledger, rollouts = [], []
    try:
        env, dist = build_cell(cfg, magnitude, seed)
        mode = PlannerMode(agent, cfg.line_search_params(alpha_plus))
        res = iterative_planner(mode, env.system, dist, env.cost, cfg.N, x0=env.x0,
                                gpc=cfg.gpc_params(), budget=cfg.budget,
                                score_on_real=(agent == "ilqg" and cfg.ilqg_score_on_real))
    except Exception as exc:  # recorded as a failure row
        log.error("cell %s/%s/%s failed: %s", agent, magnitude, seed, exc)
        status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        return [head + ["", "", "", "", status]], [], False
    for row in res.ledger:
        ledger.append(head + [str(row.iteration), str(row.real_rollouts_used), _num(row.alpha_accepted),
                              _num(row.cost), "ok"])
    if res.budget_exhausted:
        ledger.append(head + [str(len(res.ledger) + 1), str(res.real_rollouts), "", "", "budget_exhausted"])
    for r in res.rollouts:
        rollouts.append(head + [str(r.rollout), str(r.iteration), _num(r.alpha), _num(r.cost), str(int(r.accepted))])
    return ledger, rollouts, True


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cell_job(args):
    cfg_dict, agent, mi, magnitude, seed, cell_dir, alpha_plus = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ledger, rollouts, ok = run_cell(cfg, agent, magnitude, seed, alpha_plus)
    stem = Path(cell_dir) / f"{agent}__m{mi}__s{seed}"
    _write_csv(stem.with_suffix(".ledger.csv"), LEDGER_FIELDS, ledger)
    _write_csv(stem.with_suffix(".rollouts.csv"), ROLLOUT_FIELDS, rollouts)
    return ok


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, out_dir=None, alpha_plus=None) -> bool:
    """Run every cell, merge ledgers and write summaries.  Returns True when
    no cell failed."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cell_dir = out / "cells"
    if cell_dir.exists():
        shutil.rmtree(cell_dir)
    cell_dir.mkdir()
    jobs = [(cfg.to_dict(), agent, mi, m, seed, str(cell_dir), alpha_plus)
            for agent in cfg.agents
            for mi, m in enumerate(cfg.disturbance["magnitudes"])
            for seed in cfg.seeds]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            oks = list(pool.map(_cell_job, jobs))
    else:
        oks = [_cell_job(j) for j in jobs]
    ledger, rollouts = [], []
    for _, agent, mi, _, seed, _, _ in jobs:
        stem = cell_dir / f"{agent}__m{mi}__s{seed}"
        ledger += [[r[k] for k in LEDGER_FIELDS] for r in _read_rows(stem.with_suffix(".ledger.csv"))]
        rollouts += [[r[k] for k in ROLLOUT_FIELDS] for r in _read_rows(stem.with_suffix(".rollouts.csv"))]
    shutil.rmtree(cell_dir)
    _write_csv(out / "ledger.csv", LEDGER_FIELDS, ledger)
    _write_csv(out / "rollouts.csv", ROLLOUT_FIELDS, rollouts)
    meta = {"package": "igpc", "version": __version__, "config_hash": cfg.config_hash(),
            "alpha_plus": alpha_plus if alpha_plus is not None else cfg.line_search["alpha_plus"],
            "config": cfg.to_dict()}
    with open(out / "ledger.meta.json", "w") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    rows = _read_rows(out / "ledger.csv")
    _write_csv(out / "plot_data.csv", PLOT_FIELDS, plot_data(rows))
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary_table(rows, cfg.threshold, cfg.threshold_factor))
    return all(oks)


# --- summaries ----------------------------------------------------------------

PLOT_FIELDS = ["agent", "magnitude", "iteration", "statistic", "real_rollouts", "cost"]
SUMMARY_FIELDS = ["agent", "magnitude", "threshold", "rollouts_to_threshold", "seeds_reached", "seeds"]


def _ok_rows(rows):
    return [r for r in rows if r["status"] == "ok"]


def _group(rows, keys):
    out = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def plot_data(rows) -> list:
    """Median cost and real-rollout count per (agent, magnitude, iteration)."""
    out = []
    for (agent, mag, it), grp in _group(_ok_rows(rows), ["agent", "magnitude", "iteration"]).items():
        out.append([agent, mag, it, "median",
                    _num(np.median([float(r["real_rollouts"]) for r in grp])),
                    _num(np.median([float(r["cost"]) for r in grp]))])
    return out


def rollouts_to_threshold(rows, threshold: float):
    """Real rollouts used when the cost first reaches ``threshold``, or None."""
    for r in sorted(rows, key=lambda r: int(r["iteration"])):
        if float(r["cost"]) <= threshold:
            return int(r["real_rollouts"])
    return None


def median_count(counts):
    """Median over seeds; a seed that never reached counts as infinite."""
    vals = [np.inf if c is None else c for c in counts]
    med = float(np.median(vals))
    if not np.isfinite(med):
        return "not reached"
    return str(int(med)) if med.is_integer() else _num(med)


def _auto_thresholds(rows, factor):
    """factor x the best median terminal cost across agents, per magnitude."""
    finals = {}
    for (agent, mag, seed), grp in _group(_ok_rows(rows), ["agent", "magnitude", "seed"]).items():
        last = max(grp, key=lambda r: int(r["iteration"]))
        finals.setdefault((mag, agent), []).append(float(last["cost"]))
    best = {}
    for (mag, _), vals in finals.items():
        best[mag] = min(best.get(mag, np.inf), float(np.median(vals)))
    return {mag: factor * v for mag, v in best.items()}


def summary_table(rows, threshold=None, factor: float = 1.1) -> list:
    auto = _auto_thresholds(rows, factor) if threshold is None else {}
    out = []
    by_cell = _group(_ok_rows(rows), ["agent", "magnitude"])
    seen = []
    for r in rows:  # ledger order
        key = (r["agent"], r["magnitude"])
        if key not in seen:
            seen.append(key)
    for agent, mag in seen:
        thr = threshold if threshold is not None else auto.get(mag)
        per_seed = _group(by_cell.get((agent, mag), []), ["seed"])
        seeds = sorted({r["seed"] for r in rows if (r["agent"], r["magnitude"]) == (agent, mag)}, key=int)
        counts = [rollouts_to_threshold(per_seed.get((s,), []), thr) if thr is not None else None for s in seeds]
        out.append([agent, mag, "" if thr is None else _num(thr), median_count(counts),
                    str(sum(c is not None for c in counts)), str(len(seeds))])
    return out


def _find_runs(paths):
    metas = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise ConfigError(f"{p} does not exist")
        metas += sorted(p.rglob("ledger.meta.json")) if p.is_dir() else [p]
    if not metas:
        raise ConfigError("no ledger.meta.json found")
    return metas


def summarize(paths, threshold: float) -> list:
    """Rollouts-to-threshold table over one or more run directories that
    share a config hash."""
    metas = _find_runs(paths)
    hashes = set()
    rows = []
    for m in metas:
        meta = json.loads(m.read_text())
        hashes.add(meta["config_hash"])
        rows += _read_rows(m.parent / "ledger.csv")
    if len(hashes) > 1:
        raise ConfigError(f"refusing to summarize ledgers from {len(hashes)} different configs")
    return summary_table(rows, threshold)


# --- regret -------------------------------------------------------------------

REGRET_FIELDS = ["agent", "magnitude", "seed", "real_rollouts", "cumulative_regret", "average_regret",
                 "comparator", "residual", "status"]


def regret_report(run_dir, action_radius: float = 1e3, max_rollouts=None) -> list:
    """Planning regret of every agent's real rollouts against the hindsight
    comparator on the same disturbance realizations.

    Linear-quadratic environments get the certified optimum ("exact");
    otherwise the comparator is the best local solution found.
    """
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "ledger.meta.json").read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    rows = _read_rows(run_dir / "rollouts.csv")
    action_set = make_action_set({"ball": action_radius})
    gp = cfg.gpc_params()
    out = []
    for (agent, mag, seed), grp in _group(rows, ["agent", "magnitude", "seed"]).items():
        losses = [float(r["cost"]) for r in grp if int(r["rollout"]) >= 0]
        if max_rollouts is not None:
            losses = losses[:max_rollouts]
        head = [agent, mag, seed, str(len(losses))]
        env, dist = build_cell(cfg, float(mag), int(seed))
        if dist.state_dependent:
            out.append(head + ["", "", "", "", "skipped: state-dependent disturbance"])
            continue
        if not losses:
            out.append(head + ["", "", "", "", "skipped: no real rollouts"])
            continue
        T = env.system.T
        specs = [(env.system, dist.realize(i, T), env.cost) for i in range(len(losses))]
        try:
            sol = comparator_solve(specs, action_set, gp.gamma, gp.L, env.x0)
        except Exception as exc:
            out.append(head + ["", "", "", "", f"error: {type(exc).__name__}: {exc}"])
            continue
        rep = planning_regret(losses, sol)
        label = "exact" if sol.diagnostics["convex"] else "best found"
        status = "ok" if sol.diagnostics["converged"] else "not converged"
        out.append(head + [_num(rep.cumulative), _num(rep.average), label,
                           _num(sol.diagnostics["residual"]), status])
    return out


# --- alpha sweep ----------------------------------------------------------------

SWEEP_FIELDS = ["agent", "magnitude", "alpha_plus", "median_final_cost", "median_real_rollouts", "best"]


def sweep_alpha(cfg: ExperimentConfig, out_dir=None):
    """Run the experiment once per alpha_plus in ``alpha_grid``; the best
    alpha per (agent, magnitude) has the lowest median final cost, ties
    broken by fewer real rollouts."""
    out = Path(out_dir or cfg.output_dir)
    ok = True
    stats = {}
    for a in cfg.alpha_grid:
        sub = out / f"alpha_{_num(a)}"
        ok &= run_experiment(cfg, sub, alpha_plus=a)
        rows = _ok_rows(_read_rows(sub / "ledger.csv"))
        for (agent, mag, seed), grp in _group(rows, ["agent", "magnitude", "seed"]).items():
            last = max(grp, key=lambda r: int(r["iteration"]))
            stats.setdefault((agent, mag, a), []).append((float(last["cost"]), float(last["real_rollouts"])))
    table = []
    keys = sorted({(ag, m) for ag, m, _ in stats}, key=lambda k: (cfg.agents.index(k[0]), float(k[1])))
    for agent, mag in keys:
        med = {a: (float(np.median([c for c, _ in stats[(agent, mag, a)]])),
                   float(np.median([n for _, n in stats[(agent, mag, a)]])))
               for a in cfg.alpha_grid if (agent, mag, a) in stats}
        best = min(med, key=lambda a: med[a])
        for a, (c, n) in med.items():
            table.append([agent, mag, _num(a), _num(c), _num(n), str(int(a == best))])
    _write_csv(out / "sweep.csv", SWEEP_FIELDS, table)
    return ok, table


# --- entry point ----------------------------------------------------------------


def _print_table(header, rows) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igpc-bench", description="Seeded iterative-planning benchmarks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    s = sub.add_parser("summarize", help="rollouts-to-threshold table")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--threshold", type=float, required=True)
    g = sub.add_parser("regret", help="planning regret against the hindsight comparator")
    g.add_argument("dir")
    g.add_argument("--action-radius", type=float, default=1e3)
    g.add_argument("--max-rollouts", type=int)
    a = sub.add_parser("sweep-alpha", help="rerun over the config's alpha_grid")
    a.add_argument("config")
    a.add_argument("--out")
    d = sub.add_parser("defaults", help="write the default nine-panel grid as config files")
    d.add_argument("dir")
    d.add_argument("--seeds", type=int, default=5)
    d.add_argument("--N", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            ok = run_experiment(load_config(args.config), args.out)
            return EXIT_OK if ok else EXIT_RUNTIME
        if args.command == "summarize":
            _print_table(SUMMARY_FIELDS, summarize(args.dirs, args.threshold))
            return EXIT_OK
        if args.command == "regret":
            rows = regret_report(args.dir, args.action_radius, args.max_rollouts)
            _write_csv(Path(args.dir) / "regret.csv", REGRET_FIELDS, rows)
            _print_table(REGRET_FIELDS, rows)
            return EXIT_OK if all(r[-1] == "ok" or r[-1].startswith("skipped") for r in rows) else EXIT_RUNTIME
        if args.command == "sweep-alpha":
            ok, table = sweep_alpha(load_config(args.config), args.out)
            _print_table(SWEEP_FIELDS, table)
            return EXIT_OK if ok else EXIT_RUNTIME
        if args.command == "defaults":
            out = Path(args.dir)
            out.mkdir(parents=True, exist_ok=True)
            for cfg in default_grid(range(args.seeds), args.N):
                save_config(out / f"{cfg.name}.json", cfg)
                print(out / f"{cfg.name}.json")
            return EXIT_OK
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"igpc-bench: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"igpc-bench: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
