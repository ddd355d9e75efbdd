"""Command-line driver: train, eval, baseline, plot and compare.

Exit status is 0 on success, 2 on a configuration error and 3 when a
simulation diverges.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from safeshed import ars
from safeshed.errors import ConfigError, SimulationDiverged
from safeshed.grid_env.env import FaultTask
from safeshed.policy import PolicyBundle
from safeshed.rollout import (
    RolloutResult,
    read_trajectory_csv,
    run_episode,
    simulate,
    uvls_controller,
    write_trajectory_csv,
    zero_controller,
)
from safeshed.runconfig import RunConfig, load_run_config, parse_tasks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

VERDICT_COLUMNS = ("task", "fault_bus", "fault_duration", "controller", "mode", "violated", "min_safety",
                   "total_shed", "plain_return", "episode_return", "terminal_reason")
COMPARE_COLUMNS = ("task", "rl_violated", "rl_total_shed", "uvls_violated", "uvls_total_shed", "shed_saving")


def _out_dir(args, cfg: RunConfig, default_sub: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir) / default_sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config)
    return cfg.with_overrides(mode=getattr(args, "mode", None), seed=getattr(args, "seed", None))


def _task_list(args, cfg: RunConfig) -> tuple[FaultTask, ...]:
    if getattr(args, "tasks", None):
        return parse_tasks(" ".join(args.tasks))
    return cfg.eval_tasks


def verdict_row(result: RolloutResult, controller: str) -> dict:
    task = result.task
    return {
        "task": task.spec(),
        "fault_bus": task.fault_bus,
        "fault_duration": task.fault_duration,
        "controller": controller,
        "mode": result.mode,
        "violated": "yes" if result.violated else "no",
        "min_safety": repr(result.min_safety),
        "total_shed": repr(result.total_shed),
        "plain_return": repr(result.plain_return),
        "episode_return": repr(result.episode_return),
        "terminal_reason": result.terminal_reason,
    }


def write_verdicts(path: Path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=VERDICT_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def read_verdicts(path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"verdict table not found: {path}")
    with open(p, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(VERDICT_COLUMNS) - set(rows[0]):
        raise ConfigError(f"{path}: not a verdict table")
    return rows


def _print_verdicts(rows):
    print(f"{'task':<14}{'controller':<12}{'violated':<10}{'min_safety':>12}{'total_shed':>12}")
    for r in rows:
        print(f"{r['task']:<14}{r['controller']:<12}{r['violated']:<10}"
              f"{float(r['min_safety']):>12.4f}{float(r['total_shed']):>12.4f}")


def _dump(results, out: Path, cfg: RunConfig, grid_cfg, plots: bool):
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        if res.trajectory is None or len(res.trajectory) == 0:
            continue
        path = out / f"{res.task.label}.csv"
        write_trajectory_csv(path, res, grid_cfg, cfg.reward)
        if plots:
            plot_trajectory(path, path.with_suffix(".svg"))


def _bundle_reward(cfg: RunConfig, bundle: PolicyBundle):
    import dataclasses

    lam = bundle.metadata.get("lambda")
    return dataclasses.replace(cfg.reward, lam=float(lam)) if lam else cfg.reward


def evaluate_bundle(bundle: PolicyBundle, cfg: RunConfig, grid_cfg, tasks, mode: str) -> list[RolloutResult]:
    p = bundle.params
    if p.n_obs != grid_cfg.n_obs or p.n_act != grid_cfg.n_load:
        raise ConfigError(f"policy is {p.n_obs}->{p.n_act} but the grid needs {grid_cfg.n_obs}->{grid_cfg.n_load}")
    reward = _bundle_reward(cfg, bundle)
    return [run_episode(grid_cfg, t, bundle, reward, mode) for t in tasks]


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    grid_cfg = cfg.grid_config()
    out = _out_dir(args, cfg, cfg.ars.mode)

    def progress(rec):
        print(ars.format_progress(rec), flush=True)

    res = ars.train(cfg.ars, grid_cfg, cfg.reward, cfg.tasks, args.executors, progress)
    res.bundle.save(out / "policy.json")
    ars.write_history(res.history, out / "history.csv", out / "history.jsonl")
    final = evaluate_bundle(res.bundle, cfg, grid_cfg, cfg.eval_tasks, cfg.ars.mode)
    rows = [verdict_row(r, "policy") for r in final]
    write_verdicts(out / "final_eval.csv", rows)
    summary = {
        "mode": cfg.ars.mode,
        "seed": cfg.ars.seed,
        "iterations": len(res.history),
        "lambda_final": res.lam,
        "violations_per_iteration": [rec.violation_count for rec in res.history],
        "final_eval": {r.task.spec(): {"episode_return": r.episode_return, "plain_return": r.plain_return,
                                       "violated": r.violated, "total_shed": r.total_shed}
                       for r in final},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if args.debug_trajectories:
        _dump(final, out / "trajectories", cfg, grid_cfg, cfg.report.plots)
    _print_verdicts(rows)
    print(f"wrote {out / 'policy.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    grid_cfg = cfg.grid_config()
    tasks = _task_list(args, cfg)
    out = _out_dir(args, cfg, "eval")
    if args.zero:
        results = [simulate(grid_cfg, t, zero_controller, cfg.reward) for t in tasks]
        name = "zero"
    else:
        if not args.bundle:
            raise ConfigError("eval needs a policy bundle path or --zero")
        bundle = PolicyBundle.load(args.bundle) if Path(args.bundle).is_file() else None
        if bundle is None:
            raise ConfigError(f"policy bundle not found: {args.bundle}")
        mode = args.mode or bundle.metadata.get("mode", "plain")
        results = evaluate_bundle(bundle, cfg, grid_cfg, tasks, mode)
        name = "policy"
    return _finish_rollouts(results, name, out, cfg, grid_cfg)


def cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    grid_cfg = cfg.grid_config()
    tasks = _task_list(args, cfg)
    out = _out_dir(args, cfg, "baseline")
    results = [simulate(grid_cfg, t, uvls_controller(cfg.uvls), cfg.reward) for t in tasks]
    return _finish_rollouts(results, "uvls", out, cfg, grid_cfg)


def _finish_rollouts(results, name, out: Path, cfg, grid_cfg) -> int:
    rows = [verdict_row(r, name) for r in results]
    write_verdicts(out / "verdicts.csv", rows)
    _dump(results, out, cfg, grid_cfg, cfg.report.plots)
    _print_verdicts(rows)
    diverged = [r.task.spec() for r in results if r.terminal_reason == "divergence"]
    if diverged:
        raise SimulationDiverged(f"simulation diverged on {', '.join(diverged)}")
    return EXIT_OK


def plot_trajectory(csv_path, svg_path):
    """Observed-bus voltages with the lower recovery envelope and crossing markers."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_trajectory_csv(csv_path)
    t = data.get("t")
    if t is None or t.size == 0:
        raise ConfigError(f"{csv_path}: empty trajectory")
    vcols = [c for c in data if c.startswith("V_bus")]
    fig, ax = plt.subplots(figsize=(7, 4))
    low = data["envelope_lower"]
    below = np.zeros(t.size, dtype=bool)
    for c in vcols:
        ax.plot(t, data[c], label=c.replace("V_bus", "bus "))
        with np.errstate(invalid="ignore"):
            hit = data[c] < low
        below |= hit
        if hit.any():
            ax.plot(t[hit], data[c][hit], "x", color="red", ms=5)
    ax.step(t, low, where="post", color="k", ls="--", lw=1.2, label="envelope")
    if below.any():
        ax.plot([], [], "x", color="red", label="crossing")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("voltage (p.u.)")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
    return int(below.sum())


def cmd_plot(args) -> int:
    src = Path(args.csv)
    if not src.is_file():
        raise ConfigError(f"trajectory file not found: {src}")
    dst = Path(args.out) if args.out else src.with_suffix(".svg")
    n = plot_trajectory(src, dst)
    print(f"wrote {dst} ({n} envelope crossings)")
    return EXIT_OK


def compare_rows(rl_rows, uvls_rows) -> list[dict]:
    uvls = {r["task"]: r for r in uvls_rows}
    out = []
    for r in rl_rows:
        u = uvls.get(r["task"])
        if u is None:
            continue
        rl_shed, u_shed = float(r["total_shed"]), float(u["total_shed"])
        out.append({"task": r["task"], "rl_violated": r["violated"], "rl_total_shed": repr(rl_shed),
                    "uvls_violated": u["violated"], "uvls_total_shed": repr(u_shed),
                    "shed_saving": repr(u_shed - rl_shed)})
    return out


def cmd_compare(args) -> int:
    rows = compare_rows(read_verdicts(args.rl), read_verdicts(args.uvls))
    if not rows:
        raise ConfigError("the two verdict tables share no tasks")
    dst = Path(args.out) if args.out else Path(args.rl).with_name("compare.csv")
    dst.parent.mkdir(parents=True, exist_ok=True)
    with open(dst, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    print(f"{'task':<14}{'rl viol':<9}{'rl shed':>10}{'uvls viol':>11}{'uvls shed':>11}")
    for r in rows:
        print(f"{r['task']:<14}{r['rl_violated']:<9}{float(r['rl_total_shed']):>10.3f}"
              f"{r['uvls_violated']:>11}{float(r['uvls_total_shed']):>11.3f}")
    print(f"wrote {dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeshed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", help="run config INI (defaults to the bundled run)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--executors", type=int, default=1)
        p.add_argument("--debug-trajectories", action="store_true")
        if mode:
            p.add_argument("--mode", choices=ars.TRAIN_MODES)

    p = sub.add_parser("train", help="train a policy with safe ARS")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy bundle on fault tasks")
    p.add_argument("bundle", nargs="?")
    p.add_argument("--zero", action="store_true", help="evaluate the no-shedding controller instead")
    p.add_argument("--tasks", nargs="+", help="bus:duration[@start] specs")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run the UVLS relay baseline")
    p.add_argument("--tasks", nargs="+")
    common(p, mode=False)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("plot", help="render a trajectory CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="join policy and UVLS verdict tables")
    p.add_argument("rl")
    p.add_argument("uvls")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "executors", 1) < 1:
        print("error: --executors must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationDiverged as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
