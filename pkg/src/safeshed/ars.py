"""Safe augmented random search: Lagrangian (constrained) and barrier-shaped variants.

Both variants share direction sampling, symmetric scoring, elite selection,
the weight update and step-size decay. The constrained variant additionally
adapts the safety multiplier from the iteration's violation flags.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from safeshed.errors import ConfigError, SimulationDiverged
from safeshed.policy import PolicyBundle, PolicyParams, RunningStats, initial_params, merge_stats, theta_checksum
from safeshed.rollout import GridProblem, RolloutPool, evaluate_iteration

SIGMA_FLOOR = 1e-8
TRAIN_MODES = ("constrained", "barrier")
TASK_SAMPLING = ("sweep", "random")


@dataclass(frozen=True)
class ArsConfig:
    alpha: float = 0.02
    n_directions: int = 32
    nu: float = 0.03
    top_b: int = 16
    m: int = 9
    decay: float = 0.997
    iterations: int = 500
    mode: str = "constrained"
    lam0: float = 5.0
    lam_min: float = 1e-3
    lam_max: float = 1e4
    seed: int = 0
    task_sampling: str = "sweep"
    arch: str = "linear"
    hidden: int = 32
    init_scale: float = 0.01

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.task_sampling not in TASK_SAMPLING:
            raise ConfigError(f"task_sampling must be one of {TASK_SAMPLING}")
        if self.n_directions < 1 or not 1 <= self.top_b <= self.n_directions:
            raise ConfigError("need 1 <= b <= N")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay rate must lie in (0, 1]")
        if not (self.alpha > 0 and self.nu > 0):
            raise ConfigError("step size and exploration std must be > 0")
        if self.iterations < 0:
            raise ConfigError("iteration budget must be >= 0")
        if not 0 < self.lam_min <= self.lam_max:
            raise ConfigError("need 0 < lam_min <= lam_max")
        if not self.lam_min <= self.lam0 <= self.lam_max:
            raise ConfigError("lam0 must lie inside the multiplier bounds")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")


@dataclass(eq=False)
class IterationRecord:
    iteration: int
    scores: np.ndarray  # (N, 2) mean returns of the + and - perturbations
    selected: list
    sigma_b: float
    lam_before: float
    lam_after: float
    any_violation: bool
    violation_count: int
    alpha: float
    nu: float
    theta_checksum: str
    min_barrier_margin: float = math.inf
    nonfinite_rewards: int = 0

    @property
    def best_return(self) -> float:
        return float(self.scores.max()) if self.scores.size else math.nan

    @property
    def mean_return(self) -> float:
        return float(self.scores.mean()) if self.scores.size else math.nan

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "scores": self.scores.tolist(),
            "selected": [int(i) for i in self.selected],
            "sigma_b": self.sigma_b,
            "lambda_before": self.lam_before,
            "lambda": self.lam_after,
            "any_violation": self.any_violation,
            "violation_count": self.violation_count,
            "alpha": self.alpha,
            "nu": self.nu,
            "theta_checksum": self.theta_checksum,
            "min_barrier_margin": self.min_barrier_margin,
            "nonfinite_rewards": self.nonfinite_rewards,
        }

    @classmethod
    def from_dict(cls, d: dict) -> IterationRecord:
        return cls(d["iteration"], np.asarray(d["scores"], dtype=float).reshape(-1, 2), list(d["selected"]),
                   d["sigma_b"], d["lambda_before"], d["lambda"], d["any_violation"], d["violation_count"],
                   d["alpha"], d["nu"], d["theta_checksum"], d["min_barrier_margin"], d["nonfinite_rewards"])


@dataclass(eq=False)
class TrainResult:
    bundle: PolicyBundle
    lam: float
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# algorithm steps


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, iteration)))


def sample_directions(rng: np.random.Generator, n: int, n_theta: int) -> list[np.ndarray]:
    if n == 0:
        return []
    block = rng.standard_normal((n, n_theta))
    return list(block)


def perturb(theta, delta, nu) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if theta.shape != delta.shape:
        raise ValueError("theta and delta dimensions differ")
    return theta + nu * delta, theta - nu * delta


def score_direction(returns_plus, returns_minus) -> tuple[float, float]:
    """Mean of the m rollout returns for each sign."""
    rp = np.asarray(returns_plus, dtype=float)
    rm = np.asarray(returns_minus, dtype=float)
    if rp.size == 0 or rm.size == 0:
        raise ValueError("need at least one rollout per sign")
    return float(rp.mean()), float(rm.mean())


def select_top(scores, b: int) -> tuple[list[int], float]:
    """Indices of the ``b`` best directions by max(R+, R-), plus σ_b.

    Ties keep the lower index first.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1, 2)
    if not 1 <= b <= len(scores):
        raise ValueError("need 1 <= b <= N")
    best = scores.max(axis=1)
    order = np.argsort(-best, kind="stable")[:b]
    sigma = float(np.std(scores[order]))
    return [int(i) for i in order], sigma


def update_weights(theta, scores, deltas, selected, alpha, sigma_b) -> np.ndarray:
    scores = np.asarray(scores, dtype=float).reshape(-1, 2)
    step = np.zeros_like(np.asarray(theta, dtype=float))
    for i in selected:
        step += (scores[i, 0] - scores[i, 1]) * np.asarray(deltas[i])
    return theta + alpha / (len(selected) * max(sigma_b, SIGMA_FLOOR)) * step


def decay(alpha, nu, eps) -> tuple[float, float]:
    return eps * alpha, eps * nu


def update_lambda(lam, any_violation: bool, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    lam = 2.0 * lam if any_violation else lam / 2.0
    return min(max(lam, lo), hi)


def replay_lambda(lam0: float, flags: Sequence[bool], bounds: tuple[float, float]) -> list[float]:
    out = []
    lam = lam0
    for flag in flags:
        lam = update_lambda(lam, bool(flag), bounds)
        out.append(lam)
    return out


# ---------------------------------------------------------------------------
# training loop


def _task_indices(cfg: ArsConfig, rng, n_tasks: int) -> np.ndarray:
    n = cfg.n_directions
    if cfg.task_sampling == "sweep":
        if cfg.m != n_tasks:
            raise ConfigError(f"sweep sampling needs m = |T| = {n_tasks}, got m = {cfg.m}")
        return np.tile(np.arange(n_tasks), (n, 1))
    return rng.integers(0, n_tasks, size=(n, cfg.m))


def initial_bundle(cfg: ArsConfig, n_obs: int, n_act: int) -> PolicyBundle:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    params = initial_params(cfg.arch, n_obs, n_act, rng, cfg.init_scale, cfg.hidden)
    return PolicyBundle(params, RunningStats.empty(n_obs))


Progress = Callable[[IterationRecord], None]


def train_problem(cfg: ArsConfig, problem, n_tasks: int, executors: int = 1,
                  progress: Progress | None = None,
                  start: PolicyBundle | None = None) -> TrainResult:
    """Run ``cfg.iterations`` safe-ARS iterations against any rollout problem.

    ``problem`` exposes ``n_obs``, ``n_act`` and ``rollout(bundle, lam,
    task_index, collect_stats, seed)``.
    """
    bundle = start or initial_bundle(cfg, problem.n_obs, problem.n_act)
    template = bundle
    theta = bundle.params.theta.copy()
    stats = bundle.stats
    lam = cfg.lam0
    alpha, nu = cfg.alpha, cfg.nu
    constrained = cfg.mode == "constrained"
    history = []
    with RolloutPool(problem, executors) as pool:
        for t in range(cfg.iterations):
            rng = iteration_rng(cfg.seed, t)
            deltas = sample_directions(rng, cfg.n_directions, theta.size)
            tasks = _task_indices(cfg, rng, n_tasks)
            try:
                ev = evaluate_iteration(theta, deltas, nu, template, stats, lam, tasks, pool, cfg.seed, t)
            except (ConfigError, SimulationDiverged) as exc:
                raise type(exc)(f"iteration {t}: {exc}") from exc
            selected, sigma = select_top(ev.scores, cfg.top_b)
            theta = update_weights(theta, ev.scores, deltas, selected, alpha, sigma)
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(f"iteration {t}: policy weights became non-finite")
            stats = merge_stats(stats, ev.stats_delta)
            flags = ev.violations
            any_v = bool(flags.any())
            lam_before = lam
            if constrained:
                lam = update_lambda(lam, any_v, (cfg.lam_min, cfg.lam_max))
            margins = [r.min_barrier_margin for r in ev.results]
            rec = IterationRecord(
                t, ev.scores, selected, sigma, lam_before, lam, any_v, int(flags.sum()), alpha, nu,
                theta_checksum(theta), float(min(margins)) if margins else math.inf,
                int(sum(r.nonfinite_rewards for r in ev.results)),
            )
            history.append(rec)
            alpha, nu = decay(alpha, nu, cfg.decay)
            if progress is not None:
                progress(rec)
    final = PolicyBundle(template.params.with_theta(theta), stats, {"mode": cfg.mode, "lambda": lam})
    return TrainResult(final, lam, history)


def train(ars_cfg: ArsConfig, grid_cfg, reward_cfg, task_set, executors: int = 1,
          progress: Progress | None = None) -> TrainResult:
    """Safe ARS on the voltage-recovery task set."""
    tasks = list(task_set)
    if not tasks:
        raise ConfigError("task set is empty")
    problem = GridProblem(grid_cfg, reward_cfg, tasks, ars_cfg.mode, ars_cfg.arch, ars_cfg.hidden)
    res = train_problem(ars_cfg, problem, len(tasks), executors, progress)
    run = {
        "grid": grid_cfg.name,
        "grid_fingerprint": grid_cfg.fingerprint(),
        "tasks": [t.spec() for t in tasks],
        "ars": asdict(ars_cfg),
        "reward": _reward_meta(reward_cfg),
    }
    meta = dict(res.bundle.metadata, **run)
    meta["iterations"] = len(res.history)
    meta["config_hash"] = hashlib.sha256(json.dumps(run, sort_keys=True).encode()).hexdigest()[:16]
    return TrainResult(PolicyBundle(res.bundle.params, res.bundle.stats, meta), res.lam, res.history)


def _reward_meta(cfg) -> dict:
    d = asdict(cfg)
    d.pop("_arrays", None)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# history files

HISTORY_COLUMNS = ("iteration", "best_return", "mean_return", "sigma_b", "lambda_before", "lambda",
                   "any_violation", "violation_count", "alpha", "nu", "theta_checksum",
                   "min_barrier_margin", "nonfinite_rewards")


def write_history(history: Sequence[IterationRecord], csv_path: str | Path, jsonl_path: str | Path | None = None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.iteration, repr(rec.best_return), repr(rec.mean_return), repr(rec.sigma_b),
                        repr(rec.lam_before), repr(rec.lam_after), int(rec.any_violation), rec.violation_count,
                        repr(rec.alpha), repr(rec.nu), rec.theta_checksum, repr(rec.min_barrier_margin),
                        rec.nonfinite_rewards])
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            for rec in history:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_history_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in HISTORY_COLUMNS:
        vals = [r[col] for r in rows]
        out[col] = np.array(vals) if col == "theta_checksum" else np.array([float(v) for v in vals])
    return out


def read_history_jsonl(path: str | Path) -> list[IterationRecord]:
    with open(path) as fh:
        return [IterationRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def format_progress(rec: IterationRecord) -> str:
    return (f"iter {rec.iteration:4d}  best {rec.best_return:12.3f}  mean {rec.mean_return:12.3f}  "
            f"lambda {rec.lam_after:10.4g}  violations {rec.violation_count}")


def describe_params(params: PolicyParams) -> str:
    return f"{params.arch} {params.n_obs}->{params.n_act} ({params.theta.size} weights)"
