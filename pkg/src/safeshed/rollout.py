"""Episode execution and the fan-out of an iteration's perturbation rollouts.

Two episode paths exist. :func:`run_episode` runs a policy bundle inside one
compiled kernel (the training hot path). :func:`simulate` is a plain Python
loop over :func:`safeshed.grid_env.step` that accepts any controller; it
drives the UVLS baseline and forced open-loop runs, and serves as the
reference the kernel is tested against.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from safeshed import safety
from safeshed.errors import SimulationDiverged
from safeshed.grid_env import dynamics
from safeshed.grid_env.config import GridConfig
from safeshed.grid_env.env import (
    INVALID_ACTION_THRESHOLD,
    FaultTask,
    GridEnv,
    equilibrium,
)
from safeshed.policy import STD_FLOOR, PolicyBundle, RunningStats, forward_core, merge_stats, squash_core
from safeshed.safety import RewardConfig

MODES = ("plain", "constrained", "barrier")
DIVERGED_RETURN = -1e9

TERMINAL_REASONS = ("horizon", "penalty", "divergence")


@dataclass(eq=False)
class Trajectory:
    """Per-control-step record; row k describes the interval ending at ``t[k]``."""

    t: np.ndarray
    voltages: np.ndarray
    remaining: np.ndarray
    actions: np.ndarray
    shed: np.ndarray
    invalid: np.ndarray
    reward: np.ndarray
    safety: np.ndarray
    barrier: np.ndarray
    combined: np.ndarray

    def __len__(self):
        return self.t.size

    def truncate(self, n: int) -> Trajectory:
        return Trajectory(*(getattr(self, f)[:n] for f in TRAJ_FIELDS))


TRAJ_FIELDS = ("t", "voltages", "remaining", "actions", "shed", "invalid",
               "reward", "safety", "barrier", "combined")


@dataclass(eq=False)
class RolloutResult:
    task: FaultTask
    mode: str
    episode_return: float
    plain_return: float
    min_safety: float
    violated: bool
    total_shed: float
    terminal_reason: str
    trajectory: Trajectory | None = None
    stats_delta: RunningStats | None = None
    min_barrier_margin: float = math.inf
    nonfinite_rewards: int = 0
    seed: int = 0

    @property
    def safety_trace(self) -> np.ndarray:
        return self.trajectory.safety

    def summary(self) -> RolloutResult:
        """Copy without the trajectory, cheap to ship between processes."""
        return RolloutResult(self.task, self.mode, self.episode_return, self.plain_return,
                             self.min_safety, self.violated, self.total_shed, self.terminal_reason,
                             None, self.stats_delta, self.min_barrier_margin, self.nonfinite_rewards,
                             self.seed)


def _mode_code(mode: str) -> int:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return MODES.index(mode)


@njit(cache=True)
def _combine(mode, r, f, B, lam, c4, cleared):
    if not cleared:
        return r
    if mode == 1:
        return r + lam * f
    if mode == 2:
        return r - c4 * B
    return r


@njit(cache=True)
def episode_kernel(P0, SLL, vnlL, phiL_fault, S_obs, vnl_obs, phi_obs_fault,
                   alpha_s, alpha_t, T_p, sim_dt, substeps, n_steps, k_on, k_off, VL0, x0,
                   theta, arch, n_obs, n_act, hidden, mean, std_eff,
                   mode, lam, c1, c2, c3, c4, bmax, offsets, levels, centers, halfwidths,
                   term_level, term_delay, term_penalty, invalid_threshold, collect_stats,
                   out_t, out_V, out_p, out_a, out_shed, out_inv, out_r, out_f, out_B, out_R,
                   st_mean, st_m2):
    """Run one closed-loop episode; returns ``(steps, status, terminal, stats_count)``.

    ``status`` is 0 on success and 1 on divergence; ``terminal`` is 1 when the
    penalty branch ended the episode. Statistics of the post-step raw
    observations accumulate into ``st_mean``/``st_m2`` when requested.
    """
    n_load = P0.shape[0]
    n_ob = S_obs.shape[0]
    x = x0.copy()
    VL = VL0.copy()
    p = np.ones(n_load)
    ones = np.ones(n_load)
    ones_obs = np.ones(n_ob)
    A = np.empty((n_load, n_load))
    F = np.empty(n_load)
    D = np.empty(n_load)
    G = np.empty(n_load)
    Vob = np.empty(n_ob)
    obs = np.empty(n_obs)
    s = np.empty(n_obs)
    y = np.empty(n_act)
    a = np.empty(n_act)
    shed = np.empty(n_load)
    count = 0
    phi0 = phi_obs_fault if (k_on <= 0 < k_off) else ones_obs
    if k_on <= 0 < k_off:
        if not dynamics.solve_network(VL, x, p, P0, SLL, vnlL, phiL_fault, alpha_t, A, F, D, G):
            return 0, 1, 0, count
    dynamics.bus_voltages(x, p, VL, P0, S_obs, vnl_obs, phi0, alpha_t, Vob)
    t_pf = k_off * sim_dt
    for step in range(n_steps):
        k = step * substeps
        for i in range(n_ob):
            obs[i] = Vob[i]
        for j in range(n_load):
            obs[n_ob + j] = p[j]
        for i in range(n_obs):
            s[i] = (obs[i] - mean[i]) / std_eff[i]
        forward_core(theta, arch, n_obs, n_act, hidden, s, y)
        squash_core(y, a)
        inv = dynamics.apply_shedding(a, p, x, P0, shed, invalid_threshold)
        phi_now = phiL_fault if (k_on <= k < k_off) else ones
        if not dynamics.solve_network(VL, x, p, P0, SLL, vnlL, phi_now, alpha_t, A, F, D, G):
            return step, 1, 0, count
        if dynamics.advance(x, p, VL, k, substeps, k_on, k_off, P0, SLL, vnlL, phiL_fault,
                            alpha_s, alpha_t, T_p, sim_dt) != dynamics.OK:
            return step, 1, 0, count
        k_end = k + substeps
        phi_o = phi_obs_fault if (k_on <= k_end < k_off) else ones_obs
        dynamics.bus_voltages(x, p, VL, P0, S_obs, vnl_obs, phi_o, alpha_t, Vob)
        for i in range(n_ob):
            if not np.isfinite(Vob[i]):
                return step, 1, 0, count
        t = k_end * sim_dt
        cleared = k_end >= k_off
        shed_total = 0.0
        for j in range(n_load):
            shed_total += shed[j]
        tp = t_pf if cleared else np.nan
        r, term = safety.step_reward_core(Vob, shed_total, float(inv), t, tp, c1, c2, c3, offsets,
                                          levels, term_level, term_delay, term_penalty)
        post = cleared and t > t_pf
        f = np.nan
        B = np.nan
        if post:
            f = safety.safety_core(Vob, t - t_pf, offsets, centers, halfwidths)
            B = safety.barrier_core(Vob, t - t_pf, offsets, levels, bmax)
        R = _combine(mode, r, f, B, lam, c4, post)
        out_t[step] = t
        for i in range(n_ob):
            out_V[step, i] = Vob[i]
        for j in range(n_load):
            out_p[step, j] = p[j]
            out_a[step, j] = a[j]
            out_shed[step, j] = shed[j]
        out_inv[step] = inv
        out_r[step] = r
        out_f[step] = f
        out_B[step] = B
        out_R[step] = R
        if collect_stats:
            count += 1
            for i in range(n_ob):
                obs[i] = Vob[i]
            for j in range(n_load):
                obs[n_ob + j] = p[j]
            for i in range(n_obs):
                d = obs[i] - st_mean[i]
                st_mean[i] += d / count
                st_m2[i] += d * (obs[i] - st_mean[i])
        if term:
            return step + 1, 0, 1, count
    return n_steps, 0, 0, count


def _empty_trajectory(n: int, n_ob: int, n_load: int) -> Trajectory:
    return Trajectory(np.zeros(n), np.zeros((n, n_ob)), np.zeros((n, n_load)), np.zeros((n, n_load)),
                      np.zeros((n, n_load)), np.zeros(n, dtype=np.int64), np.zeros(n), np.full(n, np.nan),
                      np.full(n, np.nan), np.zeros(n))


def _finish(task, mode, traj: Trajectory, terminal_reason, reward_cfg: RewardConfig,
            stats_delta=None, seed=0) -> RolloutResult:
    post = traj.safety[~np.isnan(traj.safety)]
    min_safety = float(post.min()) if post.size else math.nan
    violated = bool(post.size == 0 or min_safety < 0)
    finite = np.isfinite(traj.combined) & np.isfinite(traj.reward)
    margin = traj.combined - (traj.reward - reward_cfg.c4 * reward_cfg.barrier_clamp)
    if terminal_reason == "divergence":
        ep_ret = plain = DIVERGED_RETURN
        violated = True
    else:
        ep_ret = float(traj.combined.sum())
        plain = float(traj.reward.sum())
    return RolloutResult(
        task=task, mode=mode, episode_return=ep_ret, plain_return=plain,
        min_safety=min_safety, violated=violated, total_shed=float(traj.shed.sum()),
        terminal_reason=terminal_reason, trajectory=traj, stats_delta=stats_delta,
        min_barrier_margin=float(margin.min()) if margin.size else math.inf,
        nonfinite_rewards=int((~finite).sum()), seed=seed,
    )


@dataclass(frozen=True, eq=False)
class _GridArrays:
    """Contiguous per-task arrays the kernel consumes."""

    SLL: np.ndarray
    vnlL: np.ndarray
    phiL: np.ndarray
    S_obs: np.ndarray
    vnl_obs: np.ndarray
    phi_obs: np.ndarray
    VL0: np.ndarray
    x0: np.ndarray

    @classmethod
    def build(cls, cfg: GridConfig, task: FaultTask) -> _GridArrays:
        li, oi = cfg.load_idx, cfg.observed_idx
        phi = cfg.phi(task.fault_bus)
        VL0, x0 = equilibrium(cfg)
        c = np.ascontiguousarray
        return cls(c(cfg.sensitivity[li]), c(cfg.noload_voltage[li]), c(phi[li]), c(cfg.sensitivity[oi]),
                   c(cfg.noload_voltage[oi]), c(phi[oi]), VL0, x0)


def run_episode(grid_cfg: GridConfig, task: FaultTask, bundle: PolicyBundle, reward_cfg: RewardConfig,
                mode: str = "plain", collect_stats: bool = False, seed: int = 0,
                arrays: _GridArrays | None = None) -> RolloutResult:
    """Closed-loop episode of ``bundle`` on ``task`` with its statistics frozen."""
    code = _mode_code(mode)
    params, stats = bundle.params, bundle.stats
    if params.n_obs != grid_cfg.n_obs or params.n_act != grid_cfg.n_load:
        raise ValueError(f"policy is {params.n_obs}->{params.n_act}, grid needs "
                         f"{grid_cfg.n_obs}->{grid_cfg.n_load}")
    if not np.all(np.isfinite(params.theta)):
        raise ValueError("policy parameters are not finite")
    ga = arrays or _GridArrays.build(grid_cfg, task)
    n = grid_cfg.n_control_steps
    traj = _empty_trajectory(n, len(grid_cfg.observed_buses), grid_cfg.n_load)
    k_on, k_off = task.substep_window(grid_cfg.sim_dt)
    st_mean = np.zeros(params.n_obs)
    st_m2 = np.zeros(params.n_obs)
    std_eff = np.maximum(stats.std, STD_FLOOR)
    rc = reward_cfg
    steps, status, terminal, count = episode_kernel(
        grid_cfg.P0, ga.SLL, ga.vnlL, ga.phiL, ga.S_obs, ga.vnl_obs, ga.phi_obs,
        grid_cfg.alpha_s, grid_cfg.alpha_t, grid_cfg.T_p, grid_cfg.sim_dt, grid_cfg.substeps, n,
        k_on, k_off, ga.VL0, ga.x0,
        params.theta, params.arch_code, params.n_obs, params.n_act, params.hidden,
        np.ascontiguousarray(stats.mean, dtype=np.float64), std_eff,
        code, float(rc.lam), rc.c1, rc.c2, rc.c3, rc.c4, rc.barrier_clamp, rc.arr("offsets"),
        rc.arr("levels"), rc.arr("centers"), rc.arr("halfwidths"), rc.terminal_level,
        rc.terminal_delay, rc.terminal_penalty, INVALID_ACTION_THRESHOLD, collect_stats,
        traj.t, traj.voltages, traj.remaining, traj.actions, traj.shed, traj.invalid, traj.reward,
        traj.safety, traj.barrier, traj.combined, st_mean, st_m2,
    )
    reason = "divergence" if status else ("penalty" if terminal else "horizon")
    delta = RunningStats(int(count), st_mean, st_m2) if collect_stats else None
    return _finish(task, mode, traj.truncate(steps), reason, reward_cfg, delta, seed)


Controller = Callable[[GridEnv, np.ndarray], np.ndarray]


def simulate(grid_cfg: GridConfig, task: FaultTask, controller: Controller, reward_cfg: RewardConfig,
             mode: str = "plain") -> RolloutResult:
    """Closed-loop episode through the public ``step`` API with an arbitrary controller.

    ``controller(env, observation)`` returns the shed command for the next
    control interval.
    """
    code = _mode_code(mode)
    env = GridEnv(grid_cfg, task)
    obs = env.reset()
    n = grid_cfg.n_control_steps
    traj = _empty_trajectory(n, len(grid_cfg.observed_buses), grid_cfg.n_load)
    oi = grid_cfg.observed_idx
    reason = "horizon"
    steps = 0
    for k in range(n):
        a = np.asarray(controller(env, obs), dtype=float)
        try:
            obs, info = env.step(a)
        except SimulationDiverged:
            reason = "divergence"
            break
        st = env.state
        V = st.voltages[oi]
        r, term = safety.step_reward(V, info.shed_amounts, info.invalid_count, st.t, st.T_pf, reward_cfg)
        post = st.T_pf is not None and st.t > st.T_pf
        f = safety.safety_fn(V, st.t, st.T_pf, reward_cfg) if post else math.nan
        B = safety.barrier_fn(V, st.t, st.T_pf, reward_cfg) if post else math.nan
        if post and code == 1:
            R = safety.lagrangian_reward(r, f, reward_cfg.lam)
        elif post and code == 2:
            R = safety.barrier_reward(r, B, reward_cfg.c4)
        else:
            R = r
        traj.t[k] = st.t
        traj.voltages[k] = V
        traj.remaining[k] = st.remaining_fraction
        traj.actions[k] = a
        traj.shed[k] = info.shed_amounts
        traj.invalid[k] = info.invalid_count
        traj.reward[k], traj.safety[k], traj.barrier[k], traj.combined[k] = r, f, B, R
        steps = k + 1
        if term:
            reason = "penalty"
            break
    return _finish(task, mode, traj.truncate(steps), reason, reward_cfg)


def zero_controller(env: GridEnv, obs) -> np.ndarray:
    return np.zeros(env.config.n_load)


def policy_controller(bundle: PolicyBundle) -> Controller:
    return lambda env, obs: bundle.act(obs)


def uvls_controller(cfg=None) -> Controller:
    from safeshed.grid_env.uvls import UvlsRelay, uvls_baseline_action

    relay = None

    def control(env: GridEnv, obs):
        nonlocal relay
        if relay is None or env.state.k == 0:
            relay = UvlsRelay(env.config.n_load, cfg)
        return uvls_baseline_action(env.state, relay, env.config)

    return control


# ---------------------------------------------------------------------------
# iteration fan-out


@dataclass(frozen=True)
class RolloutJob:
    direction: int
    sign: int
    task_index: int
    seed: int


def rollout_seed(seed: int, iteration: int, direction: int, sign: int, task_index: int) -> int:
    """Per-rollout stream id derived from the job coordinates alone."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(iteration, direction, 0 if sign > 0 else 1, task_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(eq=False)
class GridProblem:
    """The voltage-recovery task set seen by the learner."""

    grid_cfg: GridConfig
    reward_cfg: RewardConfig
    tasks: Sequence[FaultTask]
    mode: str
    arch: str = "linear"
    hidden: int = 32
    _arrays: dict = field(default_factory=dict, repr=False)

    @property
    def n_obs(self) -> int:
        return self.grid_cfg.n_obs

    @property
    def n_act(self) -> int:
        return self.grid_cfg.n_load

    def rollout(self, bundle: PolicyBundle, lam: float, task_index: int, collect_stats: bool,
                seed: int = 0) -> RolloutResult:
        task = self.tasks[task_index]
        if task_index not in self._arrays:
            self._arrays[task_index] = _GridArrays.build(self.grid_cfg, task)
        cfg = self.reward_cfg if lam == self.reward_cfg.lam else _with_lam(self.reward_cfg, lam)
        res = run_episode(self.grid_cfg, task, bundle, cfg, self.mode, collect_stats, seed,
                          arrays=self._arrays[task_index])
        return res.summary()


def _with_lam(cfg: RewardConfig, lam: float) -> RewardConfig:
    from dataclasses import replace

    return replace(cfg, lam=lam)


_WORKER = {}


def _init_worker(problem):
    _WORKER["problem"] = problem


def _run_chunk(args):
    template, thetas, stats, lam, jobs = args
    problem = _WORKER["problem"]
    return _run_jobs(problem, template, thetas, stats, lam, jobs)


def _run_jobs(problem, template: PolicyBundle, thetas, stats, lam, jobs):
    out = []
    for job, theta in zip(jobs, thetas):
        bundle = PolicyBundle(template.params.with_theta(theta), stats)
        out.append(problem.rollout(bundle, lam, job.task_index, True, job.seed))
    return out


class RolloutPool:
    """Runs rollout jobs serially or on a process pool; results keep job order."""

    def __init__(self, problem, executors: int = 1):
        if executors < 1:
            raise ValueError("executor count must be >= 1")
        self.problem = problem
        self.executors = executors
        self._pool = None

    def __enter__(self):
        if self.executors > 1:
            self._pool = ProcessPoolExecutor(self.executors, initializer=_init_worker, initargs=(self.problem,))
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown(cancel_futures=True)
            self._pool = None

    def run(self, template: PolicyBundle, thetas, stats, lam, jobs) -> list[RolloutResult]:
        if self._pool is None:
            return _run_jobs(self.problem, template, thetas, stats, lam, jobs)
        n_chunks = min(len(jobs), self.executors * 4) or 1
        bounds = np.linspace(0, len(jobs), n_chunks + 1).astype(int)
        chunks = [(template, thetas[a:b], stats, lam, jobs[a:b]) for a, b in zip(bounds, bounds[1:]) if b > a]
        results = []
        try:
            for part in self._pool.map(_run_chunk, chunks):
                results.extend(part)
        except Exception as exc:
            raise RuntimeError(f"rollout executor failed: {exc}") from exc
        return results


@dataclass(eq=False)
class IterationEval:
    scores: np.ndarray  # (N, 2): mean return for +/- perturbation
    violations: np.ndarray  # (N, 2, m) bool
    stats_delta: RunningStats
    results: list  # RolloutResult summaries in job order


def plan_jobs(n_dirs: int, task_indices: np.ndarray, seed: int, iteration: int) -> list[RolloutJob]:
    """Jobs in canonical (direction, sign, task) order; ``task_indices`` is (N, m)."""
    jobs = []
    for i in range(n_dirs):
        for sign in (1, -1):
            for t in task_indices[i]:
                jobs.append(RolloutJob(i, sign, int(t), rollout_seed(seed, iteration, i, sign, int(t))))
    return jobs


def evaluate_iteration(theta, deltas, nu, template: PolicyBundle, stats: RunningStats, lam: float,
                       task_indices: np.ndarray, pool: RolloutPool, seed: int = 0,
                       iteration: int = 0) -> IterationEval:
    """Score every +/- perturbation on its ``m`` tasks.

    Merging happens in job order, so the outcome does not depend on the
    number of executors or on completion order.
    """
    deltas = np.asarray(deltas)
    n_dirs = deltas.shape[0]
    m = task_indices.shape[1] if n_dirs else 0
    jobs = plan_jobs(n_dirs, task_indices, seed, iteration)
    thetas = [theta + job.sign * nu * deltas[job.direction] for job in jobs]
    results = pool.run(template, thetas, stats, lam, jobs) if jobs else []
    if len(results) != len(jobs):
        raise RuntimeError("rollout executor returned an incomplete batch")
    returns = np.array([r.episode_return for r in results]).reshape(n_dirs, 2, m) if jobs else np.zeros((0, 2, 0))
    violations = np.array([r.violated for r in results], dtype=bool).reshape(n_dirs, 2, m) if jobs \
        else np.zeros((0, 2, 0), dtype=bool)
    delta = RunningStats.empty(template.params.n_obs)
    for r in results:
        if r.stats_delta is not None:
            delta = merge_stats(delta, r.stats_delta)
    return IterationEval(returns.mean(axis=2) if jobs else np.zeros((0, 2)), violations, delta, results)


# ---------------------------------------------------------------------------
# CSV export


def trajectory_columns(grid_cfg: GridConfig) -> list[str]:
    cols = ["t"]
    cols += [f"V_bus{b}" for b in grid_cfg.observed_buses]
    cols += [f"p_bus{b}" for b in grid_cfg.load_buses]
    cols += [f"a_bus{b}" for b in grid_cfg.load_buses]
    cols += [f"shed_bus{b}" for b in grid_cfg.load_buses]
    cols += ["u_ivld", "r", "f", "B", "R", "envelope_lower", "fault_active"]
    return cols


def _fmt(v) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_trajectory_csv(path: str | Path, result: RolloutResult, grid_cfg: GridConfig,
                         reward_cfg: RewardConfig):
    traj = result.trajectory
    task = result.task
    t_on, t_off = task.fault_start, task.clearance_time
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory_columns(grid_cfg))
        for k in range(len(traj)):
            t = traj.t[k]
            low = safety.envelope_lower(t - t_off, reward_cfg) if t > t_off else math.nan
            active = int(task.fault_duration > 0 and t_on - 1e-9 <= t < t_off - 1e-9)
            row = [_fmt(t)]
            row += [_fmt(v) for v in traj.voltages[k]]
            row += [_fmt(v) for v in traj.remaining[k]]
            row += [_fmt(v) for v in traj.actions[k]]
            row += [_fmt(v) for v in traj.shed[k]]
            row += [str(int(traj.invalid[k])), _fmt(traj.reward[k]), _fmt(traj.safety[k]),
                    _fmt(traj.barrier[k]), _fmt(traj.combined[k]), _fmt(low), str(active)]
            w.writerow(row)


def read_trajectory_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    data = {}
    for j, name in enumerate(header):
        data[name] = np.array([float(r[j]) if r[j] != "" else math.nan for r in body])
    return data
