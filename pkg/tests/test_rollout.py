import math

import numpy as np
import pytest

from safeshed.grid_env import FaultTask
from safeshed.policy import PolicyBundle, RunningStats, initial_params, update_stats
from safeshed.rollout import (
    TRAJ_FIELDS,
    GridProblem,
    RolloutPool,
    evaluate_iteration,
    plan_jobs,
    policy_controller,
    read_trajectory_csv,
    run_episode,
    simulate,
    trajectory_columns,
    uvls_controller,
    write_trajectory_csv,
    zero_controller,
)
from safeshed.safety import RewardConfig

import oracles
from conftest import HELDOUT, TRAIN_TASKS


def random_bundle(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    params = initial_params("linear", 7, 3, rng, scale=scale)
    stats = RunningStats(10, rng.normal(0.9, 0.05, 7), rng.uniform(0.1, 1.0, 7))
    return PolicyBundle(params, stats)


def same_traj(a, b):
    return all(np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True) for f in TRAJ_FIELDS)


@pytest.mark.parametrize("mode", ["plain", "constrained", "barrier"])
@pytest.mark.parametrize("task", [FaultTask(4, 0.28), FaultTask(15, 0.15), FaultTask(21, 0.0), HELDOUT])
def test_kernel_matches_step_api(grid, mode, task):
    rc = RewardConfig(lam=5.0)
    b = random_bundle(hash((mode, task.label)) % 1000)
    fast = run_episode(grid, task, b, rc, mode)
    slow = simulate(grid, task, policy_controller(b), rc, mode)
    assert same_traj(fast.trajectory, slow.trajectory)
    assert fast.episode_return == slow.episode_return and fast.terminal_reason == slow.terminal_reason


def test_rewards_match_oracle(grid):
    rc = RewardConfig(lam=3.0)
    task = FaultTask(15, 0.28)
    res = run_episode(grid, task, random_bundle(7), rc, "constrained")
    tr = res.trajectory
    T_pf = np.where(tr.t > task.clearance_time - 1e-9, task.clearance_time, np.nan)
    u = tr.invalid.astype(float)
    r, _ = oracles.reward(tr.voltages, tr.shed.sum(axis=1), u, tr.t, T_pf, rc.c1, rc.c2, rc.c3)
    np.testing.assert_allclose(tr.reward, r, rtol=0, atol=1e-12)
    post = tr.t > task.clearance_time + 1e-9
    f = oracles.safety(tr.voltages[post], tr.t[post] - task.clearance_time)
    np.testing.assert_allclose(tr.safety[post], f, rtol=0, atol=1e-12)
    assert np.all(np.isnan(tr.safety[~post]))
    np.testing.assert_allclose(tr.combined[post], oracles.lagrangian(r[post], f, 3.0), rtol=0, atol=1e-11)
    np.testing.assert_array_equal(tr.combined[~post], tr.reward[~post])


def test_barrier_matches_oracle(grid):
    rc = RewardConfig()
    task = FaultTask(4, 0.15)
    tr = run_episode(grid, task, random_bundle(3), rc, "barrier").trajectory
    post = tr.t > task.clearance_time + 1e-9
    B = oracles.barrier(tr.voltages[post], tr.t[post] - task.clearance_time, rc.barrier_clamp)
    np.testing.assert_allclose(tr.barrier[post], B, rtol=1e-12)
    np.testing.assert_allclose(tr.combined[post], oracles.shaped(tr.reward[post], B, rc.c4), rtol=1e-12)


def test_zero_action_no_fault(grid, reward_cfg):
    res = simulate(grid, FaultTask(21, 0.0), zero_controller, reward_cfg)
    assert not res.violated and res.total_shed == 0.0 and res.plain_return == 0.0


def test_no_fault_return_is_cost_only(grid, reward_cfg):
    # with voltages held inside the envelope only shedding and invalid costs remain
    theta = np.zeros(24)
    theta[21:] = -3.0  # bias only: a trickle of about 5e-4 per step on every load
    b = PolicyBundle(random_bundle(0).params.with_theta(theta), RunningStats.empty(7))
    res = run_episode(grid, FaultTask(4, 0.0), b, reward_cfg)
    tr = res.trajectory
    assert not res.violated and tr.shed.sum() > 0
    assert res.plain_return == pytest.approx(-reward_cfg.c2 * tr.shed.sum() - reward_cfg.c3 * tr.invalid.sum(),
                                             abs=1e-9)


def test_severe_fault_violates_without_control(grid, reward_cfg):
    res = simulate(grid, FaultTask(4, 0.28), zero_controller, reward_cfg)
    assert res.violated and res.min_safety < 0


def test_uvls_sheds_under_fault(grid, reward_cfg):
    res = simulate(grid, FaultTask(4, 0.28), uvls_controller(), reward_cfg)
    assert res.total_shed > 0
    assert np.all(np.diff(res.trajectory.remaining, axis=0) <= 0)


def test_stats_from_post_step_observations(grid, reward_cfg):
    b = random_bundle(4)
    res = run_episode(grid, FaultTask(15, 0.28), b, reward_cfg, collect_stats=True)
    tr = res.trajectory
    ref = RunningStats.empty(7)
    for row in np.hstack([tr.voltages, tr.remaining]):
        ref = update_stats(ref, row)
    assert res.stats_delta.count == len(tr) == ref.count
    np.testing.assert_allclose(res.stats_delta.mean, ref.mean, rtol=0, atol=1e-12)
    np.testing.assert_allclose(res.stats_delta.m2, ref.m2, rtol=1e-10, atol=1e-12)


def test_policy_is_deterministic(grid, reward_cfg):
    b = random_bundle(9)
    a = run_episode(grid, FaultTask(4, 0.28), b, reward_cfg, "barrier", seed=1)
    c = run_episode(grid, FaultTask(4, 0.28), b, reward_cfg, "barrier", seed=99)
    assert same_traj(a.trajectory, c.trajectory)


def test_dimension_check(grid, reward_cfg):
    rng = np.random.default_rng(0)
    b = PolicyBundle(initial_params("linear", 5, 3, rng), RunningStats.empty(5))
    with pytest.raises(ValueError):
        run_episode(grid, FaultTask(4, 0.0), b, reward_cfg)


def test_bad_mode(grid, reward_cfg):
    with pytest.raises(ValueError):
        run_episode(grid, FaultTask(4, 0.0), random_bundle(0), reward_cfg, "other")


class TestIteration:
    def setup(self, grid, reward_cfg, mode="barrier"):
        problem = GridProblem(grid, reward_cfg, TRAIN_TASKS, mode)
        template = random_bundle(5, scale=0.1)
        rng = np.random.default_rng(12)
        deltas = rng.normal(size=(3, template.params.theta.size))
        tasks = np.array([[0, 4], [2, 5], [8, 1]])
        return problem, template, deltas, tasks

    def test_plan_order(self):
        jobs = plan_jobs(2, np.array([[3, 1], [0, 2]]), 0, 5)
        assert [(j.direction, j.sign, j.task_index) for j in jobs] == [
            (0, 1, 3), (0, 1, 1), (0, -1, 3), (0, -1, 1), (1, 1, 0), (1, 1, 2), (1, -1, 0), (1, -1, 2)]
        assert len({j.seed for j in jobs}) == len(jobs)
        assert plan_jobs(2, np.array([[3, 1], [0, 2]]), 0, 5) == jobs

    def test_counts_and_scores(self, grid, reward_cfg):
        problem, template, deltas, tasks = self.setup(grid, reward_cfg)
        with RolloutPool(problem) as pool:
            ev = evaluate_iteration(template.params.theta, deltas, 0.03, template, template.stats, 5.0, tasks,
                                    pool, seed=1, iteration=0)
        assert ev.scores.shape == (3, 2) and ev.violations.shape == (3, 2, 2)
        assert len(ev.results) == 12
        # score is the task-averaged return of the matching perturbation
        i, sign = 1, -1
        theta = template.params.theta + sign * 0.03 * deltas[i]
        b = PolicyBundle(template.params.with_theta(theta), template.stats)
        rets = [run_episode(grid, TRAIN_TASKS[t], b, reward_cfg, "barrier").episode_return for t in tasks[i]]
        assert ev.scores[i, 1] == pytest.approx(np.mean(rets), abs=1e-9)
        steps = sum(len(run_episode(grid, TRAIN_TASKS[t], PolicyBundle(
            template.params.with_theta(template.params.theta + s * 0.03 * deltas[d]), template.stats),
            reward_cfg, "barrier").trajectory) for d in range(3) for s in (1, -1) for t in tasks[d])
        assert ev.stats_delta.count == steps

    def test_single_direction_single_task(self, grid, reward_cfg):
        problem, template, deltas, _ = self.setup(grid, reward_cfg)
        with RolloutPool(problem) as pool:
            ev = evaluate_iteration(template.params.theta, deltas[:1], 0.03, template, template.stats, 5.0,
                                    np.array([[2]]), pool)
        plus = PolicyBundle(template.params.with_theta(template.params.theta + 0.03 * deltas[0]), template.stats)
        minus = PolicyBundle(template.params.with_theta(template.params.theta - 0.03 * deltas[0]), template.stats)
        assert ev.scores[0, 0] == run_episode(grid, TRAIN_TASKS[2], plus, reward_cfg, "barrier").episode_return
        assert ev.scores[0, 1] == run_episode(grid, TRAIN_TASKS[2], minus, reward_cfg, "barrier").episode_return

    def test_empty(self, grid, reward_cfg):
        problem, template, deltas, _ = self.setup(grid, reward_cfg)
        with RolloutPool(problem) as pool:
            ev = evaluate_iteration(template.params.theta, np.zeros((0, deltas.shape[1])), 0.03, template,
                                    template.stats, 5.0, np.zeros((0, 2), dtype=int), pool)
        assert ev.scores.shape == (0, 2) and ev.stats_delta.count == 0

    def test_parallel_matches_serial(self, grid, reward_cfg):
        problem, template, deltas, tasks = self.setup(grid, reward_cfg, "constrained")
        out = []
        for n in (1, 3):
            with RolloutPool(problem, executors=n) as pool:
                out.append(evaluate_iteration(template.params.theta, deltas, 0.03, template, template.stats,
                                              5.0, tasks, pool, seed=2, iteration=4))
        a, b = out
        assert np.array_equal(a.scores, b.scores) and np.array_equal(a.violations, b.violations)
        assert a.stats_delta.count == b.stats_delta.count
        assert np.array_equal(a.stats_delta.mean, b.stats_delta.mean)
        assert np.array_equal(a.stats_delta.m2, b.stats_delta.m2)

    def test_bad_executor_count(self, grid, reward_cfg):
        with pytest.raises(ValueError):
            RolloutPool(None, executors=0)


def test_trajectory_csv_round_trip(tmp_path, grid, reward_cfg):
    task = FaultTask(4, 0.15)
    res = run_episode(grid, task, random_bundle(1), reward_cfg, "barrier")
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, res, grid, reward_cfg)
    data = read_trajectory_csv(path)
    assert list(data) == trajectory_columns(grid)
    tr = res.trajectory
    assert np.array_equal(data["t"], tr.t)
    assert np.array_equal(data["V_bus8"], tr.voltages[:, 2])
    assert np.array_equal(data["shed_bus18"], tr.shed[:, 2])
    assert np.array_equal(data["B"], tr.barrier, equal_nan=True)
    active = data["fault_active"].astype(bool)
    assert np.allclose(tr.t[active], [1.0, 1.1])
    post = tr.t > task.clearance_time + 1e-9
    np.testing.assert_array_equal(data["envelope_lower"][post], oracles.lower_bound(tr.t[post] - 1.15))
    assert all(math.isnan(v) for v in data["envelope_lower"][~post])
