"""One-action quadratic task for checking the learner in isolation.

Each episode is a single step from a constant observation; the return is
``-(a - target)**2``. The optimum is known in closed form, which makes it a
convenient end-to-end check of the update rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safeshed.policy import PolicyBundle, RunningStats
from safeshed.rollout import RolloutResult

OBSERVATION = 1.0


@dataclass(frozen=True)
class QuadraticProblem:
    target: float = -0.12
    n_obs: int = 1
    n_act: int = 1

    def action(self, bundle: PolicyBundle) -> float:
        return float(bundle.act(np.full(self.n_obs, OBSERVATION))[0])

    def rollout(self, bundle: PolicyBundle, lam: float, task_index: int, collect_stats: bool,
                seed: int = 0) -> RolloutResult:
        a = self.action(bundle)
        ret = -(a - self.target) ** 2
        delta = None
        if collect_stats:
            delta = RunningStats(1, np.full(self.n_obs, OBSERVATION), np.zeros(self.n_obs))
        return RolloutResult(None, "barrier", ret, ret, np.nan, False, 0.0, "horizon",
                             stats_delta=delta, seed=seed)
