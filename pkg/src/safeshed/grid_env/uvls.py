"""Rule-based under-voltage load shedding relay used as the baseline controller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safeshed.grid_env.config import GridConfig
from safeshed.grid_env.env import EnvState

_EPS = 1e-9


@dataclass(frozen=True)
class UvlsConfig:
    threshold: float = 0.90
    delay: float = 0.33
    block: float = 0.2
    max_stages: int = 3


class UvlsRelay:
    """Per-bus definite-time relays with a timer that restarts after each stage."""

    def __init__(self, n_load: int, cfg: UvlsConfig | None = None):
        self.cfg = cfg or UvlsConfig()
        self.n_load = n_load
        self.reset()

    def reset(self):
        self.below_since = [None] * self.n_load
        self.stages = [0] * self.n_load

    def decide(self, t: float, local_voltages) -> np.ndarray:
        cfg = self.cfg
        action = np.zeros(self.n_load)
        for j, v in enumerate(local_voltages):
            if v >= cfg.threshold:
                self.below_since[j] = None
                continue
            if self.below_since[j] is None:
                self.below_since[j] = t
            if self.stages[j] < cfg.max_stages and t - self.below_since[j] >= cfg.delay - _EPS:
                action[j] = -cfg.block
                self.stages[j] += 1
                self.below_since[j] = t
        return action


def uvls_baseline_action(state: EnvState, relay: UvlsRelay, config: GridConfig) -> np.ndarray:
    """Relay decision for the load buses at ``state.t``; advances the relay timers."""
    return relay.decide(state.t, state.voltages[config.load_idx])
