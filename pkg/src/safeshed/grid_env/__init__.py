from safeshed.grid_env.config import GridConfig, load_grid_config, parse_grid_config, surrogate_from_topology
from safeshed.grid_env.env import (
    ACTION_MAX,
    ACTION_MIN,
    EnvState,
    FaultTask,
    GridEnv,
    StepInfo,
    init_scenario,
    observation,
    step,
)
from safeshed.grid_env.uvls import UvlsConfig, UvlsRelay, uvls_baseline_action

__all__ = [
    "ACTION_MAX",
    "ACTION_MIN",
    "EnvState",
    "FaultTask",
    "GridConfig",
    "GridEnv",
    "StepInfo",
    "UvlsConfig",
    "UvlsRelay",
    "init_scenario",
    "load_grid_config",
    "observation",
    "parse_grid_config",
    "step",
    "surrogate_from_topology",
    "uvls_baseline_action",
]
