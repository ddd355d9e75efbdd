"""Episodic post-fault voltage-recovery environment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from safeshed.errors import ConfigError, SimulationDiverged
from safeshed.grid_env import dynamics
from safeshed.grid_env.config import GridConfig

ACTION_MIN = -0.2
ACTION_MAX = 0.0
INVALID_ACTION_THRESHOLD = -0.01


@dataclass(frozen=True, order=True)
class FaultTask:
    """A short-circuit on ``fault_bus`` from ``fault_start`` lasting ``fault_duration`` seconds.

    A zero duration is the no-fault scenario; its clearance time is the
    nominal start.
    """

    fault_bus: int
    fault_duration: float
    fault_start: float = 1.0

    def __post_init__(self):
        if self.fault_start <= 0:
            raise ConfigError("fault_start must be > 0")
        if self.fault_duration < 0:
            raise ConfigError("fault_duration must be >= 0")

    @property
    def label(self) -> str:
        return f"bus{self.fault_bus}_{self.fault_duration:.2f}s"

    @property
    def clearance_time(self) -> float:
        return self.fault_start + self.fault_duration

    def substep_window(self, sim_dt: float) -> tuple[int, int]:
        """Sub-step indices ``[k_on, k_off)`` during which the fault is applied."""
        k_on = int(round(self.fault_start / sim_dt))
        return k_on, k_on + int(round(self.fault_duration / sim_dt))

    @classmethod
    def parse(cls, text: str) -> FaultTask:
        """Parse ``bus:duration`` or ``bus:duration@start``."""
        try:
            bus, rest = text.strip().split(":")
            if "@" in rest:
                dur, start = rest.split("@")
                return cls(int(bus), float(dur), float(start))
            return cls(int(bus), float(rest))
        except ValueError as exc:
            raise ConfigError(f"bad task spec {text!r}, expected bus:duration[@start]") from exc

    def spec(self) -> str:
        return f"{self.fault_bus}:{self.fault_duration:g}@{self.fault_start:g}"


@dataclass(frozen=True, eq=False)
class EnvState:
    t: float
    k: int
    voltages: np.ndarray
    remaining_fraction: np.ndarray
    recovery_state: np.ndarray
    load_voltages: np.ndarray
    fault_active: bool
    T_pf: float | None


@dataclass(frozen=True, eq=False)
class StepInfo:
    shed_amounts: np.ndarray
    invalid_count: int
    observation: np.ndarray


def _fault_active(k: int, window: tuple[int, int]) -> bool:
    return window[0] <= k < window[1]


def _clearance(k: int, window: tuple[int, int], sim_dt: float) -> float | None:
    return window[1] * sim_dt if k >= window[1] else None


def _all_voltages(config: GridConfig, x, p, VL, phi) -> np.ndarray:
    out = np.empty(config.n_bus)
    dynamics.bus_voltages(x, p, VL, config.P0, config.sensitivity,
                          config.noload_voltage, phi, config.alpha_t, out)
    return out


def observation(config: GridConfig, state: EnvState) -> np.ndarray:
    """Observed-bus voltages followed by remaining load fractions."""
    return np.concatenate([state.voltages[config.observed_idx], state.remaining_fraction])


def equilibrium(config: GridConfig, p: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Steady-state load-bus voltages and recovery states with no fault."""
    p = np.ones(config.n_load) if p is None else np.asarray(p, dtype=float)
    li = config.load_idx
    SLL = config.sensitivity[li]
    vnl = config.noload_voltage[li]
    a_s = config.alpha_s
    V = np.ones(config.n_load)
    for _ in range(100):
        # at the fixed point the demand reduces to the steady-state characteristic P0 p V**alpha_s
        F = V - (vnl - SLL @ (config.P0 * p * V**a_s))
        J = np.eye(config.n_load) + SLL * (config.P0 * p * a_s * V ** (a_s - 1.0))[None, :]
        dV = np.linalg.solve(J, F)
        V = V - dV
        if not np.all(np.isfinite(V)) or np.any(V <= 0):
            break
        if np.max(np.abs(dV)) < 1e-14:
            x = config.P0 * p * (V**a_s - V**config.alpha_t)
            return V, x
    raise ConfigError(f"equilibrium solve failed for grid config {config.name!r}")


def init_scenario(config: GridConfig, task: FaultTask) -> EnvState:
    """Flat-start state at t = 0."""
    VL, x = equilibrium(config)
    p = np.ones(config.n_load)
    window = task.substep_window(config.sim_dt)
    active = _fault_active(0, window)
    phi = config.phi(task.fault_bus) if active else np.ones(config.n_bus)
    if active:
        A = np.empty((config.n_load, config.n_load))
        F, D, G = np.empty((3, config.n_load))
        li = config.load_idx
        if not dynamics.solve_network(VL, x, p, config.P0, config.sensitivity[li],
                                      config.noload_voltage[li], phi[li], config.alpha_t, A, F, D, G):
            raise SimulationDiverged("network solve failed at t = 0")
    V = _all_voltages(config, x, p, VL, phi)
    if not np.all(np.isfinite(V)):
        raise ConfigError("non-finite equilibrium voltages")
    return EnvState(0.0, 0, V, p, x, VL, active, _clearance(0, window, config.sim_dt))


def validate_action(action, n_load: int) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(-1)
    if a.shape != (n_load,):
        raise ValueError(f"action must have {n_load} components")
    if np.any(~np.isfinite(a)) or np.any(a < ACTION_MIN) or np.any(a > ACTION_MAX):
        raise ValueError(f"action components must lie in [{ACTION_MIN}, {ACTION_MAX}]")
    return a


def step(state: EnvState, action, config: GridConfig, task: FaultTask) -> tuple[EnvState, StepInfo]:
    """Shed, then integrate one control interval."""
    a = validate_action(action, config.n_load)
    p = state.remaining_fraction.copy()
    x = state.recovery_state.copy()
    VL = state.load_voltages.copy()
    shed = np.zeros(config.n_load)
    invalid = dynamics.apply_shedding(a, p, x, config.P0, shed, INVALID_ACTION_THRESHOLD)

    li = config.load_idx
    window = task.substep_window(config.sim_dt)
    phi_f = config.phi(task.fault_bus)
    # the algebraic variables jump with the load change before integrating
    A = np.empty((config.n_load, config.n_load))
    F, D, G = np.empty((3, config.n_load))
    phi_now = phi_f[li] if _fault_active(state.k, window) else np.ones(config.n_load)
    ok = dynamics.solve_network(VL, x, p, config.P0, config.sensitivity[li],
                                config.noload_voltage[li], phi_now, config.alpha_t, A, F, D, G)
    if ok:
        status = dynamics.advance(x, p, VL, state.k, config.substeps, window[0], window[1],
                                  config.P0, config.sensitivity[li], config.noload_voltage[li],
                                  np.ascontiguousarray(phi_f[li]), config.alpha_s, config.alpha_t,
                                  config.T_p, config.sim_dt)
        ok = status == dynamics.OK
    k = state.k + config.substeps
    if not ok:
        raise SimulationDiverged(f"grid integration diverged near t = {k * config.sim_dt:.2f} s")
    active = _fault_active(k, window)
    V = _all_voltages(config, x, p, VL, phi_f if active else np.ones(config.n_bus))
    if not np.all(np.isfinite(V)):
        raise SimulationDiverged(f"non-finite voltages at t = {k * config.sim_dt:.2f} s")
    new = EnvState(k * config.sim_dt, k, V, p, x, VL, active, _clearance(k, window, config.sim_dt))
    return new, StepInfo(shed, invalid, observation(config, new))


class GridEnv:
    """Stateful reset/step wrapper around :func:`init_scenario` and :func:`step`."""

    def __init__(self, config: GridConfig, task: FaultTask):
        self.config = config
        self.task = task
        self.state: EnvState | None = None

    def reset(self) -> np.ndarray:
        self.state = init_scenario(self.config, self.task)
        return observation(self.config, self.state)

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.k >= self.config.n_control_steps * self.config.substeps

    def step(self, action) -> tuple[np.ndarray, StepInfo]:
        if self.state is None:
            raise RuntimeError("call reset() first")
        self.state, info = step(self.state, action, self.config, self.task)
        return info.observation, info
