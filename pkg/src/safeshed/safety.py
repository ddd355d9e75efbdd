"""Scalar trajectory functions: recovery envelope, step reward, safety and barrier terms.

The compiled ``*_core`` functions are shared with the episode kernel; the
public wrappers take a :class:`RewardConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from safeshed.errors import ConfigError

# interval boundaries are assigned to the later interval; the slack absorbs t - T_pf roundoff
BOUNDARY_SLACK = 1e-9


@dataclass(frozen=True)
class Envelope:
    """Time-dependent voltage window after fault clearance."""

    offsets: tuple[float, ...] = (0.33, 0.5, 1.5)
    levels: tuple[float, ...] = (0.7, 0.8, 0.9, 0.95)
    upper: float = 1.5

    def lower(self, tau: float) -> float:
        return float(self.levels[interval_index(tau, np.asarray(self.offsets))])


@dataclass(frozen=True)
class RewardConfig:
    c1: float = 260.0
    c2: float = 150.0
    c3: float = 3.0
    c4: float = 0.01
    lam: float = 1.0
    barrier_clamp: float = 1e6
    offsets: tuple[float, ...] = (0.33, 0.5, 1.5)
    levels: tuple[float, ...] = (0.7, 0.8, 0.9, 0.95)
    band_centers: tuple[float, ...] = (1.1, 1.15, 1.2, 1.225)
    band_halfwidths: tuple[float, ...] = (0.4, 0.35, 0.3, 0.275)
    terminal_level: float = 0.95
    terminal_delay: float = 4.0
    terminal_penalty: float = -1000.0
    _arrays: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c4) < 0:
            raise ConfigError("reward weights must be >= 0")
        if not self.lam > 0:
            raise ConfigError("safety multiplier must be > 0")
        if not self.barrier_clamp > 0:
            raise ConfigError("barrier clamp must be > 0")
        n = len(self.offsets) + 1
        if not (len(self.levels) == len(self.band_centers) == len(self.band_halfwidths) == n):
            raise ConfigError("envelope tables need one more level than offsets")
        if any(b <= a for a, b in zip(self.offsets, self.offsets[1:])) or self.offsets[0] <= 0:
            raise ConfigError("envelope offsets must be positive and strictly increasing")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError("envelope levels must be strictly increasing")
        arrays = {
            "offsets": np.asarray(self.offsets, dtype=float),
            "levels": np.asarray(self.levels, dtype=float),
            "centers": np.asarray(self.band_centers, dtype=float),
            "halfwidths": np.asarray(self.band_halfwidths, dtype=float),
        }
        object.__setattr__(self, "_arrays", arrays)

    @property
    def envelope(self) -> Envelope:
        upper = self.band_centers[0] + self.band_halfwidths[0]
        return Envelope(self.offsets, self.levels, upper)

    def arr(self, name: str) -> np.ndarray:
        return self._arrays[name]


DEFAULT_REWARD = RewardConfig()


@njit(cache=True)
def interval_index(tau, offsets):
    i = 0
    for o in offsets:
        if tau >= o - BOUNDARY_SLACK:
            i += 1
    return i


@njit(cache=True)
def step_reward_core(V, shed_total, u_ivld, t, T_pf, c1, c2, c3, offsets, levels,
                     term_level, term_delay, term_penalty):
    cleared = not math.isnan(T_pf)
    if cleared and t > T_pf + term_delay:
        for v in V:
            if v < term_level:
                return term_penalty, True
    dv = 0.0
    if cleared and t > T_pf:
        low = levels[interval_index(t - T_pf, offsets)]
        for v in V:
            d = v - low
            if d < 0.0:
                dv += d
    return c1 * dv - c2 * shed_total - c3 * u_ivld, False


@njit(cache=True)
def safety_core(V, tau, offsets, centers, halfwidths):
    i = interval_index(tau, offsets)
    c = centers[i]
    worst = 0.0
    for v in V:
        d = (v - c) * (v - c)
        if d > worst:
            worst = d
    return halfwidths[i] * halfwidths[i] - worst


@njit(cache=True)
def barrier_core(V, tau, offsets, levels, bmax):
    low = levels[interval_index(tau, offsets)]
    s = 0.0
    for v in V:
        d = v - low
        if d <= 0.0:
            return bmax
        s += 1.0 / (d * d)
    return s if s < bmax else bmax


def envelope_lower(tau: float, cfg: RewardConfig = DEFAULT_REWARD) -> float:
    """Lower recovery bound ``tau`` seconds after clearance."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return float(cfg.levels[interval_index(float(tau), cfg.arr("offsets"))])


def _nan_if_none(T_pf):
    return math.nan if T_pf is None else float(T_pf)


def step_reward(voltages, shed_pu, u_ivld, t, T_pf, cfg: RewardConfig = DEFAULT_REWARD):
    """Per-step reward and whether the terminal penalty branch fired.

    ``T_pf`` is None while the fault is still on; before clearance only the
    shedding and invalid-action terms contribute.
    """
    V = np.atleast_1d(np.asarray(voltages, dtype=float))
    r, term = step_reward_core(V, float(np.sum(shed_pu)), float(u_ivld), float(t), _nan_if_none(T_pf),
                               cfg.c1, cfg.c2, cfg.c3, cfg.arr("offsets"), cfg.arr("levels"),
                               cfg.terminal_level, cfg.terminal_delay, cfg.terminal_penalty)
    return float(r), bool(term)


def _tau(t, T_pf):
    if T_pf is None or not t > T_pf:
        raise ValueError("defined only after fault clearance (t > T_pf)")
    return float(t) - float(T_pf)


def safety_fn(voltages, t, T_pf, cfg: RewardConfig = DEFAULT_REWARD) -> float:
    """Squared-band safety margin; non-negative iff every voltage is inside the window."""
    V = np.atleast_1d(np.asarray(voltages, dtype=float))
    return float(safety_core(V, _tau(t, T_pf), cfg.arr("offsets"), cfg.arr("centers"), cfg.arr("halfwidths")))


def barrier_fn(voltages, t, T_pf, cfg: RewardConfig = DEFAULT_REWARD) -> float:
    """Inverse-square distance to the lower envelope, clamped at ``cfg.barrier_clamp``."""
    V = np.atleast_1d(np.asarray(voltages, dtype=float))
    return float(barrier_core(V, _tau(t, T_pf), cfg.arr("offsets"), cfg.arr("levels"), cfg.barrier_clamp))


def lagrangian_reward(r, f, lam):
    if lam < 0:
        raise ValueError("safety multiplier must be non-negative")
    return r + lam * f


def barrier_reward(r, B, c4):
    if B < 0:
        raise ValueError("barrier value must be non-negative")
    return r - c4 * B


def check_violation(trajectory) -> bool:
    """True when any post-clearance safety value is negative, or none exists.

    Accepts a rollout result (anything with ``safety_trace``) or the per-step
    safety values themselves, NaN marking steps before clearance.
    """
    values = np.asarray(getattr(trajectory, "safety_trace", trajectory), dtype=float)
    post = values[~np.isnan(values)]
    if post.size == 0:
        return True
    return bool(post.min() < 0)
