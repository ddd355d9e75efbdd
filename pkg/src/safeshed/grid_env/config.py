"""Grid configuration: data model, bundled surrogate, and INI loader."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import dijkstra

from safeshed.errors import ConfigError

BUNDLED_CONFIGS = ("ieee39_surrogate",)


@dataclass(frozen=True, eq=False)
class GridConfig:
    """Static description of the reduced-order grid.

    Bus identifiers are the 1-based numbers of the benchmark; array rows are
    indexed by ``bus - 1``. ``sensitivity[i, j]`` is the voltage drop at bus
    ``i + 1`` per p.u. of demand at ``load_buses[j]``. ``fault_depression[i, f]``
    is the multiplicative voltage factor at bus ``i + 1`` while a fault sits on
    bus ``f + 1``.
    """

    n_bus: int
    load_buses: tuple[int, ...]
    P0: np.ndarray
    observed_buses: tuple[int, ...]
    sensitivity: np.ndarray
    noload_voltage: np.ndarray
    fault_depression: np.ndarray
    alpha_s: float = 0.0
    alpha_t: float = 2.0
    T_p: float = 0.4
    sim_dt: float = 0.01
    control_dt: float = 0.1
    episode_length: float = 8.0
    name: str = "custom"
    substeps: int = field(init=False)
    n_control_steps: int = field(init=False)

    def __post_init__(self):
        for name in ("P0", "sensitivity", "noload_voltage", "fault_depression"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n_load = len(self.load_buses)
        if self.P0.shape != (n_load,):
            raise ConfigError(f"P0 has shape {self.P0.shape}, expected ({n_load},)")
        if self.sensitivity.shape != (self.n_bus, n_load):
            raise ConfigError(f"sensitivity has shape {self.sensitivity.shape}, expected ({self.n_bus}, {n_load})")
        if self.noload_voltage.shape != (self.n_bus,):
            raise ConfigError("noload_voltage must have one entry per bus")
        if self.fault_depression.shape != (self.n_bus, self.n_bus):
            raise ConfigError("fault_depression must be n_bus x n_bus")
        for bus in (*self.load_buses, *self.observed_buses):
            if not 1 <= bus <= self.n_bus:
                raise ConfigError(f"bus {bus} outside 1..{self.n_bus}")
        if len(set(self.load_buses)) != n_load:
            raise ConfigError("duplicate load bus")
        if np.any(self.sensitivity < 0) or not np.all(np.isfinite(self.sensitivity)):
            raise ConfigError("sensitivity entries must be finite and >= 0")
        if np.any(self.P0 < 0):
            raise ConfigError("initial loads must be >= 0")
        phi = self.fault_depression
        if np.any(phi <= 0) or np.any(phi > 1):
            raise ConfigError("fault depression factors must lie in (0, 1]")
        if self.T_p <= 0 or self.sim_dt <= 0 or self.control_dt <= 0:
            raise ConfigError("time constants and steps must be positive")
        ratio = self.control_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("control_dt must be an integer multiple of sim_dt")
        n_ctrl = self.episode_length / self.control_dt
        if abs(n_ctrl - round(n_ctrl)) > 1e-9 or round(n_ctrl) < 1:
            raise ConfigError("episode_length must be an integer multiple of control_dt")
        object.__setattr__(self, "substeps", int(round(ratio)))
        object.__setattr__(self, "n_control_steps", int(round(n_ctrl)))

    @property
    def n_load(self) -> int:
        return len(self.load_buses)

    @property
    def n_obs(self) -> int:
        return len(self.observed_buses) + len(self.load_buses)

    @property
    def load_idx(self) -> np.ndarray:
        return np.asarray(self.load_buses, dtype=np.int64) - 1

    @property
    def observed_idx(self) -> np.ndarray:
        return np.asarray(self.observed_buses, dtype=np.int64) - 1

    def phi(self, fault_bus: int) -> np.ndarray:
        if not 1 <= fault_bus <= self.n_bus:
            raise ConfigError(f"fault bus {fault_bus} outside 1..{self.n_bus}")
        return np.ascontiguousarray(self.fault_depression[:, fault_bus - 1])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.n_bus, self.load_buses, self.observed_buses, self.alpha_s, self.alpha_t,
                       self.T_p, self.sim_dt, self.control_dt, self.episode_length)).encode())
        for arr in (self.P0, self.sensitivity, self.noload_voltage, self.fault_depression):
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


def electrical_distances(n_bus: int, branches) -> np.ndarray:
    """Shortest-path reactance between every pair of buses."""
    adj = np.zeros((n_bus, n_bus))
    for a, b, x in branches:
        if x <= 0:
            raise ConfigError(f"branch {a}-{b} has non-positive reactance")
        adj[a - 1, b - 1] = adj[b - 1, a - 1] = x
    dist = dijkstra(adj, directed=False)
    if not np.all(np.isfinite(dist)):
        raise ConfigError("branch list leaves some buses disconnected")
    return dist


def surrogate_from_topology(
    n_bus, branches, loads, observed_buses, *, s0, d0, depth, d_phi, **kwargs
) -> GridConfig:
    """Build a config whose sensitivities and fault profile decay with electrical distance."""
    load_buses = tuple(int(b) for b in loads)
    P0 = np.array([loads[b] for b in load_buses], dtype=float)
    dist = electrical_distances(n_bus, branches)
    S = s0 * np.exp(-dist[:, np.asarray(load_buses) - 1] / d0)
    phi = 1.0 - (1.0 - depth) * np.exp(-dist / d_phi)
    vnl = 1.0 + S @ P0
    return GridConfig(
        n_bus=n_bus,
        load_buses=load_buses,
        P0=P0,
        observed_buses=tuple(observed_buses),
        sensitivity=S,
        noload_voltage=vnl,
        fault_depression=phi,
        **kwargs,
    )


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def parse_grid_config(text: str, name: str = "custom") -> GridConfig:
    """Parse the INI grammar documented in ``data/ieee39_surrogate.ini``.

    ``[sensitivity]`` either holds generator parameters ``s0``/``d0`` together
    with ``[branches]`` and ``[fault]``, or an explicit ``matrix`` (one row per
    bus). In the explicit form ``[fault] matrix`` and ``[noload_voltage]
    values`` are optional; missing no-load voltages are calibrated to a
    1.0 p.u. flat start.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
        g = cp["grid"]
        n_bus = g.getint("n_bus")
        observed = tuple(_ints(g["observed_buses"]))
        timing = dict(
            sim_dt=g.getfloat("sim_dt", 0.01),
            control_dt=g.getfloat("control_dt", 0.1),
            episode_length=g.getfloat("episode_length", 8.0),
        )
        loads = {int(k): float(v) for k, v in cp["loads"].items()}
        lm = cp["load_model"] if cp.has_section("load_model") else {}
        model = dict(
            alpha_s=float(lm.get("alpha_s", 0.0)),
            alpha_t=float(lm.get("alpha_t", 2.0)),
            T_p=float(lm.get("T_p", 0.4)),
        )
        sens = cp["sensitivity"]
        if "matrix" in sens:
            S = np.array([_floats(row) for row in sens["matrix"].strip().splitlines()])
            load_buses = tuple(loads)
            P0 = np.array([loads[b] for b in load_buses])
            if cp.has_section("noload_voltage"):
                vnl = np.array(_floats(cp["noload_voltage"]["values"]))
            else:
                vnl = 1.0 + S @ P0
            if cp.has_section("fault") and "matrix" in cp["fault"]:
                phi = np.array([_floats(row) for row in cp["fault"]["matrix"].strip().splitlines()])
            else:
                phi = np.full((n_bus, n_bus), 0.05)
            return GridConfig(n_bus=n_bus, load_buses=load_buses, P0=P0, observed_buses=observed,
                              sensitivity=S, noload_voltage=vnl, fault_depression=phi,
                              name=name, **model, **timing)
        branches = []
        for row in cp["branches"]["lines"].strip().splitlines():
            a, b, x = row.split()
            branches.append((int(a), int(b), float(x)))
        fault = cp["fault"]
        return surrogate_from_topology(
            n_bus, branches, loads, observed,
            s0=sens.getfloat("s0"), d0=sens.getfloat("d0"),
            depth=fault.getfloat("depth"), d_phi=fault.getfloat("d_phi"),
            name=name, **model, **timing,
        )
    except (KeyError, ValueError, configparser.Error) as exc:
        raise ConfigError(f"invalid grid config {name!r}: {exc}") from exc


def load_grid_config(source: str | Path = "ieee39_surrogate") -> GridConfig:
    """Load a bundled config by name or an INI file by path."""
    if str(source) in BUNDLED_CONFIGS:
        text = resources.files("safeshed.data").joinpath(f"{source}.ini").read_text()
        return parse_grid_config(text, name=str(source))
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"grid config not found: {source}")
    return parse_grid_config(path.read_text(), name=path.stem)
