"""Deterministic control policy, observation normalisation and the policy bundle file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from safeshed.errors import ConfigError

STD_FLOOR = 1e-8
ARCH_CODES = {"linear": 0, "mlp": 1}
BUNDLE_FORMAT = "safeshed-policy"
BUNDLE_VERSION = 1


def n_params(arch: str, n_obs: int, n_act: int, hidden: int = 32) -> int:
    if arch == "linear":
        return n_act * n_obs + n_act
    if arch == "mlp":
        return hidden * n_obs + hidden + n_act * hidden + n_act
    raise ConfigError(f"unknown policy architecture {arch!r}")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat parameter vector with a fixed layout.

    linear: ``W`` (n_act x n_obs, row-major) then bias (n_act).
    mlp: ``W1`` (hidden x n_obs), ``b1`` (hidden), ``W2`` (n_act x hidden), ``b2`` (n_act);
    tanh on the hidden layer.
    """

    arch: str
    n_obs: int
    n_act: int
    theta: np.ndarray
    hidden: int = 32

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "theta", theta)
        expected = n_params(self.arch, self.n_obs, self.n_act, self.hidden)
        if theta.size != expected:
            raise ConfigError(f"{self.arch} policy needs {expected} parameters, got {theta.size}")

    @property
    def arch_code(self) -> int:
        return ARCH_CODES[self.arch]

    def with_theta(self, theta) -> PolicyParams:
        return PolicyParams(self.arch, self.n_obs, self.n_act, theta, self.hidden)


def initial_params(arch: str, n_obs: int, n_act: int, rng: np.random.Generator,
                   scale: float = 0.01, hidden: int = 32) -> PolicyParams:
    theta = scale * rng.standard_normal(n_params(arch, n_obs, n_act, hidden))
    return PolicyParams(arch, n_obs, n_act, theta, hidden)


@njit(cache=True)
def forward_core(theta, arch, n_obs, n_act, hidden, s, out):
    """Raw network output y; the squashed action is written by :func:`squash_core`."""
    if arch == 0:
        for a in range(n_act):
            acc = 0.0
            row = a * n_obs
            for i in range(n_obs):
                acc += theta[row + i] * s[i]
            out[a] = acc + theta[n_act * n_obs + a]
        return
    b1 = hidden * n_obs
    w2 = b1 + hidden
    b2 = w2 + n_act * hidden
    h = np.empty(hidden)
    for k in range(hidden):
        acc = 0.0
        for i in range(n_obs):
            acc += theta[k * n_obs + i] * s[i]
        h[k] = np.tanh(acc + theta[b1 + k])
    for a in range(n_act):
        acc = 0.0
        for k in range(hidden):
            acc += theta[w2 + a * hidden + k] * h[k]
        out[a] = acc + theta[b2 + a]


@njit(cache=True)
def squash_core(y, out):
    # maps R onto the open shedding interval (-0.2, 0)
    for a in range(y.shape[0]):
        out[a] = -0.1 * (np.tanh(y[a]) + 1.0)


def act(params: PolicyParams, s_norm) -> np.ndarray:
    if not np.all(np.isfinite(params.theta)):
        raise ValueError("policy parameters are not finite")
    s = np.ascontiguousarray(s_norm, dtype=np.float64)
    if s.shape != (params.n_obs,):
        raise ValueError(f"observation must have {params.n_obs} entries")
    y = np.empty(params.n_act)
    forward_core(params.theta, params.arch_code, params.n_obs, params.n_act, params.hidden, s, y)
    a = np.empty(params.n_act)
    squash_core(y, a)
    return a


@dataclass(frozen=True, eq=False)
class RunningStats:
    """Count, mean and sum of squared deviations of the observations seen so far."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, n: int) -> RunningStats:
        return cls(0, np.zeros(n), np.zeros(n))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        """Population standard deviation; identity until two samples are seen."""
        if self.count <= 1:
            return np.ones(self.dim)
        return np.sqrt(self.m2 / self.count)


def normalize(s, stats: RunningStats) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return (s - stats.mean) / np.maximum(stats.std, STD_FLOOR)


def update_stats(stats: RunningStats, s) -> RunningStats:
    """Welford update with one observation."""
    s = np.asarray(s, dtype=float)
    count = stats.count + 1
    delta = s - stats.mean
    mean = stats.mean + delta / count
    m2 = stats.m2 + delta * (s - mean)
    return RunningStats(count, mean, m2)


def merge_stats(a: RunningStats, b: RunningStats) -> RunningStats:
    """Combine two disjoint summaries (Chan et al. parallel variance)."""
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return RunningStats(n, mean, m2)


@dataclass(frozen=True, eq=False)
class PolicyBundle:
    """Deployable artifact: parameters, frozen observation statistics and metadata."""

    params: PolicyParams
    stats: RunningStats
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "arch": self.params.arch,
            "n_obs": self.params.n_obs,
            "n_act": self.params.n_act,
            "hidden": self.params.hidden,
            "theta": [float(v) for v in self.params.theta],
            "stats": {
                "count": int(self.stats.count),
                "mean": [float(v) for v in self.stats.mean],
                "m2": [float(v) for v in self.stats.m2],
                "std": [float(v) for v in self.stats.std],
            },
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> PolicyBundle:
        try:
            doc = json.loads(text)
            if doc.get("format") != BUNDLE_FORMAT or doc.get("version") != BUNDLE_VERSION:
                raise ConfigError("not a version-1 policy bundle")
            params = PolicyParams(doc["arch"], doc["n_obs"], doc["n_act"], np.array(doc["theta"]), doc["hidden"])
            st = doc["stats"]
            stats = RunningStats(st["count"], np.array(st["mean"], dtype=float), np.array(st["m2"], dtype=float))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed policy bundle: {exc}") from exc
        return cls(params, stats, doc.get("metadata", {}))

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> PolicyBundle:
        return cls.from_json(Path(path).read_text())

    def act(self, observation) -> np.ndarray:
        return act(self.params, normalize(observation, self.stats))


def theta_checksum(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype=np.float64).tobytes()).hexdigest()[:16]
