"""Run configuration: grid, learner and reward settings plus the task lists.

The file is INI (``configparser``) with sections ``run``, ``tasks``, ``ars``,
``reward``, ``uvls`` and ``report``. Any key left out takes the bundled
default; unknown keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from safeshed.ars import ArsConfig
from safeshed.errors import ConfigError
from safeshed.grid_env.config import BUNDLED_CONFIGS, GridConfig, load_grid_config
from safeshed.grid_env.env import FaultTask
from safeshed.grid_env.uvls import UvlsConfig
from safeshed.safety import RewardConfig

DEFAULT_RUN = "default_run.ini"


@dataclass(frozen=True)
class ReportOptions:
    plots: bool = True


@dataclass(frozen=True)
class RunConfig:
    grid: str
    out_dir: str
    ars: ArsConfig
    reward: RewardConfig
    tasks: tuple[FaultTask, ...]
    heldout: tuple[FaultTask, ...] = ()
    uvls: UvlsConfig = field(default_factory=UvlsConfig)
    report: ReportOptions = field(default_factory=ReportOptions)

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("training task list is empty")

    @property
    def eval_tasks(self) -> tuple[FaultTask, ...]:
        return self.tasks + tuple(t for t in self.heldout if t not in self.tasks)

    def grid_config(self) -> GridConfig:
        return load_grid_config(self.grid)

    def with_overrides(self, **ars_fields) -> RunConfig:
        ars_fields = {k: v for k, v in ars_fields.items() if v is not None}
        if not ars_fields:
            return self
        try:
            ars = dataclasses.replace(self.ars, **ars_fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return dataclasses.replace(self, ars=ars)


def parse_tasks(text: str) -> tuple[FaultTask, ...]:
    return tuple(FaultTask.parse(tok) for tok in text.replace(",", " ").split())


def _coerce(cls, section: configparser.SectionProxy, name: str):
    """Build dataclass ``cls`` from a section, converting by the field defaults' types."""
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = set(section) - set(fields)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    defaults = cls()
    for key, raw in section.items():
        ref = getattr(defaults, key)
        try:
            if isinstance(ref, bool):
                kwargs[key] = section.getboolean(key)
            elif isinstance(ref, int):
                kwargs[key] = int(raw)
            elif isinstance(ref, float):
                kwargs[key] = float(raw)
            elif isinstance(ref, tuple):
                kwargs[key] = tuple(float(v) for v in raw.replace(",", " ").split())
            else:
                kwargs[key] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def parse_run_config(text: str, base_dir: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    defaults = resources.files("safeshed.data").joinpath(DEFAULT_RUN).read_text()
    cp.read_string(defaults)
    user = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        user.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable run config: {exc}") from exc
    known = {"run", "tasks", "ars", "reward", "uvls", "report"}
    extra = set(user.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(sorted(extra))}")
    for sec in user.sections():
        for key, val in user[sec].items():
            cp[sec][key] = val

    run = cp["run"]
    unknown = set(run) - {"grid", "out"}
    if unknown:
        raise ConfigError(f"[run] unknown keys: {', '.join(sorted(unknown))}")
    grid = run.get("grid", "ieee39_surrogate").strip()
    if grid not in BUNDLED_CONFIGS:
        path = Path(grid)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"grid config not found: {grid}")
        grid = str(path)
    tasks_sec = cp["tasks"]
    unknown = set(tasks_sec) - {"train", "heldout"}
    if unknown:
        raise ConfigError(f"[tasks] unknown keys: {', '.join(sorted(unknown))}")
    return RunConfig(
        grid=grid,
        out_dir=run.get("out", "runs").strip(),
        ars=_coerce(ArsConfig, cp["ars"], "ars"),
        reward=_coerce(RewardConfig, cp["reward"], "reward"),
        tasks=parse_tasks(tasks_sec.get("train", "")),
        heldout=parse_tasks(tasks_sec.get("heldout", "")),
        uvls=_coerce(UvlsConfig, cp["uvls"], "uvls"),
        report=_coerce(ReportOptions, cp["report"], "report"),
    )


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Bundled defaults, optionally overlaid with the file at ``path``."""
    if path is None:
        return parse_run_config("")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"run config not found: {path}")
    return parse_run_config(p.read_text(), p.parent)
