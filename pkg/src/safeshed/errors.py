"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration file or object is invalid."""


class SimulationDiverged(RuntimeError):
    """The grid integration produced a non-finite or unsolvable state."""
