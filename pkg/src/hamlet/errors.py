"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class TrainingError(RuntimeError):
    """Optimization produced non-finite values or otherwise diverged."""


class CalibrationError(RuntimeError):
    """Cost calibration could not produce usable measurements."""


class ConfigError(ValueError):
    """A configuration file or override failed validation."""
