"""Exception hierarchy shared across the package."""


class DiffstyleError(Exception):
    """Base class for all package errors."""


class ScheduleError(DiffstyleError):
    """Invalid noise-schedule construction or query."""


class SamplingError(DiffstyleError):
    """A reverse/forward diffusion step failed.

    Carries the respaced step index when the failure happened inside a loop.
    """

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"step k={step}: {message}"
        super().__init__(message)
        self.step = step


class GuidanceError(DiffstyleError):
    """A guidance loss component could not be evaluated."""


class AdapterError(DiffstyleError):
    """A model/embedder adapter is missing, broken, or incompatible."""


class RegistryError(AdapterError):
    """Checkpoint descriptor names an unregistered adapter type."""


class ScheduleMismatchError(AdapterError):
    """Checkpoint's native schedule conflicts with the run configuration."""


class ConfigError(DiffstyleError):
    """Run-configuration validation failure.

    ``violations`` is a list of (field_path, message) pairs; in first-error
    mode it has exactly one entry.
    """

    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = violations
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in violations))


class MetricUnavailableError(DiffstyleError):
    """An evaluation metric's required adapter is not registered."""
