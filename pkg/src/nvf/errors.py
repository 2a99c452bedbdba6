"""Exception hierarchy shared by the library and the command-line tool."""


class NVFError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(NVFError):
    """Invalid configuration, parameters, or unknown tags."""


class FormatError(ConfigError):
    """A scene or field file failed its header or size checks."""


class PlanningError(NVFError):
    """View planning could not produce a feasible pose."""


class EvaluationError(NVFError):
    """A metric could not be computed from the given inputs."""


class ResourceError(NVFError):
    """A request exceeds a hard computational limit."""
