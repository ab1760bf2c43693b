"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so every failure a module can
raise on bad input derives from :class:`HodgeError`.
"""


class HodgeError(Exception):
    """Base class for all package errors."""


class DomainError(HodgeError, ValueError):
    """An argument lies outside (or too close to a singularity of) a density's domain."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


class RangeError(HodgeError, ValueError):
    """A squared norm lies outside the image interval of a monotone branch."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


class PreconditionError(HodgeError, ValueError):
    """Structural precondition violated (degree mismatch, non-injective map, ...)."""


class InadmissibleSystem(HodgeError):
    """An admissibility condition failed; ``condition`` is one of 'a', 'b', 'c'."""

    def __init__(self, condition, witness, message):
        super().__init__(message)
        self.condition = condition
        self.witness = witness


class SonicExceeded(HodgeError):
    """The iterate reached the sonic guard ``Q_s * (1 - margin)``."""

    def __init__(self, message, max_q=None, report=None):
        super().__init__(message)
        self.max_q = max_q
        self.report = report


class NonConvergence(HodgeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(HodgeError, ValueError):
    """Invalid job configuration or expression syntax."""


class SonicWarning(UserWarning):
    """Nodes came within the guard distance of a sonic or singular branch end."""
