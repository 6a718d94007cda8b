"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see ``crossmost.cli``).
"""


class CrossmostError(Exception):
    exit_code = 1


class ConfigurationError(CrossmostError, ValueError):
    """Invalid configuration values or schema violations."""

    exit_code = 3


class DomainError(CrossmostError, ValueError):
    """Inputs outside an operation's domain (empty clouds, unnormalized rows...)."""

    exit_code = 5


class DivergenceError(CrossmostError, RuntimeError):
    """A loss became non-finite during training."""

    exit_code = 4

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
