"""Exception types shared across the package.

Invalid arguments raise the builtin :class:`ValueError`; the classes here
cover the remaining failure kinds.
"""


class InvalidStateError(RuntimeError):
    """An operation was called on an object that cannot serve it yet."""


class ResourceExhaustedError(RuntimeError):
    """A bounded search (e.g. anchor rejection sampling) ran out of attempts."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite.

    ``snapshot`` carries the epoch, step and last finite loss components so
    the failure can be diagnosed without rerunning.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})


class ConfigError(ValueError):
    """Configuration validation failed; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))
