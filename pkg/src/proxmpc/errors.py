"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed, gapped, or otherwise unusable input data."""


class ConfigError(ValueError):
    """Run configuration violates the published schema."""


class SolverFailure(RuntimeError):
    """The QP backend could not produce a certified solution."""


class PolicyFailure(RuntimeError):
    """A policy evaluation failed during closed-loop simulation."""

    def __init__(self, policy: str, hour: int, diagnostics: dict):
        super().__init__(f"policy {policy!r} failed at hour {hour}")
        self.policy = policy
        self.hour = hour
        self.diagnostics = diagnostics
