"""Exception types raised by the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class InfeasibleBudgetError(ValueError):
    """The requested accuracy cannot be met with the chosen number of switches."""

    def __init__(self, message: str, min_bound: float | None = None):
        super().__init__(message)
        self.min_bound = min_bound
