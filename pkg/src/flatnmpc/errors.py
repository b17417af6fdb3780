"""Exception types raised across the package."""


class FlatNmpcError(Exception):
    """Base class."""


class SingularFlatState(FlatNmpcError):
    """Flat state where thrust vanishes or the heading is undefined."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message)
        self.node = node


class DimensionMismatch(FlatNmpcError, ValueError):
    pass


class FactorizationFailure(FlatNmpcError):
    """Damped normal matrix is not numerically positive definite."""


class DivergenceError(FlatNmpcError):
    """Cost did not decrease before the damping exceeded its ceiling."""

    def __init__(self, message: str, cost_history=None):
        super().__init__(message)
        self.cost_history = list(cost_history or [])


class SolveFailure(FlatNmpcError):
    """An NMPC cycle could not produce a plan."""

    def __init__(self, message: str, cost_history=None):
        super().__init__(message)
        self.cost_history = list(cost_history or [])


class RefinementBudgetExceeded(FlatNmpcError):
    """Raised only on request; refinement normally flags the budget in its stats."""


class ConfigError(FlatNmpcError, ValueError):
    pass
