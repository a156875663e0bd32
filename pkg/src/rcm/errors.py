"""Exception types shared across the package."""


class RCMError(Exception):
    """Base class for all package errors."""


class ConstructionError(RCMError, ValueError):
    """Invalid parameter when building a domain, law or environment."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateVertexError(RCMError, ValueError):
    """A kernel operation was requested at a vertex with zero total conductance."""


class GeometryError(RCMError, ValueError):
    """A structure does not fit inside the domain."""


class FormatError(RCMError, ValueError):
    """Malformed, truncated or mismatched serialized data."""


class SolverError(RCMError, RuntimeError):
    """Iterative solver did not reach the requested residual."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


class ConsistencyError(RCMError, ValueError):
    """Problem data violates a solvability condition."""


class SelectionError(RCMError, LookupError):
    """Requested cluster or component does not exist."""


class PreconditionError(RCMError, ValueError):
    """Operation called outside its domain of validity."""
