"""Exception types raised across the package."""


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class UnboundedError(ConvergenceError):
    """A minimization whose objective keeps decreasing past the floor."""


class CoverageError(RuntimeError):
    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class DualCoverageError(KeyError):
    """A sample's (s, a) pair has no dual coordinate."""


class DivergenceError(FloatingPointError):
    def __init__(self, t: int, iterate, tag: str = ""):
        prefix = f"[{tag}] " if tag else ""
        super().__init__(f"{prefix}non-finite iterate at step {t}")
        self.t = t
        self.iterate = iterate
        self.tag = tag


class ScheduleError(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


class InvariantError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row
