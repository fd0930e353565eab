"""Exception types raised across the package."""


class DisentangleError(Exception):
    """Base class for package errors."""


class InvalidCovarianceError(DisentangleError, ValueError):
    pass


class SingularConditioningError(DisentangleError, ArithmeticError):
    def __init__(self, indices):
        self.indices = tuple(indices)
        super().__init__(f"conditioning submatrix singular for indices {self.indices}")


class InsufficientOverlapError(DisentangleError, ValueError):
    def __init__(self, pair, count):
        self.pair = tuple(pair)
        self.count = count
        super().__init__(
            f"columns {self.pair} jointly observed in {count} rows (need >= 2)")


class UnshrinkableError(DisentangleError, ValueError):
    pass


class UnderdeterminedError(DisentangleError, ValueError):
    def __init__(self, equation, rank, ncols):
        self.equation = equation
        super().__init__(
            f"equation {equation!r} is underdetermined: rank {rank} < {ncols} columns")


class OptimizationError(DisentangleError, RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace or [])


class InvalidDataError(DisentangleError, ValueError):
    def __init__(self, msg, index=None):
        super().__init__(msg if index is None else f"{msg} (record {index})")
        self.index = index


class CounterexampleBroken(DisentangleError, AssertionError):
    """A verified identifiability relation failed to hold."""
