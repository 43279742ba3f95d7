"""Exception types raised across the package."""


class ZRPError(Exception):
    """Base class for all package errors."""


# rates and kernels


class RateError(ZRPError, ValueError):
    pass


class NonzeroAtZero(RateError):
    pass


class NegativeRate(RateError):
    pass


class ZeroAtPositive(RateError):
    pass


class KernelError(ZRPError, ValueError):
    pass


class NotNormalized(KernelError):
    pass


class ReducibleSymmetrization(KernelError):
    pass


class ZeroOffsetMass(KernelError):
    pass


class EmptySource(ZRPError, ValueError):
    pass


# rate expressions


class RateSyntaxError(ZRPError, ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifier(RateSyntaxError):
    pass


class ArityError(RateSyntaxError):
    pass


class DomainError(ZRPError, ArithmeticError):
    pass


# equilibrium


class DivergentSeries(ZRPError, ValueError):
    pass


class DensityOutOfRange(ZRPError, ValueError):
    pass


# dynamics


class EmptySystem(ZRPError, RuntimeError):
    pass


class EventBudgetExceeded(ZRPError, RuntimeError):
    pass


class NegativeCouplingRate(ZRPError, RuntimeError):
    pass


class OrderViolated(ZRPError, RuntimeError):
    pass


# statistics and linear algebra


class InsufficientSamples(ZRPError, ValueError):
    pass


class PreconditionError(ZRPError, ValueError):
    """A theorem's hypotheses do not hold for the requested model."""


class StateSpaceTooLarge(ZRPError, ValueError):
    pass


class DegenerateSpace(ZRPError, ValueError):
    pass


class ConvergenceFailure(ZRPError, RuntimeError):
    pass


class SolveFailure(ZRPError, RuntimeError):
    pass


class ConfigError(ZRPError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line
