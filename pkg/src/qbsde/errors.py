"""Exception hierarchy shared by all modules."""


class QbsdeError(Exception):
    """Base class for every error raised by the package."""


# market
class SingularVolatility(QbsdeError):
    pass


class BadGrid(QbsdeError):
    pass


class ShapeMismatch(QbsdeError):
    pass


class CoefficientBoundViolation(QbsdeError):
    pass


# constraints
class EmptySet(QbsdeError):
    pass


class NoFeasiblePoint(QbsdeError):
    pass


class NoFeasiblePositivePoint(NoFeasiblePoint):
    pass


# drivers
class OutOfRange(QbsdeError):
    pass


class NegativeBeta(QbsdeError):
    pass


# bsde
class SolverError(QbsdeError):
    """Numerical failure inside a backward solver."""


class StiffnessFailure(SolverError):
    pass


class RegressionSingular(SolverError):
    pass


class FixedPointDivergence(SolverError):
    pass


# verify
class PreconditionViolated(QbsdeError):
    pass


# cli
class ConfigError(QbsdeError):
    """Invalid scenario file. ``field`` and ``line`` locate the problem when known."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
