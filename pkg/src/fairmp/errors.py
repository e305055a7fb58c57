"""Exception hierarchy shared across the package."""


class FairmpError(Exception):
    """Base class for all package errors."""


class DataError(FairmpError):
    """Invalid dataset, split, or configuration input."""


class NumericError(FairmpError):
    """Non-finite values or numerically invalid operations."""


class TheoryViolation(FairmpError):
    """An empirical bound check that the theory guarantees has failed."""
