"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (files, shapes, labels)."""


class NumericalError(RuntimeError):
    """A numerical invariant was violated (divergence, failed factorization)."""
