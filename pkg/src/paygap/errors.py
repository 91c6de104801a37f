"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PaygapError(Exception):
    """Base class for all package errors."""


class ConfigError(PaygapError):
    """Invalid configuration (schema file, model file, CLI flags).

    Carries the full list of problems so callers can report all of them
    at once instead of failing on the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SchemaError(ConfigError):
    """Malformed or inconsistent variable schema."""


class DataError(PaygapError):
    """Bad unit-level data (missing column, bad cell, domain violation)."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DesignError(PaygapError):
    """Design-matrix construction failure (unknown variable, empty subset)."""


class FitError(PaygapError):
    """Model fitting failure (rank deficiency, singular covariance)."""


class SparseDataError(PaygapError):
    """Too few retainable sample-split iterations."""
