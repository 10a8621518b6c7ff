"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`MtgpkError`.
The CLI maps the two middle-level families onto exit codes: input problems
(:class:`InputError`) exit with 1, numerical failures (:class:`NumericalError`)
with 2.
"""


class MtgpkError(Exception):
    """Base class for all package errors."""


class InputError(MtgpkError, ValueError):
    """Malformed data, configuration or arguments."""


class NumericalError(MtgpkError, ArithmeticError):
    """A computation could not be carried out numerically."""


class NotSymmetric(InputError):
    pass


class NotPSD(InputError):
    def __init__(self, min_eigenvalue, message=None):
        self.min_eigenvalue = float(min_eigenvalue)
        super().__init__(
            message or f"matrix is not PSD (most negative eigenvalue {self.min_eigenvalue:.6g})"
        )


class NonPositiveDiagonal(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class NonFiniteValue(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class TaskIndexOutOfRange(InputError):
    pass


class EmptyTask(InputError):
    pass


class InvalidBounds(InputError):
    pass


class ConfigError(InputError):
    pass


class ResourceCapExceeded(InputError):
    pass


class NotPSDAfterJitter(NumericalError):
    def __init__(self, max_jitter, message=None):
        self.max_jitter = float(max_jitter)
        super().__init__(
            message or f"Cholesky failed even with diagonal jitter {self.max_jitter:.3g}"
        )
