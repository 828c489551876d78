"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ContractError(ValueError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ParseError(ValueError):
    """A corpus / prediction / label file is malformed."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
