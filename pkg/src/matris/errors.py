"""Exception types shared across the package."""


class MatrisError(Exception):
    """Base class for package errors."""


class ValidationError(MatrisError, ValueError):
    """Input violates a documented precondition."""


class ParseError(ValidationError):
    """Malformed dataset file."""

    def __init__(self, message: str, frame: int | None = None, line: int | None = None):
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.frame = frame
        self.line = line


class OverlappingAtomsError(ValidationError):
    """Two atoms (or an atom and a periodic image) closer than the overlap tolerance."""


class NumericalError(MatrisError, ArithmeticError):
    """NaN/inf or divergence during a numerical procedure."""
