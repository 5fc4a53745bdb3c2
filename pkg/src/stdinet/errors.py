"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """An API contract was violated (wrong call order, bad argument kind)."""


class DomainError(ValueError):
    """A value is outside its documented domain (e.g. an hour not in 0..23)."""


class DataError(ValueError):
    """Input data is unusable (bad file, short dataset, empty split)."""


class SchemaError(DataError):
    """A required column or field is missing from an input file."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
