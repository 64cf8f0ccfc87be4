"""Exception types shared across the package."""


class TiedrankError(Exception):
    """Base class for all package errors."""


class ShapeError(TiedrankError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(TiedrankError, ValueError):
    """A documented precondition of an operation was violated."""


class EmptySequenceError(TiedrankError, ValueError):
    """A pooling or encoding step received a fully masked sequence."""


class ConfigError(TiedrankError, ValueError):
    """Invalid model, loss, or training configuration."""


class DatasetError(TiedrankError, ValueError):
    """Base class for dataset file problems."""


class ParseError(DatasetError):
    """Malformed dataset record; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SchemaError(DatasetError):
    """Structurally valid record that violates the dataset schema."""


class IntegrityError(DatasetError):
    """Cross-record references do not resolve (e.g. dangling pairing)."""


class CheckpointError(TiedrankError, ValueError):
    """Checkpoint file is unreadable or inconsistent with its consumer."""


class NumericFault(TiedrankError, ArithmeticError):
    """A NaN or non-finite value surfaced where a finite one is required."""
