"""Exception hierarchy shared across the toolkit."""


class TricodecError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(TricodecError):
    """An operation was called with arguments violating its contract
    (shape mismatch, bad operator kind, non-scalar loss, ...)."""


class NumericError(TricodecError):
    """A forward op produced a non-finite value (NaN/Inf)."""

    def __init__(self, message, op_kind=None, node_id=None):
        super().__init__(message)
        self.op_kind = op_kind
        self.node_id = node_id


class SceneFormatError(TricodecError):
    """A scene directory / manifest / image failed validation."""


class BitstreamError(TricodecError):
    """A serialized bitstream is malformed, truncated, or corrupt."""
