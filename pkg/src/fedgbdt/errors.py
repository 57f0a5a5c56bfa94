"""Exception and warning types shared across the package."""


class FedGbdtError(Exception):
    """Base class for all package errors."""


class ArgumentError(FedGbdtError, ValueError):
    """An argument violates an operation's precondition."""


class IntegrityError(FedGbdtError):
    """Internal bookkeeping is inconsistent (e.g. a sample is in no bucket)."""


class DegenerateNodeError(FedGbdtError, ArithmeticError):
    """A leaf weight was requested for a node with H + lambda <= 0."""


class RangeError(FedGbdtError, OverflowError):
    """A value does not fit the fixed-point aggregation ring."""


class DataError(FedGbdtError, ValueError):
    """Input data is malformed (unparseable cell, NaN where a number is needed)."""


class SchemaError(FedGbdtError, ValueError):
    """Data does not agree with its declared schema."""


class UndefinedMetricError(FedGbdtError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class ProtocolError(FedGbdtError):
    """A federated protocol step failed or received an unexpected message."""


class ReplayError(ProtocolError):
    """A secure-aggregation round index was reused within one session."""


class QuantileDegenerateError(ProtocolError):
    """Binary search could not hit the target count for some cut.

    ``cuts`` holds the best cuts found (minimal count error) so callers can
    still fall back to them.
    """

    def __init__(self, message, cuts=None):
        super().__init__(message)
        self.cuts = cuts


class TransportError(FedGbdtError):
    """Base class for transport failures."""


class TransportTimeout(TransportError, TimeoutError):
    pass


class PeerGone(TransportError):
    pass


class FrameError(TransportError):
    """A received frame is truncated or fails its checksum."""


class DegenerateLabelsWarning(UserWarning):
    """All training labels are identical."""


class QuantileWarning(UserWarning):
    """A quantile cut missed its target count and the best cut was kept."""
