"""Exception types shared across the package."""


class FedsimError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FedsimError):
    """A config document is not well-formed."""


class ValidationError(FedsimError):
    """A config violates an invariant. Carries the offending field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.reason = message


class ConfigError(FedsimError):
    """A scenario or population config is unusable."""


class EncodingError(FedsimError):
    """Dimension-key encoding or decoding failed."""


class SchemaError(FedsimError):
    """A transform references a column the source table does not have."""


class QuotaExhausted(FedsimError):
    """The device's daily poll budget is spent."""


class DomainError(FedsimError):
    """A mechanism parameter is outside its valid range."""


class DegenerateError(FedsimError):
    """The randomized-response channel is non-invertible (p_keep == p_other)."""


class BudgetExhausted(FedsimError):
    """All allowed releases for a query have been spent."""


class AuthFailure(FedsimError):
    """Decryption failed authentication (tamper or wrong key)."""


class KeyLost(FedsimError):
    """A majority of snapshot-key replicas are gone; ciphertext unrecoverable."""


class DuplicateQuery(FedsimError):
    """A query with this id is already registered."""


class StorageError(FedsimError):
    """A (simulated) persistent-storage write failed."""


class EmptyTree(FedsimError):
    """Hierarchical histogram has no mass to extract a quantile from."""


class EmptyHistogram(FedsimError):
    """Flat histogram has no mass to extract a quantile from."""


class GridMismatch(FedsimError):
    """Two CDF estimates are on different grids and cannot be compared."""
