"""Exception types shared across the package.

The command-line front end maps these onto process exit codes:
configuration problems exit 2, data problems exit 3, numeric failures
exit 4.
"""


class TailcastError(Exception):
    """Base class for every package-specific error."""


class ConfigError(TailcastError):
    """Invalid configuration or API misuse, detected before work starts."""


class DimensionError(ConfigError):
    """Array shapes or lengths are inconsistent with the model or data."""


class DataError(TailcastError):
    """Input data violates a documented contract."""


class SchemaError(DataError):
    """A required column or field is missing or unknown."""


class IntegrityError(DataError):
    """Timestamps or cells are malformed (non-monotone, unparseable, ...)."""


class DegenerateFeatureError(DataError):
    """A variable is constant where a spread is required."""


class EmptySubsetError(DataError):
    """A requested sample subset contains no samples."""


class InsufficientTailError(DataError):
    """Too few exceedances to fit a tail model."""


class StrategyUnavailableError(DataError):
    """The chosen training strategy cannot run on this split."""


class CheckpointError(DataError):
    """A checkpoint is corrupt, truncated, or from another format version."""


class NumericError(TailcastError):
    """A numeric computation failed or produced non-finite values."""


class DivergenceError(NumericError):
    """Training produced a non-finite gradient or loss."""


class GpdFitError(NumericError):
    """Tail-model likelihood optimization did not converge."""


class StaleTraceError(NumericError):
    """A forward trace no longer matches the parameters it was built from."""
