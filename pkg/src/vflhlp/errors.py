"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
TrainingError -> 4. Everything else is a bug and escapes as-is.
"""


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class DataError(ValueError):
    """Problem with input data: files, schemas, IDs, labels."""


class SchemaError(DataError):
    """Shape or field mismatch between data and a model."""


class TrainingError(RuntimeError):
    """Training failed: divergence, non-finite values, missing weights."""


class UndefinedMetricError(ValueError):
    """Metric has no defined value, e.g. AUC on single-class labels."""
