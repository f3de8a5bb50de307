"""credscore: credit risk scoring with uncertainty, fairness and drift control.

The package trains two complementary scorers on time-indexed tabular data --
a mean-field variational Bayesian MLP and a fairness-constrained Newton-boosted
tree ensemble -- fuses them under a drift check, temperature-calibrates the
fused probability, and emits audited score reports with per-case attributions.
"""

SCHEMA_VERSION = "1"

from . import bnn, calibration, data, explain, fusion, gbdt, metrics, preprocess
from .errors import (
    ConfigError,
    CredScoreError,
    IntegrityError,
    NotFoundError,
    NumericalError,
    SchemaError,
    StageError,
    UndefinedMetricError,
)

__all__ = [
    "SCHEMA_VERSION",
    "bnn",
    "calibration",
    "data",
    "explain",
    "fusion",
    "gbdt",
    "metrics",
    "preprocess",
    "CredScoreError",
    "ConfigError",
    "SchemaError",
    "IntegrityError",
    "NumericalError",
    "UndefinedMetricError",
    "NotFoundError",
    "StageError",
]
