"""Predicted embedding power regression (PEPR / C-PEPR) for OOD detection, with
the MSP, MaxLogit, KL-matching, MOS and embedding-power baselines."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, PeprError, UsageError  # noqa: E402
from .models import GroupScheme, PeprModel, TrainConfig, train_ensemble, train_pepr  # noqa: E402

__all__ = [
    "ConfigError", "DataError", "NumericError", "PeprError", "UsageError",
    "GroupScheme", "PeprModel", "TrainConfig", "train_ensemble", "train_pepr",
]
