"""Two-stage anomaly detector: quantile forecaster plus anomaly classifier."""

from .io import (
    ModelFileError,
    ModelVersionError,
    load_bundle,
    load_model,
    load_models,
    save_model,
    save_models,
)
from .model import (
    DetectorBundle,
    Detections,
    Forecast,
    ForecastModel,
    InvalidWindowError,
    NormParams,
    PointDecision,
    classifier_forward,
    detect_point,
    forecast_forward,
    severity,
)
from .network import (
    ModelConfig,
    forecast_loss,
    inverse_normalize,
    irregularity_score,
    layer_normalize,
    recent_omit,
    week_over_week,
)
from .training import (
    GradCheckResult,
    TrainConfig,
    gradient_check,
    random_check_batch,
    train,
    train_bundle,
    training_windows,
    tune_threshold,
)

__all__ = [
    "DetectorBundle", "Detections", "Forecast", "ForecastModel", "GradCheckResult", "InvalidWindowError",
    "ModelConfig", "ModelFileError", "ModelVersionError", "NormParams", "PointDecision", "TrainConfig",
    "classifier_forward", "detect_point", "forecast_forward", "forecast_loss", "gradient_check",
    "inverse_normalize", "irregularity_score", "layer_normalize", "load_bundle", "load_model", "load_models",
    "random_check_batch", "recent_omit", "save_model", "save_models", "severity", "train", "train_bundle",
    "training_windows", "tune_threshold", "week_over_week",
]
