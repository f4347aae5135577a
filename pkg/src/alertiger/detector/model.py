from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from ..series import DetectionWindow, WindowBatch
from . import network as nw
from .network import ModelConfig


class InvalidWindowError(ValueError):
    pass


@dataclass(frozen=True)
class NormParams:
    mu: float
    sigma: float


@dataclass(frozen=True)
class Forecast:
    baseline: float
    lower: float
    upper: float
    irregularity: float
    norm: NormParams


@dataclass(frozen=True)
class PointDecision:
    anomaly_probability: float
    out_of_boundary: bool
    is_anomaly: bool
    severity: float
    forecast: Forecast | None = None
    observed: float = float("nan")


@dataclass
class Detections:
    """Batched detector output, raw scale unless noted."""

    baseline: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    irregularity: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    observed: np.ndarray
    probability: np.ndarray
    out_of_boundary: np.ndarray
    severity: np.ndarray
    is_anomaly: np.ndarray

    def __len__(self) -> int:
        return len(self.baseline)

    def decision(self, i: int) -> PointDecision:
        fc = Forecast(float(self.baseline[i]), float(self.lower[i]), float(self.upper[i]),
                      float(self.irregularity[i]), NormParams(float(self.mu[i]), float(self.sigma[i])))
        return PointDecision(float(self.probability[i]), bool(self.out_of_boundary[i]),
                             bool(self.is_anomaly[i]), float(self.severity[i]), fc, float(self.observed[i]))


def severity(baseline, observed, lower, upper):
    """|baseline - observed| in units of the forecast band width."""
    width = np.maximum(np.abs(np.asarray(upper) - np.asarray(lower)), nw.WIDTH_FLOOR)
    return np.abs(np.asarray(baseline) - np.asarray(observed)) / width


class ForecastModel:
    """Trained weights of both stages plus their hyperparameters.

    Immutable in use: detection only reads ``params``.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        expected = nw.param_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.params = {}
        for name, shape in expected.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr
        self.training_log: dict = {}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ForecastModel":
        return cls(config, nw.init_params(config, np.random.default_rng(seed)))

    @property
    def horizon(self) -> int:
        return self.config.horizon

    def with_threshold(self, threshold: float) -> "ForecastModel":
        m = ForecastModel(replace(self.config, threshold=threshold), self.params)
        m.training_log = self.training_log
        return m

    def copy(self) -> "ForecastModel":
        return ForecastModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def prepare(self, history, seasonality, observed) -> nw.Prepared:
        history = np.asarray(history, dtype=float)
        if history.ndim != 2 or history.shape[1] != self.horizon:
            raise ValueError(f"expected history of shape (n, {self.horizon}), got {history.shape}")
        return nw.prepare(history, seasonality, observed, self.config.omit)

    def detect_arrays(self, history, seasonality, observed, use_classifier: bool = True) -> Detections:
        prep = self.prepare(history, seasonality, observed)
        s1 = nw.stage1_forward(self.params, prep)
        feats = nw.classifier_features(prep.target, s1.baseline, s1.lower, s1.upper)
        logit, _ = nw.classifier_forward(self.params, feats)
        prob = nw.sigmoid(logit)
        base = nw.inverse_normalize(s1.baseline, prep.mu, prep.sigma)
        lo = nw.inverse_normalize(s1.lower, prep.mu, prep.sigma)
        hi = nw.inverse_normalize(s1.upper, prep.mu, prep.sigma)
        obs = np.asarray(observed, dtype=float)
        oob = (obs < lo) | (obs > hi)
        flagged = oob & (prob >= self.config.threshold) if use_classifier else oob
        return Detections(base, lo, hi, s1.irregularity, prep.mu, prep.sigma, obs, prob, oob,
                          severity(base, obs, lo, hi), flagged)

    def detect_batch(self, batch: WindowBatch, use_classifier: bool = True) -> Detections:
        return self.detect_arrays(batch.history, batch.seasonality, batch.observed, use_classifier)

    def _check(self, window: DetectionWindow) -> None:
        if not window.valid:
            raise InvalidWindowError(f"invalid window: {window.reason}")
        if window.horizon != self.horizon:
            raise ValueError(f"window horizon {window.horizon} != model horizon {self.horizon}")

    def forecast(self, window: DetectionWindow) -> Forecast:
        return self.detect_point(window).forecast

    def detect_point(self, window: DetectionWindow, use_classifier: bool = True) -> PointDecision:
        self._check(window)
        det = self.detect_arrays(window.history[None, :], window.seasonality[None, :],
                                 np.array([window.observed]), use_classifier)
        return det.decision(0)


def forecast_forward(window: DetectionWindow, model: ForecastModel) -> Forecast:
    return model.forecast(window)


def classifier_forward(forecast: Forecast, observed: float, model: ForecastModel) -> float:
    """Anomaly probability from a forecast and the observed value."""
    mu, sigma = forecast.norm.mu, forecast.norm.sigma
    n = lambda v: (v - mu) / sigma  # noqa: E731
    feats = nw.classifier_features(
        np.array([n(observed)]), np.array([n(forecast.baseline)]),
        np.array([n(forecast.lower)]), np.array([n(forecast.upper)]),
    )
    logit, _ = nw.classifier_forward(model.params, feats)
    return float(nw.sigmoid(logit)[0])


def detect_point(window: DetectionWindow, model: ForecastModel) -> PointDecision | None:
    """Decision for one window; None when the window is not valid."""
    if not window.valid:
        return None
    return model.detect_point(window)


class DetectorBundle:
    """Forecast models keyed by history horizon (short- and long-term)."""

    def __init__(self, models: Mapping[int, ForecastModel] | list[ForecastModel]):
        if not isinstance(models, Mapping):
            models = {m.horizon: m for m in models}
        self.models: dict[int, ForecastModel] = dict(sorted(models.items()))
        for h, m in self.models.items():
            if m.horizon != h:
                raise ValueError(f"model registered under horizon {h} has horizon {m.horizon}")

    def __contains__(self, horizon: int) -> bool:
        return horizon in self.models

    def __getitem__(self, horizon: int) -> ForecastModel:
        return self.models[horizon]

    def with_threshold(self, threshold: float) -> "DetectorBundle":
        return DetectorBundle({h: m.with_threshold(threshold) for h, m in self.models.items()})

    def detect_point(self, window: DetectionWindow, use_classifier: bool = True) -> PointDecision | None:
        if not window.valid or window.horizon not in self.models:
            return None
        return self.models[window.horizon].detect_point(window, use_classifier)
