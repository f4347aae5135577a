from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..series import HORIZONS, LabeledSeries, WindowBatch, day_of_week_onehot
from . import network as nw
from .model import DetectorBundle, ForecastModel
from .network import ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 1e-3
    quantile_weight: float = 1.0
    tau_lower: float = 0.025
    tau_upper: float = 0.975
    omit: int = 3
    threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def model_config(self, horizon: int) -> ModelConfig:
        return ModelConfig(horizon=horizon, omit=self.omit, tau_lower=self.tau_lower, tau_upper=self.tau_upper,
                           quantile_weight=self.quantile_weight, threshold=self.threshold)


class Adam:
    def __init__(self, params: dict, names: Sequence[str], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for n in self.names:
            g = grads[n]
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            self.params[n] = self.params[n] - self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


def training_windows(dataset: Sequence[LabeledSeries], horizon: int) -> WindowBatch:
    """Every complete fixed-length window of the dataset with its point label.

    Unlike the rolling protocol, a day with more history than ``horizon``
    still contributes (using its last ``horizon`` days), so the short-term
    model sees the whole corpus.  Rows are in canonical (key, date) order.
    """
    rows = []
    for item in dataset:
        s = item.series
        mask = item.label_mask()
        vals = s.values
        for i in range(horizon, len(vals)):
            hist = vals[i - horizon : i]
            if np.isnan(vals[i]) or np.isnan(hist).any():
                continue
            rows.append((s.key, s.date_at(i), hist, float(vals[i]), bool(mask[i])))
    rows.sort(key=lambda r: (r[0], r[1], r[2].tobytes(), r[3]))
    if not rows:
        return WindowBatch([], [], np.empty((0, horizon)), np.empty((0, 7)), np.empty(0), np.empty(0, dtype=bool))
    return WindowBatch(
        keys=[r[0] for r in rows],
        targets=[r[1] for r in rows],
        history=np.stack([r[2] for r in rows]),
        seasonality=np.stack([day_of_week_onehot(r[1]) for r in rows]),
        observed=np.array([r[3] for r in rows]),
        labels=np.array([r[4] for r in rows], dtype=bool),
    )


def _canonical_order(batch: WindowBatch) -> np.ndarray:
    return np.array(sorted(range(len(batch)), key=lambda i: (batch.keys[i], batch.targets[i],
                                                               batch.history[i].tobytes(),
                                                               float(batch.observed[i]))), dtype=int)


def _minibatches(rng: np.random.Generator, n: int, size: int):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start : start + size]


def train_forecaster(model: ForecastModel, prep: nw.Prepared, config: TrainConfig,
                     rng: np.random.Generator) -> list[float]:
    """Phase 1: fit trunk, heads and irregularity layer on clean points.

    ``prep`` must already exclude anomalous and degenerate rows.  Returns the
    full-data forecast loss after each epoch.
    """
    names = nw.stage1_param_names()
    opt = Adam(model.params, names, lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        for idx in _minibatches(rng, len(prep), config.batch_size):
            _, grads = nw.forecast_loss(model.params, model.config, prep.take(idx))
            opt.step(grads)
        loss, _ = nw.forecast_loss(model.params, model.config, prep, with_grad=False)
        history.append(loss.total)
    return history


def train_classifier(model: ForecastModel, prep: nw.Prepared, labels: np.ndarray, config: TrainConfig,
                     rng: np.random.Generator) -> list[float]:
    """Phase 2: fit the classifier with stage 1 frozen."""
    s1 = nw.stage1_forward(model.params, prep)
    names = nw.classifier_param_names()
    opt = Adam(model.params, names, lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        for idx in _minibatches(rng, len(prep), config.batch_size):
            sub = nw.Stage1Output(s1.baseline[idx], s1.lower[idx], s1.upper[idx], s1.irregularity[idx], {})
            _, grads = nw.classifier_loss(model.params, prep.take(idx), labels[idx], stage1=sub)
            opt.step(grads)
        loss, _ = nw.classifier_loss(model.params, prep, labels, stage1=s1, with_grad=False)
        history.append(loss)
    return history


def train(batch: WindowBatch, config: TrainConfig = TrainConfig(), seed: int | None = None) -> ForecastModel:
    """Two-phase training of one fixed-horizon model.

    ``batch.labels`` marks anomalous targets.  Deterministic in ``seed``
    (default ``config.seed``) and independent of the input row order.
    """
    if batch.labels is None:
        raise ValueError("training windows need labels")
    if len(batch) == 0:
        raise ValueError("empty training set")
    if batch.labels.all():
        raise ValueError("training set has no non-anomalous points")
    seed = config.seed if seed is None else seed
    batch = batch.take(_canonical_order(batch))
    rng = np.random.default_rng(seed)
    model = ForecastModel.initialize(config.model_config(batch.horizon), seed=int(rng.integers(2**31)))
    prep = model.prepare(batch.history, batch.seasonality, batch.observed)
    labels = batch.labels

    clean = ~labels & ~prep.degenerate
    if not clean.any():
        raise ValueError("no usable non-anomalous windows")
    if not labels.any():
        logger.warning("training set has no anomalous points; classifier will learn a constant")
    f_hist = train_forecaster(model, prep.take(clean), config, rng)
    c_hist = train_classifier(model, prep, labels.astype(float), config, rng)
    model.training_log = {"forecast_loss": f_hist, "classifier_loss": c_hist,
                          "n_windows": len(batch), "n_anomalous": int(labels.sum())}
    logger.info("H=%d trained on %d windows: forecast loss %.4f, classifier loss %.4f",
                batch.horizon, len(batch), f_hist[-1], c_hist[-1])
    return model


def horizon_seed(seed: int, horizon: int) -> int:
    return int(np.random.SeedSequence([seed, horizon]).generate_state(1)[0])


def train_bundle(dataset: Sequence[LabeledSeries], config: TrainConfig = TrainConfig(),
                 horizons: Sequence[int] = HORIZONS) -> DetectorBundle:
    models = {}
    for h in sorted(set(horizons)):
        models[h] = train(training_windows(dataset, h), config, seed=horizon_seed(config.seed, h))
    return DetectorBundle(models)


def tune_threshold(detector: DetectorBundle | ForecastModel, validation: Sequence[LabeledSeries],
                   grid: Sequence[float]) -> float:
    """Grid value with the best interval-wise F1 on ``validation``; ties go to the smaller value."""
    from ..evalkit import rolling_detect, score_decisions  # evalkit depends on this package

    if not grid:
        raise ValueError("empty threshold grid")
    if not any(item.labels for item in validation):
        raise ValueError("validation set has no positive intervals")
    if isinstance(detector, ForecastModel):
        detector = DetectorBundle([detector])
    decisions = rolling_detect(validation, detector)
    best, best_f1 = None, -1.0
    for theta in sorted(set(float(g) for g in grid)):
        if not 0 < theta < 1:
            raise ValueError(f"threshold {theta} outside (0, 1)")
        relabeled = [replace(d, is_anomaly=d.out_of_boundary and d.probability >= theta) for d in decisions]
        f1 = score_decisions(validation, relabeled).f1
        if f1 > best_f1:
            best, best_f1 = theta, f1
    return best


@dataclass
class GradCheckResult:
    max_rel_error: float
    forecast_rel_error: float
    classifier_rel_error: float
    worst: str
    per_param: dict = field(default_factory=dict)


def _rel_error(a, b, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(model: ForecastModel, batch: WindowBatch, step: float = 1e-5,
                   floor: float = 1e-6) -> GradCheckResult:
    """Central finite differences against backprop for both losses.

    The classifier loss is differentiated jointly through stage 1 so every
    weight is exercised by both checks.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if batch.labels is None:
        raise ValueError("gradient check needs labels")
    params = {k: np.array(v, dtype=float) for k, v in model.params.items()}
    prep = model.prepare(batch.history, batch.seasonality, batch.observed)
    labels = batch.labels

    def f_loss(p):
        return nw.forecast_loss(p, model.config, prep, labels, with_grad=False)[0].total

    def c_loss(p):
        return nw.classifier_loss(p, prep, labels, with_grad=False)[0]

    _, g_f = nw.forecast_loss(params, model.config, prep, labels)
    _, g_c = nw.classifier_loss(params, prep, labels, joint=True)

    worst, worst_err = "", 0.0
    errs = {"forecast": 0.0, "classifier": 0.0}
    per_param = {}
    for name in nw.param_names():
        for which, fn, grads in (("forecast", f_loss, g_f), ("classifier", c_loss, g_c)):
            analytic = np.asarray(grads.get(name, np.zeros_like(params[name])), dtype=float)
            numeric = np.zeros_like(params[name])
            flat = params[name].reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = fn(params)
                flat[i] = orig - step
                down = fn(params)
                flat[i] = orig
                nflat[i] = (up - down) / (2.0 * step)
            err = float(np.max(_rel_error(analytic, numeric, floor))) if numeric.size else 0.0
            per_param[(which, name)] = err
            errs[which] = max(errs[which], err)
            if err > worst_err:
                worst, worst_err = f"{which}:{name}", err
    return GradCheckResult(max(errs.values()), errs["forecast"], errs["classifier"], worst, per_param)


def random_check_batch(config: ModelConfig, rng: np.random.Generator, size: int = 8) -> WindowBatch:
    """Random windows for gradient checks; at least one clean and one anomalous label."""
    from datetime import date, timedelta

    from ..series import SeriesKey

    hist = rng.normal(size=(size, config.horizon)) * rng.uniform(0.5, 3.0, size=(size, 1)) + rng.normal(size=(size, 1))
    obs = hist.mean(axis=1) + rng.normal(scale=2.0, size=size) * hist.std(axis=1)
    start = date(2024, 1, 1)
    targets = [start + timedelta(days=int(d)) for d in rng.integers(0, 365, size=size)]
    labels = rng.random(size) < 0.4
    labels[0], labels[-1] = False, True
    return WindowBatch(
        keys=[SeriesKey("gradcheck", "x", "mean")] * size,
        targets=targets,
        history=hist,
        seasonality=np.stack([day_of_week_onehot(t) for t in targets]),
        observed=obs,
        labels=labels,
    )
