"""Two-stage forecaster/classifier network with hand-written backpropagation.

Stage 1 maps a z-scored history window (most recent days omitted) plus the
weekday one-hot to a baseline and two quantile boundaries.  The boundary
offsets are scaled around the baseline by an irregularity multiplier
learned from the IQR of week-over-week differences.  Stage 2 turns the
deviations of the observed value from the three forecasts into an anomaly
probability.  Everything is batched over rows of numpy arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..healthstats import nearest_rank

SIGMA_FLOOR = 1e-8
WIDTH_FLOOR = 1e-8
FEATURE_CLIP = 50.0  # classifier inputs, in window standard deviations
IQR_SCALE = 0.1  # irregularity input is log1p(IQR / IQR_SCALE)
RELU_BIAS = 0.01

TRUNK_SIZES = (18, 9, 8)
HEAD_SIZES = (4, 1)
CLASSIFIER_SIZES = (8, 4, 1)
HEADS = ("baseline", "lower", "upper")


@dataclass(frozen=True)
class ModelConfig:
    horizon: int = 28
    omit: int = 3
    tau_lower: float = 0.025
    tau_upper: float = 0.975
    quantile_weight: float = 1.0
    threshold: float = 0.2

    def __post_init__(self):
        if self.horizon < 14:
            raise ValueError("horizon must be at least 14 days")
        if not 0 <= self.omit < self.horizon:
            raise ValueError("omit must satisfy 0 <= omit < horizon")
        if not 0 < self.tau_lower < self.tau_upper < 1:
            raise ValueError("need 0 < tau_lower < tau_upper < 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.quantile_weight < 0:
            raise ValueError("quantile_weight must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.horizon - self.omit + 7

    def as_dict(self) -> dict:
        return asdict(self)


# -- window preprocessing (no trainable weights) ------------------------------


def layer_normalize(history: np.ndarray) -> tuple[np.ndarray, float, float]:
    """z-score one window with its own mean and population std."""
    z, mu, sigma = normalize_rows(np.asarray(history, dtype=float)[None, :])
    return z[0], float(mu[0]), float(sigma[0])


def normalize_rows(history: np.ndarray):
    mu = history.mean(axis=1)
    centered = history - mu[:, None]
    sigma = np.maximum(np.sqrt((centered**2).mean(axis=1)), SIGMA_FLOOR)
    return centered / sigma[:, None], mu, sigma


def inverse_normalize(y, mu, sigma):
    return y * sigma + mu


def recent_omit(window: np.ndarray, omit: int) -> np.ndarray:
    """Drop the last ``omit`` days (the ones closest to the target day)."""
    window = np.asarray(window)
    horizon = window.shape[-1]
    if not 0 <= omit < horizon:
        raise ValueError(f"omit={omit} must satisfy 0 <= omit < {horizon}")
    return window[..., : horizon - omit]


def week_over_week(window: np.ndarray) -> np.ndarray:
    """delta[i] = x[i] - x[i+7]; length H-7 along the last axis."""
    window = np.asarray(window)
    return window[..., :-7] - window[..., 7:]


def iqr_rows(delta: np.ndarray) -> np.ndarray:
    """Nearest-rank 75th minus 25th percentile, row-wise."""
    d = np.sort(delta, axis=1)
    n = d.shape[1]
    lo = max(-(-25 * n // 100), 1) - 1
    hi = max(-(-75 * n // 100), 1) - 1
    return d[:, hi] - d[:, lo]


def iqr(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    return nearest_rank(v, 75) - nearest_rank(v, 25)


def sigmoid(x):
    # split by sign to stay finite for large |x|
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def irregularity_input(iqr_value):
    """Log-compressed IQR fed to the irregularity layer; zero IQR maps to zero.

    Normalized IQRs span orders of magnitude between smooth seasonal and
    pure-noise windows, and a single sigmoid unit over the raw value cannot
    follow that range.
    """
    return np.log1p(np.asarray(iqr_value, dtype=float) / IQR_SCALE)


def irregularity_score(z_window: np.ndarray, w: float, b: float) -> float:
    """2*sigmoid(w*g + b), g the log-compressed IQR of the window's weekly differences."""
    g = irregularity_input(iqr(week_over_week(z_window)))
    return float(2.0 * sigmoid(np.array(w * g + b)))


@dataclass
class Prepared:
    """Weight-independent inputs of a batch of windows."""

    z: np.ndarray  # (n, H) normalized history
    x: np.ndarray  # (n, H-K+7) trunk input
    iqr: np.ndarray  # (n,)
    mu: np.ndarray
    sigma: np.ndarray
    target: np.ndarray  # (n,) normalized observed value

    def __len__(self) -> int:
        return len(self.mu)

    def take(self, idx) -> "Prepared":
        return Prepared(*(getattr(self, f)[idx] for f in ("z", "x", "iqr", "mu", "sigma", "target")))

    @property
    def degenerate(self) -> np.ndarray:
        """Windows at the sigma floor whose observed value left the constant level."""
        return (self.sigma <= SIGMA_FLOOR) & (self.target != 0.0)


def prepare(history: np.ndarray, seasonality: np.ndarray, observed: np.ndarray, omit: int) -> Prepared:
    history = np.asarray(history, dtype=float)
    z, mu, sigma = normalize_rows(history)
    x = np.concatenate([recent_omit(z, omit), np.asarray(seasonality, dtype=float)], axis=1)
    target = (np.asarray(observed, dtype=float) - mu) / sigma
    return Prepared(z, x, iqr_rows(week_over_week(z)), mu, sigma, target)


# -- parameters ---------------------------------------------------------------


def _dense_names(prefix: str, count: int) -> list[str]:
    return [f"{prefix}{i}.{p}" for i in range(count) for p in ("W", "b")]


def stage1_param_names() -> list[str]:
    names = _dense_names("trunk", len(TRUNK_SIZES))
    for head in HEADS:
        names += _dense_names(head, len(HEAD_SIZES))
    return names + ["irr.w", "irr.b"]


def classifier_param_names() -> list[str]:
    return _dense_names("clf", len(CLASSIFIER_SIZES))


def param_names() -> list[str]:
    return stage1_param_names() + classifier_param_names()


def relu_bias_names() -> list[str]:
    names = [f"trunk{i}.b" for i in range(len(TRUNK_SIZES))]
    for prefix, sizes in [(h, HEAD_SIZES) for h in HEADS] + [("clf", CLASSIFIER_SIZES)]:
        names += [f"{prefix}{i}.b" for i in range(len(sizes) - 1)]
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}

    def chain(prefix, fan_in, sizes):
        for i, size in enumerate(sizes):
            shapes[f"{prefix}{i}.W"] = (fan_in, size)
            shapes[f"{prefix}{i}.b"] = (size,)
            fan_in = size

    chain("trunk", config.input_dim, TRUNK_SIZES)
    for head in HEADS:
        chain(head, TRUNK_SIZES[-1], HEAD_SIZES)
    shapes["irr.w"] = ()
    shapes["irr.b"] = ()
    chain("clf", 3, CLASSIFIER_SIZES)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, identity irregularity layer.

    ReLU layers get a small positive bias so an all-dead upstream row does not
    leave a pre-activation exactly on the kink.  The boundary heads start two
    standard deviations either side of the baseline so early quantile
    gradients are well-signed.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".W"):
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    for name in relu_bias_names():
        params[name][:] = RELU_BIAS
    params["lower1.b"][:] = -2.0
    params["upper1.b"][:] = 2.0
    return params


# -- forward / backward ---------------------------------------------------------


def _dense_forward(params, prefix, n_layers, a, relu_last):
    cache = []
    for i in range(n_layers):
        pre = a @ params[f"{prefix}{i}.W"] + params[f"{prefix}{i}.b"]
        cache.append((a, pre))
        a = np.maximum(pre, 0.0) if (relu_last or i < n_layers - 1) else pre
    return a, cache


def _dense_backward(params, prefix, cache, grad_out, relu_last, grads):
    n_layers = len(cache)
    g = grad_out
    for i in reversed(range(n_layers)):
        a_in, pre = cache[i]
        if relu_last or i < n_layers - 1:
            g = g * (pre > 0)
        grads[f"{prefix}{i}.W"] = grads.get(f"{prefix}{i}.W", 0) + a_in.T @ g
        grads[f"{prefix}{i}.b"] = grads.get(f"{prefix}{i}.b", 0) + g.sum(axis=0)
        g = g @ params[f"{prefix}{i}.W"].T
    return g


@dataclass
class Stage1Output:
    baseline: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    irregularity: np.ndarray
    cache: dict


def stage1_forward(params: dict, prep: Prepared) -> Stage1Output:
    """Forecasts in normalized space, after amplification and ordering."""
    shared, trunk_cache = _dense_forward(params, "trunk", len(TRUNK_SIZES), prep.x, relu_last=True)
    raw, head_caches = {}, {}
    for head in HEADS:
        out, head_caches[head] = _dense_forward(params, head, len(HEAD_SIZES), shared, relu_last=False)
        raw[head] = out[:, 0]
    g = irregularity_input(prep.iqr)
    s = sigmoid(params["irr.w"] * g + params["irr.b"])
    scale = 2.0 * s
    yb = raw["baseline"]
    lower_amp = yb + scale * (raw["lower"] - yb)
    upper_amp = yb + scale * (raw["upper"] - yb)
    lower = np.minimum(lower_amp, yb)
    upper = np.maximum(upper_amp, yb)
    cache = dict(trunk=trunk_cache, heads=head_caches, raw=raw, s=s, scale=scale,
                 lower_amp=lower_amp, upper_amp=upper_amp, irr_input=g)
    return Stage1Output(yb, lower, upper, scale, cache)


def stage1_backward(params: dict, out: Stage1Output, d_base, d_lower, d_upper) -> dict[str, np.ndarray]:
    c = out.cache
    raw, scale = c["raw"], c["scale"]
    yb = raw["baseline"]
    d_base = np.array(d_base, dtype=float, copy=True)

    lower_active = c["lower_amp"] <= yb
    upper_active = c["upper_amp"] >= yb
    d_lower_amp = d_lower * lower_active
    d_upper_amp = d_upper * upper_active
    d_base += d_lower * ~lower_active + d_upper * ~upper_active

    d_base += (d_lower_amp + d_upper_amp) * (1.0 - scale)
    d_raw = {
        "baseline": d_base,
        "lower": d_lower_amp * scale,
        "upper": d_upper_amp * scale,
    }
    d_scale = d_lower_amp * (raw["lower"] - yb) + d_upper_amp * (raw["upper"] - yb)
    d_logit = d_scale * 2.0 * c["s"] * (1.0 - c["s"])

    grads: dict[str, np.ndarray] = {
        "irr.w": np.array(np.sum(d_logit * c["irr_input"])),
        "irr.b": np.array(np.sum(d_logit)),
    }
    d_shared = 0.0
    for head in HEADS:
        d_shared = d_shared + _dense_backward(
            params, head, c["heads"][head], d_raw[head][:, None], relu_last=False, grads=grads
        )
    _dense_backward(params, "trunk", c["trunk"], d_shared, relu_last=True, grads=grads)
    return grads


def classifier_features(target, baseline, lower, upper) -> np.ndarray:
    f = np.stack([target - baseline, target - lower, target - upper], axis=1)
    return np.clip(f, -FEATURE_CLIP, FEATURE_CLIP)


def classifier_forward(params: dict, features: np.ndarray):
    logit, cache = _dense_forward(params, "clf", len(CLASSIFIER_SIZES), features, relu_last=False)
    return logit[:, 0], cache


def classifier_backward(params: dict, cache, d_logit, grads: dict) -> np.ndarray:
    return _dense_backward(params, "clf", cache, d_logit[:, None], relu_last=False, grads=grads)


# -- losses ------------------------------------------------------------------------


def pinball(residual, tau):
    return np.maximum(tau * residual, (tau - 1.0) * residual)


def pinball_grad(residual, tau):
    """d pinball / d residual (subgradient tau-1 at zero)."""
    return np.where(residual > 0, tau, tau - 1.0)


@dataclass
class ForecastLoss:
    total: float
    mse: float
    lower: float
    upper: float


def forecast_loss(params: dict, config: ModelConfig, prep: Prepared, anomalous: np.ndarray | None = None,
                  with_grad: bool = True):
    """Masked MSE plus weighted pinball losses, all in normalized space.

    Returns ``(ForecastLoss, grads)``; ``grads`` is None when ``with_grad``
    is false.  Points flagged in ``anomalous`` are excluded from every term.
    """
    n = len(prep)
    keep = np.ones(n, dtype=bool) if anomalous is None else ~np.asarray(anomalous, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("batch has no non-anomalous points")
    w = keep / count
    out = stage1_forward(params, prep)
    t = np.where(keep, prep.target, 0.0)
    rb, rl, ru = t - out.baseline, t - out.lower, t - out.upper
    mse = float(np.sum(w * rb**2))
    l_lo = float(np.sum(w * pinball(rl, config.tau_lower)))
    l_up = float(np.sum(w * pinball(ru, config.tau_upper)))
    lam = config.quantile_weight
    loss = ForecastLoss(mse + lam * (l_lo + l_up), mse, l_lo, l_up)
    if not with_grad:
        return loss, None
    d_base = -2.0 * w * rb
    d_lower = -lam * w * pinball_grad(rl, config.tau_lower)
    d_upper = -lam * w * pinball_grad(ru, config.tau_upper)
    grads = stage1_backward(params, out, d_base, d_lower, d_upper)
    return loss, grads


def bce_with_logits(logit, labels):
    # log(1+exp(-|x|)) + max(x,0) - x*y
    return np.logaddexp(0.0, logit) - labels * logit


def classifier_loss(params: dict, prep: Prepared, labels: np.ndarray, stage1: Stage1Output | None = None,
                    joint: bool = False, with_grad: bool = True):
    """Mean binary cross-entropy of the anomaly probability.

    With ``joint=True`` the gradient is propagated into the stage-1 weights
    as well; training uses ``joint=False`` (stage 1 frozen).
    """
    y = np.asarray(labels, dtype=float)
    if stage1 is None:
        stage1 = stage1_forward(params, prep)
    raw_f = np.stack([prep.target - stage1.baseline, prep.target - stage1.lower, prep.target - stage1.upper], axis=1)
    feats = np.clip(raw_f, -FEATURE_CLIP, FEATURE_CLIP)
    logit, cache = classifier_forward(params, feats)
    loss = float(np.mean(bce_with_logits(logit, y)))
    if not with_grad:
        return loss, None
    d_logit = (sigmoid(logit) - y) / len(y)
    grads: dict[str, np.ndarray] = {}
    d_feat = classifier_backward(params, cache, d_logit, grads)
    if joint:
        d_feat = d_feat * (np.abs(raw_f) < FEATURE_CLIP)
        grads.update(stage1_backward(params, stage1, -d_feat[:, 0], -d_feat[:, 1], -d_feat[:, 2]))
    return loss, grads
