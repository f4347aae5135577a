"""Synthetic benchmark: periodic/constant base series with one injected anomaly each."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .series import LabeledSeries, LabelInterval, SeriesKey, UnivariateSeries, write_dataset

SHAPES = ("sine", "square", "constant")
PATTERNS = ("spike", "level_shift")
MAX_SPIKE_DAYS = 3
MIN_LENGTH = 42
CLEAN_HISTORY = 28


@dataclass(frozen=True)
class AnomalySpec:
    """One injected anomaly.

    ``intensity`` is in multiples of the noise std.  For a level shift,
    ``duration`` is the number of shifted days kept at the end of the
    series: the series is cut ``duration`` days after onset.  ``None``
    keeps the shift to the original end.
    """

    pattern: str = "spike"
    intensity: float = 5.0
    duration: int | None = 2
    location: int | None = None  # day index; None draws it from the rng
    sign: int = 1

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown anomaly pattern {self.pattern!r}")
        if self.pattern == "spike" and self.duration is None:
            raise ValueError("a spike needs a duration")
        if self.duration is not None and self.duration < 1:
            raise ValueError("duration must be >= 1")
        if self.pattern == "spike" and self.duration > MAX_SPIKE_DAYS:
            raise ValueError(f"spike duration must be <= {MAX_SPIKE_DAYS}")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")


@dataclass(frozen=True)
class SynthConfig:
    shape: str = "sine"
    length: int = 60
    period: int = 7
    amplitude: float = 1.0
    base_level: float = 10.0
    noise_std: float = 0.1
    phase: int = 0  # days
    seed: int = 0
    start_date: date = date(2024, 1, 1)
    anomaly: AnomalySpec | None = field(default_factory=AnomalySpec)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.length < MIN_LENGTH:
            raise ValueError(f"length must be >= {MIN_LENGTH}")
        if self.shape != "constant" and self.period < 2:
            raise ValueError("period must be >= 2 for periodic shapes")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def noiseless_signal(config: SynthConfig) -> np.ndarray:
    t = np.arange(config.length) + config.phase
    if config.shape == "constant":
        wave = np.zeros(config.length)
    else:
        wave = np.sin(2 * np.pi * t / config.period)
        if config.shape == "square":
            # sign of the sine, with zero crossings taken as the start of the high half
            wave = np.where(np.mod(t, config.period) < config.period / 2, 1.0, -1.0)
    return config.base_level + config.amplitude * wave


def _key(series_id: str) -> SeriesKey:
    return SeriesKey(series_id, "synthetic", "mean")


def generate_base_series(config: SynthConfig, series_id: str = "synthetic") -> UnivariateSeries:
    """Noisy base series; noise is the first draw from ``default_rng(seed)``."""
    rng = np.random.default_rng(config.seed)
    noise = rng.normal(0.0, config.noise_std, size=config.length) if config.noise_std > 0 else np.zeros(config.length)
    return UnivariateSeries(_key(series_id), config.start_date, noiseless_signal(config) + noise)


def anomaly_unit(noise_std: float, amplitude: float, base_level: float = 0.0) -> float:
    """Size of one intensity unit: the noise std, or 10% of the amplitude when noiseless."""
    if noise_std > 0:
        return noise_std
    if amplitude > 0:
        return 0.1 * amplitude
    return 0.1 * max(abs(base_level), 1.0)


def draw_location(length: int, spec: AnomalySpec, rng: np.random.Generator, min_clean: int = CLEAN_HISTORY) -> int:
    """Anomaly onset leaving ``min_clean`` clean leading days.

    A spike also keeps one normal day after it so its recovery is visible.
    """
    if spec.pattern == "spike":
        last = length - spec.duration - 1
    else:
        last = length - (spec.duration or 1)
    if last < min_clean:
        raise ValueError(f"series of length {length} too short for a {spec.pattern} after {min_clean} clean days")
    return int(rng.integers(min_clean, last + 1))


def inject_anomaly(series: UnivariateSeries, spec: AnomalySpec, unit: float,
                   rng: np.random.Generator | None = None,
                   min_clean: int = CLEAN_HISTORY) -> tuple[UnivariateSeries, LabelInterval]:
    """Add one anomaly of ``spec.intensity * unit`` and return the exact label."""
    n = len(series)
    loc = spec.location
    if loc is None:
        loc = draw_location(n, spec, rng if rng is not None else np.random.default_rng(0), min_clean)
    values = series.values.copy()
    offset = spec.sign * spec.intensity * unit
    if spec.pattern == "spike":
        end = loc + spec.duration - 1
        if loc < min_clean or end >= n:
            raise ValueError(f"spike [{loc}, {end}] does not fit series of length {n} with {min_clean} clean days")
        values[loc : end + 1] += offset
    else:
        end = n - 1 if spec.duration is None else loc + spec.duration - 1
        if loc < min_clean or end >= n:
            raise ValueError(f"level shift at {loc} does not fit series of length {n} with {min_clean} clean days")
        values = values[: end + 1]
        values[loc:] += offset
    out = UnivariateSeries(series.key, series.start_date, values)
    return out, LabelInterval(series.key, out.date_at(loc), out.date_at(end))


def generate_labeled(config: SynthConfig, series_id: str = "synthetic") -> LabeledSeries:
    base = generate_base_series(config, series_id)
    if config.anomaly is None:
        return LabeledSeries(base, [])
    rng = np.random.default_rng([config.seed, 1])
    unit = anomaly_unit(config.noise_std, config.amplitude, config.base_level)
    series, label = inject_anomaly(base, config.anomaly, unit, rng)
    return LabeledSeries(series, [label])


# -- grids ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    shapes: Sequence[str] = SHAPES
    noise_stds: Sequence[float] = (0.05, 0.1)
    intensities: Sequence[float] = (3.0, 5.0)
    durations: Sequence[int] = (2, 5)
    patterns: Sequence[str] = ("auto",)  # "auto": spike up to 3 days, level shift beyond
    length: int = 60
    period: int = 7
    amplitude: float = 1.0
    base_level: float = 10.0
    random_sign: bool = True
    random_phase: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grid fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def cells(self):
        for shape, noise, intensity, duration, pattern in itertools.product(
            self.shapes, self.noise_stds, self.intensities, self.durations, self.patterns
        ):
            if pattern == "auto":
                pattern = "spike" if duration <= MAX_SPIKE_DAYS else "level_shift"
            yield {"shape": shape, "noise_std": float(noise), "intensity": float(intensity),
                   "duration": int(duration), "pattern": pattern}


def grid_configs(grid: Grid, n: int, seed: int) -> list[tuple[str, SynthConfig]]:
    """(series id, config) for ``n`` series per grid cell; per-series seeds derive from ``seed``."""
    out = []
    for ci, cell in enumerate(grid.cells()):
        for i in range(n):
            ss = np.random.SeedSequence([seed, ci, i])
            series_seed = int(ss.generate_state(1)[0])
            rng = np.random.default_rng(ss.spawn(1)[0])
            sign = int(rng.choice([-1, 1])) if grid.random_sign else 1
            phase = int(rng.integers(grid.period)) if grid.random_phase else 0
            spec = AnomalySpec(cell["pattern"], cell["intensity"], cell["duration"], sign=sign)
            cfg = SynthConfig(shape=cell["shape"], length=grid.length, period=grid.period,
                              amplitude=grid.amplitude, base_level=grid.base_level,
                              noise_std=cell["noise_std"], phase=phase, seed=series_seed, anomaly=spec)
            out.append((f"syn-{ci:03d}-{i:04d}", cfg))
    return out


def generate_grid(grid: Grid, n: int, seed: int) -> tuple[list[LabeledSeries], dict]:
    dataset, manifest = [], {}
    for series_id, cfg in grid_configs(grid, n, seed):
        dataset.append(generate_labeled(cfg, series_id))
        manifest[series_id] = config_to_dict(cfg)
    return dataset, manifest


def config_to_dict(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["start_date"] = cfg.start_date.isoformat()
    return d


def generate_dataset(grid: Grid, n: int, seed: int, out_dir: str | Path) -> Path:
    """Write ``dataset.jsonl`` and ``manifest.json`` into ``out_dir``."""
    if not list(grid.cells()):
        raise ValueError("empty grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, manifest = generate_grid(grid, n, seed)
    write_dataset(dataset, out / "dataset.jsonl")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out / "dataset.jsonl"


def abnormal_day_fraction(dataset: Sequence[LabeledSeries]) -> float:
    """Labeled days over all series days (the benchmark's "% abnormal days")."""
    total = sum(len(item.series) for item in dataset)
    abnormal = sum(int(item.label_mask().sum()) for item in dataset)
    return abnormal / total if total else 0.0


def noisy_twin(config: SynthConfig) -> SynthConfig:
    """Same series without the anomaly (for label-coverage checks)."""
    return replace(config, anomaly=None)
