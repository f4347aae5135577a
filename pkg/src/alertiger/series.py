"""Univariate health series, labeled datasets and rolling detection windows."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .healthstats import DailyStatRow

SHORT_HORIZON = 14
LONG_HORIZON = 28
HORIZONS = (SHORT_HORIZON, LONG_HORIZON)


@dataclass(frozen=True, order=True)
class SeriesKey:
    model_id: str
    entity: str
    statistic: str

    def __post_init__(self):
        if not (self.model_id and self.entity and self.statistic):
            raise ValueError(f"series key components must be non-empty: {self}")

    def as_dict(self) -> dict:
        return {"model_id": self.model_id, "entity": self.entity, "statistic": self.statistic}

    @classmethod
    def from_dict(cls, d: dict) -> "SeriesKey":
        return cls(d["model_id"], d["entity"], d["statistic"])

    def __str__(self) -> str:
        return f"{self.model_id}/{self.entity}/{self.statistic}"


@dataclass
class UnivariateSeries:
    """Daily values on a dense calendar index; NaN marks a missing day."""

    key: SeriesKey
    start_date: date
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("series values must be one-dimensional")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end_date(self) -> date:
        return self.start_date + timedelta(days=len(self.values) - 1)

    def index_of(self, day: date) -> int:
        return (day - self.start_date).days

    def date_at(self, index: int) -> date:
        return self.start_date + timedelta(days=index)

    def dates(self) -> list[date]:
        return [self.date_at(i) for i in range(len(self.values))]


@dataclass(frozen=True)
class LabelInterval:
    key: SeriesKey
    start: date
    end: date  # inclusive

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"label interval starts after it ends: {self.start} > {self.end}")


@dataclass
class LabeledSeries:
    series: UnivariateSeries
    labels: list[LabelInterval] = field(default_factory=list)

    @property
    def key(self) -> SeriesKey:
        return self.series.key

    def label_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.series), dtype=bool)
        for lab in self.labels:
            lo = max(self.series.index_of(lab.start), 0)
            hi = min(self.series.index_of(lab.end), len(self.series) - 1)
            if lo <= hi:
                mask[lo : hi + 1] = True
        return mask


class DuplicateRowError(ValueError):
    pass


def build_series(rows: Iterable[DailyStatRow]) -> list[UnivariateSeries]:
    """Group stat rows into dense daily series, one per (model, entity, statistic)."""
    by_key: dict[SeriesKey, dict[date, float]] = {}
    for row in rows:
        key = SeriesKey(row.model_id, row.entity, row.statistic)
        slots = by_key.setdefault(key, {})
        value = np.nan if row.value is None else float(row.value)
        if row.date in slots:
            prev = slots[row.date]
            same = (np.isnan(prev) and np.isnan(value)) or prev == value
            if not same:
                raise DuplicateRowError(f"conflicting values for {key} on {row.date}: {prev} vs {value}")
        slots[row.date] = value

    out = []
    for key in sorted(by_key):
        slots = by_key[key]
        start, end = min(slots), max(slots)
        values = np.full((end - start).days + 1, np.nan)
        for d, v in slots.items():
            values[(d - start).days] = v
        out.append(UnivariateSeries(key, start, values))
    return out


def flatten_series(series: Iterable[UnivariateSeries]) -> list[DailyStatRow]:
    """Inverse of :func:`build_series`; gap slots become missing rows."""
    rows = []
    for s in series:
        for i, v in enumerate(s.values):
            rows.append(
                DailyStatRow(s.key.model_id, s.key.entity, s.key.statistic, s.date_at(i),
                             None if np.isnan(v) else float(v))
            )
    return rows


def select_horizon(history_length: int) -> int | None:
    """Window length for a day with ``history_length`` prior days, or None to skip."""
    if history_length < 0:
        raise ValueError("history_length must be non-negative")
    if history_length < SHORT_HORIZON:
        return None
    if history_length < LONG_HORIZON:
        return SHORT_HORIZON
    return LONG_HORIZON


def day_of_week_onehot(day: date) -> np.ndarray:
    """One-hot weekday vector, Monday at index 0."""
    out = np.zeros(7)
    out[day.isoweekday() - 1] = 1.0
    return out


@dataclass
class DetectionWindow:
    key: SeriesKey
    target: date
    history: np.ndarray
    seasonality: np.ndarray
    observed: float
    valid: bool
    reason: str = ""

    @property
    def horizon(self) -> int:
        return len(self.history)


def build_window(series: UnivariateSeries, t: date) -> DetectionWindow:
    idx = series.index_of(t)
    if not 0 <= idx < len(series):
        raise IndexError(f"{t} outside series {series.key} range")
    seasonality = day_of_week_onehot(t)
    observed = float(series.values[idx])
    horizon = select_horizon(idx)
    if horizon is None:
        return DetectionWindow(series.key, t, np.empty(0), seasonality, observed, False, "insufficient history")
    history = series.values[idx - horizon : idx].copy()
    if np.isnan(history).any():
        return DetectionWindow(series.key, t, history, seasonality, observed, False, "missing in window")
    if np.isnan(observed):
        return DetectionWindow(series.key, t, history, seasonality, observed, False, "missing observed value")
    return DetectionWindow(series.key, t, history, seasonality, observed, True)


def iter_windows(series: UnivariateSeries) -> Iterator[DetectionWindow]:
    for i in range(len(series)):
        yield build_window(series, series.date_at(i))


@dataclass
class WindowBatch:
    """Valid windows of one horizon stacked into arrays."""

    keys: list[SeriesKey]
    targets: list[date]
    history: np.ndarray  # (n, H)
    seasonality: np.ndarray  # (n, 7)
    observed: np.ndarray  # (n,)
    labels: np.ndarray | None = None  # (n,) bool

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def horizon(self) -> int:
        return self.history.shape[1]

    def take(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(
            [self.keys[i] for i in idx],
            [self.targets[i] for i in idx],
            self.history[idx],
            self.seasonality[idx],
            self.observed[idx],
            None if self.labels is None else self.labels[idx],
        )


def stack_windows(windows: Sequence[DetectionWindow], labels: Sequence[bool] | None = None) -> dict[int, WindowBatch]:
    """Group valid windows by horizon into :class:`WindowBatch` objects."""
    groups: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        if w.valid:
            groups.setdefault(w.horizon, []).append(i)
    out = {}
    for h, idx in sorted(groups.items()):
        ws = [windows[i] for i in idx]
        out[h] = WindowBatch(
            keys=[w.key for w in ws],
            targets=[w.target for w in ws],
            history=np.stack([w.history for w in ws]),
            seasonality=np.stack([w.seasonality for w in ws]),
            observed=np.array([w.observed for w in ws]),
            labels=None if labels is None else np.array([labels[i] for i in idx], dtype=bool),
        )
    return out


def series_batches(dataset: Sequence[LabeledSeries]) -> dict[int, WindowBatch]:
    """All valid rolling windows of a labeled dataset, with point labels."""
    windows, labels = [], []
    for item in dataset:
        mask = item.label_mask()
        for i, w in enumerate(iter_windows(item.series)):
            windows.append(w)
            labels.append(bool(mask[i]))
    return stack_windows(windows, labels)


# -- labeled dataset file ---------------------------------------------------


def _encode_values(values: np.ndarray) -> list:
    return [None if np.isnan(v) else float(v) for v in values]


def write_dataset(dataset: Iterable[LabeledSeries], path: str | Path) -> None:
    """One JSON object per line: key fields, start_date, values, anomalies."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in dataset:
            s = item.series
            rec = {
                **s.key.as_dict(),
                "start_date": s.start_date.isoformat(),
                "values": _encode_values(s.values),
                "anomalies": [{"start": l.start.isoformat(), "end": l.end.isoformat()} for l in item.labels],
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path: str | Path) -> list[LabeledSeries]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = SeriesKey.from_dict(rec)
                values = np.array([np.nan if v is None else float(v) for v in rec["values"]])
                series = UnivariateSeries(key, date.fromisoformat(rec["start_date"]), values)
                labels = [
                    LabelInterval(key, date.fromisoformat(a["start"]), date.fromisoformat(a["end"]))
                    for a in rec.get("anomalies", [])
                ]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
            out.append(LabeledSeries(series, labels))
    return out
