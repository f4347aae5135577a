"""Daily model-health statistics from scoring-event logs.

Each scoring event carries the model's input features and its output score.
Events are grouped by (model, UTC day) and reduced to one row per
(model, entity, statistic, day).  Entities are scalar feature names,
expanded names for categorical (``country=US``) and vector (``emb[3]``)
features, the score pseudo-entity, and the model pseudo-entity for traffic.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import numbers
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

logger = logging.getLogger(__name__)

SCORE_ENTITY = "__score__"
MODEL_ENTITY = "__model__"
QUANTILES = (5, 25, 50, 75, 95)

FEATURE_STATS = ("mean", "std") + tuple(f"p{q}" for q in QUANTILES)
COVERAGE_STATS = ("coverage_nondefault", "coverage_nonmissing")
SCORE_STATS = ("score_mean", "score_std") + tuple(f"score_p{q}" for q in QUANTILES)
TRAFFIC_STATS = ("traffic", "traffic_ratio")
STATISTIC_KINDS = FEATURE_STATS + COVERAGE_STATS + SCORE_STATS + TRAFFIC_STATS

STATS_HEADER = ("model_id", "entity", "statistic", "date", "value")


class EventFormatError(ValueError):
    """A scoring-event record does not follow the event-log schema."""


@dataclass(frozen=True)
class ScoringEvent:
    model_id: str
    product_id: str
    timestamp: int  # UTC epoch milliseconds
    features: Mapping[str, Any]
    score: float

    @property
    def day(self) -> date:
        return datetime.fromtimestamp(self.timestamp / 1000.0, tz=timezone.utc).date()


@dataclass(frozen=True)
class DailyStatRow:
    model_id: str
    entity: str
    statistic: str
    date: date
    value: float | None


def _is_number(value: Any) -> bool:
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


def event_from_record(record: Any) -> ScoringEvent:
    """Validate one decoded JSON record and build the event."""
    if not isinstance(record, dict):
        raise EventFormatError("record is not an object")
    for name in ("model_id", "product_id"):
        value = record.get(name)
        if not isinstance(value, str) or not value:
            raise EventFormatError(f"{name} must be a non-empty string")
    ts = record.get("timestamp")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise EventFormatError("timestamp must be integer epoch milliseconds")
    try:
        datetime.fromtimestamp(ts / 1000.0, tz=timezone.utc)
    except (OverflowError, OSError, ValueError) as exc:
        raise EventFormatError(f"timestamp out of range: {ts}") from exc
    if "score" not in record:
        raise EventFormatError("missing score")
    score = record["score"]
    if not _is_number(score) or not math.isfinite(score):
        raise EventFormatError("score must be a finite number")
    features = record.get("features", {})
    if not isinstance(features, dict):
        raise EventFormatError("features must be an object")
    for fname, fvalue in features.items():
        if fvalue is None or isinstance(fvalue, str) or _is_number(fvalue):
            continue
        if isinstance(fvalue, list) and all(_is_number(v) for v in fvalue):
            continue
        raise EventFormatError(f"unsupported value for feature {fname!r}")
    return ScoringEvent(
        model_id=record["model_id"],
        product_id=record["product_id"],
        timestamp=ts,
        features=features,
        score=float(score),
    )


class EventStream:
    """Iterate the events of a newline-delimited JSON log.

    Malformed lines are skipped and counted in ``rejects``; with
    ``strict=True`` the first malformed line raises instead.  ``rejects``
    is complete once iteration has finished.
    """

    def __init__(self, path: str | Path, strict: bool = False):
        self.path = Path(path)
        self.strict = strict
        self.rejects = 0
        if not self.path.is_file():
            raise FileNotFoundError(f"event log not found: {self.path}")

    def __iter__(self) -> Iterator[ScoringEvent]:
        self.rejects = 0
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield event_from_record(json.loads(line))
                except (json.JSONDecodeError, EventFormatError) as exc:
                    if self.strict:
                        raise EventFormatError(f"{self.path}:{lineno}: {exc}") from exc
                    self.rejects += 1
                    logger.debug("rejected %s:%d: %s", self.path, lineno, exc)


def parse_events(path: str | Path, strict: bool = False) -> EventStream:
    return EventStream(path, strict=strict)


def expand_nonscalar_feature(name: str, value: str | list) -> list[tuple[str, float]]:
    """Split a categorical or vector value into scalar sub-features.

    >>> expand_nonscalar_feature("country", "US")
    [('country=US', 1.0)]
    >>> expand_nonscalar_feature("emb", [0.1, 0.2])
    [('emb[0]', 0.1), ('emb[1]', 0.2)]
    """
    if isinstance(value, str):
        return [(f"{name}={value}", 1.0)]
    if isinstance(value, (list, tuple, np.ndarray)):
        return [(f"{name}[{i}]", float(v)) for i, v in enumerate(value)]
    raise TypeError(f"feature {name!r}: expected categorical or vector value")


def nearest_rank(sorted_values: np.ndarray, q: int) -> float:
    """Nearest-rank ``q``-th percentile of an ascending array (``q`` in 1..100)."""
    n = len(sorted_values)
    rank = max(-(-q * n // 100), 1)
    return float(sorted_values[rank - 1])


def summarize(values: Iterable[float]) -> dict[str, float | None]:
    """mean, population std and nearest-rank quantiles of the present values."""
    arr = np.sort(np.asarray(list(values), dtype=float))
    if arr.size == 0:
        return {"mean": None, "std": None, **{f"p{q}": None for q in QUANTILES}}
    out: dict[str, float | None] = {"mean": float(np.mean(arr)), "std": float(np.std(arr))}
    for q in QUANTILES:
        out[f"p{q}"] = nearest_rank(arr, q)
    return out


def _day_entities(events: list[ScoringEvent], defaults: Mapping[str, float], default_value: float):
    """Per-entity value columns for one (model, day) group.

    Returns ``entity -> (values, default)`` where ``values`` holds one slot
    per event and ``None`` marks a missing slot.
    """
    scalars: set[str] = set()
    categories: dict[str, set[str]] = defaultdict(set)
    vector_dims: dict[str, int] = defaultdict(int)
    for ev in events:
        for fname, fvalue in ev.features.items():
            if isinstance(fvalue, str):
                categories[fname].add(fvalue)
            elif isinstance(fvalue, list):
                vector_dims[fname] = max(vector_dims[fname], len(fvalue))
            else:
                scalars.add(fname)

    columns: dict[str, tuple[list, float]] = {}
    for fname in scalars:
        col = [ev.features.get(fname) if _is_number(ev.features.get(fname)) else None for ev in events]
        columns[fname] = (col, defaults.get(fname, default_value))
    for fname, vocab in categories.items():
        for cat in vocab:
            col = []
            for ev in events:
                v = ev.features.get(fname)
                col.append((1.0 if v == cat else 0.0) if isinstance(v, str) else None)
            columns[f"{fname}={cat}"] = (col, 0.0)
    for fname, dims in vector_dims.items():
        for i in range(dims):
            col = []
            for ev in events:
                v = ev.features.get(fname)
                col.append(float(v[i]) if isinstance(v, list) and i < len(v) else None)
            columns[f"{fname}[{i}]"] = (col, defaults.get(fname, default_value))
    return columns


def aggregate_daily(
    events: Iterable[ScoringEvent],
    default_value: float = 0.0,
    defaults: Mapping[str, float] | None = None,
) -> list[DailyStatRow]:
    """Reduce scoring events to daily statistic rows.

    ``defaults`` overrides ``default_value`` per feature name for the
    non-default coverage.  Rows come back sorted by (model, entity,
    statistic, date); the result does not depend on event order.
    """
    defaults = defaults or {}
    groups: dict[tuple[str, date], list[ScoringEvent]] = defaultdict(list)
    for ev in events:
        groups[(ev.model_id, ev.day)].append(ev)

    rows: list[DailyStatRow] = []
    for (model_id, day), evs in groups.items():
        n = len(evs)
        for entity, (col, default) in _day_entities(evs, defaults, default_value).items():
            present = [float(v) for v in col if v is not None]
            for stat, value in summarize(present).items():
                rows.append(DailyStatRow(model_id, entity, stat, day, value))
            nondefault = sum(1 for v in present if v != default)
            rows.append(DailyStatRow(model_id, entity, "coverage_nondefault", day, nondefault / n))
            rows.append(DailyStatRow(model_id, entity, "coverage_nonmissing", day, len(present) / n))
        for stat, value in summarize(ev.score for ev in evs).items():
            rows.append(DailyStatRow(model_id, SCORE_ENTITY, f"score_{stat}", day, value))
        rows.append(DailyStatRow(model_id, MODEL_ENTITY, "traffic", day, float(n)))

    rows.sort(key=lambda r: (r.model_id, r.entity, r.statistic, r.date))
    return rows


def model_products(events: Iterable[ScoringEvent]) -> dict[str, str]:
    """Map each model to its product; a model may serve only one product."""
    products: dict[str, str] = {}
    for ev in events:
        seen = products.setdefault(ev.model_id, ev.product_id)
        if seen != ev.product_id:
            raise EventFormatError(
                f"model {ev.model_id!r} assigned to products {seen!r} and {ev.product_id!r}"
            )
    return products


def compute_traffic_ratio(rows: Iterable[DailyStatRow], products: Mapping[str, str]) -> list[DailyStatRow]:
    """Each model's share of its product's daily traffic.

    A product-day with zero total traffic yields missing ratios.
    """
    traffic: dict[tuple[str, date], dict[str, float]] = defaultdict(dict)
    for row in rows:
        if row.statistic != "traffic":
            continue
        if row.model_id not in products:
            raise KeyError(f"no product assigned to model {row.model_id!r}")
        traffic[(products[row.model_id], row.date)][row.model_id] = row.value or 0.0

    out = []
    for (_, day), per_model in traffic.items():
        total = math.fsum(per_model.values())
        for model_id, count in per_model.items():
            ratio = count / total if total > 0 else None
            out.append(DailyStatRow(model_id, MODEL_ENTITY, "traffic_ratio", day, ratio))
    out.sort(key=lambda r: (r.model_id, r.date))
    return out


def write_stats(rows: Iterable[DailyStatRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_HEADER)
        for r in rows:
            value = "" if r.value is None else repr(float(r.value))
            writer.writerow((r.model_id, r.entity, r.statistic, r.date.isoformat(), value))


def read_stats(path: str | Path) -> list[DailyStatRow]:
    rows = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != STATS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(STATS_HEADER)}")
        for rec in reader:
            if not rec:
                continue
            model_id, entity, stat, day, value = rec
            rows.append(
                DailyStatRow(model_id, entity, stat, date.fromisoformat(day), float(value) if value else None)
            )
    return rows


@dataclass
class AggregateSummary:
    events: int = 0
    rejects: int = 0
    rows: int = 0
    models: set = field(default_factory=set)


def aggregate_file(
    events_path: str | Path,
    out_path: str | Path,
    default_value: float = 0.0,
    strict: bool = False,
    defaults: Mapping[str, float] | None = None,
) -> AggregateSummary:
    """Parse an event log, aggregate it and write the stats file."""
    stream = parse_events(events_path, strict=strict)
    events = list(stream)
    rows = aggregate_daily(events, default_value=default_value, defaults=defaults)
    rows += compute_traffic_ratio(rows, model_products(events))
    rows.sort(key=lambda r: (r.model_id, r.entity, r.statistic, r.date))
    write_stats(rows, out_path)
    return AggregateSummary(
        events=len(events), rejects=stream.rejects, rows=len(rows), models={e.model_id for e in events}
    )
