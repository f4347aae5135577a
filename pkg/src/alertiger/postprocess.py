"""Interval merging, alert filters, anomaly patterns and model-level grouping."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .series import SeriesKey

SPIKE_MAX_DAYS = 3
FILTER_NAMES = ("duration", "severity", "concurrency", "mtr")


@dataclass(frozen=True)
class DecisionRecord:
    """One day of detector output for one series (the decisions-file row)."""

    key: SeriesKey
    date: date
    is_anomaly: bool
    severity: float = 0.0
    probability: float = 0.0
    out_of_boundary: bool = False
    observed: float | None = None
    baseline: float | None = None
    lower: float | None = None
    upper: float | None = None

    def to_json(self) -> dict:
        return {**self.key.as_dict(), "date": self.date.isoformat(), "p_anomaly": self.probability,
                "observed": self.observed, "baseline": self.baseline, "lower": self.lower, "upper": self.upper,
                "severity": self.severity, "out_of_boundary": self.out_of_boundary, "is_anomaly": self.is_anomaly}

    @classmethod
    def from_json(cls, d: dict) -> "DecisionRecord":
        return cls(SeriesKey.from_dict(d), date.fromisoformat(d["date"]), bool(d["is_anomaly"]),
                   float(d.get("severity") or 0.0), float(d.get("p_anomaly") or 0.0),
                   bool(d.get("out_of_boundary", False)), d.get("observed"), d.get("baseline"),
                   d.get("lower"), d.get("upper"))


def write_decisions(records: Iterable[DecisionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_decisions(path: str | Path) -> list[DecisionRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(DecisionRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad decision record: {exc}") from exc
    return out


@dataclass
class AnomalyInterval:
    key: SeriesKey
    start: date
    end: date
    severities: tuple[float, ...]
    pattern: str | None = None
    filters: dict[str, bool] = field(default_factory=dict)

    @property
    def duration(self) -> int:
        return len(self.severities)

    @property
    def max_severity(self) -> float:
        return max(self.severities)

    @property
    def kept(self) -> bool:
        return all(self.filters.values())

    def to_json(self) -> dict:
        return {**self.key.as_dict(), "start": self.start.isoformat(), "end": self.end.isoformat(),
                "duration": self.duration, "severities": list(self.severities),
                "max_severity": self.max_severity, "pattern": self.pattern, "filters": dict(self.filters)}

    @classmethod
    def from_json(cls, d: dict) -> "AnomalyInterval":
        return cls(SeriesKey.from_dict(d), date.fromisoformat(d["start"]), date.fromisoformat(d["end"]),
                   tuple(float(s) for s in d["severities"]), d.get("pattern"), dict(d.get("filters", {})))


def merge_points_to_intervals(decisions: Iterable[DecisionRecord]) -> list[AnomalyInterval]:
    """Maximal runs of consecutive anomalous days, per series.

    A day without a decision (skipped window) breaks a run.
    """
    by_key: dict[SeriesKey, dict[date, DecisionRecord]] = defaultdict(dict)
    for d in decisions:
        by_key[d.key][d.date] = d
    out = []
    for key in sorted(by_key):
        days = sorted(d for d, rec in by_key[key].items() if rec.is_anomaly)
        run: list[date] = []
        for day in days:
            if run and day != run[-1] + timedelta(days=1):
                out.append(_interval(key, run, by_key[key]))
                run = []
            run.append(day)
        if run:
            out.append(_interval(key, run, by_key[key]))
    return out


def _interval(key, run, recs) -> AnomalyInterval:
    return AnomalyInterval(key, run[0], run[-1], tuple(float(recs[d].severity) for d in run))


# -- filters -------------------------------------------------------------------------------


def duration_filter(interval: AnomalyInterval, threshold: float = 2) -> bool:
    return interval.duration >= threshold


def severity_filter(interval: AnomalyInterval, threshold: float = 1.3) -> bool:
    return interval.max_severity >= threshold


def concurrency_filter(abnormal: int, total: int, threshold: float | None = None) -> bool:
    """Share of a model's monitored statistics that are abnormal; None disables."""
    if threshold is None:
        return True
    if total <= 0:
        raise ValueError("concurrency filter needs at least one monitored statistic")
    return abnormal / total >= threshold


def mtr_filter(traffic_ratio: float | None, threshold: float = 0.03) -> bool:
    """Model traffic ratio filter; a missing ratio passes."""
    if traffic_ratio is None:
        return True
    return traffic_ratio >= threshold


@dataclass(frozen=True)
class FilterConfig:
    duration: float = 2
    severity: float = 1.3
    concurrency: float | None = None
    mtr: float = 0.03
    duration_enabled: bool = True
    severity_enabled: bool = True
    concurrency_enabled: bool = False
    mtr_enabled: bool = True

    def __post_init__(self):
        for name in ("duration", "severity", "mtr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} threshold must be non-negative")
        if self.concurrency is not None and not 0 <= self.concurrency <= 1:
            raise ValueError("concurrency threshold must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "FilterConfig":
        return cls(duration_enabled=False, severity_enabled=False, concurrency_enabled=False, mtr_enabled=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FilterConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown filter config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "FilterConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def as_dict(self) -> dict:
        return asdict(self)

    def override(self, **changes) -> "FilterConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def concurrency_snapshot(decisions: Iterable[DecisionRecord]) -> dict[tuple[str, date], tuple[int, int]]:
    """(model, day) -> (abnormal statistics, monitored statistics)."""
    counts: dict[tuple[str, date], list[int]] = defaultdict(lambda: [0, 0])
    for d in decisions:
        c = counts[(d.key.model_id, d.date)]
        c[0] += int(d.is_anomaly)
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in counts.items()}


def apply_filters(intervals: Iterable[AnomalyInterval], config: FilterConfig,
                  traffic_ratio: Mapping[tuple[str, date], float | None] | None = None,
                  concurrency: Mapping[tuple[str, date], tuple[int, int]] | None = None) -> list[AnomalyInterval]:
    """Record each enabled filter's verdict on every interval.

    Model-level filters (traffic ratio, concurrency) are read on the
    interval's last day.  Returns copies with ``filters`` filled in; use
    ``interval.kept`` to select survivors.
    """
    traffic_ratio = traffic_ratio or {}
    concurrency = concurrency or {}
    out = []
    for iv in intervals:
        verdict = {}
        if config.duration_enabled:
            verdict["duration"] = duration_filter(iv, config.duration)
        if config.severity_enabled:
            verdict["severity"] = severity_filter(iv, config.severity)
        if config.concurrency_enabled and config.concurrency is not None:
            abnormal, total = concurrency.get((iv.key.model_id, iv.end), (1, 1))
            verdict["concurrency"] = concurrency_filter(abnormal, total, config.concurrency)
        if config.mtr_enabled:
            verdict["mtr"] = mtr_filter(traffic_ratio.get((iv.key.model_id, iv.end)), config.mtr)
        out.append(replace(iv, filters=verdict))
    return out


# -- patterns -------------------------------------------------------------------------------


def classify_pattern(interval: AnomalyInterval, post_window: Sequence[bool | None]) -> str:
    """spike, level_shift or ongoing.

    ``post_window`` holds the decisions of the days after the interval
    (True anomalous, False normal, None skipped).
    """
    if interval.duration > SPIKE_MAX_DAYS:
        return "level_shift"
    if any(flag is False for flag in post_window):
        return "spike"
    return "ongoing"


def classify_patterns(intervals: Iterable[AnomalyInterval], decisions: Iterable[DecisionRecord],
                      lookahead: int = SPIKE_MAX_DAYS) -> list[AnomalyInterval]:
    flags: dict[tuple[SeriesKey, date], bool] = {(d.key, d.date): d.is_anomaly for d in decisions}
    out = []
    for iv in intervals:
        post = [flags.get((iv.key, iv.end + timedelta(days=k))) for k in range(1, lookahead + 1)]
        out.append(replace(iv, pattern=classify_pattern(iv, post)))
    return out


# -- grouping ------------------------------------------------------------------------------


@dataclass
class ModelAlert:
    model_id: str
    start: date
    end: date
    intervals: list[AnomalyInterval]
    traffic_ratio: float | None = None
    rule: str = "or"

    def __post_init__(self):
        if not self.intervals:
            raise ValueError("a model alert needs at least one interval")

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "start": self.start.isoformat(), "end": self.end.isoformat(),
                "rule": self.rule, "traffic_ratio": self.traffic_ratio,
                "intervals": [iv.to_json() for iv in self.intervals]}

    @classmethod
    def from_json(cls, d: dict) -> "ModelAlert":
        return cls(d["model_id"], date.fromisoformat(d["start"]), date.fromisoformat(d["end"]),
                   [AnomalyInterval.from_json(iv) for iv in d["intervals"]], d.get("traffic_ratio"),
                   d.get("rule", "or"))


def group_to_model(intervals: Iterable[AnomalyInterval], rule: str = "or",
                   entities: Iterable[str] | None = None,
                   traffic_ratio: Mapping[tuple[str, date], float | None] | None = None) -> list[ModelAlert]:
    """Bundle surviving intervals into model alerts.

    ``or``: every surviving interval can trigger.  ``subset-or``: only
    intervals on ``entities`` can.  Intervals of one model whose date ranges
    overlap (transitively) share one alert.
    """
    if rule not in ("or", "subset-or"):
        raise ValueError(f"unknown grouping rule {rule!r}")
    if rule == "subset-or":
        if entities is None:
            raise ValueError("subset-or grouping needs an entity subset")
        allowed = set(entities)
        intervals = [iv for iv in intervals if iv.key.entity in allowed]
    traffic_ratio = traffic_ratio or {}
    by_model: dict[str, list[AnomalyInterval]] = defaultdict(list)
    for iv in intervals:
        by_model[iv.key.model_id].append(iv)

    alerts = []
    for model_id in sorted(by_model):
        ivs = sorted(by_model[model_id], key=lambda iv: (iv.start, iv.end, iv.key))
        group = [ivs[0]]
        group_end = ivs[0].end
        for iv in ivs[1:]:
            if iv.start <= group_end:
                group.append(iv)
                group_end = max(group_end, iv.end)
            else:
                alerts.append(_alert(model_id, group, rule, traffic_ratio))
                group, group_end = [iv], iv.end
        alerts.append(_alert(model_id, group, rule, traffic_ratio))
    return alerts


def _alert(model_id, group, rule, traffic_ratio) -> ModelAlert:
    start = min(iv.start for iv in group)
    end = max(iv.end for iv in group)
    return ModelAlert(model_id, start, end, list(group), traffic_ratio.get((model_id, end)), rule)


@dataclass
class PostprocessResult:
    intervals: list[AnomalyInterval]
    alerts: list[ModelAlert]

    @property
    def surviving(self) -> list[AnomalyInterval]:
        return [iv for iv in self.intervals if iv.kept]


def postprocess(decisions: Sequence[DecisionRecord], config: FilterConfig = FilterConfig(),
                traffic_ratio: Mapping[tuple[str, date], float | None] | None = None,
                rule: str = "or", entities: Iterable[str] | None = None) -> PostprocessResult:
    """Merge, classify, filter and group one batch of decisions."""
    intervals = classify_patterns(merge_points_to_intervals(decisions), decisions)
    intervals = apply_filters(intervals, config, traffic_ratio, concurrency_snapshot(decisions))
    alerts = group_to_model([iv for iv in intervals if iv.kept], rule, entities, traffic_ratio)
    return PostprocessResult(intervals, alerts)


def write_jsonl(items: Iterable, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json()) + "\n")


def read_alerts(path: str | Path) -> list[ModelAlert]:
    with Path(path).open(encoding="utf-8") as fh:
        return [ModelAlert.from_json(json.loads(line)) for line in fh if line.strip()]


def traffic_ratio_lookup(rows: Iterable) -> dict[tuple[str, date], float | None]:
    """(model, day) -> traffic ratio from stats rows; other statistics are ignored."""
    return {(r.model_id, r.date): r.value for r in rows if r.statistic == "traffic_ratio"}
