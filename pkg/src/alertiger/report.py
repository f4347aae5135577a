"""Static HTML alert reports with inline SVG plots.

A report is a pure function of its bundle: the same alert, stats,
decisions and timestamp always render to the same bytes.
"""

from __future__ import annotations

import html
import json
import math
import re
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .healthstats import MODEL_ENTITY, DailyStatRow
from .postprocess import FILTER_NAMES, DecisionRecord, ModelAlert
from .series import SeriesKey

CONTEXT_DAYS = 28
AXIS_PAD = 0.05
UNKNOWN_IMPORTANCE = "unknown importance"


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ImportanceConfig:
    """model id -> entity -> non-negative importance score."""

    scores: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for model_id, per_entity in self.scores.items():
            for entity, score in per_entity.items():
                if not math.isfinite(score) or score < 0:
                    raise ValueError(f"importance of {model_id}/{entity} must be finite and >= 0, got {score}")

    def get(self, model_id: str, entity: str) -> float | None:
        return self.scores.get(model_id, {}).get(entity)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImportanceConfig":
        return cls({str(m): {str(e): float(s) for e, s in ents.items()} for m, ents in d.items()})

    @classmethod
    def load(cls, path: str | Path) -> "ImportanceConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SeriesSlice:
    """Daily values of one series around an alert, NaN where absent."""

    key: SeriesKey
    start: date
    observed: np.ndarray
    baseline: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    anomalous: np.ndarray  # bool, days inside a surviving interval

    def __post_init__(self):
        n = len(self.observed)
        if n < 1:
            raise ValueError("a series slice needs at least one day")
        for name in ("baseline", "lower", "upper", "anomalous"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from observed length {n}")

    def __len__(self) -> int:
        return len(self.observed)

    @property
    def forecast_days(self) -> int:
        return int(np.sum(~np.isnan(self.baseline)))

    @classmethod
    def plain(cls, key: SeriesKey, start: date, values: Sequence[float | None]) -> "SeriesSlice":
        obs = np.array([np.nan if v is None else float(v) for v in values])
        blank = np.full(len(obs), np.nan)
        return cls(key, start, obs, blank, blank.copy(), blank.copy(), np.zeros(len(obs), dtype=bool))


@dataclass
class ReportBundle:
    alert: ModelAlert
    slices: dict[str, list[SeriesSlice]]  # entity -> one slice per flagged statistic
    importance: dict[str, float | None]
    traffic: list[SeriesSlice]
    generated_at: str

    def __post_init__(self):
        kept = {(iv.key, iv.start, iv.end) for iv in self.alert.intervals if iv.kept}
        for iv in self.alert.intervals:
            if (iv.key, iv.start, iv.end) not in kept:
                raise ReportError(f"alert carries a filtered-out interval {iv.key} {iv.start}..{iv.end}")


def _day_index(start: date, end: date) -> list[date]:
    return [start + timedelta(days=i) for i in range((end - start).days + 1)]


def build_bundle(alert: ModelAlert, stats: Iterable[DailyStatRow], decisions: Iterable[DecisionRecord],
                 importance: ImportanceConfig | None = None, generated_at: str = "",
                 context_days: int = CONTEXT_DAYS) -> ReportBundle:
    """Collect everything a report shows, straight from the stats and decisions files."""
    importance = importance or ImportanceConfig()
    first = alert.start - timedelta(days=context_days)
    days = _day_index(first, alert.end)
    pos = {d: i for i, d in enumerate(days)}

    stat_values: dict[SeriesKey, dict[date, float | None]] = {}
    for row in stats:
        if row.model_id == alert.model_id and row.date in pos:
            stat_values.setdefault(SeriesKey(row.model_id, row.entity, row.statistic), {})[row.date] = row.value
    forecasts: dict[SeriesKey, dict[date, DecisionRecord]] = {}
    for rec in decisions:
        if rec.key.model_id == alert.model_id and rec.date in pos:
            forecasts.setdefault(rec.key, {})[rec.date] = rec

    slices: dict[str, list[SeriesSlice]] = {}
    for key in sorted({iv.key for iv in alert.intervals}):
        n = len(days)
        obs, base, lo, hi = (np.full(n, np.nan) for _ in range(4))
        flagged = np.zeros(n, dtype=bool)
        for d, v in stat_values.get(key, {}).items():
            if v is not None:
                obs[pos[d]] = v
        for d, rec in forecasts.get(key, {}).items():
            i = pos[d]
            if np.isnan(obs[i]) and rec.observed is not None:
                obs[i] = rec.observed
            if None not in (rec.baseline, rec.lower, rec.upper):
                base[i], lo[i], hi[i] = rec.baseline, rec.lower, rec.upper
        for iv in alert.intervals:
            if iv.key == key:
                for d in _day_index(max(iv.start, first), iv.end):
                    flagged[pos[d]] = True
        slices.setdefault(key.entity, []).append(SeriesSlice(key, first, obs, base, lo, hi, flagged))

    traffic = []
    for statistic in ("traffic", "traffic_ratio"):
        values = stat_values.get(SeriesKey(alert.model_id, MODEL_ENTITY, statistic))
        if values:
            traffic.append(SeriesSlice.plain(SeriesKey(alert.model_id, MODEL_ENTITY, statistic), first,
                                             [values.get(d) for d in days]))
    scores = {entity: importance.get(alert.model_id, entity) for entity in slices}
    return ReportBundle(alert, slices, scores, traffic, generated_at)


# -- plotting -------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _axis_range(values: np.ndarray) -> tuple[float, float]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return -1.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    span = hi - lo
    pad = AXIS_PAD * span if span > 0 else AXIS_PAD * max(abs(lo), 1.0)
    return lo - pad, hi + pad


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def plot_series_svg(series: SeriesSlice, width: int = 640, height: int = 180) -> str:
    """Inline SVG: shaded forecast band per day, observed line, dashed baseline, marked anomalous days."""
    n = len(series)
    left, right, top, bottom = 48, 8, 8, 20
    pw, ph = width - left - right, height - top - bottom
    slot = pw / n
    stacked = np.concatenate([series.observed, series.baseline, series.lower, series.upper])
    y0, y1 = _axis_range(stacked)

    def x(i: int) -> float:
        return left + (i + 0.5) * slot

    def y(v: float) -> float:
        return top + (y1 - v) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" role="img">',
             f'<title>{html.escape(str(series.key))}</title>',
             f'<rect class="frame" x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>']
    for s, e in _runs(series.anomalous):
        parts.append(f'<rect class="flag" x="{_fmt(left + s * slot)}" y="{top}" width="{_fmt((e - s + 1) * slot)}" '
                     f'height="{ph}" fill="#f8d0d0"/>')
    for i in range(n):
        lo, hi = series.lower[i], series.upper[i]
        if np.isfinite(lo) and np.isfinite(hi):
            parts.append(f'<rect class="band" x="{_fmt(left + i * slot)}" y="{_fmt(y(hi))}" width="{_fmt(slot)}" '
                         f'height="{_fmt(y(lo) - y(hi))}" fill="#c8dcf0"/>')
    for values, cls, extra in ((series.baseline, "baseline", ' stroke-dasharray="4 3"'),
                               (series.observed, "observed", "")):
        colour = "#3070b0" if cls == "baseline" else "#202020"
        for s, e in _runs(np.isfinite(values)):
            pts = " ".join(f"{_fmt(x(i))},{_fmt(y(values[i]))}" for i in range(s, e + 1))
            parts.append(f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{colour}"{extra}/>')
    for i in np.flatnonzero(series.anomalous & np.isfinite(series.observed)):
        parts.append(f'<circle class="anomaly" cx="{_fmt(x(i))}" cy="{_fmt(y(series.observed[i]))}" r="3" '
                     f'fill="#c02020"/>')
    parts.append(f'<text x="2" y="{top + 10}" font-size="10">{y1:.4g}</text>')
    parts.append(f'<text x="2" y="{top + ph}" font-size="10">{y0:.4g}</text>')
    last = series.start + timedelta(days=n - 1)
    parts.append(f'<text x="{left}" y="{height - 4}" font-size="10">{series.start.isoformat()}</text>')
    parts.append(f'<text x="{width - right}" y="{height - 4}" font-size="10" text-anchor="end">'
                 f'{last.isoformat()}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# -- html -----------------------------------------------------------------------------------

_STYLE = """body{font-family:sans-serif;margin:2em;max-width:60em}
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 8px;text-align:left}
.pass{color:#206020}.fail{color:#a02020}"""


def _num(v: float | None) -> str:
    return "missing" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"


def _explanation(alert: ModelAlert) -> str:
    worst = max(alert.intervals, key=lambda iv: (iv.max_severity, iv.key))
    entities = sorted({iv.key.entity for iv in alert.intervals})
    return (f"{len(alert.intervals)} monitored statistic interval(s) across {len(entities)} entity(ies) left "
            f"their forecast band and passed every enabled filter. The largest deviation is on "
            f"{worst.key.entity} / {worst.key.statistic} from {worst.start.isoformat()} to "
            f"{worst.end.isoformat()}, at {_num(worst.max_severity)} band widths from the baseline.")


def sorted_importance(importance: Mapping[str, float | None]) -> list[tuple[str, float | None]]:
    """Descending by score, ties by name; unknown scores last."""
    known = sorted(((e, s) for e, s in importance.items() if s is not None), key=lambda t: (-t[1], t[0]))
    unknown = sorted((e, s) for e, s in importance.items() if s is None)
    return known + unknown


def render_html(bundle: ReportBundle) -> str:
    a = bundle.alert
    esc = html.escape
    patterns = sorted({iv.pattern or "unclassified" for iv in a.intervals})
    out = ["<!DOCTYPE html>", '<html lang="en"><head><meta charset="utf-8">',
           f"<title>Alert {esc(a.model_id)} {a.start.isoformat()}</title>", f"<style>{_STYLE}</style></head><body>",
           '<section id="summary"><h1>Model alert: ' + esc(a.model_id) + "</h1>",
           "<table>",
           f"<tr><th>Model</th><td>{esc(a.model_id)}</td></tr>",
           f"<tr><th>Dates</th><td>{a.start.isoformat()} to {a.end.isoformat()}</td></tr>",
           f"<tr><th>Pattern</th><td>{esc(', '.join(patterns))}</td></tr>",
           f"<tr><th>Grouping rule</th><td>{esc(a.rule)}</td></tr>",
           f"<tr><th>Traffic ratio</th><td>{_num(a.traffic_ratio)}</td></tr>",
           f"<tr><th>Generated</th><td>{esc(bundle.generated_at)}</td></tr>",
           "</table>", f"<p>{esc(_explanation(a))}</p></section>"]

    for entity in sorted(bundle.slices):
        out.append(f'<section class="entity"><h2>Entity: {esc(entity)}</h2>')
        for sl in bundle.slices[entity]:
            ivs = [iv for iv in a.intervals if iv.key == sl.key]
            out.append(f"<h3>{esc(sl.key.statistic)}</h3>")
            out.append(plot_series_svg(sl))
            for iv in ivs:
                out.append(f"<p>{iv.start.isoformat()} to {iv.end.isoformat()}: pattern "
                           f"{esc(iv.pattern or 'unclassified')}, max severity {_num(iv.max_severity)}</p>")
        out.append("</section>")

    out.append('<section id="importance"><h2>Feature importance</h2><table><tr><th>Entity</th><th>Importance</th></tr>')
    for entity, score in sorted_importance(bundle.importance):
        out.append(f"<tr><td>{esc(entity)}</td><td>{UNKNOWN_IMPORTANCE if score is None else _num(score)}</td></tr>")
    out.append("</table></section>")

    out.append('<section id="traffic"><h2>Traffic</h2>')
    if not bundle.traffic:
        out.append("<p>No traffic statistics for this model.</p>")
    for sl in bundle.traffic:
        out.append(f"<h3>{esc(sl.key.statistic)}</h3>")
        out.append(plot_series_svg(sl))
    out.append("</section>")

    out.append('<section id="filters"><h2>Filter trace</h2><table><tr><th>Series</th><th>Dates</th>')
    out.extend(f"<th>{name}</th>" for name in FILTER_NAMES)
    out.append("</tr>")
    for iv in sorted(a.intervals, key=lambda iv: (iv.key, iv.start)):
        cells = []
        for name in FILTER_NAMES:
            if name not in iv.filters:
                cells.append("<td>off</td>")
            else:
                ok = iv.filters[name]
                cells.append(f'<td class="{"pass" if ok else "fail"}">{"pass" if ok else "fail"}</td>')
        out.append(f"<tr><td>{esc(str(iv.key))}</td><td>{iv.start.isoformat()} to {iv.end.isoformat()}</td>"
                   + "".join(cells) + "</tr>")
    out.append("</table></section></body></html>")
    return "\n".join(out) + "\n"


def report_filename(alert: ModelAlert) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]+", "_", alert.model_id)
    return f"{safe}_{alert.start.isoformat()}_{alert.end.isoformat()}.html"


def render_report(bundle: ReportBundle, out_path: str | Path) -> Path:
    """Write one self-contained HTML report; raises OSError if the path is unwritable."""
    path = Path(out_path)
    path.write_text(render_html(bundle), encoding="utf-8")
    return path


def render_reports(alerts: Sequence[ModelAlert], stats: Sequence[DailyStatRow],
                   decisions: Sequence[DecisionRecord], out_dir: str | Path,
                   importance: ImportanceConfig | None = None, generated_at: str = "") -> list[Path]:
    """One report per alert; no alerts writes nothing."""
    out = Path(out_dir)
    if alerts:
        out.mkdir(parents=True, exist_ok=True)
    return [render_report(build_bundle(a, stats, decisions, importance, generated_at), out / report_filename(a))
            for a in alerts]
