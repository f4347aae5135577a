"""Rolling-window evaluation with interval-wise precision, recall and F1."""

from __future__ import annotations

import hashlib
import json
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .detector import DetectorBundle
from .postprocess import DecisionRecord, FilterConfig, apply_filters, concurrency_snapshot, merge_points_to_intervals
from .series import DetectionWindow, LabeledSeries, SeriesKey, iter_windows, stack_windows

MAX_INTERVAL_DAYS = 7


# -- interval scoring -------------------------------------------------------------------------


def chop_intervals(intervals: Iterable[tuple[int, int]], max_len: int = MAX_INTERVAL_DAYS) -> list[tuple[int, int]]:
    """Split inclusive day intervals greedily, left to right, into pieces of at most ``max_len`` days."""
    out = []
    for start, end in intervals:
        s = start
        while s <= end:
            e = min(s + max_len - 1, end)
            out.append((s, e))
            s = e + 1
    return out


def _covered_days(intervals: Iterable[tuple[int, int]]) -> set[int]:
    days: set[int] = set()
    for start, end in intervals:
        days.update(range(start, end + 1))
    return days


def match_intervals(predicted: Sequence[tuple[int, int]], labeled: Sequence[tuple[int, int]]) -> tuple[int, int, int]:
    """(tp, fp, fn) for one series.

    A label sharing a day with any prediction is one TP, otherwise one FN;
    a prediction sharing no day with any label is one FP.
    """
    pred_days = _covered_days(predicted)
    label_days = _covered_days(labeled)
    tp = sum(1 for s, e in labeled if any(d in pred_days for d in range(s, e + 1)))
    fp = sum(1 for s, e in predicted if not any(d in label_days for d in range(s, e + 1)))
    return tp, fp, len(labeled) - tp


@dataclass
class EvalResult:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    wall_time: float = 0.0
    fingerprint: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def compute_prf(tp: int, fp: int, fn: int) -> EvalResult:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalResult(tp, fp, fn, precision, recall, f1)


# -- rolling detection ---------------------------------------------------------------------------


def _detect_series(dataset: Sequence[LabeledSeries], detector: DetectorBundle,
                   use_classifier: bool) -> list[DecisionRecord]:
    windows: list[DetectionWindow] = []
    for item in dataset:
        windows.extend(w for w in iter_windows(item.series) if w.valid and w.horizon in detector)
    records = []
    for horizon, batch in stack_windows(windows).items():
        det = detector[horizon].detect_batch(batch, use_classifier)
        for i in range(len(batch)):
            records.append(DecisionRecord(
                batch.keys[i], batch.targets[i], bool(det.is_anomaly[i]), float(det.severity[i]),
                float(det.probability[i]), bool(det.out_of_boundary[i]), float(det.observed[i]),
                float(det.baseline[i]), float(det.lower[i]), float(det.upper[i]),
            ))
    records.sort(key=lambda r: (r.key, r.date))
    return records


DETECT_BLOCK = 16  # series per detection batch

_WORKER_DETECTOR: DetectorBundle | None = None


def _init_worker(detector: DetectorBundle) -> None:
    global _WORKER_DETECTOR
    _WORKER_DETECTOR = detector


def _worker_detect_series(args):
    chunk, use_classifier = args
    return _detect_series(chunk, _WORKER_DETECTOR, use_classifier)


def _worker_detect_points(chunk: Sequence[DetectionWindow]) -> int:
    flagged = 0
    for w in chunk:
        d = _WORKER_DETECTOR.detect_point(w)
        flagged += bool(d is not None and d.is_anomaly)
    return flagged


def _worker_noop(_=None) -> int:
    return os.getpid()


def _chunks(items: Sequence, n: int) -> list:
    n = max(1, min(n, len(items)))
    bounds = np.linspace(0, len(items), n + 1).astype(int)
    return [items[bounds[i] : bounds[i + 1]] for i in range(n)]


def _pool(workers: int, detector: DetectorBundle) -> ProcessPoolExecutor:
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    return ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker, initargs=(detector,))


def rolling_detect(dataset: Sequence[LabeledSeries], detector: DetectorBundle, use_classifier: bool = True,
                   workers: int = 1) -> list[DecisionRecord]:
    """Decisions for every day with a valid window, sorted by (series, day).

    With ``use_classifier=False`` a day is anomalous whenever it falls
    outside the forecast band (forecast-only ablation).  Series are batched
    in fixed blocks whatever the worker count, so BLAS rounding and hence
    every decision is identical for any ``workers``.
    """
    items = list(dataset)
    blocks = [items[i : i + DETECT_BLOCK] for i in range(0, len(items), DETECT_BLOCK)]
    if workers <= 1 or len(blocks) < 2:
        parts = [_detect_series(b, detector, use_classifier) for b in blocks]
    else:
        with _pool(min(workers, len(blocks)), detector) as pool:
            parts = list(pool.map(_worker_detect_series, [(b, use_classifier) for b in blocks]))
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: (r.key, r.date))
    return records


def predicted_intervals(decisions: Sequence[DecisionRecord], filters: FilterConfig | None = None,
                        traffic_ratio=None) -> dict[SeriesKey, list[tuple[int, int]]]:
    intervals = merge_points_to_intervals(decisions)
    if filters is not None:
        intervals = [iv for iv in apply_filters(intervals, filters, traffic_ratio, concurrency_snapshot(decisions))
                     if iv.kept]
    out: dict[SeriesKey, list[tuple[int, int]]] = {}
    for iv in intervals:
        out.setdefault(iv.key, []).append((iv.start.toordinal(), iv.end.toordinal()))
    return out


def score_decisions(dataset: Sequence[LabeledSeries], decisions: Sequence[DecisionRecord],
                    filters: FilterConfig | None = None, traffic_ratio=None) -> EvalResult:
    """Interval-wise counts of any detector's decisions against the dataset labels."""
    preds = predicted_intervals(decisions, filters, traffic_ratio)
    tp = fp = fn = 0
    keys = set()
    for item in dataset:
        keys.add(item.key)
        labs = chop_intervals((l.start.toordinal(), l.end.toordinal()) for l in item.labels)
        p = chop_intervals(preds.get(item.key, []))
        a, b, c = match_intervals(p, labs)
        tp, fp, fn = tp + a, fp + b, fn + c
    for key, p in preds.items():  # predictions on series absent from the dataset are false alarms
        if key not in keys:
            fp += len(chop_intervals(p))
    return compute_prf(tp, fp, fn)


def evaluate(dataset: Sequence[LabeledSeries], detector: DetectorBundle, filters: FilterConfig | None = None,
             use_classifier: bool = True, workers: int = 1, fingerprint: str = "",
             traffic_ratio=None) -> EvalResult:
    t0 = time.perf_counter()
    decisions = rolling_detect(dataset, detector, use_classifier, workers)
    elapsed = time.perf_counter() - t0
    result = score_decisions(dataset, decisions, filters, traffic_ratio)
    result.wall_time = elapsed
    result.fingerprint = fingerprint
    return result


def config_fingerprint(**parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_results(result: EvalResult, path: str | Path, **extra) -> None:
    Path(path).write_text(json.dumps({**result.to_json(), **extra}, sort_keys=True) + "\n", encoding="utf-8")


# -- timing -----------------------------------------------------------------------------------------


def prepared_windows(dataset: Sequence[LabeledSeries], detector: DetectorBundle | None = None) -> list[DetectionWindow]:
    out = []
    for item in dataset:
        out.extend(w for w in iter_windows(item.series) if w.valid and (detector is None or w.horizon in detector))
    return out


def timing_harness(detector: DetectorBundle, windows: Sequence[DetectionWindow],
                   worker_counts: Sequence[int] = (1,)) -> dict[int, float]:
    """Wall time of pointwise detection over prepared windows per worker count.

    Worker pools are started and warmed before the clock starts; the timed
    span covers shipping windows to workers, detection and collection.
    """
    times: dict[int, float] = {}
    windows = list(windows)
    for n in worker_counts:
        if n <= 1:
            _init_worker(detector)
            t0 = time.perf_counter()
            _worker_detect_points(windows)
            times[n] = time.perf_counter() - t0
            continue
        with _pool(n, detector) as pool:
            list(pool.map(_worker_noop, range(n)))
            chunks = _chunks(windows, n) if windows else []
            t0 = time.perf_counter()
            list(pool.map(_worker_detect_points, chunks))
            times[n] = time.perf_counter() - t0
    return times


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1

