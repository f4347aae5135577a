"""From raw scoring events to an HTML alert report.

A toy ranking model logs one event per request.  Forty days in, an upstream
change shifts the ``age`` feature by 25 years.  The script aggregates daily
statistics, trains a small detector on synthetic series, runs rolling
detection, filters and groups the anomalies, and writes one report per alert.

Run:  python demos/monitor_pipeline.py [OUT_DIR]
"""

import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from alertiger.detector import TrainConfig, train_bundle
from alertiger.evalkit import rolling_detect
from alertiger.healthstats import MODEL_ENTITY, ScoringEvent, aggregate_daily
from alertiger.postprocess import FilterConfig, postprocess
from alertiger.report import render_reports
from alertiger.series import LabeledSeries, build_series
from alertiger.synth import Grid, generate_grid

DAY_MS = 86_400_000


def scoring_events(days=60, per_day=50, shift_from=40, seed=0):
    rng = np.random.default_rng(seed)
    t0 = int(datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp() * 1000)
    events = []
    for d in range(days):
        for k in range(per_day):
            age = 30 + 3 * rng.normal() + (25 if d >= shift_from else 0)
            features = {"age": age, "session_minutes": float(rng.lognormal(2.0, 0.5))}
            events.append(ScoringEvent("ranker", "feed", t0 + d * DAY_MS + k, features, float(rng.uniform())))
    return events


def main(out_dir: Path) -> None:
    events = scoring_events()
    rows = aggregate_daily(events)
    print(f"{len(events)} events -> {len(rows)} daily statistic rows")

    series = [LabeledSeries(s, []) for s in build_series(r for r in rows if r.entity != MODEL_ENTITY)]
    print(f"{len(series)} monitored series, e.g. {series[0].key}")

    # A small synthetic corpus is enough to learn generic seasonal shapes.
    train_set, _ = generate_grid(Grid(noise_stds=(0.05, 0.1, 0.2)), 10, seed=1)
    bundle = train_bundle(train_set, TrainConfig(learning_rate=1e-2, epochs=30, seed=0))

    decisions = rolling_detect(series, bundle)
    flagged = [d for d in decisions if d.is_anomaly]
    print(f"{len(decisions)} daily decisions, {len(flagged)} flagged")

    result = postprocess(decisions, FilterConfig(mtr_enabled=False))
    for iv in result.surviving:
        print(f"  kept {iv.key.entity}/{iv.key.statistic} {iv.start}..{iv.end} "
              f"severity {iv.max_severity:.2f} pattern {iv.pattern}")
    print(f"{len(result.intervals)} intervals, {len(result.surviving)} survive the filters, "
          f"{len(result.alerts)} model alerts")

    paths = render_reports(result.alerts, rows, decisions, out_dir, generated_at="demo")
    for p in paths:
        print(f"report: {p}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="alertiger-")))
