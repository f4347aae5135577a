"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 data error,
4 nothing to report.  Every subcommand overwrites its output files, so
re-running with the same inputs and seed reproduces them.  The log level
comes from the ``ALERTIGER_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NO_ALERTS = 4
LOG_ENV = "ALERTIGER_LOG_LEVEL"

logger = logging.getLogger("alertiger")


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _probability(value: str) -> float:
    v = float(value)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


# -- subcommands ---------------------------------------------------------------------------


def cmd_aggregate(args) -> int:
    from .healthstats import aggregate_file

    defaults = json.loads(Path(args.defaults).read_text(encoding="utf-8")) if args.defaults else None
    summary = aggregate_file(args.events, args.out, default_value=args.default_value, strict=args.strict,
                             defaults=defaults)
    logger.info("aggregated %d events (%d rejected) into %d rows", summary.events, summary.rejects, summary.rows)
    print(f"{summary.rows} rows from {summary.events} events ({summary.rejects} rejected) -> {args.out}")
    return EXIT_OK


def _train_config(args):
    from .detector import TrainConfig

    return TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr,
                       quantile_weight=args.quantile_weight, omit=args.omit, threshold=args.threshold,
                       seed=args.seed)


def cmd_train(args) -> int:
    from .detector import save_models, train_bundle, tune_threshold
    from .series import HORIZONS, read_dataset

    dataset = read_dataset(args.data)
    horizons = sorted(set(args.horizon or HORIZONS))
    bundle = train_bundle(dataset, _train_config(args), horizons)
    if args.validation:
        grid = [float(x) for x in args.theta_grid.split(",")]
        theta = tune_threshold(bundle, read_dataset(args.validation), grid)
        logger.info("tuned threshold %.3f on %s", theta, args.validation)
        bundle = bundle.with_threshold(theta)
    save_models(bundle, args.out)
    thresholds = sorted({m.config.threshold for m in bundle.models.values()})
    print(f"trained horizons {horizons} (threshold {thresholds[0]:g}) -> {args.out}")
    return EXIT_OK


def _detection_dataset(args):
    from .healthstats import MODEL_ENTITY, read_stats
    from .series import LabeledSeries, build_series, read_dataset

    if args.data:
        return read_dataset(args.data)
    rows = [r for r in read_stats(args.stats) if r.entity != MODEL_ENTITY]
    return [LabeledSeries(s, []) for s in build_series(rows)]


def cmd_detect(args) -> int:
    from .detector import load_bundle
    from .evalkit import rolling_detect
    from .postprocess import write_decisions

    bundle = load_bundle(args.model)
    if args.threshold is not None:
        bundle = bundle.with_threshold(args.threshold)
    decisions = rolling_detect(_detection_dataset(args), bundle, args.classifier, args.workers)
    write_decisions(decisions, args.out)
    flagged = sum(d.is_anomaly for d in decisions)
    print(f"{len(decisions)} decisions, {flagged} anomalous -> {args.out}")
    return EXIT_OK


def _filter_config(args):
    from .postprocess import FilterConfig

    config = FilterConfig.load(args.filter_config) if args.filter_config else FilterConfig()
    config = config.override(duration=args.duration, severity=args.severity, mtr=args.mtr,
                             concurrency=args.concurrency)
    if args.concurrency is not None:
        config = config.override(concurrency_enabled=True)
    if args.filters is False:
        config = FilterConfig.disabled()
    return config


def _traffic(stats_path):
    from .healthstats import read_stats
    from .postprocess import traffic_ratio_lookup

    return traffic_ratio_lookup(read_stats(stats_path)) if stats_path else None


def cmd_postprocess(args) -> int:
    from .postprocess import postprocess, read_decisions, write_jsonl

    if args.rule == "subset-or" and not args.entities:
        raise UsageError("--rule subset-or needs --entities")
    decisions = read_decisions(args.decisions)
    entities = args.entities.split(",") if args.entities else None
    result = postprocess(decisions, _filter_config(args), _traffic(args.stats), args.rule, entities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(result.intervals, out / "intervals.jsonl")
    write_jsonl(result.alerts, out / "alerts.jsonl")
    print(f"{len(result.intervals)} intervals, {len(result.surviving)} kept, {len(result.alerts)} alerts -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import Grid, abnormal_day_fraction, generate_dataset
    from .series import read_dataset

    grid = Grid.from_dict(json.loads(Path(args.grid).read_text(encoding="utf-8"))) if args.grid else Grid()
    path = generate_dataset(grid, args.n, args.seed, args.out)
    dataset = read_dataset(path)
    print(f"{len(dataset)} series, {abnormal_day_fraction(dataset):.2%} abnormal days -> {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detector import load_bundle
    from .evalkit import config_fingerprint, evaluate, score_decisions, write_results
    from .postprocess import read_decisions
    from .series import read_dataset

    dataset = read_dataset(args.data)
    filters = _filter_config(args) if args.filters else None
    traffic = _traffic(args.stats)
    fingerprint = config_fingerprint(data=args.data, model=args.model, decisions=args.decisions,
                                     filters=filters.as_dict() if filters else None, classifier=args.classifier)
    if args.decisions:
        result = score_decisions(dataset, read_decisions(args.decisions), filters, traffic)
        result.fingerprint = fingerprint
    else:
        bundle = load_bundle(args.model)
        if args.threshold is not None:
            bundle = bundle.with_threshold(args.threshold)
        result = evaluate(dataset, bundle, filters, args.classifier, args.workers, fingerprint, traffic)
    write_results(result, args.out, filters=args.filters, classifier=args.classifier, workers=args.workers)
    print(f"precision {result.precision:.3f} recall {result.recall:.3f} f1 {result.f1:.3f} "
          f"(tp {result.tp} fp {result.fp} fn {result.fn}) -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .healthstats import read_stats
    from .postprocess import read_alerts, read_decisions
    from .report import ImportanceConfig, render_reports

    alerts = read_alerts(args.alerts)
    if not alerts:
        print("no alerts; no report written")
        return EXIT_NO_ALERTS
    importance = ImportanceConfig.load(args.importance) if args.importance else None
    stamp = args.timestamp or datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    paths = render_reports(alerts, read_stats(args.stats), read_decisions(args.decisions), args.out,
                           importance, stamp)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .detector import ForecastModel, ModelConfig, gradient_check, random_check_batch

    worst = 0.0
    for h in sorted(set(args.horizon or (14, 28))):
        config = ModelConfig(horizon=h)
        rng = np.random.default_rng([args.seed, h])
        model = ForecastModel.initialize(config, seed=int(rng.integers(2**31)))
        result = gradient_check(model, random_check_batch(config, rng, args.batch_size))
        print(f"horizon {h}: max relative error {result.max_rel_error:.3e} "
              f"(forecast {result.forecast_rel_error:.3e}, classifier {result.classifier_rel_error:.3e}, "
              f"worst {result.worst})")
        worst = max(worst, result.max_rel_error)
    print(f"max relative gradient error {worst:.3e}")
    return EXIT_OK if worst < args.tolerance else EXIT_INTERNAL


# -- parser ----------------------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--quantile-weight", type=float, default=1.0, help="weight of the two pinball losses")
    p.add_argument("--omit", type=int, default=3, help="most recent history days hidden from the forecaster")
    p.add_argument("--threshold", type=_probability, default=0.2, help="anomaly probability threshold")


def _add_filter_flags(p) -> None:
    p.add_argument("--filter-config", help="JSON object with FilterConfig fields")
    p.add_argument("--duration", type=float, help="minimum interval length in days")
    p.add_argument("--severity", type=float, help="minimum interval max severity")
    p.add_argument("--mtr", type=float, help="minimum model traffic ratio")
    p.add_argument("--concurrency", type=float, help="minimum abnormal-statistic fraction (enables the filter)")
    p.add_argument("--stats", help="stats CSV providing traffic_ratio rows for the traffic filter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alertiger", description="Model-health anomaly detection pipeline.")
    parser.add_argument("--version", action="version", version=f"alertiger {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("aggregate", help="scoring events -> daily stats CSV",
                       description="Input: JSON lines with timestamp, model_id, product, features, score. "
                                   "Output: CSV with columns model_id, entity, statistic, date, value "
                                   "(empty value = missing).")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--default-value", type=float, default=0.0, help="value counted as the feature default")
    p.add_argument("--defaults", help="JSON object mapping feature name to its default value")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed event")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", help="labeled dataset -> weight file",
                       description="Input: dataset JSON lines (model_id, entity, statistic, start_date, values, "
                                   "anomalies). Output: binary weight file holding one model per horizon.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, action="append", choices=(14, 28),
                   help="history horizon to train; repeat for several (default: 14 and 28)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validation", help="dataset used to tune the probability threshold")
    p.add_argument("--theta-grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="rolling detection -> decisions file",
                       description="Output: JSON lines with series key, date, p_anomaly, observed, baseline, "
                                   "lower, upper, severity, out_of_boundary, is_anomaly.")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--stats", help="daily stats CSV")
    src.add_argument("--data", help="dataset JSON lines")
    p.add_argument("--out", required=True)
    p.add_argument("--classifier", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--threshold", type=_probability, help="override the stored probability threshold")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("postprocess", help="decisions -> filtered intervals and model alerts",
                       description="Writes intervals.jsonl (every interval with its filter verdicts) and "
                                   "alerts.jsonl (model-level alerts) into --out.")
    p.add_argument("--decisions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--rule", choices=("or", "subset-or"), default="or")
    p.add_argument("--entities", help="comma-separated entities for the subset-or rule")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("synth", help="synthetic labeled benchmark",
                       description="Writes dataset.jsonl and manifest.json into --out. The grid file is a "
                                   "JSON object with Grid fields (shapes, noise_stds, intensities, durations, ...).")
    p.add_argument("--grid")
    p.add_argument("--n", type=int, default=10, help="series per grid cell")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="interval-wise precision, recall and F1",
                       description="Output: one JSON object with tp, fp, fn, precision, recall, f1, wall_time "
                                   "and a config fingerprint.")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--decisions", help="score an existing decisions file instead of running detection")
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=_on_off, default=False, metavar="on|off",
                   help="apply the alert filters before scoring (default: off, raw detections)")
    p.add_argument("--classifier", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--threshold", type=_probability)
    p.add_argument("--workers", type=int, default=None, help="detection processes (default: available cores)")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="model alerts -> static HTML reports",
                       description=f"Writes one HTML file per alert; exits {EXIT_NO_ALERTS} when there are none.")
    p.add_argument("--alerts", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--decisions", required=True)
    p.add_argument("--importance", help="JSON: model_id -> entity -> importance score")
    p.add_argument("--timestamp", help="generation time shown in the report (default: now, UTC)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, action="append", choices=(14, 28))
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors and 0 on --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "workers", 1) is None:
        from .evalkit import default_workers

        args.workers = default_workers()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"alertiger: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"alertiger: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception:  # noqa: BLE001
        logger.exception("internal error")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
