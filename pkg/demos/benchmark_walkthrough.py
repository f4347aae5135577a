"""Synthetic benchmark: train, tune the probability threshold, score.

The grid crosses base shapes, noise levels, anomaly intensities and
durations.  Scoring is interval-wise after chopping long intervals into
week-sized pieces, so a missed level shift costs as much as its length.

Run:  python demos/benchmark_walkthrough.py [SERIES_PER_CELL]
"""

import sys
import time

from alertiger.detector import TrainConfig, train_bundle, tune_threshold
from alertiger.evalkit import rolling_detect, score_decisions
from alertiger.postprocess import FilterConfig
from alertiger.synth import Grid, abnormal_day_fraction, generate_grid

NOISE = (0.05, 0.1, 0.2)


def main(n: int) -> None:
    grid = Grid(noise_stds=NOISE)
    train_set, _ = generate_grid(grid, n, seed=1000)
    validation, _ = generate_grid(grid, 5, seed=500)
    test, _ = generate_grid(grid, 5, seed=7)
    print(f"{len(train_set)} training series, {abnormal_day_fraction(train_set):.1%} abnormal days")

    t0 = time.perf_counter()
    bundle = train_bundle(train_set, TrainConfig(learning_rate=1e-2, epochs=100, seed=0))
    print(f"trained horizons {sorted(bundle.models)} in {time.perf_counter() - t0:.0f}s")

    theta = tune_threshold(bundle, validation, [round(0.1 * k, 1) for k in range(1, 10)])
    bundle = bundle.with_threshold(theta)
    print(f"probability threshold tuned on validation: {theta}")

    decisions = rolling_detect(test, bundle)
    # 3 and 5 sigma anomalies are mostly below the 1.3 severity cutoff, so the
    # production filters trade nearly all recall for precision on this grid.
    plain = score_decisions(test, decisions)
    filtered = score_decisions(test, decisions, FilterConfig(mtr_enabled=False))
    band_only = score_decisions(test, rolling_detect(test, bundle, use_classifier=False))
    for name, r in (("band + classifier", plain), ("with filters", filtered), ("band only", band_only)):
        print(f"{name:>18}: precision {r.precision:.3f} recall {r.recall:.3f} f1 {r.f1:.3f} "
              f"(tp {r.tp} fp {r.fp} fn {r.fn})")

    cells = [cell for cell in grid.cells() for _ in range(5)]
    for noise in NOISE:
        items = [it for it, c in zip(test, cells) if c["noise_std"] == noise]
        keys = {it.key for it in items}
        r = score_decisions(items, [d for d in decisions if d.key in keys])
        print(f"noise {noise}: f1 {r.f1:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
