"""Metrics, the latency benchmark, and machine-readable exports.

Reported MSE follows the display convention of the accuracy tables: the raw
mean squared error on normalized speeds multiplied by 1000.  The hard metric
evaluates each congested window independently and averages the per-window
values.  The latency benchmark times the bare model forward on one fixed
window (no normalisation, no I/O) with an untimed warmup, single process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import NUM_SEGMENTS, Corpus, Series, build_windows, normalize, stack_windows
from .models import InferencePlan, predict_batch
from .runtime import tune_allocator

MSE_DISPLAY_SCALE = 1000.0

_EVAL_CHUNK = 256  # windows per batched forward, keeps the working set cache-resident


@dataclass
class EvalReport:
    easy_mse_scaled: float                     # mean over evaluated horizons
    hard_mse_scaled: float                     # mean over horizons and hard windows
    per_horizon: dict[int, dict[str, float]]   # horizon -> {"easy": ..., "hard": ...}
    hard_per_window: list[dict[int, float]]    # per hard window, horizon -> scaled MSE
    latency_ms: float | None = None


def _chunked_predictions(model, x: np.ndarray, horizons: int) -> np.ndarray:
    parts = [predict_batch(model, x[i:i + _EVAL_CHUNK], horizons)
             for i in range(0, x.shape[0], _EVAL_CHUNK)]
    return np.concatenate(parts, axis=0)


def _per_horizon_mse(model, series: Series, s: int, horizons: int) -> dict[int, float]:
    x, y = stack_windows(build_windows(series, s, horizons))
    x, y = normalize(x), normalize(y)
    preds = _chunked_predictions(model, x, horizons)
    out = {}
    for h in range(1, horizons + 1):
        d = preds[:, h - 1] - y[:, h - 1]
        out[h] = float(np.mean(d * d)) * MSE_DISPLAY_SCALE
    return out


def evaluate(model, corpus: Corpus, horizons: int = 1) -> EvalReport:
    """Scaled MSE per horizon on the easy series and on each hard window
    (averaged); one-step models cover horizons past 1 recursively."""
    if horizons < 1:
        raise ValueError(f"horizons must be >= 1, got {horizons}")
    tune_allocator()
    model_horizon = getattr(model, "horizon", None)
    if model_horizon is not None and horizons > model_horizon:
        raise ValueError(f"model emits {model_horizon} horizons, {horizons} requested")
    easy = _per_horizon_mse(model, corpus.easy, model.s, horizons)
    hard_windows = [_per_horizon_mse(model, series, model.s, horizons)
                    for series in corpus.hard]
    per_horizon = {
        h: {
            "easy": easy[h],
            "hard": float(np.mean([w[h] for w in hard_windows])),
        }
        for h in range(1, horizons + 1)
    }
    return EvalReport(
        easy_mse_scaled=float(np.mean([v["easy"] for v in per_horizon.values()])),
        hard_mse_scaled=float(np.mean([v["hard"] for v in per_horizon.values()])),
        per_horizon=per_horizon,
        hard_per_window=hard_windows,
    )


def report_lines(name: str, report: EvalReport) -> list[str]:
    lines = [f"{name}: easy {report.easy_mse_scaled:.3f}  hard {report.hard_mse_scaled:.3f}"
             "  (MSE x 1e3, normalized speeds)"]
    for h, vals in sorted(report.per_horizon.items()):
        lines.append(f"  t+{h}: easy {vals['easy']:.3f}  hard {vals['hard']:.3f}")
    if report.latency_ms is not None:
        lines.append(f"  latency {report.latency_ms:.3f} ms")
    return lines


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


def bench_latency(model, window: np.ndarray, warmup: int = 1000,
                  iters: int = 50_000) -> float:
    """Mean milliseconds per forward over ``iters`` timed runs after
    ``warmup`` untimed ones, on one fixed window."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    plan = InferencePlan(model)
    window = np.asarray(window, dtype=np.float64)
    for _ in range(warmup):
        plan.run(window)
    start = time.perf_counter()
    for _ in range(iters):
        plan.run(window)
    elapsed = time.perf_counter() - start
    return elapsed / iters * 1e3


def bench_repeated(model, window: np.ndarray, repeats: int = 5,
                   warmup: int = 1000, iters: int = 10_000) -> tuple[list[float], float]:
    """Repeated benchmark runs plus their coefficient of variation; a large
    value flags a noisy measurement environment."""
    means = [bench_latency(model, window, warmup, iters) for _ in range(repeats)]
    return means, coefficient_of_variation(means)


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std() / values.mean())


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def export_heatmap(series_or_speeds, path) -> None:
    """Matrix CSV, rows = segments 0..20, columns = minutes, values mph."""
    speeds = (series_or_speeds.speeds if isinstance(series_or_speeds, Series)
              else np.asarray(series_or_speeds, dtype=np.float64))
    if speeds.ndim != 2 or speeds.shape[1] != NUM_SEGMENTS:
        raise ValueError(f"expected (T, {NUM_SEGMENTS}) speeds, got {speeds.shape}")
    matrix = speeds.T
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in matrix:
            fh.write(",".join(format(v, ".12g") for v in row) + "\n")


def read_heatmap(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export_velocity_curve(series: Series, minute: int, path) -> None:
    """Two columns (segment index, speed mph) for one timestep."""
    match = np.nonzero(series.minutes == minute)[0]
    if len(match) == 0:
        raise ValueError(f"minute {minute} not in series "
                         f"[{series.minutes[0]}, {series.minutes[-1]}]")
    row = series.speeds[match[0]]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("segment,speed_mph\n")
        for seg in range(NUM_SEGMENTS):
            fh.write(f"{seg},{format(row[seg], '.12g')}\n")


def export_velocity_curves(series: Series, minutes, directory) -> list[str]:
    """One curve file per requested timestep, e.g. the free-flow, bottleneck
    onset, congested, and dissipation stages in a single call."""
    paths = []
    for minute in minutes:
        path = f"{directory}/curve_t{int(minute)}.csv"
        export_velocity_curve(series, minute, path)
        paths.append(path)
    return paths
