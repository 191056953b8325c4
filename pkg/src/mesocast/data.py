"""Series handling and the synthetic highway corpus.

The measured quantity is the per-minute mean speed over 21 consecutive
segments of an 11.4 km highway stretch.  Real feeds being proprietary, the
corpus here is produced by a cell-transmission simulator (Godunov scheme on
the kinematic-wave model with a triangular fundamental diagram): inflow
demand ramps through a morning peak, a capacity drop at one segment spawns
a bottleneck whose queue propagates upstream, and congestion dissipates
when demand falls.  Per-segment speeds come from the local density through
the diagram, plus Gaussian measurement noise.

Vehicle bookkeeping uses a fixed-point trick: cell contents are integer
multiples of 2^-26 vehicles stored in float64, and every interface transfer
is rounded to that grid before it is applied.  All updates are then exact
integer arithmetic, so conservation holds bitwise at every substep.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .seeding import block_rng

NUM_SEGMENTS = 21
ROAD_KM = 11.4
V_REF_MPH = 80.0               # normalisation reference
MAX_SPEED_MPH = 90.0
MPH_TO_KM_PER_MIN = 1.609344 / 60.0

CSV_HEADER = ["minute"] + [f"seg{i:02d}" for i in range(NUM_SEGMENTS)]

_FP_SCALE = float(1 << 26)     # fixed-point vehicle units


# ---------------------------------------------------------------------------
# series, windows, normalisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VelocityField:
    """One timestep: mean speed per segment, miles/hour."""

    speeds: np.ndarray
    minute: int

    def __post_init__(self):
        if self.speeds.shape != (NUM_SEGMENTS,):
            raise ValueError(f"expected {NUM_SEGMENTS} speeds, got shape {self.speeds.shape}")


@dataclass
class Series:
    """Chronological stack of velocity fields."""

    minutes: np.ndarray          # (T,) int64, strictly increasing
    speeds: np.ndarray           # (T, NUM_SEGMENTS) mph

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=np.int64)
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if self.speeds.ndim != 2 or self.speeds.shape[1] != NUM_SEGMENTS:
            raise ValueError(f"speeds must be (T, {NUM_SEGMENTS}), got {self.speeds.shape}")
        if len(self.minutes) != len(self.speeds):
            raise ValueError("minutes and speeds lengths differ")
        if len(self.minutes) > 1 and np.any(np.diff(self.minutes) <= 0):
            raise ValueError("minutes must be strictly increasing")

    def __len__(self):
        return len(self.minutes)

    def frame(self, index: int) -> VelocityField:
        return VelocityField(self.speeds[index], int(self.minutes[index]))


@dataclass(frozen=True)
class SequenceWindow:
    """s consecutive input fields plus the following horizon targets."""

    inputs: np.ndarray           # (s, NUM_SEGMENTS)
    targets: np.ndarray          # (horizon, NUM_SEGMENTS)
    start_minute: int


def build_windows(series: Series, s: int, horizon: int) -> list[SequenceWindow]:
    """All stride-1 windows; requires minute-consecutive data."""
    if s < 1 or horizon < 0:
        raise ValueError(f"invalid window spec s={s}, horizon={horizon}")
    T = len(series)
    if T < s + horizon:
        raise ValueError(f"series too short: {T} frames < s+horizon = {s + horizon}")
    if T > 1 and np.any(np.diff(series.minutes) != 1):
        raise ValueError("series minutes are not consecutive")
    count = T - s - horizon + 1
    return [
        SequenceWindow(
            inputs=series.speeds[i:i + s],
            targets=series.speeds[i + s:i + s + horizon],
            start_minute=int(series.minutes[i]),
        )
        for i in range(count)
    ]


def stack_windows(windows: list[SequenceWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(B, s, 21) inputs and (B, horizon, 21) targets."""
    return (np.stack([w.inputs for w in windows]),
            np.stack([w.targets for w in windows]))


def normalize(speeds):
    return np.asarray(speeds, dtype=np.float64) / V_REF_MPH


def denormalize(values):
    return np.asarray(values, dtype=np.float64) * V_REF_MPH


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------


def write_csv(series: Series, destination) -> None:
    """Header ``minute,seg00..seg20``, one row per minute, >= 6 significant
    digits, newline-terminated UTF-8 rows."""
    own = not hasattr(destination, "write")
    stream = open(destination, "w", encoding="utf-8", newline="") if own else destination
    try:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for minute, row in zip(series.minutes, series.speeds):
            writer.writerow([int(minute)] + [format(v, ".12g") for v in row])
    finally:
        if own:
            stream.close()


def read_csv(source) -> Series:
    """Strict inverse of ``write_csv``; malformed rows are rejected with
    their line number."""
    own = not hasattr(source, "read")
    stream = open(source, "r", encoding="utf-8", newline="") if own else source
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty file: missing header") from None
        if header != CSV_HEADER:
            raise ValueError(f"line 1: bad header {header[:3]}..., expected {CSV_HEADER[:3]}...")
        minutes, rows = [], []
        previous = None
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1 + NUM_SEGMENTS:
                raise ValueError(f"line {lineno}: expected {1 + NUM_SEGMENTS} columns, got {len(row)}")
            if any(cell.strip() == "" for cell in row):
                raise ValueError(f"line {lineno}: blank cell")
            try:
                minute = int(row[0])
                speeds = [float(cell) for cell in row[1:]]
            except ValueError:
                raise ValueError(f"line {lineno}: unparseable value") from None
            if previous is not None and minute <= previous:
                raise ValueError(f"line {lineno}: minute {minute} not increasing")
            previous = minute
            minutes.append(minute)
            rows.append(speeds)
    finally:
        if own:
            stream.close()
    speeds = np.array(rows, dtype=np.float64).reshape(len(rows), NUM_SEGMENTS)
    return Series(minutes=np.array(minutes, dtype=np.int64), speeds=speeds)


def series_to_csv_text(series: Series) -> str:
    buf = io.StringIO()
    write_csv(series, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# cell-transmission simulator
# ---------------------------------------------------------------------------


class Bottleneck(NamedTuple):
    segment: int
    capacity_factor: float
    start_minute: int
    end_minute: int


@dataclass(frozen=True)
class CtmConfig:
    cell_length_km: float = ROAD_KM / NUM_SEGMENTS
    free_flow_mph: float = 70.0
    wave_speed_mph: float = 15.0
    jam_density: float = 110.0                     # veh/km, lane aggregate
    demand: tuple[tuple[int, float], ...] = ((0, 10.0),)  # (start minute, veh/min)
    bottleneck: Bottleneck | None = None
    noise_std_mph: float = 1.5
    seed: int = 0
    substeps_per_minute: int = 4
    initial_density: float = 0.0                   # veh/km, uniform
    exit_supply_cap: float | None = None           # veh/min

    @property
    def free_flow_kpm(self) -> float:
        return self.free_flow_mph * MPH_TO_KM_PER_MIN

    @property
    def wave_speed_kpm(self) -> float:
        return self.wave_speed_mph * MPH_TO_KM_PER_MIN

    @property
    def capacity(self) -> float:
        """veh/min; apex of the triangular diagram."""
        vf, w = self.free_flow_kpm, self.wave_speed_kpm
        return vf * w * self.jam_density / (vf + w)

    @property
    def critical_density(self) -> float:
        return self.capacity / self.free_flow_kpm

    def validate(self) -> None:
        for name in ("cell_length_km", "free_flow_mph", "wave_speed_mph", "jam_density"):
            if getattr(self, name) <= 0:
                raise ValueError(f"fundamental diagram: {name} must be positive")
        if self.substeps_per_minute < 1:
            raise ValueError("substeps_per_minute must be >= 1")
        dt = 1.0 / self.substeps_per_minute
        if self.free_flow_kpm * dt > self.cell_length_km:
            raise ValueError(
                "fundamental diagram: CFL violated, free_flow * dt "
                f"({self.free_flow_kpm * dt:.3f} km) exceeds cell length "
                f"({self.cell_length_km:.3f} km); raise substeps_per_minute"
            )
        if not (0 <= self.initial_density <= self.jam_density):
            raise ValueError("initial_density outside [0, jam_density]")
        if not self.demand or self.demand[0][0] != 0:
            raise ValueError("demand schedule must start at minute 0")
        if any(b[0] >= a[0] for a, b in zip(self.demand[1:], self.demand)):
            raise ValueError("demand schedule minutes must increase")
        if self.bottleneck is not None:
            seg = self.bottleneck.segment
            if not 0 <= seg < NUM_SEGMENTS:
                raise ValueError(f"bottleneck segment {seg} out of range")
            if not 0 < self.bottleneck.capacity_factor <= 1:
                raise ValueError("bottleneck capacity_factor must be in (0, 1]")


def _demand_rate(schedule, minute: int) -> float:
    rate = schedule[0][1]
    for start, value in schedule:
        if minute >= start:
            rate = value
        else:
            break
    return rate


class CtmSim:
    """Stepped simulator exposing fixed-point bookkeeping for tests."""

    def __init__(self, cfg: CtmConfig, initial_density: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        dens = (np.full(NUM_SEGMENTS, cfg.initial_density)
                if initial_density is None else np.asarray(initial_density, dtype=np.float64))
        if dens.shape != (NUM_SEGMENTS,):
            raise ValueError(f"initial density must have {NUM_SEGMENTS} entries")
        if np.any(dens < 0) or np.any(dens > cfg.jam_density):
            raise ValueError("initial density outside [0, jam_density]")
        # integer fixed-point vehicle counts (exact in float64)
        self.counts = np.rint(dens * cfg.cell_length_km * _FP_SCALE)
        self.dt = 1.0 / cfg.substeps_per_minute
        self.last_in = 0.0
        self.last_out = 0.0

    @property
    def densities(self) -> np.ndarray:
        return self.counts / (_FP_SCALE * self.cfg.cell_length_km)

    @property
    def total_fp(self) -> float:
        """Total vehicles in fixed-point units; an exact integer."""
        return float(self.counts.sum())

    def speeds_mph(self) -> np.ndarray:
        cfg = self.cfg
        rho = self.densities
        v = np.full(NUM_SEGMENTS, cfg.free_flow_mph)
        congested = rho > cfg.critical_density
        with np.errstate(divide="ignore", invalid="ignore"):
            v_c = cfg.wave_speed_kpm * (cfg.jam_density - rho) / rho / MPH_TO_KM_PER_MIN
        v[congested] = np.maximum(v_c[congested], 0.0)
        return np.minimum(v, cfg.free_flow_mph)

    def substep(self, minute: int) -> None:
        """One Godunov transfer: interface flux = min(upstream demand,
        downstream supply), quantised to the fixed-point grid."""
        cfg = self.cfg
        rho = self.densities
        cap = cfg.capacity
        send = np.minimum(cfg.free_flow_kpm * rho, cap)
        room = np.minimum(cap, cfg.wave_speed_kpm * (cfg.jam_density - rho))

        flux = np.empty(NUM_SEGMENTS + 1)
        flux[0] = min(_demand_rate(cfg.demand, minute), room[0])
        flux[1:NUM_SEGMENTS] = np.minimum(send[:-1], room[1:])
        flux[NUM_SEGMENTS] = send[-1]
        if cfg.exit_supply_cap is not None:
            flux[NUM_SEGMENTS] = min(flux[NUM_SEGMENTS], cfg.exit_supply_cap)
        b = cfg.bottleneck
        if b is not None and b.start_minute <= minute < b.end_minute:
            flux[b.segment] = min(flux[b.segment], b.capacity_factor * cap)

        transfer = np.rint(flux * (self.dt * _FP_SCALE))
        # guard against fixed-point rounding overdrawing a near-empty cell
        for i in range(NUM_SEGMENTS):
            transfer[i + 1] = min(transfer[i + 1], self.counts[i] + transfer[i])
        self.counts += transfer[:-1]
        self.counts -= transfer[1:]
        self.last_in = float(transfer[0])
        self.last_out = float(transfer[-1])


def ctm_simulate(cfg: CtmConfig, minutes: int,
                 initial_density: np.ndarray | None = None,
                 start_minute: int = 0) -> Series:
    """Per-minute speed fields over ``minutes``; speeds are sampled at the
    end of each minute, then measurement noise is added and clamped."""
    sim = CtmSim(cfg, initial_density)
    return simulate_into(sim, minutes, block_rng(cfg.seed, "ctm-noise"),
                         timestamp_start=start_minute, schedule_start=start_minute)


def simulate_into(sim: CtmSim, minutes: int, noise_rng: np.random.Generator,
                  timestamp_start: int = 0, schedule_start: int = 0) -> Series:
    """Advance ``sim`` by ``minutes``; the demand/bottleneck schedule runs on
    its own clock so recorded timestamps can offset freely (multi-day runs)."""
    cfg = sim.cfg
    speeds = np.empty((minutes, NUM_SEGMENTS))
    for m in range(minutes):
        minute = schedule_start + m
        for _ in range(cfg.substeps_per_minute):
            sim.substep(minute)
        speeds[m] = sim.speeds_mph()
    if cfg.noise_std_mph > 0:
        speeds = speeds + noise_rng.normal(0.0, cfg.noise_std_mph, speeds.shape)
    np.clip(speeds, 0.0, MAX_SPEED_MPH, out=speeds)
    return Series(minutes=np.arange(timestamp_start, timestamp_start + minutes, dtype=np.int64),
                  speeds=speeds)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSizes:
    train_days: int = 35
    easy_days: int = 6
    hard_windows: int = 4
    hard_minutes: int = 440


@dataclass
class Corpus:
    train: Series
    easy: Series
    hard: list[Series] = field(default_factory=list)


MINUTES_PER_DAY = 1440
CONGESTION_SPEED_MPH = 40.0
CONGESTION_SPAN = 3
CONGESTION_MINUTES = 30


def has_sustained_congestion(series: Series,
                             speed=CONGESTION_SPEED_MPH,
                             span=CONGESTION_SPAN,
                             duration=CONGESTION_MINUTES) -> bool:
    """True when some ``span`` adjacent segments all stay under ``speed`` for
    ``duration`` consecutive minutes."""
    slow = series.speeds < speed
    for j in range(NUM_SEGMENTS - span + 1):
        block = np.all(slow[:, j:j + span], axis=1)
        run = 0
        for hit in block:
            run = run + 1 if hit else 0
            if run >= duration:
                return True
    return False


def congested_minutes_fraction(series: Series, speed=CONGESTION_SPEED_MPH) -> float:
    return float(np.mean(np.any(series.speeds < speed, axis=1)))


def _daily_demand_anchors(rng, capacity, peak_scale) -> tuple[tuple[int, float], ...]:
    """Piecewise-constant anchors (15-minute grid) for one day: quiet night,
    morning ramp to a near-capacity peak, midday plateau, evening bump."""
    points = [
        (0, 0.18), (240, 0.22), (300, 0.45),
        (345, peak_scale), (510, peak_scale),
        (570, 0.55), (720, 0.50), (945, 0.62),
        (1080, 0.55), (1260, 0.30), (1439, 0.20),
    ]
    mins = np.arange(0, MINUTES_PER_DAY, 15)
    base = np.interp(mins, [p[0] for p in points], [p[1] for p in points]) * capacity
    jitter = rng.normal(1.0, 0.03, len(mins))
    rates = np.clip(base * jitter, 0.05 * capacity, 1.2 * capacity)
    return tuple((int(m), float(r)) for m, r in zip(mins, rates))


def _day_config(base: CtmConfig, rng, seed, hard: bool) -> CtmConfig:
    if hard:
        peak_scale = rng.uniform(0.93, 1.00)
        segment = int(rng.integers(11, 16))
        factor = rng.uniform(0.40, 0.52)
        start = int(rng.integers(330, 370))
        end = start + int(rng.integers(210, 300))
    else:
        peak_scale = rng.uniform(0.86, 0.95)
        segment = int(rng.integers(10, 18))
        factor = rng.uniform(0.55, 0.72)
        start = int(rng.integers(330, 370))
        end = int(rng.integers(495, 545))
    return replace(
        base,
        demand=_daily_demand_anchors(rng, base.capacity, peak_scale),
        bottleneck=Bottleneck(segment, factor, start, end),
        seed=seed,
    )


def _simulate_days(base: CtmConfig, days: int, seed: int, label: str) -> Series:
    """Consecutive days, density carried across midnight; each day draws its
    own demand profile and bottleneck placement."""
    sim = CtmSim(replace(base, demand=((0, 0.0),), bottleneck=None))
    chunks = []
    for day in range(days):
        cfg = _day_config(base, block_rng(seed, f"{label}-day{day}"), seed, hard=False)
        cfg.validate()
        sim.cfg = cfg
        noise = block_rng(seed, f"{label}-noise{day}")
        chunks.append(simulate_into(sim, MINUTES_PER_DAY, noise,
                                    timestamp_start=day * MINUTES_PER_DAY))
    return Series(
        minutes=np.concatenate([c.minutes for c in chunks]),
        speeds=np.vstack([c.speeds for c in chunks]),
    )


def _simulate_hard_window(base: CtmConfig, minutes: int, seed: int, index: int) -> Series:
    """One heavily congested window; regenerated with a perturbed seed until
    the sustained-congestion criterion holds."""
    offset = 300  # window starts at 5:00 so onset, propagation and dissipation fit
    for attempt in range(20):
        rng = block_rng(seed, f"hard{index}-attempt{attempt}")
        cfg = _day_config(base, rng, seed, hard=True)
        shifted = replace(
            cfg,
            demand=tuple((m - offset, r) for m, r in cfg.demand if m >= offset),
            bottleneck=Bottleneck(
                cfg.bottleneck.segment,
                cfg.bottleneck.capacity_factor,
                cfg.bottleneck.start_minute - offset,
                cfg.bottleneck.end_minute - offset,
            ),
        )
        sim = CtmSim(shifted, initial_density=np.full(NUM_SEGMENTS, 6.0))
        noise = block_rng(seed, f"hard{index}-noise{attempt}")
        series = simulate_into(sim, minutes, noise)
        if has_sustained_congestion(series):
            return series
    raise RuntimeError(f"hard window {index}: congestion criterion failed after 20 attempts")


def make_corpus(base: CtmConfig, sizes: CorpusSizes = CorpusSizes()) -> Corpus:
    """Desk-scale corpus: ``train_days`` of daily-bottleneck traffic, a
    smaller easy validation slice from held-out days, and a handful of
    independently generated heavily congested windows."""
    train = _simulate_days(base, sizes.train_days, base.seed, "train")
    easy = _simulate_days(base, sizes.easy_days, base.seed, "easy")
    hard = [
        _simulate_hard_window(base, sizes.hard_minutes, base.seed, i)
        for i in range(sizes.hard_windows)
    ]
    return Corpus(train=train, easy=easy, hard=hard)
