"""Synthetic ECG generator with ground-truth beat annotations.

Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) placed at fixed
offsets from the beat onset.  Beat onsets follow a rhythm plan, and optional
baseline wander, powerline hum and white noise are added on top.  Because the
morphology is closed-form, every R time, PR interval and QT interval is known
exactly and returned alongside the samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

WAVE_ORDER = ("P", "Q", "R", "S", "T")
RHYTHM_MODES = ("normal", "tachycardia", "bradycardia", "irregular")

MIN_FS = 100.0
DEFAULT_FS = 250.0
FIRST_ONSET_S = 0.1

# minimum RR the generator will ever emit; keeps beats outside the detector's
# 200 ms refractory period
MIN_RR_S = 0.3
MAX_RR_S = 3.0


@dataclass(frozen=True)
class WaveParams:
    label: str
    amplitude: float  # mV
    center: float  # s from beat onset
    width: float  # s, Gaussian standard deviation

    def __post_init__(self):
        if self.label not in WAVE_ORDER:
            raise ValueError(f"unknown wave label {self.label!r}")
        if not self.width > 0:
            raise ValueError(f"wave {self.label}: width must be > 0")
        if not math.isfinite(self.amplitude):
            raise ValueError(f"wave {self.label}: amplitude must be finite")


DEFAULT_WAVES: tuple[WaveParams, ...] = (
    WaveParams("P", 0.15, 0.10, 0.025),
    WaveParams("Q", -0.15, 0.22, 0.010),
    WaveParams("R", 1.20, 0.25, 0.012),
    WaveParams("S", -0.25, 0.28, 0.010),
    WaveParams("T", 0.30, 0.45, 0.040),
)


def validate_waves(waves: Sequence[WaveParams]) -> dict[str, WaveParams]:
    """Check a morphology is a complete, correctly ordered P-Q-R-S-T set."""
    by_label = {w.label: w for w in waves}
    if sorted(by_label) != sorted(WAVE_ORDER) or len(waves) != len(WAVE_ORDER):
        raise ValueError("morphology needs exactly one each of P, Q, R, S, T")
    centers = [by_label[k].center for k in WAVE_ORDER]
    if any(b <= a for a, b in zip(centers, centers[1:])):
        raise ValueError("wave centers must increase strictly P < Q < R < S < T")
    return by_label


@dataclass(frozen=True)
class RhythmPlan:
    base_bpm: float = 72.0
    rr_jitter: float = 0.0
    mode: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if not 20 <= self.base_bpm <= 250:
            raise ValueError(f"base_bpm {self.base_bpm} outside 20..250")
        if not self.rr_jitter >= 0:
            raise ValueError("rr_jitter must be >= 0")
        if self.mode not in RHYTHM_MODES:
            raise ValueError(f"unknown rhythm mode {self.mode!r}")


@dataclass(frozen=True)
class NoiseSpec:
    baseline_wander_mv: float = 0.0
    baseline_wander_hz: float = 0.3
    powerline_mv: float = 0.0
    powerline_hz: float = 50.0
    white_noise_mv: float = 0.0

    def __post_init__(self):
        for name in ("baseline_wander_mv", "powerline_mv", "white_noise_mv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


NO_NOISE = NoiseSpec()


@dataclass(frozen=True)
class BeatTruth:
    r_time: float
    onset: float
    pr: float
    qt: float
    label: str


@dataclass
class AnnotatedSignal:
    fs: float
    samples: np.ndarray
    truth: list[BeatTruth] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs

    @property
    def r_times(self) -> np.ndarray:
        return np.array([b.r_time for b in self.truth], dtype=float)

    def rr_intervals(self) -> np.ndarray:
        return np.diff(self.r_times)


def synth_beat(phase_s, waves: Sequence[WaveParams] = DEFAULT_WAVES):
    """Voltage (mV) of one beat at ``phase_s`` seconds after its onset.

    Accepts a scalar or an array of phases.
    """
    phase = np.asarray(phase_s, dtype=float)
    out = np.zeros_like(phase)
    for w in waves:
        out = out + w.amplitude * np.exp(-((phase - w.center) ** 2) / (2.0 * w.width**2))
    return float(out) if out.ndim == 0 else out


def _rr_draws(plan: RhythmPlan, rng: np.random.Generator, count: int) -> np.ndarray:
    mean_rr = 60.0 / plan.base_bpm
    if plan.mode == "irregular":
        sigma = plan.rr_jitter
        # mean-preserving log-normal
        rr = mean_rr * np.exp(sigma * rng.standard_normal(count) - 0.5 * sigma**2)
    elif plan.rr_jitter == 0:
        return np.full(count, mean_rr)
    else:
        rr = mean_rr * (1.0 + plan.rr_jitter * rng.standard_normal(count))
    return np.clip(rr, MIN_RR_S, MAX_RR_S)


def beat_onsets(duration_s: float, schedule: Sequence[tuple[float, RhythmPlan]]) -> list[tuple[float, RhythmPlan]]:
    """Onset times (and the plan in force) for every beat that starts in ``[0, duration]``.

    ``schedule`` is a list of ``(start_s, plan)`` pairs sorted by start time;
    a beat uses the plan in force at its onset.  Each plan draws its RR
    intervals from its own seeded stream.
    """
    if not schedule or schedule[0][0] > 0:
        raise ValueError("schedule must start at t=0")
    starts = [s for s, _ in schedule]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("schedule start times must increase strictly")
    rngs = [np.random.default_rng(np.random.SeedSequence(plan.seed).spawn(2)[0]) for _, plan in schedule]
    # draw in blocks so the stream does not depend on the duration requested
    pending: list[list[float]] = [[] for _ in schedule]

    out = []
    t = FIRST_ONSET_S
    seg = 0
    while t <= duration_s:
        while seg + 1 < len(schedule) and schedule[seg + 1][0] <= t:
            seg += 1
        plan = schedule[seg][1]
        out.append((t, plan))
        if not pending[seg]:
            pending[seg] = list(_rr_draws(plan, rngs[seg], 64))[::-1]
        t = t + pending[seg].pop()
    return out


def generate_scheduled(
    duration_s: float,
    fs: float,
    schedule: Sequence[tuple[float, RhythmPlan]],
    waves: Sequence[WaveParams] = DEFAULT_WAVES,
    noise: NoiseSpec = NO_NOISE,
    noise_seed: int | None = None,
) -> AnnotatedSignal:
    """Like :func:`generate`, with the rhythm plan switching at scheduled times."""
    if fs < MIN_FS:
        raise ValueError(f"fs {fs} Hz below the {MIN_FS:g} Hz minimum")
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    by_label = validate_waves(waves)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    x = np.zeros(n)
    truth: list[BeatTruth] = []

    r = by_label["R"]
    pr = r.center - by_label["P"].center
    qt = by_label["T"].center + 2 * by_label["T"].width - by_label["Q"].center
    # support of one beat, padded by 8 widths on each side
    lo = min(w.center - 8 * w.width for w in waves)
    hi = max(w.center + 8 * w.width for w in waves)

    for onset, plan in beat_onsets(duration_s, schedule):
        i0 = max(0, int(math.floor((onset + lo) * fs)))
        i1 = min(n, int(math.ceil((onset + hi) * fs)) + 1)
        if i1 > i0:
            x[i0:i1] += synth_beat(t[i0:i1] - onset, waves)
        r_time = onset + r.center
        if round(r_time * fs) <= n - 1:
            truth.append(BeatTruth(r_time, onset, pr, qt, plan.mode))

    if noise.baseline_wander_mv:
        x += noise.baseline_wander_mv * np.sin(2 * np.pi * noise.baseline_wander_hz * t)
    if noise.powerline_mv:
        x += noise.powerline_mv * np.sin(2 * np.pi * noise.powerline_hz * t)
    if noise.white_noise_mv:
        if noise_seed is None:
            noise_seed = schedule[0][1].seed
        rng = np.random.default_rng(np.random.SeedSequence(noise_seed).spawn(2)[1])
        x += rng.normal(0.0, noise.white_noise_mv, n)
    return AnnotatedSignal(fs=float(fs), samples=x, truth=truth)


def generate(
    duration_s: float,
    fs: float = DEFAULT_FS,
    plan: RhythmPlan = RhythmPlan(),
    waves: Sequence[WaveParams] = DEFAULT_WAVES,
    noise: NoiseSpec = NO_NOISE,
) -> AnnotatedSignal:
    """Generate ``duration_s`` seconds of annotated ECG at ``fs`` Hz.

    The first beat starts at 0.1 s.  RR intervals are ``60/base_bpm`` with
    Gaussian relative jitter for regular modes, and i.i.d. log-normal with
    ``sigma = rr_jitter`` for ``irregular``.  RR draws and white noise use
    independent streams derived from ``plan.seed``, so toggling noise never
    moves a beat.
    """
    return generate_scheduled(duration_s, fs, [(0.0, plan)], waves, noise)


ANOMALY_DEFAULTS = {
    "tachycardia": {"base_bpm": 130.0},
    "bradycardia": {"base_bpm": 45.0},
    "irregular": {"rr_jitter": 0.25},
}


def inject_anomaly(plan: RhythmPlan, kind: str) -> RhythmPlan:
    """Return a plan whose rhythm satisfies the defining predicate of ``kind``."""
    if kind not in RHYTHM_MODES:
        raise ValueError(f"unknown rhythm label {kind!r}")
    if kind == plan.mode:
        return plan
    if kind == "normal":
        return replace(plan, mode="normal", base_bpm=72.0, rr_jitter=min(plan.rr_jitter, 0.02))
    return replace(plan, mode=kind, **ANOMALY_DEFAULTS[kind])


def white_noise_for_snr(clean: np.ndarray, snr_db: float) -> float:
    """White-noise standard deviation (mV) giving ``snr_db`` against ``clean``.

    Signal power is the variance of the clean trace.
    """
    return float(np.sqrt(np.var(clean) / 10.0 ** (snr_db / 10.0)))
