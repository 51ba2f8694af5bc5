"""Emulated sensor node: 10-bit ADC front end, DHT11/gas sensors, lead-off,
buzzer and display state, and telemetry frame assembly."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .alerting import DEFAULT_RULES
from .ecg_synth import AnnotatedSignal
from .wireproto import FLAG_BUZZER, FLAG_LO_MINUS, FLAG_LO_PLUS, TelemetryFrame

ADC_BITS = 10
ADC_MAX = (1 << ADC_BITS) - 1  # 1023
# code k represents k * vref / ADC_STEPS volts
ADC_STEPS = 1 << ADC_BITS

DEFAULT_START_US = 1_700_000_000_000_000


@dataclass(frozen=True)
class DeviceConfig:
    device_id: bytes = bytes(8)
    fs: int = 250
    vref: float = 3.3
    batch_size: int = 250
    temp_poll_interval: float = 1.0
    frontend_gain_mv_per_v: float = 1.1
    frontend_offset: float | None = None  # volts; None -> vref/2

    def __post_init__(self):
        if len(self.device_id) != 8:
            raise ValueError("device_id must be 8 bytes")
        if not self.vref > 0:
            raise ValueError("vref must be > 0")
        if not 1 <= self.batch_size <= 4096:
            raise ValueError("batch_size must be within 1..4096")
        if self.fs < 100:
            raise ValueError("fs must be >= 100 Hz")
        if self.temp_poll_interval < 1:
            raise ValueError("temp_poll_interval must be >= 1 s")
        if self.frontend_offset is None:
            object.__setattr__(self, "frontend_offset", self.vref / 2)

    @property
    def lsb(self) -> float:
        return self.vref / ADC_STEPS


def quantize(voltage, cfg: DeviceConfig):
    """ADC code for ``voltage``: half-up rounding, clamped to 0..1023.

    Works on scalars (returns ``int``) or arrays (returns an int array).
    """
    v = np.asarray(voltage, dtype=float)
    code = np.clip(np.floor(v / cfg.vref * ADC_STEPS + 0.5), 0, ADC_MAX).astype(np.int64)
    return int(code) if code.ndim == 0 else code


def dequantize(code, cfg: DeviceConfig):
    c = np.asarray(code, dtype=float)
    v = c * (cfg.vref / ADC_STEPS)
    return float(v) if v.ndim == 0 else v


def codes_to_mv(codes, cfg: DeviceConfig) -> np.ndarray:
    """Invert the front end: ADC codes back to electrode millivolts."""
    return (dequantize(np.asarray(codes), cfg) - cfg.frontend_offset) * cfg.frontend_gain_mv_per_v


@dataclass(frozen=True)
class LeadState:
    lo_plus: bool = False
    lo_minus: bool = False

    @property
    def off(self) -> bool:
        return self.lo_plus or self.lo_minus


def sample_ecg(signal: AnnotatedSignal, lead: LeadState, cfg: DeviceConfig) -> np.ndarray:
    if signal.fs != cfg.fs:
        raise ValueError(f"signal fs {signal.fs} does not match device fs {cfg.fs}")
    if lead.off:
        return np.full(len(signal.samples), ADC_MAX, dtype=np.int64)
    volts = cfg.frontend_offset + np.asarray(signal.samples) / cfg.frontend_gain_mv_per_v
    return quantize(volts, cfg)


@dataclass(frozen=True)
class SensorSuite:
    temperature_c: float = 36.6
    humidity_pct: float = 45.0
    alcohol_level: float = 0.0

    def clamped(self) -> "SensorSuite":
        return SensorSuite(
            temperature_c=min(max(self.temperature_c, 0.0), 50.0),
            humidity_pct=min(max(self.humidity_pct, 20.0), 90.0),
            alcohol_level=min(max(self.alcohol_level, 0.0), 1.0),
        )


@dataclass(frozen=True)
class Piecewise:
    """Piecewise-linear curve through ``(t, value)`` breakpoints.

    Repeating a time gives a step; the later entry wins from that instant on.
    The curve holds its end values outside the breakpoint range.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.points:
            raise ValueError("curve needs at least one breakpoint")
        ts = [t for t, _ in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("breakpoints must be time-ordered")

    @classmethod
    def constant(cls, value: float) -> "Piecewise":
        return cls(((0.0, float(value)),))

    def at(self, t: float) -> float:
        ts = [p for p, _ in self.points]
        i = bisect.bisect_right(ts, t) - 1
        if i < 0:
            return self.points[0][1]
        t0, a = self.points[i]
        if i + 1 >= len(self.points):
            return a
        t1, b = self.points[i + 1]
        return a + (t - t0) / (t1 - t0) * (b - a)


@dataclass(frozen=True)
class SensorTrajectory:
    """The physical world the sensors observe, one curve per channel."""

    temperature: Piecewise = Piecewise.constant(36.6)
    humidity: Piecewise = Piecewise.constant(45.0)
    alcohol: Piecewise = Piecewise.constant(0.0)

    @classmethod
    def constant(cls, suite: SensorSuite) -> "SensorTrajectory":
        return cls(
            Piecewise.constant(suite.temperature_c),
            Piecewise.constant(suite.humidity_pct),
            Piecewise.constant(suite.alcohol_level),
        )

    def at(self, t: float) -> SensorSuite:
        return SensorSuite(self.temperature.at(t), self.humidity.at(t), self.alcohol.at(t))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def poll_instant(t: float, cfg: DeviceConfig) -> float:
    """Most recent poll time at or before ``t`` (polls start at t = 0)."""
    k = math.floor(t / cfg.temp_poll_interval + 1e-9)
    return k * cfg.temp_poll_interval


def poll_sensors(t: float, world: SensorTrajectory | Callable[[float], SensorSuite], cfg: DeviceConfig) -> SensorSuite:
    """Sensor readings as the device sees them at time ``t``.

    Values are sampled at the last poll instant, so reads between polls repeat
    the cached reading.  Temperature and humidity are DHT11-resolved (integer,
    half-up); alcohol keeps its continuous fraction.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    at = world.at if isinstance(world, SensorTrajectory) else world
    raw = at(poll_instant(t, cfg)).clamped()
    return SensorSuite(
        temperature_c=float(_round_half_up(raw.temperature_c)),
        humidity_pct=float(_round_half_up(raw.humidity_pct)),
        alcohol_level=raw.alcohol_level,
    )


@dataclass(frozen=True)
class LeadOffWindow:
    t0: float
    t1: float
    plus: bool = True
    minus: bool = False


@dataclass(frozen=True)
class LocalEvent:
    t: float
    kind: str  # buzzer_on | buzzer_off | display_update
    payload: tuple[str, ...] = ()


@dataclass
class Scenario:
    signal: AnnotatedSignal
    sensors: SensorTrajectory = field(default_factory=SensorTrajectory)
    lead_off: Sequence[LeadOffWindow] = ()


def _rule_threshold(metric: str) -> tuple[float, float]:
    for rule in DEFAULT_RULES:
        if rule.metric == metric:
            return rule.threshold, rule.hysteresis
    raise KeyError(metric)


class LocalAlarm:
    """On-device pre-check driving the buzzer.

    Trips when temperature or alcohol reaches the shared default alert
    thresholds; releases once both fall below threshold minus hysteresis.
    """

    def __init__(self):
        self.temp_threshold, self.temp_hyst = _rule_threshold("temperature_c")
        self.alcohol_threshold, self.alcohol_hyst = _rule_threshold("alcohol_level")
        self.active = False

    def update(self, reading: SensorSuite) -> bool | None:
        """Feed one poll; returns the new state if it changed, else None."""
        if not self.active:
            if reading.temperature_c >= self.temp_threshold or reading.alcohol_level >= self.alcohol_threshold:
                self.active = True
                return True
        elif (
            reading.temperature_c < self.temp_threshold - self.temp_hyst
            and reading.alcohol_level < self.alcohol_threshold - self.alcohol_hyst
        ):
            self.active = False
            return False
        return None


def display_lines(reading: SensorSuite, alarm: bool) -> tuple[str, ...]:
    return (
        "BPM --",
        f"TEMP {reading.temperature_c:.0f} C",
        "STATUS ALERT" if alarm else "STATUS OK",
    )


def run_device(
    cfg: DeviceConfig,
    scenario: Scenario,
    duration_s: float,
    start_us: int = DEFAULT_START_US,
) -> tuple[list[TelemetryFrame], list[LocalEvent]]:
    """Run one device for ``duration_s`` and return its frames and local events.

    Frames carry ``batch_size`` samples (the last may be short), sequence
    numbers from 0, and the sensor reading and buzzer state in force at the
    frame's first sample.  A frame overlapping any lead-off window is fully
    saturated and flagged.
    """
    signal = scenario.signal
    if signal is None or duration_s < 0:
        raise ValueError("scenario needs a signal and a non-negative duration")
    if signal.fs != cfg.fs:
        raise ValueError(f"signal fs {signal.fs} does not match device fs {cfg.fs}")
    n_total = int(round(duration_s * cfg.fs))
    if len(signal.samples) < n_total:
        raise ValueError("scenario signal is shorter than the requested duration")

    codes = sample_ecg(AnnotatedSignal(signal.fs, np.asarray(signal.samples[:n_total])), LeadState(), cfg)

    events: list[LocalEvent] = []
    alarm = LocalAlarm()
    shown: tuple[str, ...] | None = None
    n_polls = int(math.floor(duration_s / cfg.temp_poll_interval + 1e-9)) + 1 if n_total else 0
    poll_times = [k * cfg.temp_poll_interval for k in range(n_polls)]
    poll_state: list[tuple[SensorSuite, bool]] = []
    for tp in poll_times:
        reading = poll_sensors(tp, scenario.sensors, cfg)
        change = alarm.update(reading)
        if change is not None:
            events.append(LocalEvent(tp, "buzzer_on" if change else "buzzer_off"))
        lines = display_lines(reading, alarm.active)
        if lines != shown:
            events.append(LocalEvent(tp, "display_update", lines))
            shown = lines
        poll_state.append((reading, alarm.active))

    frames = []
    for seq, i0 in enumerate(range(0, n_total, cfg.batch_size)):
        i1 = min(i0 + cfg.batch_size, n_total)
        t0, t1 = i0 / cfg.fs, i1 / cfg.fs
        flags = 0
        for w in scenario.lead_off:
            if w.t0 < t1 and w.t1 > t0:
                flags |= (FLAG_LO_PLUS if w.plus else 0) | (FLAG_LO_MINUS if w.minus else 0)
        payload = codes[i0:i1]
        if flags:
            payload = np.full(i1 - i0, ADC_MAX, dtype=np.int64)
        k = int(math.floor(t0 / cfg.temp_poll_interval + 1e-9))
        reading, buzzing = poll_state[min(k, len(poll_state) - 1)]
        if buzzing:
            flags |= FLAG_BUZZER
        frames.append(
            TelemetryFrame(
                device_id=cfg.device_id,
                seq=seq,
                t_start_us=start_us + int(round(i0 * 1_000_000 / cfg.fs)),
                fs=int(cfg.fs),
                samples=tuple(int(c) for c in payload),
                flags=flags,
                temp_centi_c=int(round(reading.temperature_c * 100)),
                alcohol_permille=int(round(reading.alcohol_level * 1000)),
            )
        )
    return frames, events
