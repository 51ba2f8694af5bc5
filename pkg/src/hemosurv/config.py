"""Flat ``key = value`` files: service configuration and device scenarios.

Both formats share one syntax: one assignment per line, ``#`` starts a
comment, blank lines are ignored.  Environment variables named
``HEMOSURV_<KEY>`` override the service file; command-line flags override
both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .device import DeviceConfig, LeadOffWindow, Piecewise, Scenario, SensorTrajectory
from .ecg_synth import RHYTHM_MODES, NoiseSpec, RhythmPlan, generate_scheduled, inject_anomaly

ENV_PREFIX = "HEMOSURV_"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


def parse_kv(text: str) -> dict[str, tuple[str, int]]:
    """Parse assignments into ``{key: (value, line_number)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        out[key] = (value, lineno)
    return out


def _host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class ServiceConfig:
    """Settings shared by ``serve`` and ``simulate``."""

    listen: str = "127.0.0.1:7070"
    store: str = "store"
    webhook_url: str = ""
    rules: str = ""  # path to a rule file; empty -> built-in defaults
    alert_log: str = ""  # empty -> <store>/alerts.jsonl
    dead_letter: str = ""  # empty -> <store>/dead_letter.jsonl
    log: str = ""  # empty -> stderr
    snapshot_every: float = 1.0
    retry_max: int = 5
    retry_backoff: float = 0.2
    fsync: bool = False
    segment_max_bytes: int = 64 * 1024 * 1024
    # simulate
    devices: int = 1
    duration: float = 60.0
    scenario: str = ""
    out: str = ""

    @property
    def address(self) -> tuple[str, int]:
        return _host_port(self.listen)

    @property
    def alert_log_path(self) -> Path:
        return Path(self.alert_log) if self.alert_log else Path(self.store) / "alerts.jsonl"

    @property
    def dead_letter_path(self) -> Path:
        return Path(self.dead_letter) if self.dead_letter else Path(self.store) / "dead_letter.jsonl"

    @property
    def metrics_dir(self) -> Path:
        return Path(self.store) / "metrics"


def _coerce(cls, key: str, value: str, line: int | None):
    types = {f.name: f.type for f in fields(cls)}
    kind = types[key]
    try:
        if kind in ("bool", bool):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("1", "true", "yes", "on")
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line, key) from exc


def load_service_config(
    text: str = "",
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, object] | None = None,
) -> ServiceConfig:
    """File values, then ``HEMOSURV_*`` environment, then explicit overrides."""
    cfg = ServiceConfig()
    known = {f.name for f in fields(ServiceConfig)}
    values: dict[str, object] = {}
    for key, (value, line) in parse_kv(text).items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", line, key)
        values[key] = _coerce(ServiceConfig, key, value, line)
    for name, value in (env if env is not None else os.environ).items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower()
            if key in known:
                values[key] = _coerce(ServiceConfig, key, value, None)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    cfg = replace(cfg, **values)
    try:
        cfg.address
    except ValueError as exc:
        raise ConfigError(str(exc), key="listen") from exc
    return cfg


# -- scenarios ---------------------------------------------------------


def _breakpoints(text: str, key: str, line: int) -> Piecewise:
    pts = []
    try:
        for item in text.split(","):
            t, v = item.split(":")
            pts.append((float(t), float(v)))
        return Piecewise(tuple(pts))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected 't:value, t:value, ...' ({exc})", line, key) from exc


def _lead_windows(text: str, line: int) -> tuple[LeadOffWindow, ...]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        span, _, which = item.partition(":")
        which = which or "plus"
        try:
            t0, t1 = (float(x) for x in span.split("-"))
        except ValueError as exc:
            raise ConfigError(f"lead_off: expected 't0-t1[:plus|minus|both]', got {item!r}", line, "lead_off") from exc
        if which not in ("plus", "minus", "both") or t1 <= t0:
            raise ConfigError(f"lead_off: bad window {item!r}", line, "lead_off")
        out.append(LeadOffWindow(t0, t1, plus=which in ("plus", "both"), minus=which in ("minus", "both")))
    return tuple(out)


def _anomalies(text: str, line: int) -> tuple[tuple[float, str], ...]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        t, _, kind = item.partition(":")
        try:
            at = float(t)
        except ValueError as exc:
            raise ConfigError(f"anomaly: bad time in {item!r}", line, "anomaly") from exc
        if kind not in RHYTHM_MODES:
            raise ConfigError(f"anomaly: unknown rhythm {kind!r}", line, "anomaly")
        out.append((at, kind))
    return tuple(sorted(out))


@dataclass
class ScenarioSpec:
    """Template for one or more emulated devices."""

    device_id: bytes = bytes.fromhex("0000000000000001")
    fs: int = 250
    batch_size: int = 250
    rhythm: str = "normal"
    bpm: float = 72.0
    jitter: float = 0.0
    seed: int = 0
    anomaly: tuple[tuple[float, str], ...] = ()
    temperature: Piecewise = Piecewise.constant(36.6)
    humidity: Piecewise = Piecewise.constant(45.0)
    alcohol: Piecewise = Piecewise.constant(0.0)
    lead_off: tuple[LeadOffWindow, ...] = ()
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    start_us: int = 1_700_000_000_000_000

    def device(self, index: int = 0) -> tuple[DeviceConfig, RhythmPlan]:
        dev = (int.from_bytes(self.device_id, "big") + index) % (1 << 64)
        cfg = DeviceConfig(device_id=dev.to_bytes(8, "big"), fs=self.fs, batch_size=self.batch_size)
        plan = RhythmPlan(self.bpm, self.jitter, self.rhythm, self.seed + index)
        return cfg, plan

    def build(self, duration_s: float, index: int = 0) -> tuple[DeviceConfig, Scenario]:
        cfg, plan = self.device(index)
        schedule = [(0.0, plan)]
        for t, kind in self.anomaly:
            p = inject_anomaly(plan, kind)
            if t <= 0:
                schedule[0] = (0.0, p)
            else:
                schedule.append((t, p))
        signal = generate_scheduled(duration_s, self.fs, schedule, noise=self.noise)
        sensors = SensorTrajectory(self.temperature, self.humidity, self.alcohol)
        return cfg, Scenario(signal, sensors, self.lead_off)


_NOISE_KEYS = {
    "noise_white_mv": "white_noise_mv",
    "baseline_wander_mv": "baseline_wander_mv",
    "baseline_wander_hz": "baseline_wander_hz",
    "powerline_mv": "powerline_mv",
    "powerline_hz": "powerline_hz",
}
_SCENARIO_KEYS = {f.name for f in fields(ScenarioSpec) if f.name != "noise"} | set(_NOISE_KEYS)


def parse_scenario(text: str) -> ScenarioSpec:
    spec = ScenarioSpec()
    noise: dict[str, float] = {}
    for key, (value, line) in parse_kv(text).items():
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"unknown key {key!r}", line, key)
        try:
            if key == "device_id":
                dev = bytes.fromhex(value)
                if len(dev) != 8:
                    raise ValueError("device_id must be 16 hex digits")
                spec.device_id = dev
            elif key in ("fs", "batch_size", "seed", "start_us"):
                setattr(spec, key, int(value))
            elif key in ("bpm", "jitter"):
                setattr(spec, key, float(value))
            elif key == "rhythm":
                if value not in RHYTHM_MODES:
                    raise ValueError(f"unknown rhythm {value!r}")
                spec.rhythm = value
            elif key == "anomaly":
                spec.anomaly = _anomalies(value, line)
            elif key in ("temperature", "humidity", "alcohol"):
                setattr(spec, key, _breakpoints(value, key, line))
            elif key == "lead_off":
                spec.lead_off = _lead_windows(value, line)
            else:
                noise[_NOISE_KEYS[key]] = float(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line, key) from exc
    if noise:
        spec.noise = NoiseSpec(**noise)
    try:
        spec.device(0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def load_scenario(path: str | Path) -> ScenarioSpec:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))
