"""Command-line entry point: simulate, serve, replay, query, plot, report.

Exit codes: 0 success, 1 usage or configuration error, 2 environment or
connectivity error, 3 data error (for example an empty query range).
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from collections import Counter
from pathlib import Path
from typing import Sequence

from .alerting import DEFAULT_RULES, Dispatcher, RuleSyntaxError, read_alert_log, rules_from_config
from .config import ConfigError, ScenarioSpec, ServiceConfig, load_scenario, load_service_config
from .device import run_device
from .fleet import run_fleet, send_frames, write_frame_file
from .hub import AnalysisHub
from .ingest import serve
from .logs import configure
from .plotting import analyse_window, write_plot
from .store import SeriesStore
from .wireproto import TelemetryFrame, frame_stream_split

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ENV = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(*parts) -> None:
    print(*parts, flush=True)


def _err(msg: str) -> None:
    print(f"hemosurv: {msg}", file=sys.stderr, flush=True)


def _service_config(args) -> ServiceConfig:
    text = ""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    overrides = {
        k: getattr(args, k, None)
        for k in ("listen", "store", "webhook_url", "rules", "log", "devices", "duration", "scenario", "out")
    }
    if getattr(args, "offline", None):
        overrides["out"] = args.offline
    return load_service_config(text, overrides=overrides)


def _device_hex(text: str) -> str:
    try:
        dev = bytes.fromhex(text)
    except ValueError:
        dev = b""
    if len(dev) != 8:
        raise UsageError(f"device id must be 16 hex digits, got {text!r}")
    return dev.hex()


def _range_us(args) -> tuple[int, int]:
    t0 = 0 if args.t0 is None else int(round(args.t0 * 1e6))
    t1 = (1 << 64) - 1 if args.t1 is None else int(round(args.t1 * 1e6))
    if t1 < t0:
        raise UsageError("--t1 must not be before --t0")
    return t0, t1


# -- simulate ----------------------------------------------------------


def build_fleet(spec: ScenarioSpec, devices: int, duration: float) -> list[list[TelemetryFrame]]:
    streams = []
    for k in range(devices):
        cfg, scenario = spec.build(duration, k)
        frames, _ = run_device(cfg, scenario, duration, spec.start_us)
        streams.append(frames)
    return streams


def cmd_simulate(args) -> int:
    cfg = _service_config(args)
    if cfg.devices < 1 or cfg.duration <= 0:
        raise UsageError("--devices must be >= 1 and --duration > 0")
    if not 0 <= args.drop_rate < 1:
        raise UsageError("--drop-rate must be in [0, 1)")
    spec = load_scenario(cfg.scenario) if cfg.scenario else ScenarioSpec()
    if cfg.out:
        out = Path(cfg.out)
        for k in range(cfg.devices):
            dev_cfg, scenario = spec.build(cfg.duration, k)
            frames, events = run_device(dev_cfg, scenario, cfg.duration, spec.start_us)
            dev = dev_cfg.device_id.hex()
            size = write_frame_file(out / f"{dev}.ecg1", frames)
            with open(out / f"{dev}.events.jsonl", "w", encoding="utf-8") as fh:
                for e in events:
                    fh.write(json.dumps({"t": e.t, "kind": e.kind, "payload": list(e.payload)}) + "\n")
            _say(f"device {dev} frames {len(frames)} bytes {size} events {len(events)}")
        return EXIT_OK

    address = cfg.address
    streams = build_fleet(spec, cfg.devices, cfg.duration)
    reports = run_fleet(address, streams, args.drop_rate, args.seed, args.realtime)
    failed = [r for r in reports if not r.ok]
    for r in reports:
        _say(
            f"device {r.device_id} frames {r.frames_total} sent {r.frames_sent} "
            f"dropped {len(r.dropped_seqs)}" + ("" if r.ok else f" error {r.error}")
        )
    if failed:
        _err(f"cannot reach service at {address[0]}:{address[1]}")
        return EXIT_ENV
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _service_config(args)
    path = Path(args.file)
    if not path.is_file():
        raise UsageError(f"frame file not found: {path}")
    frames = [x for x in frame_stream_split([path.read_bytes()]) if isinstance(x, TelemetryFrame)]
    if not frames:
        _err(f"no valid frames in {path}")
        return EXIT_DATA
    report = send_frames(cfg.address, frames, realtime=args.realtime)
    _say(f"device {report.device_id} frames {report.frames_total} sent {report.frames_sent}")
    if not report.ok:
        _err(report.error or "send failed")
        return EXIT_ENV
    return EXIT_OK


# -- serve -------------------------------------------------------------


def cmd_serve(args) -> int:
    cfg = _service_config(args)
    rules = DEFAULT_RULES
    if cfg.rules:
        path = Path(cfg.rules)
        if not path.is_file():
            raise ConfigError(f"rule file not found: {path}", key="rules")
        rules = rules_from_config(path.read_text(encoding="utf-8"))
    configure(path=cfg.log or None)
    store = SeriesStore(cfg.store, segment_max_bytes=cfg.segment_max_bytes, fsync=cfg.fsync)
    dispatcher = Dispatcher(
        cfg.webhook_url or None,
        cfg.alert_log_path,
        cfg.dead_letter_path,
        max_attempts=cfg.retry_max,
        backoff_s=cfg.retry_backoff,
    )
    hub = AnalysisHub(rules, dispatcher, cfg.metrics_dir, cfg.snapshot_every)
    try:
        handle = serve(cfg.address, store, hub)
    except OSError as exc:
        store.close()
        _err(f"cannot listen on {cfg.listen}: {exc}")
        return EXIT_ENV

    stop = threading.Event()
    previous = {s: signal.signal(s, lambda *_: stop.set()) for s in (signal.SIGINT, signal.SIGTERM)}
    host, port = handle.address
    _say(f"listening on {host}:{port}")
    try:
        while not stop.wait(0.2):
            pass
    finally:
        handle.stop()
        hub.close()
        store.close()
        for s, h in previous.items():
            signal.signal(s, h)
    stats = handle.service.stats
    for dev in sorted(stats):
        st = stats[dev]
        _say(f"device {dev} frames {st.frames_ok} samples {st.samples} gaps {st.gaps} missing {st.missing}")
    return EXIT_OK


# -- query / plot / report ---------------------------------------------


def _open_store(path: str) -> SeriesStore:
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"store directory not found: {root}")
    return SeriesStore(root)


def cmd_query(args) -> int:
    store = _open_store(args.store)
    dev = _device_hex(args.device)
    t0, t1 = _range_us(args)
    batches = store.samples(dev, t0, t1)
    if not batches:
        _err("no data")
        return EXIT_DATA
    out = sys.stdout
    out.write("t_us,code,flags\n")
    for b in batches:
        for i, c in enumerate(b.codes):
            out.write(f"{b.sample_time_us(i)},{c},{b.flags}\n")
    out.flush()
    return EXIT_OK


def cmd_plot(args) -> int:
    store = _open_store(args.store)
    dev = _device_hex(args.device)
    t0, t1 = _range_us(args)
    batches = store.samples(dev, t0, t1)
    if not batches:
        _err("no data")
        return EXIT_DATA
    win = analyse_window(dev, batches)
    svg, side = write_plot(win, args.output)
    bpm = "none" if win.bpm is None else f"{win.bpm:.2f}"
    _say(f"wrote {svg} ({len(win.times_s)} samples, {len(win.peaks)} peaks, bpm {bpm}) and {side}")
    return EXIT_OK


def _coverage_gaps(batches) -> list[tuple[int, int]]:
    gaps = []
    for a, b in zip(batches, batches[1:]):
        tol = 0.5e6 / a.fs
        if b.t_start_us - a.t_end_us > tol:
            gaps.append((a.t_end_us, b.t_start_us))
    return gaps


def report_lines(store: SeriesStore | None, device: str, t0: int, t1: int, alert_log: Path) -> list[str]:
    batches = store.samples(device, t0, t1) if store is not None else []
    win = analyse_window(device, batches)
    gaps = _coverage_gaps(batches)
    bpms = [s.bpm for s in win.snapshots if s.bpm is not None]
    hist = Counter(s.rhythm for s in win.snapshots)
    alerts = [
        a
        for a in read_alert_log(alert_log)
        if a.get("device_id") == device and t0 <= round(a.get("t", 0) * 1e6) < t1
    ]
    lines = [
        f"device {device}",
        f"samples {sum(len(b.codes) for b in batches)}",
        f"gaps {len(gaps)} missing_s {sum(b - a for a, b in gaps) / 1e6:.3f}",
    ]
    if bpms:
        lines.append(f"bpm min {min(bpms):.1f} mean {sum(bpms) / len(bpms):.1f} max {max(bpms):.1f}")
    else:
        lines.append("bpm min 0.0 mean 0.0 max 0.0")
    lines.append("rhythm " + (" ".join(f"{k}={hist[k]}" for k in sorted(hist)) or "none"))
    last_alcohol = batches[-1].alcohol_permille / 1000.0 if batches else 0.0
    lines.append(f"alcohol_level {last_alcohol:.3f}")
    lines.append(f"alerts {len(alerts)}")
    for a in alerts:
        lines.append(f"  {a['t']:.3f} {a['rule_id']} {a['kind']}")
    return lines


def cmd_report(args) -> int:
    root = Path(args.store)
    t0, t1 = _range_us(args)
    alert_log = Path(args.alert_log) if args.alert_log else root / "alerts.jsonl"
    if args.device:
        devices = [_device_hex(args.device)]
    else:
        devices = [d.hex() for d in SeriesStore(root).devices()] if root.is_dir() else []
        devices = devices or ["0" * 16]
    store = SeriesStore(root) if root.is_dir() else None
    for dev in devices:
        _say("\n".join(report_lines(store, dev, t0, t1, alert_log)))
    return EXIT_OK


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hemosurv", description="Synthetic ECG telemetry: device fleet, ingestion, analysis, alerts.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def net(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--listen", help="service address host:port")

    def window(sp):
        sp.add_argument("--store", required=True)
        sp.add_argument("--t0", type=float, help="window start, seconds since epoch (inclusive)")
        sp.add_argument("--t1", type=float, help="window end, seconds since epoch (exclusive)")

    sp = sub.add_parser("simulate", help="run emulated devices against a service or to files")
    net(sp)
    sp.add_argument("--devices", type=int)
    sp.add_argument("--duration", type=float, help="seconds of signal per device")
    sp.add_argument("--scenario", help="scenario file")
    sp.add_argument("--offline", metavar="DIR", help="write frame files into DIR instead of connecting")
    sp.add_argument("--drop-rate", type=float, default=0.0, help="drop frames i.i.d. with this probability")
    sp.add_argument("--seed", type=int, default=0, help="seed for the frame dropper")
    sp.add_argument("--realtime", action="store_true", help="pace frames by their timestamps")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("serve", help="run the ingestion, analysis and alerting service")
    net(sp)
    sp.add_argument("--store")
    sp.add_argument("--webhook-url", dest="webhook_url")
    sp.add_argument("--rules", help="alert rule file")
    sp.add_argument("--log", help="JSON-lines log file (default stderr)")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("replay", help="send a recorded frame file to a service")
    net(sp)
    sp.add_argument("file")
    sp.add_argument("--realtime", action="store_true")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("query", help="dump stored samples as CSV")
    window(sp)
    sp.add_argument("--device", required=True)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("plot", help="render a stored window as SVG with R-peak markers")
    window(sp)
    sp.add_argument("--device", required=True)
    sp.add_argument("--output", "--out", dest="output", required=True, help="SVG path; a .txt sidecar is written beside it")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="summarise a stored window")
    window(sp)
    sp.add_argument("--device")
    sp.add_argument("--alert-log", dest="alert_log", help="default <store>/alerts.jsonl")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RuleSyntaxError, UsageError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except OSError as exc:
        _err(str(exc))
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
