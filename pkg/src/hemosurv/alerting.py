"""Alert rules over vitals snapshots, with sustain/hysteresis and webhook dispatch."""

from __future__ import annotations

import json
import logging
import math
import queue
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Protocol

logger = logging.getLogger(__name__)

METRICS = ("bpm", "temperature_c", "alcohol_level", "rhythm")
COMPARATORS = (">", "<", ">=", "<=", "=")
RHYTHM_LABELS = ("normal_sinus", "tachycardia", "bradycardia", "irregular", "indeterminate")


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, col {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class AlertRule:
    rule_id: str
    metric: str
    comparator: str
    threshold: float | str
    sustain_s: float = 0.0
    hysteresis: float = 0.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.comparator not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if self.metric == "rhythm":
            if self.comparator != "=" or self.threshold not in RHYTHM_LABELS:
                raise ValueError("rhythm rules take the form 'rhythm = <label>'")
        elif self.comparator == "=":
            raise ValueError("'=' only applies to rhythm rules")
        if self.sustain_s < 0 or self.hysteresis < 0:
            raise ValueError("sustain and hysteresis must be >= 0")

    def to_text(self) -> str:
        thr = self.threshold if isinstance(self.threshold, str) else f"{self.threshold:g}"
        text = f"{self.rule_id}: {self.metric} {self.comparator} {thr} sustain {self.sustain_s:g}s"
        if self.hysteresis:
            text += f" clear-hyst {self.hysteresis:g}"
        return text


DEFAULT_RULES: tuple[AlertRule, ...] = (
    AlertRule("tachycardia", "bpm", ">", 100.0, sustain_s=10.0, hysteresis=5.0),
    AlertRule("bradycardia", "bpm", "<", 60.0, sustain_s=10.0, hysteresis=5.0),
    AlertRule("fever", "temperature_c", ">=", 38.0, sustain_s=5.0, hysteresis=0.5),
    AlertRule("alcohol", "alcohol_level", ">=", 0.25, sustain_s=3.0, hysteresis=0.05),
    AlertRule("irregular", "rhythm", "=", "irregular", sustain_s=15.0),
)


_RULE_RE = re.compile(
    r"""^(?P<id>[A-Za-z_][\w.-]*)\s*:\s*
        (?P<metric>\S+)\s+
        (?P<cmp>\S+)\s+
        (?P<thr>\S+)
        (?P<rest>.*)$""",
    re.X,
)
_NUM_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _number(text: str, line: int, column: int, what: str, unit: str = "") -> float:
    if unit and text.endswith(unit):
        text = text[: -len(unit)]
    if not _NUM_RE.match(text):
        raise RuleSyntaxError(f"expected a number for {what}, got {text!r}", line, column)
    return float(text)


def rules_from_config(text: str) -> list[AlertRule]:
    """Parse rule lines of the form::

        <id>: <metric> <comparator> <threshold> [sustain <sec>[s]] [clear-hyst <value>]

    Blank lines and ``#`` comments are ignored.
    """
    rules: list[AlertRule] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indent = len(line) - len(line.lstrip())
        m = _RULE_RE.match(line.strip())
        if not m:
            raise RuleSyntaxError("expected '<id>: <metric> <cmp> <threshold> ...'", lineno, indent + 1)
        col = lambda name: indent + m.start(name) + 1  # noqa: E731
        rule_id, metric, cmp_, thr = m["id"], m["metric"], m["cmp"], m["thr"]
        if metric not in METRICS:
            raise RuleSyntaxError(f"unknown metric {metric!r}", lineno, col("metric"))
        if cmp_ not in COMPARATORS:
            raise RuleSyntaxError(f"unknown comparator {cmp_!r}", lineno, col("cmp"))
        if metric == "rhythm":
            if cmp_ != "=":
                raise RuleSyntaxError("rhythm rules only support '='", lineno, col("cmp"))
            if thr not in RHYTHM_LABELS:
                raise RuleSyntaxError(f"unknown rhythm label {thr!r}", lineno, col("thr"))
            threshold: float | str = thr
        else:
            if cmp_ == "=":
                raise RuleSyntaxError("'=' only applies to rhythm rules", lineno, col("cmp"))
            threshold = _number(thr, lineno, col("thr"), "threshold")

        sustain = 0.0
        hyst = 0.0
        tokens = [(t.group(), indent + m.start("rest") + t.start() + 1) for t in re.finditer(r"\S+", m["rest"])]
        i = 0
        while i < len(tokens):
            key, kcol = tokens[i]
            if key not in ("sustain", "clear-hyst"):
                raise RuleSyntaxError(f"unexpected token {key!r}", lineno, kcol)
            if i + 1 >= len(tokens):
                raise RuleSyntaxError(f"{key} needs a value", lineno, kcol)
            val, vcol = tokens[i + 1]
            if key == "sustain":
                sustain = _number(val, lineno, vcol, "sustain", unit="s")
            else:
                hyst = _number(val, lineno, vcol, "clear-hyst")
            i += 2

        if rule_id in seen:
            raise RuleSyntaxError(f"duplicate rule id {rule_id!r} (first on line {seen[rule_id]})", lineno, indent + 1)
        seen[rule_id] = lineno
        try:
            rules.append(AlertRule(rule_id, metric, cmp_, threshold, sustain, hyst))
        except ValueError as exc:
            raise RuleSyntaxError(str(exc), lineno, indent + 1) from exc
    return rules


@dataclass(frozen=True)
class AlertEvent:
    rule_id: str
    device_id: str
    kind: str  # raise | clear
    t: float
    snapshot: Any = None

    def payload(self) -> dict:
        snap = self.snapshot
        metrics = {}
        if snap is not None:
            metrics = {k: getattr(snap, k, None) for k in METRICS}
        return {
            "rule_id": self.rule_id,
            "device_id": self.device_id,
            "kind": self.kind,
            "t": self.t,
            "metrics": metrics,
        }


def _metric_value(snapshot, metric: str):
    value = getattr(snapshot, metric, None)
    if metric == "rhythm":
        return None if value in (None, "indeterminate") else value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return value


class RuleEvaluator:
    """Sequential sustain/hysteresis state machine for one (rule, device)."""

    def __init__(self, rule: AlertRule, device_id: str = ""):
        self.rule = rule
        self.device_id = device_id
        self.active = False
        self._since: float | None = None  # start of the current qualifying run

    def _trips(self, v) -> bool:
        r = self.rule
        return {
            ">": lambda: v > r.threshold,
            "<": lambda: v < r.threshold,
            ">=": lambda: v >= r.threshold,
            "<=": lambda: v <= r.threshold,
            "=": lambda: v == r.threshold,
        }[r.comparator]()

    def _clears(self, v) -> bool:
        r = self.rule
        if r.comparator == "=":
            return v != r.threshold
        if r.comparator in (">", ">="):
            return v <= r.threshold - r.hysteresis
        return v >= r.threshold + r.hysteresis

    def feed(self, snapshot) -> AlertEvent | None:
        t = snapshot.t
        v = _metric_value(snapshot, self.rule.metric)
        if v is None:
            # no evidence either way; breaks any run in progress
            self._since = None
            return None
        qualifies = self._clears(v) if self.active else self._trips(v)
        if not qualifies:
            self._since = None
            return None
        if self._since is None:
            self._since = t
        if t - self._since + 1e-9 >= self.rule.sustain_s:
            self.active = not self.active
            self._since = None
            device = self.device_id or getattr(snapshot, "device_id", "")
            return AlertEvent(self.rule.rule_id, device, "raise" if self.active else "clear", t, snapshot)
        return None


def evaluate(rule: AlertRule, snapshots: Iterable, device_id: str = "") -> Iterator[AlertEvent]:
    """Alert events produced by ``rule`` over a time-ordered snapshot stream."""
    ev = RuleEvaluator(rule, device_id)
    for snap in snapshots:
        event = ev.feed(snap)
        if event is not None:
            yield event


class RuleSet:
    """All rules for all devices; one evaluator per (rule, device)."""

    def __init__(self, rules: Iterable[AlertRule] = DEFAULT_RULES):
        self.rules = tuple(rules)
        self._evaluators: dict[tuple[str, str], RuleEvaluator] = {}

    def feed(self, snapshot) -> list[AlertEvent]:
        out = []
        dev = snapshot.device_id
        for rule in self.rules:
            key = (rule.rule_id, dev)
            ev = self._evaluators.get(key)
            if ev is None:
                ev = self._evaluators[key] = RuleEvaluator(rule, dev)
            event = ev.feed(snapshot)
            if event is not None:
                out.append(event)
        return out


# --- dispatch ---------------------------------------------------------------


class Transport(Protocol):
    def __call__(self, url: str, body: bytes, timeout: float) -> int: ...


def http_post(url: str, body: bytes, timeout: float) -> int:
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:  # noqa: S310
            return resp.status
    except urllib.error.HTTPError as exc:
        return exc.code


@dataclass(frozen=True)
class DeliveryReceipt:
    event: AlertEvent
    attempts: int
    delivered: bool
    dead_lettered: bool = False
    status: int | None = None
    error: str | None = None


def _append_line(path: Path | None, record: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


@dataclass
class Dispatcher:
    """Delivers alert events to a webhook and a local log.

    Delivery is at-least-once with ``max_attempts`` tries and exponential
    backoff (``backoff_s * 2**k``).  Events that exhaust their retries land in
    the dead-letter file.  ``dispatch`` is synchronous and serialised by a
    lock; ``submit`` queues to a worker thread so callers never block on the
    network.
    """

    webhook_url: str | None = None
    alert_log: Path | None = None
    dead_letter: Path | None = None
    max_attempts: int = 5
    backoff_s: float = 0.2
    timeout_s: float = 5.0
    transport: Transport = http_post
    sleep: Callable[[float], None] = time.sleep
    receipts: list[DeliveryReceipt] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _queue: "queue.Queue[AlertEvent | None] | None" = field(default=None, repr=False)
    _worker: threading.Thread | None = field(default=None, repr=False)

    def dispatch(self, event: AlertEvent) -> DeliveryReceipt:
        with self._lock:
            payload = event.payload()
            _append_line(self.alert_log, payload)
            receipt = self._deliver(event, payload)
            self.receipts.append(receipt)
            return receipt

    def _deliver(self, event: AlertEvent, payload: dict) -> DeliveryReceipt:
        if not self.webhook_url:
            return DeliveryReceipt(event, attempts=0, delivered=False)
        body = json.dumps(payload, sort_keys=True).encode()
        status = None
        error = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                status = self.transport(self.webhook_url, body, self.timeout_s)
                error = None
            except OSError as exc:
                status, error = None, str(exc)
            if status is not None and 200 <= status < 300:
                return DeliveryReceipt(event, attempt, True, status=status)
            if attempt < self.max_attempts:
                self.sleep(self.backoff_s * 2 ** (attempt - 1))
        reason = error or f"http status {status}"
        _append_line(self.dead_letter, {**payload, "attempts": self.max_attempts, "reason": reason})
        logger.warning("alert parked in dead-letter file", extra={"fields": {"rule_id": event.rule_id, "reason": reason}})
        return DeliveryReceipt(event, self.max_attempts, False, dead_lettered=True, status=status, error=error)

    def submit(self, event: AlertEvent) -> None:
        if self._queue is None:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._run, name="alert-dispatch", daemon=True)
            self._worker.start()
        self._queue.put(event)

    def _run(self) -> None:
        assert self._queue is not None
        while True:
            event = self._queue.get()
            try:
                if event is None:
                    return
                self.dispatch(event)
            except Exception:  # keep the worker alive
                logger.exception("alert dispatch failed")
            finally:
                self._queue.task_done()

    def close(self) -> None:
        """Drain queued events and stop the worker."""
        if self._queue is not None and self._worker is not None:
            self._queue.put(None)
            self._worker.join()
            self._queue = None
            self._worker = None


def read_alert_log(path: Path) -> list[dict]:
    if not Path(path).exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
