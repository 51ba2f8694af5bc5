import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from hemosurv.alerting import (
    DEFAULT_RULES,
    AlertEvent,
    AlertRule,
    Dispatcher,
    RuleSet,
    RuleSyntaxError,
    evaluate,
    read_alert_log,
    rules_from_config,
)
from hemosurv.analysis import VitalsSnapshot

FEVER = AlertRule("fever", "temperature_c", ">=", 38.0, sustain_s=5.0, hysteresis=0.5)


def snap(t, temperature=None, bpm=None, rhythm="normal_sinus", alcohol=None, device="d1"):
    return VitalsSnapshot(device, float(t), bpm, None, None, None, 8, rhythm, temperature, alcohol)


def temps(values, t0=0.0):
    return [snap(t0 + i, temperature=v) for i, v in enumerate(values)]


def kinds(events):
    return [(e.kind, e.t) for e in events]


def test_parse_empty_and_comments():
    assert rules_from_config("") == []
    assert rules_from_config("# nothing\n\n   \n") == []


def test_parse_full_rule():
    (r,) = rules_from_config("r1: bpm > 100 sustain 5s clear-hyst 5")
    assert r == AlertRule("r1", "bpm", ">", 100.0, 5.0, 5.0)
    (r,) = rules_from_config("  odd: rhythm = irregular   # trailing comment")
    assert (r.metric, r.threshold, r.sustain_s) == ("rhythm", "irregular", 0.0)


def test_default_rules_round_trip_through_text():
    text = "\n".join(r.to_text() for r in DEFAULT_RULES)
    assert tuple(rules_from_config(text)) == DEFAULT_RULES


@pytest.mark.parametrize(
    "text, line, column",
    [
        ("r1: pulse > 100", 1, 5),
        ("\nr1: bpm >> 100", 2, 9),
        ("r1: bpm > abc", 1, 11),
        ("r1: bpm > 100 sustain", 1, 15),
        ("r1: bpm > 100 linger 5", 1, 15),
        ("r1: bpm > 100 sustain fives", 1, 23),
        ("r1: rhythm = wobbly", 1, 14),
        ("r1: rhythm > irregular", 1, 12),
        ("r1: bpm = 100", 1, 9),
        ("just words", 1, 1),
    ],
)
def test_syntax_errors_report_position(text, line, column):
    with pytest.raises(RuleSyntaxError) as err:
        rules_from_config(text)
    assert (err.value.line, err.value.column) == (line, column)


def test_duplicate_ids_named():
    with pytest.raises(RuleSyntaxError, match="hot") as err:
        rules_from_config("hot: temperature_c > 38\ncold: temperature_c < 35\nhot: bpm > 1")
    assert err.value.line == 3


def test_constant_normal_temperature_never_alerts():
    rule = AlertRule("t", "temperature_c", ">", 38.0, sustain_s=5.0)
    assert list(evaluate(rule, temps([36.5] * 60))) == []


def test_step_raises_once_at_cross_plus_sustain():
    trace = [snap(t, temperature=36.5 if t < 100 else 38.5) for t in range(0, 200)]
    assert kinds(evaluate(FEVER, trace)) == [("raise", 105.0)]


def test_raise_then_clear_after_hysteresis():
    values = [36.5] * 10 + [38.5] * 20 + [37.8] * 10 + [37.4] * 20
    events = list(evaluate(FEVER, temps(values)))
    # 37.8 is inside the hysteresis band; clearing needs <= 37.5 for 5 s
    assert kinds(events) == [("raise", 15.0), ("clear", 45.0)]
    assert events[0].snapshot.temperature_c == 38.5


def test_oscillation_within_band_never_raises():
    values = [37.9 if i % 2 else 38.1 for i in range(300)]
    assert list(evaluate(FEVER, temps(values))) == []


def test_missing_values_break_a_run():
    trace = temps([38.5] * 4) + [snap(4, temperature=None)] + temps([38.5] * 6, t0=5)
    assert kinds(evaluate(FEVER, trace)) == [("raise", 10.0)]


def test_indeterminate_rhythm_neither_sets_nor_clears():
    rule = AlertRule("irr", "rhythm", "=", "irregular", sustain_s=3.0)
    labels = ["irregular"] * 2 + ["indeterminate"] + ["irregular"] * 4 + ["indeterminate"] * 5 + ["normal_sinus"] * 4
    trace = [snap(i, rhythm=r) for i, r in enumerate(labels)]
    assert kinds(evaluate(rule, trace)) == [("raise", 6.0), ("clear", 15.0)]


def test_below_threshold_rule_and_zero_sustain():
    rule = AlertRule("brady", "bpm", "<", 60.0, sustain_s=0.0, hysteresis=5.0)
    trace = [snap(i, bpm=b) for i, b in enumerate([70, 59, 62, 64, 65, 50])]
    assert kinds(evaluate(rule, trace)) == [("raise", 1.0), ("clear", 4.0), ("raise", 5.0)]


def _alternates(events):
    return all(e.kind == ("raise" if i % 2 == 0 else "clear") for i, e in enumerate(events))


def test_alternation_and_monotone_sustain_on_random_traces():
    rng = np.random.default_rng(0)
    for _ in range(100):
        values = 38.0 + np.cumsum(rng.normal(0, 0.3, 200))
        trace = temps(values)
        counts = []
        for sustain in (0.0, 2.0, 5.0, 10.0):
            rule = AlertRule("f", "temperature_c", ">=", 38.0, sustain, 0.5)
            events = list(evaluate(rule, trace))
            assert _alternates(events)
            assert events == list(evaluate(rule, trace))
            counts.append(sum(e.kind == "raise" for e in events))
        assert counts == sorted(counts, reverse=True)


def test_ruleset_keeps_devices_apart():
    rs = RuleSet([FEVER])
    out = []
    for t in range(10):
        out += rs.feed(snap(t, temperature=39.0, device="a"))
        out += rs.feed(snap(t, temperature=36.0, device="b"))
    assert [(e.device_id, e.kind, e.t) for e in out] == [("a", "raise", 5.0)]


def _event(t=5.0):
    return AlertEvent("fever", "d1", "raise", t, snap(t, temperature=38.5))


def test_payload_fields():
    p = _event().payload()
    assert set(p) == {"rule_id", "device_id", "kind", "t", "metrics"}
    assert p["metrics"]["temperature_c"] == 38.5


class ScriptedSink:
    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def __call__(self, url, body, timeout):
        self.calls.append(json.loads(body))
        step = self.script.pop(0) if self.script else 200
        if isinstance(step, Exception):
            raise step
        return step


def _dispatcher(tmp_path, transport=None, url="http://x/hook", **kw):
    kw.setdefault("sleep", lambda s: None)
    if transport is not None:
        kw["transport"] = transport
    return Dispatcher(url, tmp_path / "a.jsonl", tmp_path / "dead.jsonl", **kw)


def test_dispatch_happy_path(tmp_path):
    sink = ScriptedSink([200])
    d = _dispatcher(tmp_path, sink)
    r = d.dispatch(_event())
    assert r.delivered and r.attempts == 1
    assert len(sink.calls) == 1
    assert len(read_alert_log(tmp_path / "a.jsonl")) == 1
    assert not (tmp_path / "dead.jsonl").exists()


def test_dispatch_retries_with_backoff(tmp_path):
    sink = ScriptedSink([503, ConnectionRefusedError("down"), 200])
    sleeps = []
    d = _dispatcher(tmp_path, sink, backoff_s=0.1, sleep=sleeps.append)
    r = d.dispatch(_event())
    assert (r.delivered, r.attempts, r.status) == (True, 3, 200)
    assert sleeps == pytest.approx([0.1, 0.2])
    assert sink.calls[0] == sink.calls[2]


def test_dispatch_dead_letters_after_cap(tmp_path):
    sink = ScriptedSink([500] * 10)
    d = _dispatcher(tmp_path, sink, max_attempts=5)
    r = d.dispatch(_event())
    assert r.dead_lettered and not r.delivered and r.attempts == 5
    assert len(sink.calls) == 5
    (parked,) = read_alert_log(tmp_path / "dead.jsonl")
    assert parked["rule_id"] == "fever" and parked["attempts"] == 5


def test_delivery_conservation_under_concurrent_submit(tmp_path):
    rng = np.random.default_rng(2)
    script = [200 if rng.random() < 0.5 else 500 for _ in range(5000)]
    sink = ScriptedSink(script)
    d = _dispatcher(tmp_path, sink, max_attempts=2)

    def producer(k):
        for i in range(50):
            d.submit(_event(k * 1000 + i))

    threads = [threading.Thread(target=producer, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    d.close()
    delivered = sum(r.delivered for r in d.receipts)
    parked = len(read_alert_log(tmp_path / "dead.jsonl"))
    assert delivered + parked == 200
    assert len(read_alert_log(tmp_path / "a.jsonl")) == 200


def test_no_webhook_still_logs(tmp_path):
    d = Dispatcher(None, tmp_path / "a.jsonl")
    r = d.dispatch(_event())
    assert not r.delivered and r.attempts == 0
    assert read_alert_log(tmp_path / "a.jsonl")[0]["kind"] == "raise"


def test_real_http_webhook(tmp_path):
    received = []

    class Hook(BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers["Content-Length"]))
            received.append(json.loads(body))
            self.send_response(204)
            self.end_headers()

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Hook)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/alerts"
        d = Dispatcher(url, tmp_path / "a.jsonl", tmp_path / "dead.jsonl")
        r = d.dispatch(_event())
    finally:
        server.shutdown()
    assert r.delivered and r.status == 204
    assert received == [_event().payload()]


def test_unreachable_webhook_dead_letters(tmp_path):
    d = _dispatcher(tmp_path, url="http://127.0.0.1:1/none", max_attempts=2, timeout_s=1.0)
    r = d.dispatch(_event())
    assert r.dead_lettered and r.error
    assert len(read_alert_log(tmp_path / "dead.jsonl")) == 1
