"""Glue between ingest, per-device analysis and alerting."""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Iterable

from .alerting import DEFAULT_RULES, AlertEvent, AlertRule, Dispatcher, RuleSet
from .analysis import VitalsPipeline, VitalsSnapshot
from .wireproto import TelemetryFrame


class AnalysisHub:
    """Frame sink for :class:`~hemosurv.ingest.IngestService`.

    Keeps one :class:`VitalsPipeline` per device, appends every snapshot to
    ``<metrics_dir>/<device>.jsonl``, runs the alert rules and hands events to
    the dispatcher.
    """

    def __init__(
        self,
        rules: Iterable[AlertRule] = DEFAULT_RULES,
        dispatcher: Dispatcher | None = None,
        metrics_dir: str | Path | None = None,
        snapshot_every: float = 1.0,
    ):
        self.rules = RuleSet(rules)
        self.dispatcher = dispatcher
        self.metrics_dir = Path(metrics_dir) if metrics_dir else None
        self.snapshot_every = snapshot_every
        self.pipelines: dict[str, VitalsPipeline] = {}
        self.latest: dict[str, VitalsSnapshot] = {}
        self.events: list[AlertEvent] = []
        self.frames_in: dict[str, int] = {}
        self._lock = threading.Lock()
        self._files: dict[str, object] = {}

    def __call__(self, frame: TelemetryFrame) -> None:
        device = frame.device_hex
        with self._lock:
            pipe = self.pipelines.get(device)
            if pipe is None or pipe.fs != frame.fs:
                pipe = self.pipelines[device] = VitalsPipeline(device, frame.fs, snapshot_every=self.snapshot_every)
            self.frames_in[device] = self.frames_in.get(device, 0) + 1
            for snap in pipe.feed_frame(frame):
                self._on_snapshot(snap)

    def _on_snapshot(self, snap: VitalsSnapshot) -> None:
        self.latest[snap.device_id] = snap
        if self.metrics_dir is not None:
            fh = self._files.get(snap.device_id)
            if fh is None:
                self.metrics_dir.mkdir(parents=True, exist_ok=True)
                fh = self._files[snap.device_id] = open(self.metrics_dir / f"{snap.device_id}.jsonl", "a", encoding="utf-8")
            fh.write(json.dumps(snap.to_record(), sort_keys=True) + "\n")
            fh.flush()
        for event in self.rules.feed(snap):
            self.events.append(event)
            if self.dispatcher is not None:
                self.dispatcher.submit(event)

    def flush(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.flush()

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()
        if self.dispatcher is not None:
            self.dispatcher.close()
