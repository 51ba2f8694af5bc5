"""Device-side transport: stream a device's frames to the service over TCP."""

from __future__ import annotations

import random
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .wireproto import TelemetryFrame, encode


@dataclass
class SendReport:
    device_id: str
    frames_total: int = 0
    frames_sent: int = 0
    dropped_seqs: list[int] = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class FrameDropper:
    """Drops frames i.i.d. with probability ``rate`` and logs what it dropped.

    The final frame of a run is always delivered: a sequence gap only becomes
    visible when a later frame arrives.
    """

    def __init__(self, rate: float, seed: int = 0):
        self.rate = rate
        self.rng = random.Random(seed)

    def keep(self, index: int, total: int) -> bool:
        if index == total - 1:
            return True
        return self.rng.random() >= self.rate


def send_frames(
    address: tuple[str, int],
    frames: Sequence[TelemetryFrame],
    dropper: FrameDropper | None = None,
    realtime: bool = False,
    timeout: float = 5.0,
) -> SendReport:
    """Open one connection and stream ``frames`` over it.

    With ``realtime`` the sender paces frames by their timestamps.
    """
    device = frames[0].device_hex if frames else ""
    report = SendReport(device, frames_total=len(frames))
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        report.error = f"cannot connect to {address[0]}:{address[1]}: {exc}"
        return report
    try:
        t_wall0 = time.monotonic()
        t_dev0 = frames[0].t_start_us if frames else 0
        for k, frame in enumerate(frames):
            if dropper is not None and not dropper.keep(k, len(frames)):
                report.dropped_seqs.append(frame.seq)
                continue
            if realtime:
                lag = (frame.t_start_us - t_dev0) / 1e6 - (time.monotonic() - t_wall0)
                if lag > 0:
                    time.sleep(lag)
            sock.sendall(encode(frame))
            report.frames_sent += 1
        sock.shutdown(socket.SHUT_WR)
        # wait for the server to finish reading and close its side
        sock.settimeout(timeout)
        try:
            while sock.recv(4096):
                pass
        except OSError:
            pass
    except OSError as exc:
        report.error = f"send to {address[0]}:{address[1]} failed: {exc}"
    finally:
        sock.close()
    return report


def run_fleet(
    address: tuple[str, int],
    streams: Sequence[Sequence[TelemetryFrame]],
    drop_rate: float = 0.0,
    seed: int = 0,
    realtime: bool = False,
) -> list[SendReport]:
    """Stream several devices concurrently, one thread and connection each."""
    reports: list[SendReport | None] = [None] * len(streams)

    def worker(k: int) -> None:
        dropper = FrameDropper(drop_rate, seed + k) if drop_rate > 0 else None
        reports[k] = send_frames(address, streams[k], dropper, realtime)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(len(streams))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return [r for r in reports if r is not None]


def write_frame_file(path: str | Path, frames: Sequence[TelemetryFrame]) -> int:
    """Offline mode: concatenate encoded frames into one file; returns bytes written."""
    data = b"".join(encode(f) for f in frames)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return len(data)
