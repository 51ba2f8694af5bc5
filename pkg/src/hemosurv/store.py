"""Append-only per-device time-series store built from segment files.

Layout on disk (see STORAGE.md)::

    <root>/<device_hex>/<first_t_start_us:020d>.seg

Each segment starts with a fixed header and is followed by CRC-protected
records.  A record that fails its length or CRC check marks the end of the
readable data, so a reader never observes a torn write.
"""

from __future__ import annotations

import errno
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

SEG_MAGIC = b"ECGS"
SEG_VERSION = 1
SEG_HEADER = struct.Struct(">4sB8sHQ")  # magic, version, device_id, fs, first_t_start_us
SEG_HEADER_SIZE = SEG_HEADER.size + 4  # + header crc
REC_HEADER = struct.Struct(">QHBhH")  # t_start_us, n, flags, temp_centi_c, alcohol_permille
REC_OVERHEAD = REC_HEADER.size + 4

SEGMENT_MAX_BYTES = 64 * 1024 * 1024
SEGMENT_MAX_SPAN_US = 24 * 3600 * 1_000_000


class StoreError(Exception):
    pass


class OutOfOrder(StoreError):
    """Record start time is not after the device's last persisted record."""


class StoreFull(StoreError):
    """The filesystem refused the write (ENOSPC / EDQUOT)."""


@dataclass(frozen=True)
class EcgSampleBatch:
    device_id: bytes
    t_start_us: int
    fs: int
    codes: tuple[int, ...]
    flags: int = 0
    temp_centi_c: int = 0
    alcohol_permille: int = 0

    @property
    def t_end_us(self) -> int:
        return self.t_start_us + int(round(len(self.codes) * 1_000_000 / self.fs))

    def sample_time_us(self, i: int) -> int:
        return self.t_start_us + int(round(i * 1_000_000 / self.fs))

    def clip(self, t0_us: int, t1_us: int) -> "EcgSampleBatch | None":
        """The samples whose timestamps fall in ``[t0_us, t1_us)``, or None."""
        n = len(self.codes)
        lo = next((i for i in range(n) if self.sample_time_us(i) >= t0_us), n)
        hi = next((i for i in range(lo, n) if self.sample_time_us(i) >= t1_us), n)
        if lo >= hi:
            return None
        if lo == 0 and hi == n:
            return self
        return EcgSampleBatch(
            self.device_id,
            self.sample_time_us(lo),
            self.fs,
            self.codes[lo:hi],
            self.flags,
            self.temp_centi_c,
            self.alcohol_permille,
        )

    @classmethod
    def from_frame(cls, frame) -> "EcgSampleBatch":
        return cls(
            frame.device_id,
            frame.t_start_us,
            frame.fs,
            tuple(frame.samples),
            frame.flags,
            frame.temp_centi_c,
            frame.alcohol_permille,
        )


def _device_bytes(device_id: bytes | str) -> bytes:
    if isinstance(device_id, str):
        device_id = bytes.fromhex(device_id)
    if len(device_id) != 8:
        raise ValueError("device_id must be 8 bytes")
    return device_id


def encode_segment_header(device_id: bytes, fs: int, first_t_us: int) -> bytes:
    body = SEG_HEADER.pack(SEG_MAGIC, SEG_VERSION, device_id, fs, first_t_us)
    return body + struct.pack(">I", zlib.crc32(body))


def encode_record(batch: EcgSampleBatch) -> bytes:
    body = REC_HEADER.pack(
        batch.t_start_us, len(batch.codes), batch.flags, batch.temp_centi_c, batch.alcohol_permille
    ) + struct.pack(f">{len(batch.codes)}H", *batch.codes)
    return body + struct.pack(">I", zlib.crc32(body))


@dataclass
class SegmentScan:
    device_id: bytes
    fs: int
    first_t_us: int
    records: list[EcgSampleBatch]
    valid_end: int  # byte offset just past the last intact record
    size: int


def scan_segment(path: Path) -> SegmentScan | None:
    """Read every intact record of a segment; None if the header itself is unreadable."""
    data = Path(path).read_bytes()
    if len(data) < SEG_HEADER_SIZE:
        return None
    (crc,) = struct.unpack_from(">I", data, SEG_HEADER.size)
    if zlib.crc32(data[: SEG_HEADER.size]) != crc:
        return None
    magic, version, device_id, fs, first_t = SEG_HEADER.unpack_from(data)
    if magic != SEG_MAGIC or version != SEG_VERSION:
        return None
    pos = SEG_HEADER_SIZE
    records = []
    while pos + REC_OVERHEAD <= len(data):
        t, n, flags, temp, alcohol = REC_HEADER.unpack_from(data, pos)
        end = pos + REC_OVERHEAD + 2 * n
        if end > len(data):
            break
        (crc,) = struct.unpack_from(">I", data, end - 4)
        if zlib.crc32(data[pos : end - 4]) != crc:
            break
        codes = struct.unpack_from(f">{n}H", data, pos + REC_HEADER.size)
        records.append(EcgSampleBatch(device_id, t, fs, codes, flags, temp, alcohol))
        pos = end
    return SegmentScan(device_id, fs, first_t, records, pos, len(data))


def _segment_fs(path: Path) -> int | None:
    with open(path, "rb") as fh:
        head = fh.read(SEG_HEADER.size)
    if len(head) < SEG_HEADER.size:
        return None
    return SEG_HEADER.unpack(head)[3]


class _DeviceLog:
    def __init__(self, root: Path, device_id: bytes, max_bytes: int, max_span_us: int, fsync: bool):
        self.dir = root / device_id.hex()
        self.device_id = device_id
        self.max_bytes = max_bytes
        self.max_span_us = max_span_us
        self.fsync = fsync
        self.lock = threading.Lock()
        self.fh = None
        self.seg_fs: int | None = None
        self.seg_first: int | None = None
        self.seg_size = 0
        self.last_t: int | None = None
        self._recover()

    def segments(self) -> list[Path]:
        if not self.dir.exists():
            return []
        return sorted(self.dir.glob("*.seg"))

    def _recover(self) -> None:
        segs = self.segments()
        for path in reversed(segs):
            scan = scan_segment(path)
            if scan is None:
                continue
            if scan.valid_end < scan.size:
                # drop a torn tail left by an abrupt stop
                with open(path, "r+b") as fh:
                    fh.truncate(scan.valid_end)
            if scan.records:
                self.last_t = scan.records[-1].t_start_us
            if path == segs[-1]:
                self.seg_fs, self.seg_first, self.seg_size = scan.fs, scan.first_t_us, scan.valid_end
            if self.last_t is not None:
                break

    def _open_segment(self, fs: int, first_t: int) -> None:
        self.close()
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / f"{first_t:020d}.seg"
        header = encode_segment_header(self.device_id, fs, first_t)
        self.fh = open(path, "wb")
        self._write(header)
        self.seg_fs, self.seg_first, self.seg_size = fs, first_t, len(header)

    def _write(self, data: bytes) -> None:
        fh = self.fh
        start = fh.tell()
        try:
            fh.write(data)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        except OSError as exc:
            try:
                fh.truncate(start)
                fh.seek(start)
            except OSError:
                pass
            if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StoreFull(str(exc)) from exc
            raise

    def append(self, batch: EcgSampleBatch) -> None:
        with self.lock:
            if self.last_t is not None and batch.t_start_us <= self.last_t:
                raise OutOfOrder(
                    f"device {self.device_id.hex()}: t_start_us {batch.t_start_us} <= last persisted {self.last_t}"
                )
            rec = encode_record(batch)
            roll = (
                self.seg_first is None
                or batch.fs != self.seg_fs
                or self.seg_size + len(rec) > self.max_bytes
                or batch.t_start_us - self.seg_first >= self.max_span_us
            )
            if roll:
                self._open_segment(batch.fs, batch.t_start_us)
            elif self.fh is None:
                path = self.dir / f"{self.seg_first:020d}.seg"
                self.fh = open(path, "ab")
            self._write(rec)
            self.seg_size += len(rec)
            self.last_t = batch.t_start_us

    def close(self) -> None:
        if self.fh is not None:
            self.fh.flush()
            self.fh.close()
            self.fh = None


class SeriesStore:
    """Directory of per-device segment logs.

    Appends to different devices may run concurrently; reads may run
    alongside appends and only ever see whole records.
    """

    def __init__(
        self,
        root: str | Path,
        segment_max_bytes: int = SEGMENT_MAX_BYTES,
        segment_max_span_us: int = SEGMENT_MAX_SPAN_US,
        fsync: bool = False,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.segment_max_bytes = segment_max_bytes
        self.segment_max_span_us = segment_max_span_us
        self.fsync = fsync
        self._logs: dict[bytes, _DeviceLog] = {}
        self._lock = threading.Lock()

    def _log(self, device_id: bytes) -> _DeviceLog:
        with self._lock:
            log = self._logs.get(device_id)
            if log is None:
                log = _DeviceLog(self.root, device_id, self.segment_max_bytes, self.segment_max_span_us, self.fsync)
                self._logs[device_id] = log
            return log

    def append(self, device_id: bytes | str, batch: EcgSampleBatch) -> None:
        dev = _device_bytes(device_id)
        if batch.device_id != dev:
            raise ValueError("batch device_id does not match")
        self._log(dev).append(batch)

    def last_time(self, device_id: bytes | str) -> int | None:
        return self._log(_device_bytes(device_id)).last_t

    def devices(self) -> list[bytes]:
        return sorted(
            bytes.fromhex(p.name) for p in self.root.iterdir() if p.is_dir() and len(p.name) == 16 and any(p.glob("*.seg"))
        )

    def segments(self, device_id: bytes | str) -> list[Path]:
        d = self.root / _device_bytes(device_id).hex()
        return sorted(d.glob("*.seg")) if d.exists() else []

    def scan(self, device_id: bytes | str) -> Iterator[EcgSampleBatch]:
        for path in self.segments(device_id):
            seg = scan_segment(path)
            if seg is not None:
                yield from seg.records

    def query(self, device_id: bytes | str, t0_us: int, t1_us: int) -> list[EcgSampleBatch]:
        """Records overlapping the half-open interval ``[t0_us, t1_us)``, time-ordered."""
        if t0_us > t1_us:
            raise ValueError("t0 must be <= t1")
        if t0_us == t1_us:
            return []
        dev = _device_bytes(device_id)
        segs = self.segments(dev)
        out = []
        for k, path in enumerate(segs):
            if int(path.stem) >= t1_us:
                break
            if k + 1 < len(segs):
                # every record here starts before the next segment does and
                # spans at most 65535 samples
                fs = _segment_fs(path)
                if fs and int(segs[k + 1].stem) + 65535 * 1_000_000 // fs + 1 <= t0_us:
                    continue
            seg = scan_segment(path)
            if seg is None:
                continue
            out.extend(r for r in seg.records if r.t_start_us < t1_us and r.t_end_us > t0_us)
        return out

    def samples(self, device_id: bytes | str, t0_us: int, t1_us: int) -> list[EcgSampleBatch]:
        """Like :meth:`query` but trimmed to the samples inside ``[t0_us, t1_us)``."""
        out = []
        for rec in self.query(device_id, t0_us, t1_us):
            part = rec.clip(t0_us, t1_us)
            if part is not None:
                out.append(part)
        return out

    def close(self) -> None:
        with self._lock:
            for log in self._logs.values():
                with log.lock:
                    log.close()
