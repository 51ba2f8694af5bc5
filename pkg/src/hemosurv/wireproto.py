"""Binary telemetry framing for the device -> service link.

Layout (big-endian), see PROTOCOL.md::

    magic "ECG1" | version u8 | device_id 8s | seq u32 | t_start_us u64 |
    fs u16 | n u16 | flags u8 | temp_centi_c i16 | alcohol_permille u16 |
    samples u16[n] | crc32 u32

The CRC is CRC-32/IEEE over every preceding byte, magic included.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

MAGIC = b"ECG1"
VERSION = 1
HEADER = struct.Struct(">4sB8sIQHHBhH")
HEADER_SIZE = HEADER.size  # 34
CRC_SIZE = 4
MIN_FRAME_SIZE = HEADER_SIZE + CRC_SIZE  # 38
MAX_CODE = 1023

FLAG_LO_PLUS = 0x01
FLAG_LO_MINUS = 0x02
FLAG_BUZZER = 0x04
FLAG_MASK = FLAG_LO_PLUS | FLAG_LO_MINUS | FLAG_BUZZER


class FrameError(ValueError):
    """Base class for frame validation failures; ``code`` is machine-readable."""

    code = "frame_error"


class BadMagic(FrameError):
    code = "bad_magic"


class UnsupportedVersion(FrameError):
    code = "unsupported_version"


class Truncated(FrameError):
    code = "truncated"


class TrailingBytes(FrameError):
    code = "trailing_bytes"


class CrcMismatch(FrameError):
    code = "crc_mismatch"


class SampleOutOfRange(FrameError):
    code = "sample_out_of_range"


class ReservedFlags(FrameError):
    code = "reserved_flags"


@dataclass(frozen=True)
class TelemetryFrame:
    device_id: bytes
    seq: int
    t_start_us: int
    fs: int
    samples: tuple[int, ...] = ()
    flags: int = 0
    temp_centi_c: int = 0
    alcohol_permille: int = 0
    version: int = VERSION

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def lead_off(self) -> bool:
        return bool(self.flags & (FLAG_LO_PLUS | FLAG_LO_MINUS))

    @property
    def device_hex(self) -> str:
        return self.device_id.hex()

    def validate(self) -> None:
        if len(self.device_id) != 8:
            raise ValueError("device_id must be exactly 8 bytes")
        if not 0 <= self.version <= 0xFF:
            raise ValueError("version out of u8 range")
        if not 0 <= self.seq <= 0xFFFFFFFF:
            raise ValueError("seq out of u32 range")
        if not 0 <= self.t_start_us <= 0xFFFFFFFFFFFFFFFF:
            raise ValueError("t_start_us out of u64 range")
        if not 0 <= self.fs <= 0xFFFF:
            raise ValueError("fs out of u16 range")
        if self.n > 0xFFFF:
            raise ValueError("too many samples for one frame")
        if self.flags & ~FLAG_MASK & 0xFF or not 0 <= self.flags <= 0xFF:
            raise ValueError("flags bits 3-7 must be zero")
        if not -0x8000 <= self.temp_centi_c <= 0x7FFF:
            raise ValueError("temp_centi_c out of i16 range")
        if not 0 <= self.alcohol_permille <= 0xFFFF:
            raise ValueError("alcohol_permille out of u16 range")
        if any(not 0 <= s <= MAX_CODE for s in self.samples):
            raise ValueError("sample codes must be within 0..1023")


def encode(frame: TelemetryFrame) -> bytes:
    frame.validate()
    body = HEADER.pack(
        MAGIC,
        frame.version,
        frame.device_id,
        frame.seq,
        frame.t_start_us,
        frame.fs,
        frame.n,
        frame.flags,
        frame.temp_centi_c,
        frame.alcohol_permille,
    ) + struct.pack(f">{frame.n}H", *frame.samples)
    return body + struct.pack(">I", zlib.crc32(body))


def frame_length(header: bytes) -> int:
    """Total encoded length implied by a header's sample count."""
    n = struct.unpack_from(">H", header, 27)[0]
    return MIN_FRAME_SIZE + 2 * n


def _decode_at(buf, offset: int = 0) -> tuple[TelemetryFrame, int]:
    avail = len(buf) - offset
    if avail < len(MAGIC):
        if bytes(buf[offset:]) != MAGIC[:avail]:
            raise BadMagic("magic mismatch")
        raise Truncated(f"need {MIN_FRAME_SIZE} bytes, have {avail}")
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise BadMagic("magic mismatch")
    if avail < 5:
        raise Truncated(f"need {MIN_FRAME_SIZE} bytes, have {avail}")
    version = buf[offset + 4]
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if avail < HEADER_SIZE:
        raise Truncated(f"need {MIN_FRAME_SIZE} bytes, have {avail}")
    total = frame_length(buf[offset : offset + HEADER_SIZE])
    if avail < total:
        raise Truncated(f"need {total} bytes, have {avail}")
    end = offset + total
    (crc,) = struct.unpack_from(">I", buf, end - CRC_SIZE)
    if zlib.crc32(buf[offset : end - CRC_SIZE]) != crc:
        raise CrcMismatch(f"crc {crc:08x} does not match payload")
    _, version, device_id, seq, t_start_us, fs, n, flags, temp, alcohol = HEADER.unpack_from(buf, offset)
    samples = struct.unpack_from(f">{n}H", buf, offset + HEADER_SIZE)
    if flags & ~FLAG_MASK:
        raise ReservedFlags(f"flags 0x{flags:02x} set reserved bits")
    bad = next((s for s in samples if s > MAX_CODE), None)
    if bad is not None:
        raise SampleOutOfRange(f"sample code {bad} exceeds {MAX_CODE}")
    frame = TelemetryFrame(
        device_id=bytes(device_id),
        seq=seq,
        t_start_us=t_start_us,
        fs=fs,
        samples=samples,
        flags=flags,
        temp_centi_c=temp,
        alcohol_permille=alcohol,
        version=version,
    )
    return frame, total


def decode(data: bytes) -> TelemetryFrame:
    """Decode exactly one frame; raises a :class:`FrameError` subclass on any defect."""
    frame, used = _decode_at(data)
    if used != len(data):
        raise TrailingBytes(f"{len(data) - used} bytes after frame end")
    return frame


@dataclass(frozen=True)
class Resync:
    """Bytes skipped while hunting for the next magic."""

    offset: int
    skipped: int


@dataclass(frozen=True)
class StreamError:
    """A frame-shaped region at ``offset`` that failed validation."""

    offset: int
    error: FrameError


StreamItem = Union[TelemetryFrame, Resync, StreamError]


@dataclass
class FrameSplitter:
    """Incremental splitter for a byte stream of concatenated frames.

    Feed arbitrary fragments; each call returns the frames completed so far,
    interleaved with :class:`Resync` and :class:`StreamError` records for
    garbage and corrupt regions.  Output does not depend on how the stream is
    fragmented.
    """

    _buf: bytearray = field(default_factory=bytearray)
    _base: int = 0  # stream offset of _buf[0]
    _skip_start: int | None = None

    def feed(self, data: bytes) -> list[StreamItem]:
        return self._scan(data, final=False)

    def close(self) -> list[StreamItem]:
        """Flush at end of stream; incomplete frames are reported as truncated."""
        out = self._scan(b"", final=True)
        self._close_skip(0, out)
        return out

    def _scan(self, data: bytes, final: bool) -> list[StreamItem]:
        self._buf += data
        out: list[StreamItem] = []
        pos = 0
        buf = self._buf
        while True:
            hit = buf.find(MAGIC, pos)
            if hit < 0:
                # keep a possible partial magic at the tail
                keep = 0
                if not final:
                    for k in range(min(3, len(buf) - pos), 0, -1):
                        if buf.endswith(MAGIC[:k]):
                            keep = k
                            break
                drop_to = len(buf) - keep
                if drop_to > pos:
                    self._mark_skip(pos)
                pos = drop_to
                break
            if hit > pos:
                self._mark_skip(pos)
                pos = hit
            try:
                frame, used = _decode_at(buf, pos)
            except Truncated as exc:
                if not final:
                    break
                failure: FrameError = exc
            except FrameError as exc:
                failure = exc
            else:
                self._close_skip(pos, out)
                out.append(frame)
                pos += used
                continue
            self._close_skip(pos, out)
            out.append(StreamError(self._base + pos, failure))
            # the magic itself is untrusted now; resume hunting past it
            self._mark_skip(pos + 1)
            pos += 1
        del buf[:pos]
        self._base += pos
        return out

    def _mark_skip(self, pos: int) -> None:
        if self._skip_start is None:
            self._skip_start = self._base + pos

    def _close_skip(self, pos: int, out: list[StreamItem]) -> None:
        if self._skip_start is not None:
            end = self._base + pos
            if end > self._skip_start:
                out.append(Resync(self._skip_start, end - self._skip_start))
            self._skip_start = None


def frame_stream_split(chunks: Iterable[bytes]) -> Iterator[StreamItem]:
    """Split an iterable of byte fragments into frames and inline error records."""
    splitter = FrameSplitter()
    for chunk in chunks:
        yield from splitter.feed(chunk)
    yield from splitter.close()
