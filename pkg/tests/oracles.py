"""Reference implementations used only by the tests.

Nothing here imports the package under test.
"""

from __future__ import annotations

import math

CRC32_POLY_REFLECTED = 0xEDB88320


def crc32_bitwise(data: bytes) -> int:
    """CRC-32/ISO-HDLC computed one bit at a time."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ CRC32_POLY_REFLECTED if crc & 1 else crc >> 1
    return crc ^ 0xFFFFFFFF


def _be(value: int, width: int, signed: bool = False) -> bytes:
    return value.to_bytes(width, "big", signed=signed)


def pack_frame(device_id: bytes, seq: int, t_start_us: int, fs: int, samples, flags=0, temp=0, alcohol=0, version=1) -> bytes:
    """Field-by-field frame assembly straight from the byte layout table."""
    body = (
        b"ECG1"
        + _be(version, 1)
        + device_id
        + _be(seq, 4)
        + _be(t_start_us, 8)
        + _be(fs, 2)
        + _be(len(samples), 2)
        + _be(flags, 1)
        + _be(temp, 2, signed=True)
        + _be(alcohol, 2)
        + b"".join(_be(s, 2) for s in samples)
    )
    return body + _be(crc32_bitwise(body), 4)


def gaussian_beat(t: float, waves) -> float:
    """Direct sum of Gaussians, written independently of the generator."""
    return sum(a * math.exp(-((t - c) ** 2) / (2 * w * w)) for a, c, w in waves)


def match_peaks(truth, detected, window: float):
    """Greedy one-to-one matching in time order; returns (tp, fp, fn)."""
    truth = sorted(truth)
    detected = sorted(detected)
    used = [False] * len(detected)
    tp = 0
    j0 = 0
    for t in truth:
        while j0 < len(detected) and detected[j0] < t - window:
            j0 += 1
        j = j0
        while j < len(detected) and detected[j] <= t + window:
            if not used[j]:
                used[j] = True
                tp += 1
                break
            j += 1
    fp = len(detected) - tp
    fn = len(truth) - tp
    return tp, fp, fn
