"""Streaming ECG analysis: band-pass, Pan-Tompkins style R-peak detection,
heart rate / RR statistics and rhythm classification.

Every stage keeps its own carried state and uses only element-wise or strictly
sequential arithmetic, so feeding a signal in chunks of any size produces
bit-identical output to feeding it in one piece.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .device import DeviceConfig, codes_to_mv

BAND_HZ = (5.0, 15.0)
FILTER_ORDER = 3
INTEGRATION_S = 0.150
REFRACTORY_S = 0.200
APEX_SEARCH_S = 0.050
LEARNING_S = 2.0
T_WAVE_WINDOW_S = 0.360
SEARCHBACK_FACTOR = 1.66
PEAK_ALPHA = 0.125
THRESHOLD_FRACTION = 0.25
RR_WINDOW = 8

TACHY_BPM = 100.0
BRADY_BPM = 60.0
IRREGULAR_RATIO = 0.15


def design_bandpass(fs: float, band=BAND_HZ, order: int = FILTER_ORDER):
    """Butterworth band-pass as second-order sections, plus its group delay in samples.

    The delay is evaluated at the band centre, where QRS energy concentrates.
    """
    sos = sps.butter(order, band, btype="bandpass", fs=fs, output="sos")
    b, a = sps.sos2tf(sos)
    centre = math.sqrt(band[0] * band[1])
    _, gd = sps.group_delay((b, a), w=[centre], fs=fs)
    return sos, float(gd[0])


def bandpass(codes: Sequence[int], fs: float, cfg: DeviceConfig | None = None) -> np.ndarray:
    """Dequantize ADC codes to millivolts and apply the causal 5-15 Hz band-pass.

    Filter state starts at rest (zero), so this is a plain LTI filter.
    """
    if fs < 100:
        raise ValueError("fs must be >= 100 Hz")
    cfg = cfg or DeviceConfig(fs=int(fs))
    sos, _ = design_bandpass(fs)
    mv = codes_to_mv(np.asarray(codes, dtype=float), cfg)
    return sps.sosfilt(sos, mv)


@dataclass(frozen=True)
class PeakAnnotation:
    t: float  # s
    amplitude: float  # mV at the apex
    confidence: float
    index: int = 0  # apex sample index
    decided_at: int = 0  # sample index at which the detector committed to it


@dataclass
class _Candidate:
    index: int  # integrator peak
    value: float
    apex: int
    amplitude: float
    slope: float


class QrsDetector:
    """Streaming R-peak detector over millivolt samples.

    Pipeline: band-pass -> 5-point derivative -> squaring -> 150 ms moving
    window integration -> adaptive dual threshold with 200 ms refractory and
    RR-driven search-back.  Integrator peaks are mapped back to the R apex in
    the raw input by a +/-50 ms maximum search around the delay-compensated
    position.

    The input is referenced to its first sample, which is equivalent to
    starting the band-pass in steady state; leading samples equal to the first
    one therefore produce exactly zero energy, and the 2 s learning phase
    begins at the first non-zero integrator sample.
    """

    def __init__(self, fs: float, t0: float = 0.0):
        if fs < 100:
            raise ValueError("fs must be >= 100 Hz")
        self.fs = float(fs)
        self.t0 = t0
        self.sos, self.filter_delay = design_bandpass(fs)
        self.window = max(1, int(round(INTEGRATION_S * fs)))
        self.refractory = int(round(REFRACTORY_S * fs))
        self.apex_half = int(round(APEX_SEARCH_S * fs))
        self.learn_len = int(round(LEARNING_S * fs))
        self.t_wave = int(round(T_WAVE_WINDOW_S * fs))
        # filter + derivative (2) + integrator centre
        self.delay = int(round(self.filter_delay + 2 + (self.window - 1) / 2))

        self._x0: float | None = None
        self._zi = np.zeros((self.sos.shape[0], 2))
        self._y_hist = np.zeros(4)
        self._s_hist = np.zeros(self.window - 1)
        self._m_tail = np.zeros(2)  # integrator values at n-2, n-1
        self._n = 0
        # integrator maxima must dominate +/- one refractory period
        self.lookahead = self.refractory
        self._mbuf = np.zeros(0)
        self._mbuf_start = 0
        self._unconfirmed: deque[_Candidate] = deque()

        self._keep = self.delay + self.apex_half + self.window + 4
        self._raw = np.zeros(0)
        self._dabs = np.zeros(0)
        self._buf_start = 0

        self._learn_start: int | None = None
        self._learn_vals: list[np.ndarray] = []
        self._learned = False
        self._pending: list[_Candidate] = []

        self.spki = 0.0
        self.npki = 0.0
        self.thr1 = 0.0
        self.thr2 = 0.0
        self._last_apex: int | None = None
        self._last_slope = 0.0
        self._rr: deque[int] = deque(maxlen=RR_WINDOW)
        self._since_qrs: list[_Candidate] = []

    @property
    def samples_seen(self) -> int:
        return self._n

    def feed(self, chunk: Iterable[float]) -> list[PeakAnnotation]:
        x = np.asarray(chunk, dtype=float)
        if x.size == 0:
            return []
        if self._x0 is None:
            self._x0 = float(x[0])
        a = self._n
        m = x.size

        y, self._zi = sps.sosfilt(self.sos, x - self._x0, zi=self._zi)
        ye = np.concatenate([self._y_hist, y])
        d = (2.0 * ye[4:] + ye[3:-1] - ye[1:-3] - 2.0 * ye[:-4]) * (self.fs / 8.0)
        self._y_hist = ye[-4:]
        s = d * d
        w = self.window
        se = np.concatenate([self._s_hist, s])
        acc = se[w - 1 :].copy()
        for j in range(1, w):
            acc = acc + se[w - 1 - j : w - 1 - j + m]
        mwi = acc / w
        if w > 1:
            self._s_hist = se[-(w - 1) :]

        self._raw = np.concatenate([self._raw, x])
        self._dabs = np.concatenate([self._dabs, np.abs(d)])
        self._n += m

        out: list[PeakAnnotation] = []
        self._track_learning(mwi, a)

        me = np.concatenate([self._m_tail, mwi])
        mid = me[1:-1]
        hits = np.nonzero((me[:-2] < mid) & (mid >= me[2:]))[0]
        for p in hits:
            i = a - 1 + int(p)
            self._unconfirmed.append(self._make_candidate(i, float(mid[p])))
        self._m_tail = me[-2:]
        self._mbuf = np.concatenate([self._mbuf, mwi])

        L = self.lookahead
        while self._unconfirmed and self._unconfirmed[0].index + L <= self._n - 1:
            cand = self._unconfirmed.popleft()
            if not self._dominates(cand):
                continue
            if self._learned:
                self._decide(cand, cand.index + L, out)
            else:
                self._pending.append(cand)

        if not self._learned and self._learn_start is not None:
            end = self._learn_start + self.learn_len - 1
            if self._n - 1 >= end:
                self._finish_learning(end, out)

        trim = len(self._raw) - self._keep
        if trim > 0:
            self._raw = self._raw[trim:]
            self._dabs = self._dabs[trim:]
            self._buf_start += trim
        keep_from = (self._unconfirmed[0].index if self._unconfirmed else self._n) - L
        trim = keep_from - self._mbuf_start
        if trim > 0:
            self._mbuf = self._mbuf[trim:]
            self._mbuf_start += trim
        return out

    def _dominates(self, cand: _Candidate) -> bool:
        """True if ``cand`` beats every earlier and ties-or-beats every later
        integrator sample within one lookahead span."""
        i, L = cand.index, self.lookahead
        k = i - self._mbuf_start
        before = self._mbuf[max(k - L, 0) : k]
        after = self._mbuf[k + 1 : k + L + 1]
        return bool((before < cand.value).all() and (after <= cand.value).all())

    # -- internals -----------------------------------------------------

    def _track_learning(self, mwi: np.ndarray, a: int) -> None:
        if self._learned:
            return
        if self._learn_start is None:
            nz = np.nonzero(mwi)[0]
            if nz.size == 0:
                return
            self._learn_start = a + int(nz[0])
        lo = max(self._learn_start - a, 0)
        hi = min(self._learn_start + self.learn_len - a, mwi.size)
        if hi > lo:
            self._learn_vals.append(mwi[lo:hi])

    def _finish_learning(self, decided_at: int, out: list[PeakAnnotation]) -> None:
        vals = np.concatenate(self._learn_vals)
        self.spki = float(vals.max())
        self.npki = 0.5 * float(vals.mean())
        self._update_thresholds()
        self._learned = True
        self._learn_vals = []
        pending, self._pending = self._pending, []
        for cand in pending:
            self._decide(cand, max(cand.index + self.lookahead, decided_at), out)

    def _make_candidate(self, i: int, value: float) -> _Candidate:
        centre = i - self.delay
        lo = max(centre - self.apex_half, self._buf_start, 0)
        hi = min(centre + self.apex_half, i)
        if hi < lo:
            lo = hi = max(min(centre, i), self._buf_start)
        seg = self._raw[lo - self._buf_start : hi - self._buf_start + 1]
        k = int(np.argmax(seg))
        apex = lo + k
        s_lo = max(i - self.window + 1, self._buf_start)
        slope = float(self._dabs[s_lo - self._buf_start : i - self._buf_start + 1].max())
        return _Candidate(i, value, apex, float(seg[k]), slope)

    def _update_thresholds(self) -> None:
        self.thr1 = self.npki + THRESHOLD_FRACTION * (self.spki - self.npki)
        self.thr2 = 0.5 * self.thr1

    def _accept(self, cand: _Candidate, decided_at: int, searchback: bool, out: list[PeakAnnotation]) -> None:
        ref = self.spki
        if searchback:
            self.spki = 0.25 * cand.value + 0.75 * self.spki
        else:
            self.spki = PEAK_ALPHA * cand.value + (1 - PEAK_ALPHA) * self.spki
        if self._last_apex is not None:
            self._rr.append(cand.apex - self._last_apex)
        self._last_apex = cand.apex
        self._last_slope = cand.slope
        self._since_qrs = []
        self._update_thresholds()
        conf = 1.0 if ref <= 0 else min(1.0, cand.value / ref)
        out.append(PeakAnnotation(self.t0 + cand.apex / self.fs, cand.amplitude, conf, cand.apex, decided_at))

    def _noise(self, cand: _Candidate) -> None:
        self.npki = PEAK_ALPHA * cand.value + (1 - PEAK_ALPHA) * self.npki
        self._update_thresholds()
        self._since_qrs.append(cand)

    def _decide(self, cand: _Candidate, decided_at: int, out: list[PeakAnnotation]) -> None:
        last = self._last_apex
        if last is not None and self._rr:
            rr_avg = sum(self._rr) / len(self._rr)
            if cand.apex - last > SEARCHBACK_FACTOR * rr_avg:
                eligible = [
                    c
                    for c in self._since_qrs
                    if c.value > self.thr2 and c.apex - last >= self.refractory and cand.apex - c.apex >= self.refractory
                ]
                if eligible:
                    best = max(eligible, key=lambda c: c.value)
                    self._accept(best, decided_at, True, out)
                    last = self._last_apex

        if last is not None and cand.apex - last < self.refractory:
            return
        if cand.value > self.thr1:
            if last is not None and cand.apex - last < self.t_wave and cand.slope < 0.5 * self._last_slope:
                self._noise(cand)
            else:
                self._accept(cand, decided_at, False, out)
        else:
            self._noise(cand)


def detect_peaks(mv: Sequence[float], fs: float, t0: float = 0.0) -> list[PeakAnnotation]:
    """One-shot detection over a whole millivolt trace."""
    return QrsDetector(fs, t0).feed(mv)


# -- vitals ------------------------------------------------------------


@dataclass(frozen=True)
class RrStats:
    n: int
    mean: float | None
    sdnn: float | None
    rmssd: float | None


def rr_stats(peak_times: Sequence[float], last: int = RR_WINDOW) -> RrStats:
    """RR statistics over the trailing ``last`` intervals."""
    t = np.asarray(peak_times, dtype=float)[-(last + 1) :]
    rr = np.diff(t)
    if rr.size == 0:
        return RrStats(0, None, None, None)
    mean = float(rr.mean())
    sdnn = float(rr.std(ddof=1)) if rr.size >= 2 else None
    rmssd = float(np.sqrt(np.mean(np.diff(rr) ** 2))) if rr.size >= 2 else None
    return RrStats(int(rr.size), mean, sdnn, rmssd)


def heart_rate(peaks: Sequence[PeakAnnotation | float]) -> float | None:
    """Beats per minute from the trailing 8 RR intervals; None with fewer than 2 peaks."""
    times = [p.t if isinstance(p, PeakAnnotation) else float(p) for p in peaks]
    stats = rr_stats(times)
    if stats.mean is None:
        return None
    return 60.0 / stats.mean


def classify(bpm: float | None, stats: RrStats, lead_ok: bool = True) -> str:
    if not lead_ok or stats.n < 2 or bpm is None:
        return "indeterminate"
    if stats.rmssd / stats.mean >= IRREGULAR_RATIO:
        return "irregular"
    if bpm > TACHY_BPM:
        return "tachycardia"
    if bpm < BRADY_BPM:
        return "bradycardia"
    return "normal_sinus"


@dataclass(frozen=True)
class VitalsSnapshot:
    device_id: str
    t: float  # window end, s since epoch
    bpm: float | None
    rr_mean: float | None
    rr_sdnn: float | None
    rr_rmssd: float | None
    n_rr: int
    rhythm: str
    temperature_c: float | None = None
    alcohol_level: float | None = None
    lead_ok: bool = True

    def to_record(self) -> dict:
        return {
            "device_id": self.device_id,
            "t": self.t,
            "bpm": self.bpm,
            "rr_mean": self.rr_mean,
            "rr_sdnn": self.rr_sdnn,
            "rr_rmssd": self.rr_rmssd,
            "n_rr": self.n_rr,
            "rhythm": self.rhythm,
            "temperature_c": self.temperature_c,
            "alcohol_level": self.alcohol_level,
            "lead_ok": self.lead_ok,
        }


def make_snapshot(
    device_id: str,
    t: float,
    peak_times: Sequence[float],
    lead_ok: bool = True,
    temperature_c: float | None = None,
    alcohol_level: float | None = None,
) -> VitalsSnapshot:
    stats = rr_stats(peak_times)
    bpm = None if stats.mean is None else 60.0 / stats.mean
    return VitalsSnapshot(
        device_id=device_id,
        t=t,
        bpm=bpm,
        rr_mean=stats.mean,
        rr_sdnn=stats.sdnn,
        rr_rmssd=stats.rmssd,
        n_rr=stats.n,
        rhythm=classify(bpm, stats, lead_ok),
        temperature_c=temperature_c,
        alcohol_level=alcohol_level,
        lead_ok=lead_ok,
    )


@dataclass
class VitalsPipeline:
    """Per-device analysis: ADC batches in, peaks and periodic vitals snapshots out.

    A time discontinuity between batches (or a lead-off batch) restarts the
    detector and forgets previous peaks, so RR intervals never span a gap.
    Snapshots fall on a grid of ``snapshot_every`` seconds from the start of
    each continuous run and only see peaks the detector had committed to by
    that sample.
    """

    device_id: str
    fs: float
    cfg: DeviceConfig | None = None
    snapshot_every: float = 1.0
    hr_window_s: float = 15.0
    keep_peaks: bool = False
    peaks: list[PeakAnnotation] = field(default_factory=list)
    snapshots_emitted: int = 0

    def __post_init__(self):
        self.cfg = self.cfg or DeviceConfig(fs=int(self.fs))
        self._every = max(1, int(round(self.snapshot_every * self.fs)))
        self._origin_us: int | None = None
        self._n = 0
        self._det: QrsDetector | None = None
        self._det_offset = 0
        self._recent: deque[PeakAnnotation] = deque()
        self._meta = (True, None, None)

    def _t(self, index: int) -> float:
        return self._origin_us / 1e6 + index / self.fs

    def _expected_us(self) -> int:
        return self._origin_us + int(round(self._n * 1e6 / self.fs))

    def _restart(self, t_start_us: int) -> None:
        self._origin_us = t_start_us
        self._n = 0
        self._det = None
        self._recent.clear()

    def feed_frame(self, frame) -> list[VitalsSnapshot]:
        return self.feed(
            frame.samples,
            frame.t_start_us,
            lead_ok=not frame.lead_off,
            temperature_c=frame.temp_centi_c / 100.0,
            alcohol_level=frame.alcohol_permille / 1000.0,
        )

    def feed(
        self,
        codes: Sequence[int],
        t_start_us: int,
        lead_ok: bool = True,
        temperature_c: float | None = None,
        alcohol_level: float | None = None,
    ) -> list[VitalsSnapshot]:
        m = len(codes)
        if self._origin_us is None or abs(t_start_us - self._expected_us()) > 0.5e6 / self.fs:
            self._restart(t_start_us)
        a = self._n
        self._meta = (lead_ok, temperature_c, alcohol_level)
        new: list[PeakAnnotation] = []
        if not lead_ok:
            self._det = None
            self._recent.clear()
        elif m:
            if self._det is None:
                self._det = QrsDetector(self.fs, t0=0.0)
                self._det_offset = a
            mv = codes_to_mv(np.asarray(codes, dtype=float), self.cfg)
            off = self._det_offset
            for p in self._det.feed(mv):
                idx = p.index + off
                new.append(PeakAnnotation(self._t(idx), p.amplitude, p.confidence, idx, p.decided_at + off))
        self._n += m
        if self.keep_peaks:
            self.peaks.extend(new)

        snaps = []
        pending = deque(new)
        first = (a // self._every + 1) * self._every
        for b in range(first, self._n + 1, self._every):
            while pending and pending[0].decided_at <= b - 1:
                self._recent.append(pending.popleft())
            snaps.append(self._snapshot(b))
        self._recent.extend(pending)
        return snaps

    def _snapshot(self, b: int) -> VitalsSnapshot:
        t = self._t(b)
        while self._recent and self._recent[0].t < t - self.hr_window_s:
            self._recent.popleft()
        lead_ok, temp, alcohol = self._meta
        self.snapshots_emitted += 1
        return make_snapshot(self.device_id, t, [p.t for p in self._recent], lead_ok, temp, alcohol)

    def finish(self) -> VitalsSnapshot | None:
        """Snapshot at the end of the data seen so far (all committed peaks)."""
        if self._origin_us is None:
            return None
        return self._snapshot(self._n)


def dominant_rhythm(snapshots: Iterable[VitalsSnapshot]) -> str:
    """Most frequent determinate rhythm label (ties broken by first occurrence)."""
    counts: dict[str, int] = {}
    for s in snapshots:
        if s.rhythm != "indeterminate":
            counts[s.rhythm] = counts.get(s.rhythm, 0) + 1
    if not counts:
        return "indeterminate"
    return max(counts, key=lambda k: counts[k])
