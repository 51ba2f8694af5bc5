"""Deterministic SVG rendering of a stored ECG window with R-peak markers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .analysis import PeakAnnotation, VitalsPipeline, VitalsSnapshot
from .device import DeviceConfig, codes_to_mv
from .store import EcgSampleBatch
from .wireproto import FLAG_LO_MINUS, FLAG_LO_PLUS

WIDTH, HEIGHT = 1200, 400
MARGIN = 50
TRACE_COLOR = "#d62728"
PEAK_COLOR = "#1f4fd6"


@dataclass
class WindowAnalysis:
    """Samples of one queried window plus what the detector made of them."""

    device_id: str
    times_s: np.ndarray
    mv: np.ndarray
    peaks: list[PeakAnnotation]
    final: VitalsSnapshot | None
    snapshots: list[VitalsSnapshot] = field(default_factory=list)

    @property
    def bpm(self) -> float | None:
        return None if self.final is None else self.final.bpm


def analyse_window(device_id: str, batches: Sequence[EcgSampleBatch]) -> WindowAnalysis:
    """Run the streaming pipeline over ``batches`` exactly as the service would."""
    times: list[np.ndarray] = []
    mv: list[np.ndarray] = []
    snapshots: list[VitalsSnapshot] = []
    pipe: VitalsPipeline | None = None
    for b in batches:
        if pipe is None:
            pipe = VitalsPipeline(device_id, b.fs, keep_peaks=True)
        cfg = DeviceConfig(fs=int(b.fs))
        idx = np.arange(len(b.codes))
        times.append((b.t_start_us + np.round(idx * 1e6 / b.fs)) / 1e6)
        mv.append(codes_to_mv(np.asarray(b.codes, dtype=float), cfg))
        snapshots += pipe.feed(
            b.codes,
            b.t_start_us,
            lead_ok=not b.flags & (FLAG_LO_PLUS | FLAG_LO_MINUS),
            temperature_c=b.temp_centi_c / 100.0,
            alcohol_level=b.alcohol_permille / 1000.0,
        )
    if pipe is None:
        return WindowAnalysis(device_id, np.empty(0), np.empty(0), [], None)
    return WindowAnalysis(
        device_id, np.concatenate(times), np.concatenate(mv), list(pipe.peaks), pipe.finish(), snapshots
    )


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(win: WindowAnalysis, title: str = "") -> str:
    """One red polyline vertex per sample, one blue circle per detected peak."""
    n = len(win.times_s)
    if n == 0:
        raise ValueError("nothing to plot")
    t0 = float(win.times_s[0])
    span = max(float(win.times_s[-1]) - t0, 1e-9)
    lo, hi = float(np.min(win.mv)), float(np.max(win.mv))
    pad = 0.1 * max(hi - lo, 1e-3)
    lo, hi = lo - pad, hi + pad
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN

    def x(t: float) -> float:
        return MARGIN + (t - t0) / span * plot_w

    def y(v: float) -> float:
        return MARGIN + (hi - v) / (hi - lo) * plot_h

    points = " ".join(f"{_fmt(x(t))},{_fmt(y(v))}" for t, v in zip(win.times_s, win.mv))
    bpm = "--" if win.bpm is None else f"{win.bpm:.1f}"
    heading = title or f"device {win.device_id}"
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{MARGIN}" y="{MARGIN - 20}" font-family="monospace" font-size="14">'
        f"{escape(heading)}  bpm {bpm}  peaks {len(win.peaks)}</text>",
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="#888"/>',
        f'<text x="{MARGIN}" y="{HEIGHT - MARGIN + 30}" font-family="monospace" font-size="11">'
        f"0 s .. {span:.3f} s   {lo:.2f}..{hi:.2f} mV</text>",
        f'<polyline class="ecg" fill="none" stroke="{TRACE_COLOR}" stroke-width="1" points="{points}"/>',
    ]
    times = win.times_s
    for p in win.peaks:
        k = int(np.clip(np.searchsorted(times, p.t - 1e-7), 0, n - 1))
        cx, cy = x(p.t), y(float(win.mv[k]))
        out.append(f'<circle class="peak" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="4" fill="{PEAK_COLOR}"/>')
        out.append(
            f'<text x="{_fmt(cx + 5)}" y="{_fmt(cy - 6)}" font-family="monospace" font-size="9" '
            f'fill="{PEAK_COLOR}">{p.t - t0:.3f}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_sidecar(win: WindowAnalysis) -> str:
    lines = [f"device {win.device_id}", "bpm " + ("none" if win.bpm is None else repr(win.bpm)), f"peaks {len(win.peaks)}"]
    lines += [f"peak {p.t!r}" for p in win.peaks]
    return "\n".join(lines) + "\n"


def write_plot(win: WindowAnalysis, output: str | Path, title: str = "") -> tuple[Path, Path]:
    """Write the SVG and its ``.txt`` annotation sidecar next to it."""
    svg = Path(output)
    svg.parent.mkdir(parents=True, exist_ok=True)
    svg.write_text(render_svg(win, title), encoding="utf-8")
    side = svg.with_suffix(".txt")
    side.write_text(render_sidecar(win), encoding="utf-8")
    return svg, side
