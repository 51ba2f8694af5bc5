import re

import numpy as np
import pytest

from hemosurv.device import DeviceConfig, Scenario, run_device
from hemosurv.ecg_synth import RhythmPlan, generate
from hemosurv.plotting import analyse_window, render_sidecar, render_svg, write_plot
from hemosurv.store import EcgSampleBatch

FS = 250


def _batches(bpm=72.0, duration=10.0):
    cfg = DeviceConfig(device_id=bytes(7) + b"\x07")
    frames, _ = run_device(cfg, Scenario(generate(duration, FS, RhythmPlan(bpm))), duration, 0)
    return [EcgSampleBatch.from_frame(f) for f in frames]


def test_counts_match_samples_and_detections():
    win = analyse_window("07", _batches())
    svg = render_svg(win)
    assert svg.count("<circle") == len(win.peaks) > 0
    (points,) = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(points.split()) == len(win.times_s) == 10 * FS
    assert 'stroke="#d62728"' in svg and 'fill="#1f4fd6"' in svg


def test_rendering_is_deterministic():
    a = render_svg(analyse_window("07", _batches()))
    b = render_svg(analyse_window("07", _batches()))
    assert a == b


def test_sidecar_matches_pipeline(tmp_path):
    win = analyse_window("07", _batches(bpm=60.0, duration=20.0))
    svg, side = write_plot(win, tmp_path / "out" / "p.svg")
    lines = side.read_text().splitlines()
    assert lines[0] == "device 07"
    assert float(lines[1].split()[1]) == win.bpm == pytest.approx(60.0, abs=0.5)
    assert len([ln for ln in lines if ln.startswith("peak ")]) == len(win.peaks)
    assert svg.read_text() == render_svg(win)
    assert side.read_text() == render_sidecar(win)


def test_peaks_line_up_with_r_waves():
    win = analyse_window("07", _batches())
    for p in win.peaks:
        k = int(np.argmin(np.abs(win.times_s - p.t)))
        assert win.mv[k] > 0.8  # R amplitude is 1.2 mV


def test_empty_window():
    win = analyse_window("07", [])
    assert win.bpm is None and win.peaks == []
    with pytest.raises(ValueError):
        render_svg(win)
