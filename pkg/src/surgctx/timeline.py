"""SVG timelines of gesture and context transcripts.

Output is plain SVG 1.1 with fixed formatting, so identical inputs render to
identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

from .trial_io import CSV_STATE_NAMES, ContextFrame, GestureTranscript

# qualitative palette; gestures index it by number, state values by value
PALETTE = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#a6761d",
]

LABEL_W = 140
BAND_H = 22
BAND_GAP = 8
PLOT_W = 800
MARGIN = 10
AXIS_H = 30


@dataclass(frozen=True)
class Span:
    start_s: float
    end_s: float
    label: str


@dataclass
class Band:
    name: str
    spans: list[Span]


def color(label: str) -> str:
    if label.startswith("G") and label[1:].isdigit():
        return PALETTE[(int(label[1:]) - 1) % len(PALETTE)]
    if label.isdigit():
        return PALETTE[int(label) % len(PALETTE)]
    return PALETTE[sum(label.encode()) % len(PALETTE)]


def gesture_band(name: str, t: GestureTranscript, frame_rate_hz: float = 30.0) -> Band:
    """Segments are inclusive frame ranges; frame ``f`` spans ``[f, f+1)/rate``."""
    return Band(name, [Span(s.start / frame_rate_hz, (s.end + 1) / frame_rate_hz, s.label) for s in t.segments])


def context_bands(name: str, frames: Sequence[ContextFrame], sample_rate_hz: float = 3.0) -> list[Band]:
    """One band per state variable, runs of equal value merged."""
    bands = []
    for i, var in enumerate(CSV_STATE_NAMES):
        spans: list[Span] = []
        k = 0
        while k < len(frames):
            j = k
            while j < len(frames) and frames[j].values[i] == frames[k].values[i]:
                j += 1
            spans.append(Span(k / sample_rate_hz, j / sample_rate_hz, str(frames[k].values[i])))
            k = j
        bands.append(Band(f"{name} {var}", spans))
    return bands


def _tick_step(duration: float) -> float:
    """A 1/2/5 x 10^k step giving at most ~10 ticks."""
    if duration <= 0:
        return 1.0
    raw = duration / 10
    base = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if m * base >= raw:
            return m * base
    return 10 * base


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_svg(bands: Sequence[Band], duration_s: float | None = None, title: str = "") -> str:
    end = max((s.end_s for b in bands for s in b.spans), default=0.0)
    duration = max(duration_s or 0.0, end)
    scale = PLOT_W / duration if duration > 0 else 0.0
    top = MARGIN + (20 if title else 0)
    plot_h = len(bands) * (BAND_H + BAND_GAP)
    width = LABEL_W + PLOT_W + 2 * MARGIN
    height = top + plot_h + AXIS_H + MARGIN
    x0 = MARGIN + LABEL_W

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
    ]
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN + 12}" font-size="13">{escape(title)}</text>')
    for i, band in enumerate(bands):
        y = top + i * (BAND_H + BAND_GAP)
        out.append(f'<g class="band" data-name="{escape(band.name)}">')
        out.append(f'<text x="{MARGIN}" y="{_num(y + BAND_H * 0.7)}">{escape(band.name)}</text>')
        for s in band.spans:
            x = x0 + s.start_s * scale
            w = (s.end_s - s.start_s) * scale
            out.append(
                f'<rect class="seg" x="{_num(x)}" y="{y}" width="{_num(w)}" height="{BAND_H}" '
                f'fill="{color(s.label)}"><title>{escape(s.label)} '
                f'{_num(s.start_s)}-{_num(s.end_s)} s</title></rect>'
            )
        out.append("</g>")

    axis_y = top + plot_h
    out.append(f'<line x1="{x0}" y1="{axis_y}" x2="{x0 + PLOT_W}" y2="{axis_y}" stroke="#333"/>')
    step = _tick_step(duration)
    n_ticks = int(math.floor(duration / step + 1e-9)) if duration > 0 else 0
    for k in range(n_ticks + 1):
        t = k * step
        x = x0 + t * scale
        out.append(f'<line x1="{_num(x)}" y1="{axis_y}" x2="{_num(x)}" y2="{axis_y + 4}" stroke="#333"/>')
        out.append(f'<text x="{_num(x)}" y="{axis_y + 16}" text-anchor="middle">{_num(t)}</text>')
    out.append(f'<text x="{x0 + PLOT_W}" y="{axis_y + 28}" text-anchor="end">time (s)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
