"""Minimal standalone SVG plots (no plotting dependency, byte-stable output)."""

from __future__ import annotations

import time
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError

_WIDTH, _HEIGHT = 640, 480
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 72, 24, 48, 56
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ConfigError("plot data must be finite")
    if hi <= lo:
        pad = 1.0 if lo == 0 else abs(lo) * 0.1
        return lo - pad, lo + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _header(title: str, deterministic: bool) -> list[str]:
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
    ]
    if not deterministic:
        parts.append(f"<!-- generated {time.strftime('%Y-%m-%dT%H:%M:%S')} -->")
    parts.append(f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>')
    parts.append(
        f'<text x="{_WIDTH / 2}" y="24" font-family="sans-serif" font-size="16" '
        f'text-anchor="middle">{escape(title)}</text>')
    return parts


def _axes(x0: float, x1: float, y0: float, y1: float,
          xlabel: str, ylabel: str) -> list[str]:
    left, right = _MARGIN_L, _WIDTH - _MARGIN_R
    top, bottom = _MARGIN_T, _HEIGHT - _MARGIN_B
    parts = [
        f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
        f'<text x="{(left + right) / 2}" y="{_HEIGHT - 12}" font-family="sans-serif" '
        f'font-size="12" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{(top + bottom) / 2}" font-family="sans-serif" font-size="12" '
        f'text-anchor="middle" transform="rotate(-90 16 {(top + bottom) / 2})">'
        f'{escape(ylabel)}</text>',
    ]
    for i in range(5):
        f = i / 4
        xv = x0 + f * (x1 - x0)
        yv = y0 + f * (y1 - y0)
        px = left + f * (right - left)
        py = bottom - f * (bottom - top)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{bottom}" x2="{_fmt(px)}" y2="{bottom + 5}" '
            'stroke="black"/>')
        parts.append(
            f'<text x="{_fmt(px)}" y="{bottom + 18}" font-family="sans-serif" '
            f'font-size="10" text-anchor="middle">{_fmt(xv)}</text>')
        parts.append(
            f'<line x1="{left - 5}" y1="{_fmt(py)}" x2="{left}" y2="{_fmt(py)}" '
            'stroke="black"/>')
        parts.append(
            f'<text x="{left - 8}" y="{_fmt(py + 3)}" font-family="sans-serif" '
            f'font-size="10" text-anchor="end">{_fmt(yv)}</text>')
    return parts


def render_line_plot(
    series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    deterministic: bool = False,
) -> str:
    """A standalone SVG with axes, tick labels, a legend, and one polyline per series."""
    if not series:
        raise ConfigError("need at least one series to plot")
    xs_all = np.concatenate([np.asarray(xs, dtype=float) for _, xs, _ in series])
    ys_all = np.concatenate([np.asarray(ys, dtype=float) for _, _, ys in series])
    if xs_all.size == 0:
        raise ConfigError("series must contain at least one point")
    x0, x1 = _nice_range(float(xs_all.min()), float(xs_all.max()))
    y0, y1 = _nice_range(float(ys_all.min()), float(ys_all.max()))
    left, right = _MARGIN_L, _WIDTH - _MARGIN_R
    top, bottom = _MARGIN_T, _HEIGHT - _MARGIN_B

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * (right - left)

    def py(y: float) -> float:
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    parts = _header(title, deterministic)
    parts += _axes(x0, x1, y0, y1, xlabel, ylabel)
    for si, (label, xs, ys) in enumerate(series):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.shape != ys.shape:
            raise ConfigError(f"series {label!r} has mismatched x/y lengths")
        color = _PALETTE[si % len(_PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(
                f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
        ly = top + 16 + 16 * si
        parts.append(
            f'<line x1="{right - 150}" y1="{ly - 4}" x2="{right - 126}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{right - 120}" y="{ly}" font-family="sans-serif" '
            f'font-size="12">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_bar_plot(
    labels: Sequence[str],
    values: Sequence[float],
    title: str,
    ylabel: str,
    deterministic: bool = False,
) -> str:
    """A standalone SVG bar chart with value labels above the bars."""
    if not labels or len(labels) != len(values):
        raise ConfigError("need equal, non-empty labels and values")
    vals = np.asarray(values, dtype=float)
    y0, y1 = _nice_range(min(0.0, float(vals.min())), float(vals.max()))
    left, right = _MARGIN_L, _WIDTH - _MARGIN_R
    top, bottom = _MARGIN_T, _HEIGHT - _MARGIN_B

    def py(y: float) -> float:
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    parts = _header(title, deterministic)
    parts += _axes(0, len(labels), y0, y1, "", ylabel)
    slot = (right - left) / len(labels)
    for i, (label, v) in enumerate(zip(labels, vals)):
        bx = left + i * slot + slot * 0.2
        bw = slot * 0.6
        by = py(float(v))
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(
            f'<rect x="{_fmt(bx)}" y="{_fmt(min(by, py(0)))}" width="{_fmt(bw)}" '
            f'height="{_fmt(abs(py(0) - by))}" fill="{color}"/>')
        parts.append(
            f'<text x="{_fmt(bx + bw / 2)}" y="{_fmt(by - 6)}" font-family="sans-serif" '
            f'font-size="11" text-anchor="middle">{_fmt(float(v))}</text>')
        parts.append(
            f'<text x="{_fmt(bx + bw / 2)}" y="{bottom + 18}" font-family="sans-serif" '
            f'font-size="11" text-anchor="middle">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
