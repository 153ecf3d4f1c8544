"""Dependency-free writers: binary PGM, SVG scatter/bar plots, CSV and key=value text."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

SVG_SIZE = 400
SVG_PAD = 20
CLASS_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd",
                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
BOUNDARY_COLOR = "#1f3fbf"


def quantize(image):
    """Clip to [0, 1] and map to bytes, rounding half away from zero."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def emit_pgm(image, path):
    """Write a 2D (or 1 x H x W) grayscale image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a single-channel 2D image, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _fmt(v):
    return f"{v:.3f}"


class _Frame:
    """Affine map from data coordinates to the fixed SVG viewBox (y up)."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) if len(points) else np.zeros((1, 2))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        self.lo = lo
        self.scale = (SVG_SIZE - 2 * SVG_PAD) / span.max()

    def __call__(self, p):
        x = SVG_PAD + (p[0] - self.lo[0]) * self.scale
        y = SVG_SIZE - SVG_PAD - (p[1] - self.lo[1]) * self.scale
        return x, y


def svg_scatter(point_sets, polyline=None, title=None):
    """SVG text: one ``circle`` per point and at most one ``polyline``.

    ``point_sets`` is a list of ``(points, color)`` pairs with ``N x 2`` points.
    """
    polyline = np.asarray(polyline if polyline is not None else np.zeros((0, 2)), dtype=np.float64)
    everything = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p, _ in point_sets] + [polyline.reshape(-1, 2)]
    frame = _Frame(np.concatenate(everything) if sum(len(e) for e in everything) else [])
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
           f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
           f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>']
    if title:
        out.append(f'<text x="{SVG_PAD}" y="14" font-size="12" font-family="sans-serif">{title}</text>')
    for pts, color in point_sets:
        for p in np.asarray(pts, dtype=np.float64).reshape(-1, 2):
            x, y = frame(p)
            out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="2" fill="{color}" fill-opacity="0.6"/>')
    if len(polyline):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (frame(p) for p in polyline))
        out.append(f'<polyline points="{coords}" fill="none" stroke="{BOUNDARY_COLOR}" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg_scatter(point_sets, polyline, path, title=None):
    Path(path).write_text(svg_scatter(point_sets, polyline, title))


def emit_svg_bars(values, path, labels=None, title=None):
    """Vertical bar chart of nonnegative ``values``."""
    values = np.asarray(values, dtype=np.float64)
    labels = labels if labels is not None else [str(i) for i in range(len(values))]
    top = values.max() if len(values) and values.max() > 0 else 1.0
    inner = SVG_SIZE - 2 * SVG_PAD
    bw = inner / max(len(values), 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" '
           f'viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
           f'<rect x="0" y="0" width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>']
    if title:
        out.append(f'<text x="{SVG_PAD}" y="14" font-size="12" font-family="sans-serif">{title}</text>')
    for i, (v, lab) in enumerate(zip(values, labels)):
        h = (inner - 20) * v / top
        x = SVG_PAD + i * bw + 0.1 * bw
        y = SVG_SIZE - SVG_PAD - 14 - h
        out.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(0.8 * bw)}" height="{_fmt(h)}" fill="{CLASS_COLORS[2]}"/>')
        out.append(f'<text x="{_fmt(x + 0.4 * bw)}" y="{SVG_SIZE - SVG_PAD}" font-size="10" '
                   f'text-anchor="middle" font-family="sans-serif">{lab}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def emit_csv(rows, path, header=None):
    """Write dict rows (or sequences with ``header``) as CSV with a header row."""
    rows = list(rows)
    if header is None:
        if not rows or not isinstance(rows[0], dict):
            raise ValueError("emit_csv needs a header for non-dict rows")
        header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            vals = [r[k] for k in header] if isinstance(r, dict) else list(r)
            w.writerow([_cell(v) for v in vals])


def write_kv(items, path):
    """``key=value`` lines in the given order."""
    lines = [f"{k}={_cell(v)}" for k, v in items]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path):
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
