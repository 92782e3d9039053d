"""Dependency-free SVG emitters: skill curves, RMM phase wheel, Hovmöller and heatmaps.

Every function is a pure function of its numeric input and returns the SVG text.
"""

from __future__ import annotations

import math

import numpy as np

WIDTH, HEIGHT, MARGIN = 640, 420, 50
COLORS = {"raw": "#1f77b4", "corrected": "#d62728", "observed": "#000000"}


def _num(v: float) -> str:
    return f"{v:.2f}"


def _doc(body, width=WIDTH, height=HEIGHT) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _text(x, y, s, size=12, anchor="middle", fill="black"):
    return (f'<text x="{_num(x)}" y="{_num(y)}" font-size="{size}" text-anchor="{anchor}" '
            f'fill="{fill}">{s}</text>')


def _polyline(xs, ys, color, width=2.0, dash=None):
    pts = " ".join(f"{_num(x)},{_num(y)}" for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'


def _scale(lo, hi, a, b):
    span = hi - lo if hi != lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) * (b - a) / span


def skill_curves(leads, cor_raw, cor_corr, significance=None, threshold: float = 0.5,
                 title: str = "Bivariate COR by lead") -> str:
    """COR versus lead for raw and corrected forecasts, with the skill threshold dashed and
    significant leads shaded (light for p90, darker for p95)."""
    leads = np.asarray(leads, dtype=float)
    lo = min(0.0, float(np.nanmin([np.nanmin(cor_raw), np.nanmin(cor_corr)])))
    sx = _scale(leads.min() - 0.5, leads.max() + 0.5, MARGIN, WIDTH - MARGIN)
    sy = _scale(lo, 1.0, HEIGHT - MARGIN, MARGIN)
    body = [_text(WIDTH / 2, 24, title, 14)]
    shade = {"p90": "#fde0c5", "p95": "#f9a66c"}
    for t, s in zip(leads, significance or ()):
        if s in shade:
            x0, x1 = sx(t - 0.5), sx(t + 0.5)
            body.append(f'<rect x="{_num(x0)}" y="{MARGIN}" width="{_num(x1 - x0)}" '
                        f'height="{HEIGHT - 2 * MARGIN}" fill="{shade[s]}"/>')
    body.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
                f'y2="{HEIGHT - MARGIN}" stroke="black"/>')
    body.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>')
    body.append(_polyline([MARGIN, WIDTH - MARGIN], [sy(threshold)] * 2, "#777777", 1, "4,4"))
    body.append(_polyline(sx(leads), sy(cor_raw), COLORS["raw"]))
    body.append(_polyline(sx(leads), sy(cor_corr), COLORS["corrected"]))
    for v in np.linspace(lo, 1.0, 5):
        body.append(_text(MARGIN - 6, float(sy(v)) + 4, f"{v:.2f}", 10, "end"))
    for t in leads[::5]:
        body.append(_text(float(sx(t)), HEIGHT - MARGIN + 16, f"{int(t)}", 10))
    body.append(_text(WIDTH / 2, HEIGHT - 10, "lead (days)", 12))
    body.append(_text(WIDTH - MARGIN, MARGIN - 8, "raw", 11, "end", COLORS["raw"]))
    body.append(_text(WIDTH - MARGIN - 40, MARGIN - 8, "corrected", 11, "end", COLORS["corrected"]))
    return _doc(body)


def phase_wheel(trajectories: dict, radius_max: float = 3.0, title: str = "RMM phase space") -> str:
    """Octant-labelled (RMM1, RMM2) diagram; ``trajectories`` maps a label to (L, 2) arrays.

    Labels starting with a source name in COLORS take that source's colour.
    """
    size = 460
    c = size / 2
    s = (size / 2 - 40) / radius_max
    body = [_text(c, 20, title, 14)]
    body.append(f'<circle cx="{c}" cy="{c}" r="{_num(s)}" fill="none" stroke="#999999"/>')
    for k in range(8):
        ang = math.radians(45 * k)
        x1, y1 = c + s * math.cos(ang), c - s * math.sin(ang)
        x2, y2 = c + s * radius_max * math.cos(ang), c - s * radius_max * math.sin(ang)
        body.append(f'<line x1="{_num(x1)}" y1="{_num(y1)}" x2="{_num(x2)}" y2="{_num(y2)}" stroke="#cccccc"/>')
        mid = math.radians(45 * k + 22.5)
        phase = (k + 4) % 8 + 1
        body.append(_text(c + 0.85 * s * radius_max * math.cos(mid),
                          c - 0.85 * s * radius_max * math.sin(mid) + 4, f"Phase {phase}", 11))
    body.append(_text(size - 30, c - 6, "RMM1", 10))
    body.append(_text(c + 6, 40, "RMM2", 10, "start"))
    for label in sorted(trajectories):
        traj = np.asarray(trajectories[label], dtype=float)
        color = next((v for k, v in COLORS.items() if label.startswith(k)), "#2ca02c")
        body.append(_polyline(c + s * traj[:, 0], c - s * traj[:, 1], color, 1.5))
    return _doc(body, size, size)


def _diverging(v: float, vmax: float) -> str:
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(matrix, title: str = "", xlabel: str = "", ylabel: str = "", vmax=None) -> str:
    """Shaded cells of a 2-D array (rows drawn top to bottom) on a diverging palette."""
    m = np.asarray(matrix, dtype=float)
    n_rows, n_cols = m.shape
    vmax = float(np.nanmax(np.abs(m))) if vmax is None and np.isfinite(m).any() else (vmax or 1.0)
    cw = (WIDTH - 2 * MARGIN) / n_cols
    ch = (HEIGHT - 2 * MARGIN) / n_rows
    body = [_text(WIDTH / 2, 24, title, 14)]
    for i in range(n_rows):
        for j in range(n_cols):
            v = m[i, j]
            fill = "#dddddd" if not np.isfinite(v) else _diverging(v, vmax)
            body.append(f'<rect x="{_num(MARGIN + j * cw)}" y="{_num(MARGIN + i * ch)}" '
                        f'width="{_num(cw + 0.05)}" height="{_num(ch + 0.05)}" fill="{fill}"/>')
    body.append(_text(WIDTH / 2, HEIGHT - 12, xlabel, 12))
    body.append(f'<text x="14" y="{HEIGHT / 2}" font-size="12" text-anchor="middle" '
                f'transform="rotate(-90 14 {HEIGHT / 2})">{ylabel}</text>')
    return _doc(body)


def hovmoller(matrix, title: str = "Hovmöller") -> str:
    """(lead, lon) matrix with lead increasing downwards."""
    return heatmap(matrix, title, "longitude index", "lead (days)")
