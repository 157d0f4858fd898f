"""Artifact writers: per-trial CSV, JSON summaries and SVG box plots.

Floats are written with ``%.17g`` so a CSV round-trips exactly and two runs
with the same seed produce identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .montecarlo import TrialRecord


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _vec(a) -> str:
    return " ".join(fmt(v) for v in np.ravel(a))


def records_csv(records: list[TrialRecord]) -> str:
    """One row per trial; trajectories are space-separated, row-major."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    extra = sorted({k for r in records for k, v in r.diagnostics.items() if np.isscalar(v)})
    w.writerow(["trial", "policy", "total", "failed", *extra, "states", "inputs", "measurements"])
    for r in records:
        w.writerow([r.trial, r.policy, fmt(r.total), fmt(r.failed),
                    *[fmt(r.diagnostics.get(k, "")) for k in extra],
                    _vec(r.states), _vec(r.inputs), _vec(r.measurements)])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def box_stats(values) -> dict:
    v = np.sort(np.asarray(values, float))
    v = v[np.isfinite(v)]
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {"q1": q1, "median": med, "q3": q3, "whisker_lo": lo, "whisker_hi": hi,
            "outliers": v[(v < lo) | (v > hi)], "mean": v.mean()}


def box_plot_svg(groups: dict, title: str = "", ylabel: str = "", width: int = 520, height: int = 360) -> str:
    """Minimal SVG box plot, one box per entry of ``groups`` (label -> values)."""
    stats = {k: box_stats(v) for k, v in groups.items() if np.size(v)}
    allv = np.concatenate([np.ravel(np.asarray(v, float)) for v in groups.values() if np.size(v)] or [[0.0, 1.0]])
    allv = allv[np.isfinite(allv)]
    lo, hi = float(allv.min()), float(allv.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    left, right, top, bottom = 70, 20, 40, 50
    ph = height - top - bottom

    def y(v):
        return top + ph * (hi - v) / (hi - lo)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for tick in np.linspace(lo + pad, hi - pad, 5):
        out.append(f'<line x1="{left - 4}" y1="{y(tick):.2f}" x2="{left}" y2="{y(tick):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y(tick) + 4:.2f}" text-anchor="end">{tick:.3g}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{top + ph / 2:.1f}" transform="rotate(-90 16 {top + ph / 2:.1f})" '
                   f'text-anchor="middle">{escape(ylabel)}</text>')
    n = max(len(stats), 1)
    slot = (width - left - right) / n
    for i, (label, s) in enumerate(stats.items()):
        cx = left + slot * (i + 0.5)
        bw = min(60.0, slot * 0.5)
        x0, x1 = cx - bw / 2, cx + bw / 2
        out += [f'<line x1="{cx:.2f}" y1="{y(s["whisker_lo"]):.2f}" x2="{cx:.2f}" y2="{y(s["q1"]):.2f}" stroke="black"/>',
                f'<line x1="{cx:.2f}" y1="{y(s["q3"]):.2f}" x2="{cx:.2f}" y2="{y(s["whisker_hi"]):.2f}" stroke="black"/>',
                f'<rect x="{x0:.2f}" y="{y(s["q3"]):.2f}" width="{bw:.2f}" '
                f'height="{max(y(s["q1"]) - y(s["q3"]), 0.5):.2f}" fill="#9ecae1" stroke="black"/>',
                f'<line x1="{x0:.2f}" y1="{y(s["median"]):.2f}" x2="{x1:.2f}" y2="{y(s["median"]):.2f}" '
                f'stroke="black" stroke-width="2"/>',
                f'<circle cx="{cx:.2f}" cy="{y(s["mean"]):.2f}" r="3" fill="#d62728"/>']
        for v in s["outliers"]:
            out.append(f'<circle cx="{cx:.2f}" cy="{y(v):.2f}" r="2" fill="none" stroke="gray"/>')
        out.append(f'<text x="{cx:.2f}" y="{height - bottom + 18}" text-anchor="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def totals_by_policy(records: list[TrialRecord], **match) -> dict:
    out: dict = {}
    for r in records:
        if all(r.diagnostics.get(k) == v for k, v in match.items()):
            out.setdefault(r.policy, []).append(r.total)
    return out
