"""Per-device stage timelines as JSON or a Gantt-style SVG."""

from __future__ import annotations

import json
from xml.sax.saxutils import escape

from .errors import BadInput
from .oracle import CostBreakdown

PX_PER_MS = 10.0
ROW_H = 24
ROW_GAP = 8
LEFT = 70
TOP = 20

PHASE_COLORS = {
    "fwd_comp": "#4e79a7",
    "fwd_comm": "#f28e2b",
    "bwd_comm": "#e15759",
    "bwd_comp": "#59a14f",
}


def trace_json(b: CostBreakdown) -> str:
    return json.dumps(b.trace_dict(), sort_keys=True, indent=2)


def trace_svg(b: CostBreakdown, px_per_ms: float = PX_PER_MS) -> str:
    width = LEFT + b.overall_ms * px_per_ms + 20
    height = TOP + b.num_devices * (ROW_H + ROW_GAP) + 20
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.3f}" height="{height}" '
        f'viewBox="0 0 {width:.3f} {height}">',
        f'<text x="4" y="14" font-size="12">overall {b.overall_ms:.3f} ms</text>',
    ]
    for d in range(b.num_devices):
        y = TOP + d * (ROW_H + ROW_GAP)
        lines.append(f'<text x="4" y="{y + ROW_H * 0.7:.1f}" font-size="12">dev {d}</text>')
    for e in b.events:
        y = TOP + e.device * (ROW_H + ROW_GAP)
        x = LEFT + e.start_ms * px_per_ms
        w = e.dur_ms * px_per_ms
        color = PHASE_COLORS.get(e.phase, "#999999")
        lines.append(
            f'<rect x="{x:.3f}" y="{y}" width="{w:.3f}" height="{ROW_H}" fill="{color}" '
            f'data-device="{e.device}" data-phase="{escape(e.phase)}">'
            f"<title>{escape(e.phase)} {e.dur_ms:.3f} ms</title></rect>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_trace(b: CostBreakdown, fmt: str = "json", path=None) -> str:
    if fmt == "json":
        text = trace_json(b)
    elif fmt == "svg":
        text = trace_svg(b)
    else:
        raise BadInput(f"unknown trace format {fmt!r}")
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text
