"""CSV emission for outer traces."""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__
from .outer import OuterTrace

HEADER = "outer_iter,phi_K,hypergrad_g_norm,fp_residual_g_lb,inner_K,wall_ms"
FLOAT_FORMAT = "%.17g"


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def render_metrics(trace: OuterTrace) -> str:
    lines = []
    prov = {"artifact_version": __version__, "float_format": FLOAT_FORMAT}
    prov.update(trace.provenance)
    for key in sorted(prov):
        val = prov[key]
        if not isinstance(val, str):
            val = json.dumps(val, sort_keys=True, separators=(",", ":"))
        lines.append(f"# {key}: {val}")
    lines.append(HEADER)
    for r in trace.rows:
        lines.append(",".join([
            str(int(r.outer_iter)),
            _fmt(r.phi_K),
            _fmt(r.hypergrad_g_norm),
            _fmt(r.fp_residual_g_lb),
            str(int(r.inner_K)),
            _fmt(r.wall_ms),
        ]))
    return "\n".join(lines) + "\n"


def emit_metrics(trace: OuterTrace, path) -> Path:
    path = Path(path)
    path.write_text(render_metrics(trace))
    return path


def emit_inner_residuals(trace: OuterTrace, path) -> Path:
    path = Path(path)
    lines = ["outer_iter,k,fp_residual_g_lb"]
    for t, res in enumerate(trace.inner_residuals, start=1):
        lines += [f"{t},{k},{_fmt(r)}" for k, r in enumerate(res)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Parse a metrics CSV back into (provenance, rows)."""
    prov, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition(": ")
            prov[key] = val
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append(dict(zip(header, line.split(","))))
    return prov, rows
