"""Output formatting shared by the command-line tools."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math

from . import __version__
from ._rng import RNG_ALGORITHM


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(seed, config: dict) -> dict:
    return {
        "tool": f"clusterate {__version__}",
        "rng": RNG_ALGORITHM,
        "seed": "none" if seed is None else str(seed),
        "config": config_digest(config),
    }


def provenance_line(prov: dict) -> str:
    return f"# {prov['tool']} rng={prov['rng']} seed={prov['seed']} config={prov['config']}"


def fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return str(x).lower() if x is not None else ""
    if isinstance(x, (int,)):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.10g}"
    return str(x)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return fmt(x)
    return x


def render(columns, rows, form: str, prov: dict) -> str:
    """Render ``rows`` (dicts) as an aligned table, CSV or JSON, provenance first."""
    if form == "json":
        body = {"provenance": prov, "rows": [{c: _jsonable(r.get(c)) for c in columns} for r in rows]}
        return json.dumps(body, indent=2) + "\n"
    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    if form == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(columns)
        wr.writerows(cells)
        return provenance_line(prov) + "\n" + buf.getvalue()
    widths = [max(len(c), *(len(row[k]) for row in cells)) if cells else len(c) for k, c in enumerate(columns)]
    lines = [provenance_line(prov), "  ".join(c.ljust(wd) for c, wd in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.rjust(wd) for v, wd in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"
