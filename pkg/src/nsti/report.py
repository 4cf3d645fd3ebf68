"""Write experiment reports as canonical JSON, flat CSV and line-plot SVG."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .errors import UsageError

FORMATS = ("json", "csv", "svg")
CSV_COLUMNS = ("experiment", "condition", "split", "seed", "recording_id", "source_id",
               "ref_len", "substitutions", "insertions", "deletions", "wer", "blank_ratio")
PLOTTED = ("epoch_curve", "duration_sweep")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def to_csv(report: dict) -> str:
    """One line per (condition, split, seed, recording)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in report["rows"]:
        for run in row.get("runs", []):
            for rec in run.get("recordings", []):
                w.writerow({"experiment": report["experiment"], "condition": row["condition"],
                            "split": row["split"], "seed": run["seed"], **rec})
    return buf.getvalue()


def _series(report: dict) -> tuple[list, dict[str, list[float]]]:
    if report["experiment"] == "epoch_curve":
        epochs = report["extra"]["epochs"]
        x = [e["epoch"] for e in epochs]
        names = ("wer", "substitution_rate", "insertion_rate", "deletion_rate")
        return x, {n: [e[n]["mean"] for e in epochs] for n in names}
    if report["experiment"] == "duration_sweep":
        extra = report["extra"]
        return extra["x"], dict(extra["series"])
    raise UsageError(f"no plot defined for {report['experiment']!r}")


def to_svg(report: dict, width: int = 480, height: int = 320, pad: int = 40) -> str:
    """Line plot with one polyline per metric series."""
    x, series = _series(report)
    n = len(x)
    values = [v for vs in series.values() for v in vs]
    lo, hi = min(values + [0.0]), max(values + [1e-9])
    span = hi - lo or 1.0
    palette = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")

    def px(i):
        return pad + (width - 2 * pad) * (i / (n - 1) if n > 1 else 0.5)

    def py(v):
        return height - pad - (height - 2 * pad) * (v - lo) / span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<title>{report["experiment"]}</title>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for i, label in enumerate(x):
        parts.append(f'<text x="{px(i):.1f}" y="{height - pad + 14}" font-size="10" '
                     f'text-anchor="middle">{label}</text>')
    for k, (name, vs) in enumerate(series.items()):
        colour = palette[k % len(palette)]
        pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(vs))
        parts.append(f'<polyline data-series="{name}" fill="none" stroke="{colour}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 12 * k}" font-size="10" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit(report, out_dir, formats=("json", "csv")) -> list[Path]:
    """Write ``report`` (an ExperimentReport or its dict) into ``out_dir``.

    Returns the paths written. The timing sidecar is written whenever the
    report carries timing.
    """
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise UsageError(f"unknown output format(s) {bad}; expected a subset of {FORMATS}")
    timing = getattr(report, "timing", None)
    if hasattr(report, "to_dict"):
        name = report.name
        data = report.to_dict()
    else:
        name, data = report["experiment"], report
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    planned = [f for f in formats if f != "svg" or name in PLOTTED]
    data = {**data, "artifacts": sorted(f"{name}.{f}" for f in planned)}
    if hasattr(report, "artifacts"):
        report.artifacts = data["artifacts"]
    written = []
    for fmt in planned:
        path = out / f"{name}.{fmt}"
        text = {"json": canonical_json, "csv": to_csv, "svg": to_svg}[fmt](data)
        path.write_text(text)
        written.append(path)
    if timing:
        path = out / f"{name}.timing.json"
        path.write_text(canonical_json(timing))
        written.append(path)
    return written
