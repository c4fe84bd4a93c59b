"""Report emission: CSV and JSON tables, metadata sidecars, figures.

Every report is flattened into a :class:`Table` (fixed column order, one
row per record). Floats are written with ``repr`` so that both formats
carry the shortest round-tripping decimal; NaN becomes ``nan`` in CSV and
``null`` in JSON.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import __version__  # noqa: E402
from ..small_n import GapTable  # noqa: E402
from .probes import ProbeReport  # noqa: E402
from .study import ConvergenceReport  # noqa: E402

FORMATS = ("csv", "json")


@dataclass
class Table:
    name: str
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _scalar(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _csv_cell(v) -> str:
    v = _scalar(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_csv_cell(x) for x in v)
    return str(v)


def _json_value(v):
    v = _scalar(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (tuple, list, np.ndarray)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    return v


# --------------------------------------------------------------------------
# Report -> Table
# --------------------------------------------------------------------------

def _resolution(cfg: dict) -> dict:
    keys = ("seed", "d", "M", "dt", "dt_sim", "k", "eps", "T", "t0", "replications", "M_delta")
    return {k: cfg.get(k) for k in keys if k in cfg}


def study_table(report: ConvergenceReport) -> Table:
    cols = ["N", "source", "J", "se", "value", "gap", "signed_gap", "rms_gap", "rms_se", "rhs",
            "replications", "mollification_error", "failed", "message"]
    rows = [[getattr(r, c) for c in cols] for r in report.rows]
    summary = {"value": report.value, "picard_iterations": report.picard_iterations,
               "picard_residual": report.picard_residual, "envelope_ok": report.envelope_ok()}
    if report.fit is not None:
        f = report.fit
        summary.update(slope=f.slope, slope_stderr=f.stderr, slope_ci_low=f.ci_low,
                       slope_ci_high=f.ci_high, intercept=f.intercept, fit_points=f.points, C=f.C)
    return Table("study", cols, rows, _resolution(report.config), summary)


def probe_table(report: ProbeReport, cfg: dict | None = None) -> Table:
    cols = ["quantity", "value", "M", "dt", "k", "scale", "pairs"]
    names = ["lipschitz", "semiconcavity", "semiconcavity_min", "fp_stability", "time_lipschitz",
             "holder", "dpp_defect", "duality_defect"]
    rows = [[n, getattr(report, n), report.M, report.dt, report.k, report.scale, report.pairs]
            for n in names]
    return Table("probe", cols, rows, _resolution(cfg or {}), dict(report.extra))


def gap_table(table: GapTable, cfg: dict | None = None) -> Table:
    cols = ["t", "x", "a", "v_n", "v_limit", "gap", "rhs", "ratio", "mollification_error"]
    rows = [[getattr(r, c) for c in cols] for r in table.rows]
    return Table("small_n", cols, rows, _resolution(cfg or {}) | {"M": table.M, "dt": table.dt},
                 {"max_ratio": table.max_ratio})


def to_table(report, cfg: dict | None = None) -> Table:
    if isinstance(report, Table):
        return report
    if isinstance(report, ConvergenceReport):
        return study_table(report)
    if isinstance(report, ProbeReport):
        return probe_table(report, cfg)
    if isinstance(report, GapTable):
        return gap_table(report, cfg)
    raise TypeError(f"cannot render {type(report).__name__}")


# --------------------------------------------------------------------------
# Writers
# --------------------------------------------------------------------------

def render_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def render_json(table: Table) -> str:
    doc = {
        "name": table.name,
        "columns": table.columns,
        "rows": [dict(zip(table.columns, (_json_value(v) for v in row))) for row in table.rows],
        "summary": _json_value(table.summary),
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def render_meta(table: Table) -> str:
    doc = {"name": table.name, "version": __version__, "columns": table.columns,
           "resolution": _json_value(table.meta),
           "note": "every numeric cell of the table was computed at this seed and resolution"}
    return json.dumps(doc, indent=2) + "\n"


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def emit_report(report, out_dir, formats=FORMATS, cfg: dict | None = None,
                figures: bool = True) -> list:
    """Write ``report`` into ``out_dir``; returns the paths written.

    ``formats`` is a subset of ``("csv", "json")``. A ``<name>.meta.json``
    sidecar with the seed and resolution is always written.
    """
    if isinstance(formats, str):
        formats = (formats,)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown report format(s) {bad}; use csv or json")
    table = to_table(report, cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if "csv" in formats:
        written.append(out / f"{table.name}.csv")
        _write(written[-1], render_csv(table))
    if "json" in formats:
        written.append(out / f"{table.name}.json")
        _write(written[-1], render_json(table))
    written.append(out / f"{table.name}.meta.json")
    _write(written[-1], render_meta(table))
    if table.name == "study":
        written += _gap_files(table, out)
    if figures:
        fig = render_figure(table, out)
        if fig is not None:
            written.append(fig)
    return written


def _gap_files(table: Table, out: Path) -> list:
    idx = {c: i for i, c in enumerate(table.columns)}
    paths = []
    for col in ("rms_gap", "gap"):
        lines = ["# N " + col]
        for row in table.rows:
            if row[idx["source"]] == "simulation" and not row[idx["failed"]]:
                lines.append(f"{row[idx['N']]} {_csv_cell(row[idx[col]])}")
        path = out / f"{col}_vs_N.dat"
        _write(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# Figures
# --------------------------------------------------------------------------

def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def render_figure(table: Table, out: Path) -> Path | None:
    if table.name == "study":
        return _study_figure(table, out / "study.png")
    if table.name == "small_n":
        return _ratio_figure(table, out / "small_n.png")
    if table.name == "probe":
        return _ladder_figure(table, out / "probe.png")
    return None


def _study_figure(table: Table, path: Path) -> Path:
    idx = {c: i for i, c in enumerate(table.columns)}
    rows = [r for r in table.rows if r[idx["source"]] == "simulation" and not r[idx["failed"]]]
    N = np.array([r[idx["N"]] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if N.size:
        rms = np.array([r[idx["rms_gap"]] for r in rows])
        gap = np.array([r[idx["gap"]] for r in rows])
        se = np.array([r[idx["se"]] for r in rows])
        ax.errorbar(N, rms, yerr=[r[idx["rms_se"]] for r in rows], fmt="o-", ms=4, label="rms gap")
        ax.plot(N, np.maximum(gap, 1e-16), "s", ms=4, label="|mean gap|")
        ax.plot(N, 3 * se, ":", color="0.5", label="3 SE")
        C = table.summary.get("C")
        if C is not None:
            ax.plot(N, C / np.sqrt(N), "--", color="k", lw=1, label=r"$C N^{-1/2}$")
    exact = [r for r in table.rows if r[idx["source"]] == "exact" and not r[idx["failed"]]]
    for r in exact:
        ax.plot([r[idx["N"]]], [r[idx["rms_gap"]]], "*", ms=9, color="C3", label="exact N=2")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("gap to limit value")
    slope = table.summary.get("slope")
    if slope is not None:
        ax.set_title(f"fitted slope {slope:.3f}", fontsize=10)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def _ratio_figure(table: Table, path: Path) -> Path:
    idx = table.columns.index("ratio")
    ratios = [r[idx] for r in table.rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.bar(np.arange(len(ratios)), ratios, color="C0")
    ax.set_xlabel("sample")
    ax.set_ylabel("gap / rhs")
    fig.tight_layout()
    return _save(fig, path)


def _ladder_figure(table: Table, path: Path) -> Path | None:
    times = table.summary.get("time_ladder")
    values = table.summary.get("value_ladder")
    if not times:
        return None
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(times, values, "o-")
    ax.set_xlabel("start time t")
    ax.set_ylabel("value at mu0")
    fig.tight_layout()
    return _save(fig, path)


def load_table(path) -> Table:
    """Read a JSON report written by :func:`emit_report` back into a Table."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cols = doc["columns"]
    rows = [[float("nan") if r[c] is None else r[c] for c in cols] for r in doc["rows"]]
    meta_path = Path(path).with_suffix(".meta.json")
    meta = {}
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh).get("resolution", {})
    return Table(doc["name"], cols, rows, meta, doc.get("summary", {}))
