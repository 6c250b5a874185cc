"""Experiment reports and their files: report.json, CSV tables, SVG plots, report.md.

Everything written here is a pure function of the report, so the same report
always produces byte-identical files. Wall-clock times only go to the run log.
"""

import datetime
import json
import logging
import math
import operator
import os
import sqlite3
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from lxml import etree

from kinetic.kinetic_errors import OutputError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
FORMATS = ("json", "csv", "svg", "md")

_COMPARATORS = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "==": operator.eq,
}

SVG_NS = "http://www.w3.org/2000/svg"
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Criterion:
    name: str
    value: object
    comparator: str
    threshold: object
    passed: bool

    @classmethod
    def evaluate(cls, name, value, comparator, threshold):
        """comparator is one of <, <=, >, >=, == or 'in' for a closed [low, high] range."""
        if comparator == "in":
            low, high = threshold
            passed = value is not None and low <= value <= high
        else:
            passed = value is not None and bool(_COMPARATORS[comparator](value, threshold))
        if isinstance(value, float) and not math.isfinite(value):
            passed = False
        return cls(name, value, comparator, threshold, bool(passed))


@dataclass
class ExperimentReport:
    experiment: str
    provenance: dict
    metrics: dict = field(default_factory=dict)
    criteria: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    densities: dict = field(default_factory=dict)
    # name -> (table name, x column, [y columns], log axes)
    plots: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def metric(self, name, value):
        self.metrics[name] = value
        return value

    def check(self, name, value, comparator, threshold):
        crit = Criterion.evaluate(name, value, comparator, threshold)
        self.criteria.append(crit)
        level = logging.INFO if crit.passed else logging.WARNING
        logger.log(level, "%s: %s %s %s -> %s", name, _short(value), comparator, _short(threshold),
                   "pass" if crit.passed else "FAIL")
        return crit.passed

    @property
    def all_passed(self):
        return all(c.passed for c in self.criteria)

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "provenance": self.provenance,
            "metrics": self.metrics,
            "criteria": [{"name": c.name, "value": c.value, "comparator": c.comparator,
                          "threshold": c.threshold, "passed": c.passed} for c in self.criteria],
            "all_passed": self.all_passed,
            "notes": self.notes,
        }


def _short(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _plain(value):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null, tuples as lists."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def report_json(report):
    # floats go out as repr: the shortest digits that parse back to the same double,
    # so each number equals the FLOAT_FORMAT text of the CSV files after parsing
    return json.dumps(_plain(report.to_dict()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def grid_to_frame(grid):
    """One row per cell: coordinates then the clipped density, columns x[, y], u."""
    names = ["x", "y"][:grid.dim]
    frame = pd.DataFrame(grid.points(), columns=names)
    frame["u"] = grid.clipped().values.ravel()
    return frame


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


####
# SVG
####

def _fmt(v):
    return f"{float(v):.6g}"


def _svg_root(width, height):
    return etree.Element(f"{{{SVG_NS}}}svg", nsmap={None: SVG_NS},
                         width=str(width), height=str(height), viewBox=f"0 0 {width} {height}")


def _svg_text(parent, x, y, text, size=12, anchor="start"):
    node = etree.SubElement(parent, f"{{{SVG_NS}}}text", x=_fmt(x), y=_fmt(y))
    node.set("font-size", str(size))
    node.set("text-anchor", anchor)
    node.text = text
    return node


def _svg_bytes(root):
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding="UTF-8")


def curves_svg(title, series, log=False, width=640, height=420):
    """Line plot of named (x, y) series; log=True plots log10 of both axes."""
    margin = 60
    root = _svg_root(width, height)
    _svg_text(root, width / 2, 24, title, size=14, anchor="middle")
    prepared = []
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(x) & np.isfinite(y)
        if log:
            keep &= (x > 0) & (y > 0)
            x, y = np.log10(np.where(keep, x, 1.0)), np.log10(np.where(keep, y, 1.0))
        prepared.append((name, x[keep], y[keep]))
    xs = np.concatenate([p[1] for p in prepared]) if prepared else np.zeros(1)
    ys = np.concatenate([p[2] for p in prepared]) if prepared else np.zeros(1)
    if xs.size == 0:
        xs, ys = np.zeros(1), np.zeros(1)
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    axes = etree.SubElement(root, f"{{{SVG_NS}}}g", stroke="#444444", fill="none")
    etree.SubElement(axes, f"{{{SVG_NS}}}rect", x=str(margin), y=str(margin),
                     width=str(width - 2 * margin), height=str(height - 2 * margin))
    prefix = "log10 " if log else ""
    _svg_text(root, margin, height - margin + 18, f"{prefix}{_fmt(x0)}")
    _svg_text(root, width - margin, height - margin + 18, f"{prefix}{_fmt(x1)}", anchor="end")
    _svg_text(root, margin - 6, height - margin, _fmt(y0), anchor="end")
    _svg_text(root, margin - 6, margin + 10, _fmt(y1), anchor="end")
    for i, (name, x, y) in enumerate(prepared):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
        line = etree.SubElement(root, f"{{{SVG_NS}}}polyline", points=points, fill="none", stroke=color)
        line.set("stroke-width", "1.5")
        _svg_text(root, width - margin - 4, margin + 16 * (i + 1), name, anchor="end").set("fill", color)
    return _svg_bytes(root)


def heatmap_svg(title, grid, size=480):
    """Cells of a 2-d density drawn in data coordinates; the viewBox spans [-L, L]^2."""
    L = grid.half_width
    values = grid.clipped().values
    top = float(np.max(values)) or 1.0
    root = etree.Element(f"{{{SVG_NS}}}svg", nsmap={None: SVG_NS}, width=str(size), height=str(size),
                         viewBox=f"{_fmt(-L)} {_fmt(-L)} {_fmt(2 * L)} {_fmt(2 * L)}")
    root.set("data-half-width", _fmt(L))
    etree.SubElement(root, f"{{{SVG_NS}}}title").text = title
    # y grows upward in the density, downward in SVG
    layer = etree.SubElement(root, f"{{{SVG_NS}}}g", transform="scale(1,-1)")
    dx, dy = grid.dx
    ex, ey = grid.edges(0), grid.edges(1)
    for i in range(grid.cells[0]):
        for j in range(grid.cells[1]):
            level = int(round(255 * (1.0 - values[i, j] / top)))
            rect = etree.SubElement(layer, f"{{{SVG_NS}}}rect", x=_fmt(ex[i]), y=_fmt(ey[j]),
                                    width=_fmt(dx), height=_fmt(dy))
            rect.set("fill", f"#{level:02x}{level:02x}ff")
    return _svg_bytes(root)


####
# Markdown
####

def report_markdown(report):
    lines = [f"# {report.experiment}", ""]
    prov = report.provenance
    lines += [f"Config hash `{prov.get('config_hash', '')}`, master seed {prov.get('master_seed', '')}, "
              f"code version {prov.get('code_version', '')}.", ""]
    lines += ["## Criteria", "", "| criterion | value | test | threshold | result |", "|---|---|---|---|---|"]
    for c in report.criteria:
        lines.append(f"| {c.name} | {_short(c.value)} | {c.comparator} | {_short(c.threshold)} | "
                     f"{'pass' if c.passed else '**FAIL**'} |")
    lines += ["", f"**Verdict: {'all criteria pass' if report.all_passed else 'some criteria fail'}**", ""]
    lines += ["## Metrics", ""]
    for name in sorted(report.metrics):
        lines.append(f"- {name}: {_short(report.metrics[name])}")
    if report.notes:
        lines += ["", "## Notes", ""]
        lines += [f"- {note}" for note in report.notes]
    if report.tables:
        lines += ["", "## Tables", ""]
        lines += [f"- `{name}.csv` ({len(frame)} rows)" for name, frame in sorted(report.tables.items())]
    return "\n".join(lines) + "\n"


def emit_outputs(report, formats, out_dir):
    """Write the requested formats into out_dir and return the written paths in order."""
    formats = [f.strip() for f in formats if f.strip()]
    unknown = sorted(set(formats) - set(FORMATS))
    if unknown:
        raise OutputError(f"unknown output format(s): {', '.join(unknown)}")
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)

        def put(name, data):
            path = os.path.join(out_dir, name)
            mode = "wb" if isinstance(data, bytes) else "w"
            with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as f:
                f.write(data)
            written.append(path)

        if "json" in formats:
            put("report.json", report_json(report))
        if "md" in formats:
            put("report.md", report_markdown(report))
        if "csv" in formats:
            for name, frame in sorted(report.tables.items()):
                path = os.path.join(out_dir, f"{name}.csv")
                _write_csv(frame, path)
                written.append(path)
            for name, grid in sorted(report.densities.items()):
                path = os.path.join(out_dir, f"density_{name}.csv")
                _write_csv(grid_to_frame(grid), path)
                written.append(path)
        if "svg" in formats:
            for name, (table, x, ys, log) in sorted(report.plots.items()):
                frame = report.tables[table]
                put(f"{name}.svg", curves_svg(name, {y: (frame[x], frame[y]) for y in ys}, log=log))
            one_d = {name: grid for name, grid in sorted(report.densities.items()) if grid.dim == 1}
            if one_d:
                put("densities.svg", curves_svg(f"{report.experiment} densities",
                                                {n: (g.axes()[0], g.clipped().values) for n, g in one_d.items()}))
            for name, grid in sorted(report.densities.items()):
                if grid.dim == 2:
                    put(f"density_{name}.svg", heatmap_svg(name, grid))
    except OSError as e:
        raise OutputError(f"could not write outputs to '{out_dir}': {e}") from e
    logger.info("wrote %d file(s) to %s", len(written), out_dir)
    return written


####
# Run ledger and run log
####

def record_run(report, ledger_path):
    """Insert or replace the report's row in the runs table of the SQLite ledger."""
    row = pd.DataFrame([{
        "config_hash": report.provenance["config_hash"],
        "experiment": report.experiment,
        "master_seed": int(report.provenance["master_seed"]),
        "code_version": report.provenance["code_version"],
        "all_passed": int(report.all_passed),
        "metrics_json": json.dumps(_plain(report.metrics), sort_keys=True),
    }])
    directory = os.path.dirname(ledger_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    conn = sqlite3.connect(ledger_path)
    try:
        conn.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                config_hash TEXT PRIMARY KEY,
                experiment TEXT,
                master_seed INTEGER,
                code_version TEXT,
                all_passed INTEGER,
                metrics_json TEXT
            )
        ''')
        conn.execute("DELETE FROM runs WHERE config_hash = ?", (report.provenance["config_hash"],))
        row.to_sql("runs", conn, if_exists="append", index=False)
        conn.commit()
    except sqlite3.Error as e:
        conn.rollback()
        raise OutputError(f"ledger '{ledger_path}': {e}") from e
    finally:
        conn.close()
    logger.info("run %s recorded in %s", report.provenance["config_hash"][:12], ledger_path)


def log_run_entry(run_log, report, start_time, end_time):
    """Append one line to the CSV run log, writing the header when the file is new."""
    file_exists = os.path.exists(run_log)
    directory = os.path.dirname(run_log)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(run_log, "a", encoding="utf-8") as f:
            if not file_exists:
                f.write("Timestamp,Experiment,Config Hash,Master Seed,Start,End,All Passed\n")
            now = datetime.datetime.now().strftime("%Y-%m-%d %H:%M:%S")
            f.write(f"{now},{report.experiment},{report.provenance['config_hash']},"
                    f"{report.provenance['master_seed']},{start_time.isoformat()},{end_time.isoformat()},"
                    f"{report.all_passed}\n")
    except OSError as e:
        raise OutputError(f"could not append to run log '{run_log}': {e}") from e
