"""Run ledger and the JSON/CSV report bundle.

Everything except ``timings.json`` is a pure function of the ledger's
content, so re-emitting an unchanged ledger gives byte-identical files and
two runs under the same master seed give byte-identical bundles.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

LEDGER_FILE = "ledger.json"
TIMINGS_FILE = "timings.json"


@dataclass
class RunRecord:
    name: str
    kind: str                       # pretrain | probe | unlearn | eval | theory
    config_hash: str
    checkpoint: str = None          # relative to the run directory
    metrics: dict = None            # MetricReport.to_dict()
    params: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class Table:
    header: list
    rows: list


@dataclass
class RunLedger:
    config_hash: str
    root: str = "."
    runs: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def add_run(self, record):
        if record.name in self.runs:
            raise KeyError(f"duplicate run name {record.name!r}")
        self.runs[record.name] = record
        return record

    def add_table(self, name, header, rows):
        for r in rows:
            if len(r) != len(header):
                raise ValueError(f"table {name}: row width {len(r)} != header width {len(header)}")
        self.tables[name] = Table(list(header), [list(r) for r in rows])

    def check(self, name, passed, value=None, threshold=None, hard=False, note=""):
        """Record a trend check; ``hard`` ones correspond to acceptance gates."""
        self.checks.append({"name": name, "passed": bool(passed), "value": value,
                            "threshold": threshold, "hard": hard, "note": note})
        return bool(passed)

    def to_dict(self):
        return {"config_hash": self.config_hash,
                "runs": {k: asdict(v) for k, v in self.runs.items()},
                "tables": {k: asdict(v) for k, v in self.tables.items()},
                "theory": self.theory, "checks": self.checks}

    @classmethod
    def from_dict(cls, d, root="."):
        led = cls(d["config_hash"], root)
        led.runs = {k: RunRecord(**v) for k, v in d["runs"].items()}
        led.tables = {k: Table(**v) for k, v in d["tables"].items()}
        led.theory = d.get("theory", {})
        led.checks = d.get("checks", [])
        return led

    def save(self, path=None):
        path = path or os.path.join(self.root, LEDGER_FILE)
        _write(path, _dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f), root=os.path.dirname(os.path.abspath(path)))


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def table_csv(table, config_hash):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(["config_hash"] + table.header)
    for row in table.rows:
        w.writerow([config_hash] + [_fmt(v) for v in row])
    return buf.getvalue()


def emit_report(ledger, path):
    """Write the bundle under ``path``; returns the list of files written.

    ``report.json`` holds runs (without wall times), theory results and
    trend checks; each table goes to ``<name>.csv``; wall times go to
    ``timings.json``. Every file carries the ledger's config hash.
    """
    if not ledger.runs and not ledger.tables and not ledger.theory:
        raise ValueError("ledger is empty")
    for rec in ledger.runs.values():
        if rec.checkpoint and not os.path.exists(os.path.join(ledger.root, rec.checkpoint)):
            raise FileNotFoundError(f"run {rec.name}: checkpoint {rec.checkpoint} missing")
        if rec.config_hash != ledger.config_hash:
            raise ValueError(f"run {rec.name} carries config hash {rec.config_hash}, "
                             f"ledger has {ledger.config_hash}")
    os.makedirs(path, exist_ok=True)
    written = []
    runs = {}
    for k, rec in ledger.runs.items():
        d = asdict(rec)
        d.pop("wall_time")
        runs[k] = d
    doc = {"config_hash": ledger.config_hash, "runs": runs, "theory": ledger.theory,
           "checks": ledger.checks, "tables": sorted(ledger.tables)}
    _write(os.path.join(path, "report.json"), _dumps(doc))
    written.append("report.json")
    for name in sorted(ledger.tables):
        fname = f"{name}.csv"
        _write(os.path.join(path, fname), table_csv(ledger.tables[name], ledger.config_hash))
        written.append(fname)
    timings = {"config_hash": ledger.config_hash,
               "wall_time": {k: r.wall_time for k, r in sorted(ledger.runs.items())}}
    _write(os.path.join(path, TIMINGS_FILE), _dumps(timings))
    written.append(TIMINGS_FILE)
    return written
