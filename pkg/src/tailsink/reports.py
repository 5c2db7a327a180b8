"""Report bundles emitted by the command-line tools, with a versioned JSON schema."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

SCHEMA_VERSION = "1.0"

_number_or_null = {"type": ["number", "null"]}

_check = {
    "type": "object",
    "required": ["name", "passed"],
    "properties": {
        "name": {"type": "string"},
        "passed": {"type": "boolean"},
        "value": {},
        "tolerance": {},
    },
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "tailsink report bundle",
    "type": "object",
    "required": ["schema_version", "library_version", "command", "config", "tables", "checks", "passed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "library_version": {"type": "string"},
        "command": {"enum": ["validate-exactness", "validate-orbit", "validate-bias",
                             "bench-adjoint", "memory-ledger", "contraction"]},
        "config": {"type": "object"},
        "tables": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "object"}},
        },
        "summary": {"type": "object"},
        "checks": {"type": "array", "items": _check},
        "passed": {"type": "boolean"},
    },
    "additionalProperties": False,
}

# Column contracts for the tables other tools consume.
TABLE_COLUMNS = {
    "bias": {"R": {"type": "integer"}, "eta_norm": _number_or_null, "c_norm": _number_or_null,
             "residual": _number_or_null},
    "blocks": {"block": {}, "delta": _number_or_null, "rho_H": _number_or_null,
               "rho_range": _number_or_null},
}


def _clean(x):
    """JSON-friendly copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class ReportBundle:
    command: str
    config: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    checks: list[dict] = field(default_factory=list)

    def check(self, name: str, passed: bool, value=None, tolerance=None) -> bool:
        self.checks.append({"name": name, "passed": bool(passed), "value": value, "tolerance": tolerance})
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def to_dict(self) -> dict:
        from . import __version__

        return _clean({
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "command": self.command,
            "config": self.config,
            "tables": self.tables,
            "summary": self.summary,
            "checks": self.checks,
            "passed": self.passed,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        text = self.to_json()
        validate_report(json.loads(text))
        path.write_text(text)
        return path

    def write_csv(self, path, table: str | None = None) -> Path:
        path = Path(path)
        name = table or next(iter(self.tables), None)
        rows = _clean(self.tables.get(name, []))
        cols = list(dict.fromkeys(k for r in rows for k in r))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
        return path


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` breaks the report contract."""
    jsonschema.validate(doc, REPORT_SCHEMA)
    for table, cols in TABLE_COLUMNS.items():
        rows = doc["tables"].get(table)
        if rows is None:
            continue
        row_schema = {"type": "object", "required": list(cols), "properties": cols}
        for r in rows:
            jsonschema.validate(r, row_schema)
