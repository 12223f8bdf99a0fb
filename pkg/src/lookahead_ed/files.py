"""Case, scenario, metrics and config files.

* case: JSON with ``base_mva``, ``buses``, ``branches``, ``generators``,
  ``slack_bus``; field names match the dataclasses in :mod:`grid`.
* scenario: CSV with header ``step,bus_<id>_p,bus_<id>_q,...,ren_<gen>_pmax``
  where ``<gen>`` is the generator's position in the case.
* metrics: CSV, one row per episode or window.

All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import MISSING, asdict, fields
from pathlib import Path

import numpy as np

from .env import LoadScenario
from .grid import Branch, Bus, CaseError, CostFunction, Generator, NetworkCase

CASE_FORMAT = 1
SCENARIO_FORMAT = 1
METRICS_FORMAT = 1


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _required(kind, name, record, cls):
    known = {f.name for f in fields(cls)}
    unknown = set(record) - known
    if unknown:
        raise CaseError(f"{kind} {name}: unknown field(s) {sorted(unknown)}")
    for f in fields(cls):
        if f.name not in record and f.default is MISSING and f.default_factory is MISSING:
            raise CaseError(f"{kind} {name}: missing field {f.name!r}")
    return dict(record)


def case_from_dict(doc: dict) -> NetworkCase:
    for key in ("base_mva", "buses", "branches", "generators", "slack_bus"):
        if key not in doc:
            raise CaseError(f"case: missing top-level key {key!r}")
    buses = [Bus(**_required("bus", i, rec, Bus)) for i, rec in enumerate(doc["buses"])]
    branches = []
    for j, rec in enumerate(doc["branches"]):
        name = f"{j} ({rec.get('from_bus')}-{rec.get('to_bus')})"
        kw = _required("branch", name, rec, Branch)
        kw["status"] = bool(kw.get("status", True))
        branches.append(Branch(**kw))
    gens = []
    for i, rec in enumerate(doc["generators"]):
        kw = _required("generator", f"{i} (bus {rec.get('bus')})", rec, Generator)
        if "cost" in kw:
            kw["cost"] = CostFunction(**kw["cost"])
        gens.append(Generator(**kw))
    return NetworkCase(float(doc["base_mva"]), buses, branches, gens, doc["slack_bus"])


def case_to_dict(case: NetworkCase) -> dict:
    return {
        "format_version": CASE_FORMAT,
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [asdict(b) for b in case.buses],
        "branches": [asdict(b) for b in case.branches],
        "generators": [asdict(g) for g in case.generators],
    }


def parse_case(path) -> NetworkCase:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: malformed JSON ({exc})") from exc
    doc.pop("format_version", None)
    return case_from_dict(doc)


def write_case(case: NetworkCase, path) -> None:
    atomic_write(path, json.dumps(case_to_dict(case), indent=1) + "\n")


def scenario_columns(case: NetworkCase) -> list[str]:
    cols = ["step"]
    for b in case.buses:
        cols += [f"bus_{b.id}_p", f"bus_{b.id}_q"]
    cols += [f"ren_{i}_pmax" for i in np.flatnonzero(case.renewable_mask())]
    return cols


def parse_scenario(path, case: NetworkCase, dt_minutes: float = 15.0) -> LoadScenario:
    """Read a scenario CSV; the normalisation range is taken over the whole file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty scenario file")
    header, body = rows[0], rows[1:]
    expected = scenario_columns(case)
    unknown = [c for c in header if c not in expected]
    if unknown:
        raise ValueError(f"{path}: unknown column(s) {unknown}")
    missing = [c for c in expected if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {missing}")
    for n, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: line {n} has {len(row)} fields, expected {len(header)}")
    if not body:
        raise ValueError(f"{path}: no data rows")
    data = np.array(body, dtype=float)
    col = {name: k for k, name in enumerate(header)}
    load_p = np.array([data[:, col[f"bus_{b.id}_p"]] for b in case.buses])
    load_q = np.array([data[:, col[f"bus_{b.id}_q"]] for b in case.buses])
    ren = np.array([data[:, col[f"ren_{i}_pmax"]] for i in np.flatnonzero(case.renewable_mask())])
    ren = ren.reshape(-1, data.shape[0])
    if np.any(ren < 0):
        raise ValueError(f"{path}: negative renewable availability")
    return LoadScenario(load_p, load_q, ren, dt_minutes=dt_minutes)


def write_scenario(scenario: LoadScenario, case: NetworkCase, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(scenario_columns(case))
    for t in range(scenario.horizon):
        row = [t]
        for k in range(case.n_bus):
            row += [repr(float(scenario.load_p[k, t])), repr(float(scenario.load_q[k, t]))]
        row += [repr(float(x)) for x in scenario.renewable_p[:, t]]
        w.writerow(row)
    atomic_write(path, buf.getvalue())


def write_metrics(records: list[dict], path, columns=None) -> None:
    """Write metric rows; floats use ``repr`` so files are bit-reproducible."""
    columns = columns or (list(records[0]) if records else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (rec.get(c, "") for c in columns)])
    atomic_write(path, buf.getvalue())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_config(path) -> dict:
    """JSON document, or flat ``key = value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
        if isinstance(doc, dict):
            return doc
    except json.JSONDecodeError:
        pass
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def write_json(doc, path) -> None:
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
