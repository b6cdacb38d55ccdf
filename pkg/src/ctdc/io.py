"""All file formats: log CSVs, parameter/config files, result tables.

Floats are serialized with repr, whose shortest-round-trip decimals
reload bit for bit, so every writer here is lossless.
"""

from __future__ import annotations

import csv
import io as _stringio
import json
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
import yaml

from .errors import InvalidRecordError, SchemaError
from .likelihood import FixedParams, TraitPair
from .records import ProcessRecord, is_complete, validate_record
from .scoring import TraitEstimate

LOG_COLUMNS = ("person_id", "task_id", "time", "state_id")
DESCRIPTIVE_COLUMNS = ("person_id", "time", "network", "fare", "ticket",
                       "number", "end")
PARAMS_SCHEMA = "ctdc-params-v1"


def _fmt(value) -> str:
    return repr(float(value))


def _atomic_write(path, text: str):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass(frozen=True)
class RejectedGroup:
    person_id: str
    task_id: str
    reason: str


def _group_rows(rows):
    groups = {}
    for row in rows:
        key = (row[0], row[1])
        groups.setdefault(key, []).append(row)
    return groups


def parse_logs(text: str, tasks, include_incomplete: bool = False,
               skip_unknown_tasks: bool = False):
    """Parse canonical log CSV text into process records.

    Each (person, task) group must start with the initial state at time
    0 followed by strictly later events. Invalid groups do not abort the
    batch; they are returned in a rejects report. Groups that never
    reach a terminal state are rejected as "incomplete" unless
    include_incomplete is set. An unknown task_id is an error by
    default; with skip_unknown_tasks those groups are rejected instead,
    which is how a single-task fit reads a two-task log file.

    Returns (records, rejects).
    """
    reader = csv.reader(_stringio.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("log file is empty (no header)") from None
    if tuple(header) != LOG_COLUMNS:
        raise SchemaError(
            f"log header must be {','.join(LOG_COLUMNS)}, got {','.join(header)}"
        )
    raw_rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(LOG_COLUMNS):
            raise SchemaError(f"line {line_no}: expected {len(LOG_COLUMNS)} fields")
        raw_rows.append((row[0], row[1], row[2], row[3]))

    records, rejects = [], []
    for (person_id, task_id), rows in _group_rows(raw_rows).items():
        task = tasks.get(task_id)
        if task is None:
            if skip_unknown_tasks:
                rejects.append(RejectedGroup(person_id, task_id, "unknown task"))
                continue
            raise SchemaError(f"unknown task_id {task_id!r} in log file")
        try:
            parsed = [(float(t), int(s)) for _, _, t, s in rows]
        except ValueError:
            rejects.append(RejectedGroup(person_id, task_id, "unparseable value"))
            continue
        if parsed[0][0] != 0.0 or parsed[0][1] != task.initial_state:
            rejects.append(
                RejectedGroup(person_id, task_id, "missing initial state row")
            )
            continue
        times = [t for t, _ in parsed]
        if any(b <= a for a, b in zip(times, times[1:])):
            rejects.append(RejectedGroup(person_id, task_id, "non-increasing time"))
            continue
        if len(parsed) == 1:
            rejects.append(RejectedGroup(person_id, task_id, "no events"))
            continue
        try:
            record = ProcessRecord(
                person_id=person_id, task_id=task_id, events=tuple(parsed[1:])
            )
            validate_record(record, task)
        except InvalidRecordError:
            rejects.append(RejectedGroup(person_id, task_id, "illegal transition"))
            continue
        if not is_complete(record, task) and not include_incomplete:
            rejects.append(RejectedGroup(person_id, task_id, "incomplete"))
            continue
        records.append(record)
    return records, rejects


def write_logs(records, tasks) -> str:
    """Canonical log CSV for records; inverse of parse_logs."""
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in records:
        task = tasks.get(r.task_id)
        if task is None:
            raise SchemaError(f"unknown task_id {r.task_id!r}")
        writer.writerow([r.person_id, r.task_id, _fmt(0.0), task.initial_state])
        for t, s in r.events:
            writer.writerow([r.person_id, r.task_id, _fmt(t), s])
    return buf.getvalue()


def parse_descriptive_logs(text: str, task, include_incomplete: bool = False):
    """Parse the five-descriptor-column log layout for a single task.

    Columns: person_id, time, network, fare, ticket, number, end. Each
    state is resolved to its id through the task's state list.
    """
    lookup = {s.descriptor: s.id for s in task.states}
    reader = csv.reader(_stringio.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("log file is empty (no header)") from None
    if tuple(header) != DESCRIPTIVE_COLUMNS:
        raise SchemaError(
            f"descriptive log header must be {','.join(DESCRIPTIVE_COLUMNS)}"
        )
    canonical = [",".join(LOG_COLUMNS)]
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(DESCRIPTIVE_COLUMNS):
            raise SchemaError(f"line {line_no}: expected {len(DESCRIPTIVE_COLUMNS)} fields")
        person_id, time, network, fare, ticket, number, end = row
        try:
            descriptor = (network, fare, ticket, number, int(end))
        except ValueError:
            raise SchemaError(f"line {line_no}: end must be 0 or 1") from None
        state = lookup.get(descriptor)
        if state is None:
            raise SchemaError(
                f"line {line_no}: no state of {task.task_id} matches "
                f"{descriptor}"
            )
        canonical.append(f"{person_id},{task.task_id},{time},{state}")
    return parse_logs(
        "\n".join(canonical) + "\n", {task.task_id: task},
        include_incomplete=include_incomplete,
    )


@dataclass(frozen=True)
class ParamsFile:
    tasks: tuple
    params: FixedParams
    quadrature_points: int | None = None
    se: dict | None = None
    note: str = ""
    provenance: dict | None = None


def params_to_json(tasks, params: FixedParams, se=None, quadrature_points=None,
                   note: str = "", provenance=None) -> str:
    tasks = [str(t) for t in tasks]
    if len(tasks) != params.num_tasks:
        raise SchemaError(
            f"{len(tasks)} task ids for {params.num_tasks} parameter sets"
        )
    payload = {
        "schema": PARAMS_SCHEMA,
        "tasks": tasks,
        "beta": list(params.betas),
        "gamma": list(params.gammas),
        "sigma": [list(map(float, row)) for row in params.sigma],
    }
    if quadrature_points is not None:
        payload["quadrature_points"] = int(quadrature_points)
    if se is not None:
        payload["se"] = {
            "beta": list(se["betas"]),
            "gamma": list(se["gammas"]),
            "sigma": list(se["sigma"]),
        }
    if note:
        payload["note"] = str(note)
    if provenance:
        payload["provenance"] = provenance
    return json.dumps(payload, indent=2) + "\n"


def save_params(path, tasks, params: FixedParams, se=None,
                quadrature_points=None, note: str = "", provenance=None):
    _atomic_write(
        path,
        params_to_json(tasks, params, se=se, quadrature_points=quadrature_points,
                       note=note, provenance=provenance),
    )


def params_from_json(text: str, source: str = "<params>") -> ParamsFile:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}: not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{source}: top level must be an object")
    if raw.get("schema") != PARAMS_SCHEMA:
        raise SchemaError(
            f"{source}: key 'schema' must be {PARAMS_SCHEMA!r}, got "
            f"{raw.get('schema')!r}"
        )
    for key in ("tasks", "beta", "gamma", "sigma"):
        if key not in raw:
            raise SchemaError(f"{source}: missing key {key!r}")
    tasks = tuple(str(t) for t in raw["tasks"])
    beta, gamma = raw["beta"], raw["gamma"]
    if not (isinstance(beta, list) and isinstance(gamma, list)
            and len(beta) == len(gamma) == len(tasks)):
        raise SchemaError(
            f"{source}: keys 'beta' and 'gamma' must be lists aligned with "
            f"'tasks'"
        )
    sigma = raw["sigma"]
    if (not isinstance(sigma, list) or len(sigma) != 2
            or any(not isinstance(r, list) or len(r) != 2 for r in sigma)):
        raise SchemaError(f"{source}: key 'sigma' must be a 2x2 nested list")
    try:
        params = FixedParams(
            betas=tuple(float(b) for b in beta),
            gammas=tuple(float(g) for g in gamma),
            sigma=np.array(sigma, dtype=float),
        )
    except ValueError as exc:
        raise SchemaError(f"{source}: {exc}") from exc
    se = raw.get("se")
    if se is not None:
        for key in ("beta", "gamma", "sigma"):
            if key not in se:
                raise SchemaError(f"{source}: key 'se' is missing {key!r}")
        se = {
            "betas": tuple(float(v) for v in se["beta"]),
            "gammas": tuple(float(v) for v in se["gamma"]),
            "sigma": tuple(float(v) for v in se["sigma"]),
        }
    points = raw.get("quadrature_points")
    if points is not None and (not isinstance(points, int) or points < 1):
        raise SchemaError(f"{source}: key 'quadrature_points' must be a positive integer")
    return ParamsFile(
        tasks=tasks,
        params=params,
        quadrature_points=points,
        se=se,
        note=str(raw.get("note", "")),
        provenance=raw.get("provenance"),
    )


def load_params(path) -> ParamsFile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SchemaError(f"cannot read parameter file {path}: {exc}") from exc
    return params_from_json(text, source=os.path.basename(os.fspath(path)))


def builtin_params() -> ParamsFile:
    """Reference parameter file bundled for the TICKETS tasks."""
    ref = resources.files("ctdc").joinpath("builtin", "tickets-params.json")
    return params_from_json(ref.read_text(encoding="utf-8"),
                            source="tickets-params.json")


SIMULATE_CONFIG_KEYS = {
    "setting", "persons", "tasks", "params", "rho", "reps", "seed", "out",
    "max_steps", "first_action_gap", "points_per_dim",
}


def load_config(path) -> dict:
    """Run configuration: a flat YAML mapping with known keys only."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise SchemaError(f"config {path} must be a mapping")
    unknown = set(raw) - SIMULATE_CONFIG_KEYS
    if unknown:
        raise SchemaError(
            f"config {path} has unknown keys: {', '.join(sorted(unknown))}"
        )
    return raw


def write_scores(path, estimates):
    """Score table CSV; MAP columns are included when every row has them."""
    include_map = all(e.map_estimate is not None for e in estimates) and estimates
    header = ["person_id", "theta_eap", "tau_eap", "theta_sd", "tau_sd"]
    if include_map:
        header += ["theta_map", "tau_map"]
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for e in estimates:
        row = [e.person_id, _fmt(e.eap.theta), _fmt(e.eap.tau),
               _fmt(e.posterior_sd[0]), _fmt(e.posterior_sd[1])]
        if include_map:
            row += [_fmt(e.map_estimate.theta), _fmt(e.map_estimate.tau)]
        writer.writerow(row)
    _atomic_write(path, buf.getvalue())


def read_scores(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        base = ["person_id", "theta_eap", "tau_eap", "theta_sd", "tau_sd"]
        if header is None or header[:5] != base:
            raise SchemaError(f"{path}: not a score table")
        has_map = header == base + ["theta_map", "tau_map"]
        if not has_map and header != base:
            raise SchemaError(f"{path}: unexpected score columns {header[5:]}")
        out = []
        for row in reader:
            if not row:
                continue
            est = TraitEstimate(
                person_id=row[0],
                eap=TraitPair(float(row[1]), float(row[2])),
                posterior_sd=(float(row[3]), float(row[4])),
                map_estimate=(
                    TraitPair(float(row[5]), float(row[6])) if has_map else None
                ),
            )
            out.append(est)
    return out


def scores_as_mapping(estimates, use_map: bool = False):
    out = {}
    for e in estimates:
        pair = e.map_estimate if use_map else e.eap
        out[e.person_id] = (pair.theta, pair.tau)
    return out


def write_outcomes(path, rows):
    """Outcome CSV rows of (person_id, task_id, outcome as 0/1)."""
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["person_id", "task_id", "outcome"])
    for person_id, task_id, outcome in rows:
        writer.writerow([person_id, task_id, int(outcome)])
    _atomic_write(path, buf.getvalue())


def read_outcomes(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["person_id", "task_id", "outcome"]:
            raise SchemaError(f"{path}: not an outcome table")
        return [(r[0], r[1], int(r[2])) for r in reader if r]


def outcomes_as_mapping(rows, task_ids):
    """Pivot long outcome rows to person -> tuple aligned with task_ids."""
    by_person = {}
    for person_id, task_id, outcome in rows:
        by_person.setdefault(person_id, {})[task_id] = int(outcome)
    out = {}
    for person_id, per_task in by_person.items():
        missing = [t for t in task_ids if t not in per_task]
        if missing:
            raise SchemaError(
                f"person {person_id} lacks outcomes for: {', '.join(missing)}"
            )
        out[person_id] = tuple(per_task[t] for t in task_ids)
    return out


def write_criterion(path, values):
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["person_id", "value"])
    for person_id, value in values.items():
        writer.writerow([person_id, _fmt(value)])
    _atomic_write(path, buf.getvalue())


def read_criterion(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["person_id", "value"]:
            raise SchemaError(f"{path}: not a criterion table")
        return {r[0]: float(r[1]) for r in reader if r}


def write_truth(path, truths):
    """Sidecar of true traits: person_id -> TraitPair."""
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["person_id", "theta", "tau"])
    for person_id, pair in truths.items():
        writer.writerow([person_id, _fmt(pair.theta), _fmt(pair.tau)])
    _atomic_write(path, buf.getvalue())


def read_truth(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["person_id", "theta", "tau"]:
            raise SchemaError(f"{path}: not a truth table")
        return {r[0]: TraitPair(float(r[1]), float(r[2])) for r in reader if r}


def write_table(path, header, rows):
    """Generic CSV writer; floats via repr, everything else via str."""
    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([
            _fmt(v) if isinstance(v, float) else str(v) for v in row
        ])
    _atomic_write(path, buf.getvalue())


def read_table(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty table")
        return header, [dict(zip(header, row)) for row in reader if row]


def write_manifest(path, payload: dict):
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
