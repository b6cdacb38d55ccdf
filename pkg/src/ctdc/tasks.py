"""Finite-state-automaton tasks and the built-in TICKETS pair.

A task is a numbered set of interface states plus a history-dependent
reachability map. History enters only through a small "knowledge status"
automaton whose transitions fire when particular states are entered, so
the pair (current state, status) is a sufficient statistic of the full
event history.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .errors import InvalidRecordError, TaskFileError

StateId = int

BUILTIN_TASK_IDS = ("tickets-task1", "tickets-task2")


@dataclass(frozen=True)
class StateInfo:
    """One interface state: numeric id plus descriptive columns."""

    id: StateId
    network: str = "NULL"
    fare: str = "NULL"
    ticket: str = "NULL"
    number: str = "NULL"
    end: int = 0
    label: str = ""

    def __post_init__(self):
        if not self.label:
            parts = (self.network, self.fare, self.ticket, self.number, str(self.end))
            object.__setattr__(self, "label", ",".join(parts))

    @property
    def descriptor(self):
        return (self.network, self.fare, self.ticket, self.number, self.end)


@dataclass(frozen=True)
class SuccessRule:
    """Predicate on the terminal transition of a record.

    Success requires ending at ``final_state``, entered from one of
    ``from_states`` (None means any), with the knowledge status at the
    time of that last action equal to ``status`` (None means any).
    """

    final_state: StateId
    from_states: frozenset | None = None
    status: str | None = None


@dataclass(frozen=True)
class HistoryState:
    """Sufficient statistic of the event history between two events."""

    current: StateId
    status: str
    steps_taken: int = 0
    terminated: bool = False


@dataclass(frozen=True)
class TaskDefinition:
    task_id: str
    states: tuple
    initial_state: StateId
    terminal_states: frozenset
    knowledge_statuses: tuple
    initial_status: str
    # (status, entered state) -> new status; identity pairs are omitted
    status_triggers: dict = field(repr=False)
    # (state, status) -> ascending candidate StateIds
    reachable: dict = field(repr=False)
    # (state, status) -> effectiveness values aligned with `reachable`
    effectiveness: dict = field(repr=False)
    success: SuccessRule | None = None
    title: str = ""

    @property
    def num_states(self):
        return len(self.states)

    def state_info(self, state_id: StateId) -> StateInfo:
        return self.states[state_id - 1]

    def status_after(self, status: str, entered: StateId) -> str:
        return self.status_triggers.get((status, entered), status)

    def initial_history(self) -> HistoryState:
        return HistoryState(
            current=self.initial_state,
            status=self.initial_status,
            steps_taken=0,
            terminated=self.initial_state in self.terminal_states,
        )


def advance(task: TaskDefinition, h: HistoryState, next_state: StateId) -> HistoryState:
    """Apply one event to a history.

    Parameters
    ----------
    task : TaskDefinition
    h : HistoryState
        Must not be terminated.
    next_state : StateId
        Must be in the reachable set of (h.current, h.status).

    Returns
    -------
    HistoryState
        The new history: current state, updated knowledge status,
        incremented step count, and the termination flag.
    """
    if h.terminated:
        raise InvalidRecordError(
            f"cannot advance a terminated history (task {task.task_id})"
        )
    allowed = task.reachable[(h.current, h.status)]
    if next_state not in allowed:
        raise InvalidRecordError(
            f"state {next_state} is not reachable from state {h.current} "
            f"(status {h.status}) in task {task.task_id}"
        )
    return HistoryState(
        current=next_state,
        status=task.status_after(h.status, next_state),
        steps_taken=h.steps_taken + 1,
        terminated=next_state in task.terminal_states,
    )


def candidates(task: TaskDefinition, h: HistoryState):
    """Reachable states with effectiveness values, ascending by state id.

    Returns
    -------
    list of (StateId, float)
    """
    if h.terminated:
        raise InvalidRecordError(
            f"terminated history has no candidate actions (task {task.task_id})"
        )
    key = (h.current, h.status)
    return list(zip(task.reachable[key], task.effectiveness[key]))


def replay(task: TaskDefinition, event_states):
    """Run a sequence of event states through the automaton.

    Returns the list of HistoryState values after each event. Raises
    InvalidRecordError on the first illegal transition.
    """
    h = task.initial_history()
    out = []
    for state in event_states:
        h = advance(task, h, state)
        out.append(h)
    return out


def derive_outcome(task: TaskDefinition, record) -> bool:
    """Binary task outcome for a record (True = success).

    `record` may be a ProcessRecord or a plain sequence of event state
    ids. Records that never reach a terminal state are failures, as are
    records of a task with no declared success rule.
    """
    states = tuple(getattr(record, "states", record))
    if not states:
        return False
    history = replay(task, states)
    final = history[-1]
    if not final.terminated or task.success is None:
        return False
    rule = task.success
    if states[-1] != rule.final_state:
        return False
    before = history[-2] if len(history) >= 2 else task.initial_history()
    if rule.from_states is not None and before.current not in rule.from_states:
        return False
    if rule.status is not None and before.status != rule.status:
        return False
    return True


def task_diagnostics(task: TaskDefinition):
    """Structural consistency check; returns a list of problem strings."""
    problems = []
    ids = {s.id for s in task.states}
    expected = set(range(1, len(task.states) + 1))
    if ids != expected:
        problems.append(f"state ids are not 1..{len(task.states)}: {sorted(ids)}")
    if task.initial_state not in ids:
        problems.append(f"initial state {task.initial_state} is not a state")
    for t in task.terminal_states:
        if t not in ids:
            problems.append(f"terminal state {t} is not a state")
    statuses = set(task.knowledge_statuses)
    if len(statuses) != len(task.knowledge_statuses) or not statuses:
        problems.append("knowledge statuses must be non-empty and distinct")
    if task.initial_status not in statuses:
        problems.append(f"initial status {task.initial_status!r} is not declared")
    for (status, entered), to in task.status_triggers.items():
        if status not in statuses or to not in statuses:
            problems.append(f"status trigger {status!r}->{to!r} uses unknown status")
        if entered not in ids:
            problems.append(f"status trigger on entering unknown state {entered}")
    for state in sorted(ids):
        for status in task.knowledge_statuses:
            key = (state, status)
            if state in task.terminal_states:
                if key in task.reachable:
                    problems.append(f"terminal state {state} has a reachable set")
                continue
            if key not in task.reachable:
                problems.append(f"no reachable set for state {state} status {status}")
                continue
            cands = task.reachable[key]
            values = task.effectiveness.get(key)
            if not cands:
                problems.append(f"empty reachable set for state {state} status {status}")
            if list(cands) != sorted(set(cands)):
                problems.append(
                    f"candidates for state {state} status {status} are not "
                    f"strictly ascending"
                )
            if values is None or len(values) != len(cands):
                problems.append(
                    f"effectiveness values misaligned for state {state} "
                    f"status {status}"
                )
            for cand in cands:
                if cand not in ids:
                    problems.append(
                        f"dangling candidate {cand} at state {state} status {status}"
                    )
    if task.success is not None:
        if task.success.final_state not in task.terminal_states:
            problems.append("success rule final state is not terminal")
        if task.success.from_states is not None:
            for s in task.success.from_states:
                if s not in ids:
                    problems.append(f"success rule references unknown state {s}")
        if task.success.status is not None and task.success.status not in statuses:
            problems.append("success rule references unknown status")
    return problems


def _require(mapping, key, context):
    if not isinstance(mapping, dict) or key not in mapping:
        raise TaskFileError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _as_state_id(value, context):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise TaskFileError(f"{context}: {value!r} is not a valid state id")
    return value


def _parse_states(raw, context):
    if not isinstance(raw, list) or not raw:
        raise TaskFileError(f"{context}: 'states' must be a non-empty list")
    states = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise TaskFileError(f"{context}: each state must be a mapping")
        sid = _as_state_id(_require(entry, "id", context), context)
        states.append(
            StateInfo(
                id=sid,
                network=str(entry.get("network", "NULL")),
                fare=str(entry.get("fare", "NULL")),
                ticket=str(entry.get("ticket", "NULL")),
                number=str(entry.get("number", "NULL")),
                end=int(entry.get("end", 0)),
                label=str(entry.get("label", "")),
            )
        )
    states.sort(key=lambda s: s.id)
    ids = [s.id for s in states]
    if ids != list(range(1, len(states) + 1)):
        raise TaskFileError(f"{context}: state ids must be exactly 1..{len(states)}")
    return tuple(states)


def _parse_moves(raw_moves, statuses, state_ids, terminal, context):
    reachable = {}
    effectiveness = {}
    if not isinstance(raw_moves, list) or not raw_moves:
        raise TaskFileError(f"{context}: 'moves' must be a non-empty list")
    for entry in raw_moves:
        if not isinstance(entry, dict):
            raise TaskFileError(f"{context}: each move must be a mapping")
        state = _as_state_id(_require(entry, "state", context), context)
        if state not in state_ids:
            raise TaskFileError(f"{context}: move declared for unknown state {state}")
        if state in terminal:
            raise TaskFileError(
                f"{context}: terminal state {state} must not declare moves"
            )
        if "status" in entry and "statuses" in entry:
            raise TaskFileError(
                f"{context}: move for state {state} sets both 'status' and 'statuses'"
            )
        if "status" in entry:
            move_statuses = [str(entry["status"])]
        elif "statuses" in entry:
            move_statuses = [str(s) for s in entry["statuses"]]
        else:
            move_statuses = list(statuses)
        effective = [_as_state_id(v, context) for v in entry.get("effective", [])]
        ineffective = [_as_state_id(v, context) for v in entry.get("ineffective", [])]
        overlap = set(effective) & set(ineffective)
        if overlap:
            raise TaskFileError(
                f"{context}: state {state} lists {sorted(overlap)} as both "
                f"effective and ineffective"
            )
        cands = effective + ineffective
        if len(cands) != len(set(cands)):
            raise TaskFileError(f"{context}: duplicate candidates at state {state}")
        if not cands:
            raise TaskFileError(f"{context}: state {state} declares no candidates")
        for cand in cands:
            if cand not in state_ids:
                raise TaskFileError(
                    f"{context}: state {state} lists dangling candidate {cand}"
                )
        values = {c: 1.0 for c in effective}
        values.update({c: 0.0 for c in ineffective})
        overrides = entry.get("values", {})
        if not isinstance(overrides, dict):
            raise TaskFileError(f"{context}: 'values' must map candidate id to value")
        for cand, value in overrides.items():
            cand = _as_state_id(cand, context)
            if cand not in values:
                raise TaskFileError(
                    f"{context}: effectiveness value for state {state} names "
                    f"{cand}, which is not a declared candidate"
                )
            values[cand] = float(value)
        ordered = tuple(sorted(values))
        for status in move_statuses:
            if status not in statuses:
                raise TaskFileError(
                    f"{context}: move for state {state} names unknown status "
                    f"{status!r}"
                )
            key = (state, status)
            if key in reachable:
                raise TaskFileError(
                    f"{context}: duplicate move for state {state} status {status}"
                )
            reachable[key] = ordered
            effectiveness[key] = tuple(values[c] for c in ordered)
    return reachable, effectiveness


def parse_task(text: str, source_name: str = "<task>") -> TaskDefinition:
    """Parse and validate a task definition from YAML text."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TaskFileError(f"{source_name}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise TaskFileError(f"{source_name}: top level must be a mapping")
    context = source_name
    task_id = str(_require(raw, "task_id", context))
    states = _parse_states(_require(raw, "states", context), context)
    state_ids = {s.id for s in states}
    initial_state = _as_state_id(_require(raw, "initial_state", context), context)
    raw_terminal = _require(raw, "terminal_states", context)
    if not isinstance(raw_terminal, list):
        raise TaskFileError(f"{context}: 'terminal_states' must be a list")
    terminal = frozenset(_as_state_id(v, context) for v in raw_terminal)
    for sid in {initial_state, *terminal}:
        if sid not in state_ids:
            raise TaskFileError(f"{context}: dangling state index {sid}")
    statuses = tuple(str(s) for s in _require(raw, "knowledge_statuses", context))
    if len(set(statuses)) != len(statuses) or not statuses:
        raise TaskFileError(f"{context}: knowledge statuses must be distinct")
    initial_status = str(_require(raw, "initial_status", context))
    if initial_status not in statuses:
        raise TaskFileError(f"{context}: unknown initial status {initial_status!r}")

    triggers = {}
    for entry in raw.get("status_triggers", []) or []:
        if not isinstance(entry, dict):
            raise TaskFileError(f"{context}: each status trigger must be a mapping")
        entered = _as_state_id(_require(entry, "on_enter", context), context)
        src = str(_require(entry, "from", context))
        dst = str(_require(entry, "to", context))
        if entered not in state_ids:
            raise TaskFileError(f"{context}: trigger on unknown state {entered}")
        if src not in statuses or dst not in statuses:
            raise TaskFileError(f"{context}: trigger uses unknown status")
        if (src, entered) in triggers:
            raise TaskFileError(
                f"{context}: duplicate trigger for status {src!r} entering {entered}"
            )
        triggers[(src, entered)] = dst

    reachable, effectiveness = _parse_moves(
        _require(raw, "moves", context), statuses, state_ids, terminal, context
    )
    for state in sorted(state_ids - terminal):
        for status in statuses:
            if (state, status) not in reachable:
                raise TaskFileError(
                    f"{context}: no move declared for state {state} status {status}"
                )

    success = None
    if raw.get("success") is not None:
        raw_success = raw["success"]
        final_state = _as_state_id(_require(raw_success, "final_state", context), context)
        from_states = raw_success.get("from_states")
        if from_states is not None:
            from_states = frozenset(_as_state_id(v, context) for v in from_states)
        status = raw_success.get("status")
        success = SuccessRule(
            final_state=final_state,
            from_states=from_states,
            status=None if status is None else str(status),
        )

    task = TaskDefinition(
        task_id=task_id,
        states=states,
        initial_state=initial_state,
        terminal_states=terminal,
        knowledge_statuses=statuses,
        initial_status=initial_status,
        status_triggers=triggers,
        reachable=reachable,
        effectiveness=effectiveness,
        success=success,
        title=str(raw.get("title", "")),
    )
    problems = task_diagnostics(task)
    if problems:
        raise TaskFileError(f"{context}: " + "; ".join(problems))
    return task


def load_task(source) -> TaskDefinition:
    """Load a task definition from a YAML file path or YAML text."""
    if isinstance(source, os.PathLike) or (
        isinstance(source, str) and "\n" not in source
    ):
        path = os.fspath(source)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise TaskFileError(f"cannot read task file {path}: {exc}") from exc
        return parse_task(text, source_name=os.path.basename(path))
    if isinstance(source, str):
        return parse_task(source)
    raise TaskFileError(f"unsupported task source {type(source).__name__}")


@functools.lru_cache(maxsize=None)
def builtin_task(task_id: str) -> TaskDefinition:
    """Load one of the bundled TICKETS tasks by id."""
    if task_id not in BUILTIN_TASK_IDS:
        raise TaskFileError(
            f"unknown builtin task {task_id!r}; available: {', '.join(BUILTIN_TASK_IDS)}"
        )
    ref = resources.files("ctdc").joinpath("builtin", f"{task_id}.yaml")
    return parse_task(ref.read_text(encoding="utf-8"), source_name=f"{task_id}.yaml")
