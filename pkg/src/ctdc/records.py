"""Process records: one person's timed action sequence on one task."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidRecordError
from .tasks import TaskDefinition, replay


@dataclass(frozen=True)
class ProcessRecord:
    """One person x task realization.

    `events` is the ordered sequence of (time in seconds, state id)
    pairs; the initial system state at time 0 is part of the task, not
    an event. `truncated` marks simulated records cut off by the step
    cap before reaching a terminal state.
    """

    person_id: str
    task_id: str
    events: tuple
    truncated: bool = False

    def __post_init__(self):
        events = tuple((float(t), int(s)) for t, s in self.events)
        object.__setattr__(self, "events", events)
        last = 0.0
        for t, _ in events:
            if not math.isfinite(t) or t <= last:
                raise InvalidRecordError(
                    f"record {self.person_id}/{self.task_id}: event times must be "
                    f"strictly increasing and positive"
                )
            last = t

    @property
    def num_events(self):
        return len(self.events)

    @property
    def times(self):
        return tuple(t for t, _ in self.events)

    @property
    def states(self):
        return tuple(s for _, s in self.events)


def validate_record(record: ProcessRecord, task: TaskDefinition):
    """Replay a record through its task; raises InvalidRecordError.

    Returns the list of HistoryState values after each event. Also
    rejects records that continue past a terminal state (replay does
    that implicitly: terminal histories have no legal transitions).
    """
    if record.task_id != task.task_id:
        raise InvalidRecordError(
            f"record {record.person_id} is for task {record.task_id}, "
            f"not {task.task_id}"
        )
    if not record.events:
        raise InvalidRecordError(
            f"record {record.person_id}/{record.task_id} has no events"
        )
    return replay(task, record.states)


def is_complete(record: ProcessRecord, task: TaskDefinition) -> bool:
    """True when the record ends in a terminal state of the task."""
    return bool(record.events) and record.states[-1] in task.terminal_states


def summarize(record: ProcessRecord):
    """Descriptive summary of one record.

    Returns
    -------
    (num_actions, total_duration, avg_time_per_action)
        Total duration is the time of the last action, which includes
        the time to first action. The average time per action is the
        mean inter-event gap (t_m - t_1)/(m - 1), or None when there is
        a single action and hence no gap.
    """
    if not record.events:
        raise InvalidRecordError(
            f"record {record.person_id}/{record.task_id} has no events"
        )
    times = record.times
    m = len(times)
    avg = (times[-1] - times[0]) / (m - 1) if m >= 2 else None
    return m, times[-1], avg
