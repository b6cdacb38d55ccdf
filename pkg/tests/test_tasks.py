"""Task automaton behavior against independently transcribed interface maps.

The EXPECTED_* tables below were written out by hand from the published
TICKETS interface description, separately from the bundled task files,
so they catch transcription slips in either place.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctdc.errors import InvalidRecordError, TaskFileError
from ctdc.records import ProcessRecord
from ctdc.tasks import (
    HistoryState,
    advance,
    builtin_task,
    candidates,
    derive_outcome,
    load_task,
    parse_task,
    replay,
    task_diagnostics,
)

# state -> (effective, ineffective); effectiveness is history-free here
EXPECTED_TASK1 = {
    1: ([11], [1, 2]),
    2: ([1], [3, 7]),
    3: ([1], [4, 5]),
    4: ([1], [21]),
    5: ([1], [6, 21]),
    6: ([1], [6, 21]),
    7: ([1], [8, 9]),
    8: ([1], [21]),
    9: ([1], [10, 21]),
    10: ([1], [10, 21]),
    11: ([12], [1, 17]),
    12: ([14], [1, 13]),
    13: ([1], [21]),
    14: ([16], [1, 15, 21]),
    15: ([16], [1, 15, 21]),
    16: ([21], [1, 15, 16]),
    17: ([1], [18, 19]),
    18: ([1], [21]),
    19: ([1], [20, 21]),
    20: ([1], [20, 21]),
}

# (state, status) -> (effective, ineffective); statuses record which of
# the two relevant fare screens (8: concession daily, 11: four
# concession individual) have been visited: A neither, B only 8,
# C only 11, D both.
_SAME_ALL_STATUSES = {
    1: ([2], [1, 12]),
    2: ([7], [1, 3]),
    3: ([1], [4, 5]),
    4: ([1], [21]),
    5: ([1], [6, 21]),
    6: ([1], [6, 21]),
    8: ([1], [21]),
    12: ([1], [13, 17]),
    13: ([1], [14, 15]),
    14: ([1], [21]),
    15: ([1], [16, 21]),
    16: ([1], [16, 21]),
    17: ([1], [18, 19]),
    18: ([1], [21]),
    19: ([1], [20, 21]),
    20: ([1], [20, 21]),
}
EXPECTED_TASK2 = {}
for _state, _pair in _SAME_ALL_STATUSES.items():
    for _status in "ABCD":
        EXPECTED_TASK2[(_state, _status)] = _pair
EXPECTED_TASK2.update({
    (7, "A"): ([8, 9], [1]),
    (7, "B"): ([9], [1, 8]),
    (7, "C"): ([8], [1, 9]),
    (7, "D"): ([9], [1, 8]),
    (9, "A"): ([11], [1, 10, 21]),
    (9, "B"): ([11], [1, 10, 21]),
    (9, "C"): ([1], [10, 11, 21]),
    (9, "D"): ([11], [1, 10, 21]),
    (10, "A"): ([11], [1, 10, 21]),
    (10, "B"): ([11], [1, 10, 21]),
    (10, "C"): ([1], [10, 11, 21]),
    (10, "D"): ([11], [1, 10, 21]),
    (11, "A"): ([1], [10, 11, 21]),
    (11, "B"): ([21], [1, 10, 11]),
    (11, "C"): ([1], [10, 11, 21]),
    (11, "D"): ([21], [1, 10, 11]),
})


def expected_candidates(effective, ineffective):
    pairs = [(s, 1.0) for s in effective] + [(s, 0.0) for s in ineffective]
    return sorted(pairs)


def test_task1_candidate_table_matches_transcription(task1):
    assert task1.knowledge_statuses == ("single",)
    for state, (eff, ineff) in EXPECTED_TASK1.items():
        h = HistoryState(current=state, status="single")
        assert candidates(task1, h) == expected_candidates(eff, ineff), state


def test_task2_candidate_table_matches_transcription(task2):
    assert task2.knowledge_statuses == ("A", "B", "C", "D")
    for (state, status), (eff, ineff) in EXPECTED_TASK2.items():
        h = HistoryState(current=state, status=status)
        got = candidates(task2, h)
        assert got == expected_candidates(eff, ineff), (state, status)


def test_task_shapes(task1, task2):
    for task in (task1, task2):
        assert task.num_states == 21
        assert task.initial_state == 1
        assert task.terminal_states == frozenset({21})
        assert task.state_info(21).end == 1
    assert task1.state_info(16).descriptor == (
        "COUNTRY TRAIN", "FULL", "INDIVIDUAL", "2", 0)
    assert task2.state_info(11).descriptor == (
        "CITY SUBWAY", "CONCESSION", "INDIVIDUAL", "4", 0)


def test_status_updates_on_fare_screens(task2):
    h = task2.initial_history()
    assert (h.current, h.status) == (1, "A")
    h = advance(task2, h, 2)
    assert (h.current, h.status, h.steps_taken) == (2, "A", 1)
    h = advance(task2, h, 7)
    h = advance(task2, h, 8)
    assert (h.current, h.status) == (8, "B")
    # the other fare screen completes the comparison
    h = advance(task2, h, 1)
    h = advance(task2, h, 2)
    h = advance(task2, h, 7)
    h = advance(task2, h, 9)
    assert h.status == "B"
    h = advance(task2, h, 11)
    assert (h.current, h.status) == (11, "D")


def test_status_triggers_commute(task2):
    # 8 then 11 and 11 then 8 both land in D
    assert task2.status_after("A", 8) == "B"
    assert task2.status_after("A", 11) == "C"
    assert task2.status_after("B", 11) == "D"
    assert task2.status_after("C", 8) == "D"
    assert task2.status_after("D", 8) == "D"
    assert task2.status_after("D", 11) == "D"


def test_advance_rejects_unreachable_state(task1):
    h = task1.initial_history()
    with pytest.raises(InvalidRecordError):
        advance(task1, h, 7)


def test_advance_rejects_terminated_history(task1):
    h = replay(task1, [11, 12, 14, 16, 21])[-1]
    assert h.terminated
    with pytest.raises(InvalidRecordError):
        advance(task1, h, 1)
    with pytest.raises(InvalidRecordError):
        candidates(task1, h)


def test_replay_tracks_full_history(task2):
    history = replay(task2, [2, 7, 8, 21])
    assert [h.current for h in history] == [2, 7, 8, 21]
    assert [h.status for h in history] == ["A", "A", "B", "B"]
    assert history[-1].terminated
    assert history[-1].steps_taken == 4


def test_outcome_success_requires_fare_comparison(task2):
    # checks both fare screens, then buys the four individual tickets
    winning = [2, 7, 8, 1, 2, 7, 9, 11, 21]
    assert derive_outcome(task2, winning) is True
    # buys the daily ticket without ever comparing
    assert derive_outcome(task2, [2, 7, 8, 21]) is False
    # same purchase screen but the comparison was never completed
    assert derive_outcome(task2, [2, 7, 9, 11, 21]) is False
    # never terminates
    assert derive_outcome(task2, [2, 7, 8]) is False
    assert derive_outcome(task2, []) is False


def test_outcome_task1_buy_from_selected_fare(task1):
    assert derive_outcome(task1, [11, 12, 14, 16, 21]) is True
    # buying from any other screen fails
    assert derive_outcome(task1, [11, 12, 13, 21]) is False


def test_outcome_accepts_records(task2):
    rec = ProcessRecord(
        person_id="s17", task_id="tickets-task2",
        events=((7.3, 2), (17.1, 7), (27.1, 8), (32.9, 21)),
    )
    assert derive_outcome(task2, rec) is False


def test_builtin_tasks_have_no_diagnostics(task1, task2):
    assert task_diagnostics(task1) == []
    assert task_diagnostics(task2) == []


def test_builtin_task_unknown_id():
    with pytest.raises(TaskFileError):
        builtin_task("tickets-task9")


MINIMAL_TASK = """
task_id: mini
states:
  - {id: 1, end: 0}
  - {id: 2, end: 0}
  - {id: 3, end: 1}
initial_state: 1
terminal_states: [3]
knowledge_statuses: [only]
initial_status: only
status_triggers: []
moves:
  - {state: 1, effective: [2], ineffective: [3]}
  - {state: 2, effective: [3], ineffective: [1]}
success:
  final_state: 3
  from_states: [2]
"""


def test_parse_task_minimal_round_trip(tmp_path):
    task = parse_task(MINIMAL_TASK, "mini.yaml")
    assert task.task_id == "mini"
    assert task_diagnostics(task) == []
    assert derive_outcome(task, [2, 3]) is True
    assert derive_outcome(task, [3]) is False
    path = tmp_path / "mini.yaml"
    path.write_text(MINIMAL_TASK)
    assert load_task(str(path)).task_id == "mini"


@pytest.mark.parametrize("mangle, message", [
    (lambda t: t.replace("terminal_states: [3]", "terminal_states: [9]"),
     "dangling"),
    (lambda t: t.replace("effective: [2]", "effective: [7]"), "candidate 7"),
    (lambda t: t.replace("initial_status: only", "initial_status: other"),
     "status"),
    (lambda t: t.replace("  - {state: 2, effective: [3], ineffective: [1]}\n", ""),
     "state 2"),
    (lambda t: t.replace("effective: [2]", "effective: [2, 2]"), "state"),
])
def test_parse_task_rejects_inconsistent_files(mangle, message):
    with pytest.raises(TaskFileError, match=message):
        parse_task(mangle(MINIMAL_TASK), "mini.yaml")


def test_parse_task_rejects_non_yaml():
    with pytest.raises(TaskFileError):
        parse_task("{not yaml: [", "broken.yaml")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_walk_status_tracks_visited_fare_screens(seed):
    # the knowledge status must always equal the set of fare screens
    # seen so far, whatever path the walk takes
    task = builtin_task("tickets-task2")
    rng = np.random.default_rng(seed)
    h = task.initial_history()
    seen = set()
    for _ in range(40):
        if h.terminated:
            break
        options = [s for s, _ in candidates(task, h)]
        nxt = int(options[rng.integers(len(options))])
        h = advance(task, h, nxt)
        seen.add(nxt)
        expected = {
            frozenset(): "A",
            frozenset({8}): "B",
            frozenset({11}): "C",
            frozenset({8, 11}): "D",
        }[frozenset(seen & {8, 11})]
        assert h.status == expected
