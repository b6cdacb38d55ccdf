"""Synthetic cohort generation from the process model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .likelihood import FixedParams, TaskParams, TraitPair, softmax_values
from .records import ProcessRecord
from .tasks import TaskDefinition, advance, builtin_task
from .validation import check_positive_int, psd_factor

# Simulation study settings: name -> (num_persons, trait correlation).
STUDY_SETTINGS = {
    "S1": (100, -0.25),
    "S2": (100, 0.0),
    "S3": (100, 0.25),
    "S4": (400, -0.25),
    "S5": (400, 0.0),
    "S6": (400, 0.25),
}


@dataclass(frozen=True)
class SimulationConfig:
    """Inputs of one cohort simulation.

    first_action_gap is either the string "exponential" (draw the time
    to the first action from the same exponential as later gaps; it is
    conditioned out of the likelihood either way) or a fixed number of
    seconds.
    """

    num_persons: int
    tasks: tuple
    params: FixedParams
    rng_seed: int
    max_steps: int = 500
    first_action_gap: object = "exponential"

    def __post_init__(self):
        check_positive_int(self.num_persons, "num_persons")
        check_positive_int(self.max_steps, "max_steps")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if len(self.tasks) != self.params.num_tasks:
            raise ValueError(
                f"{len(self.tasks)} tasks but parameters for "
                f"{self.params.num_tasks}"
            )
        gap = self.first_action_gap
        if gap != "exponential":
            gap = float(gap)
            if not gap > 0:
                raise ValueError("fixed first action gap must be positive")
            object.__setattr__(self, "first_action_gap", gap)


def sample_traits(sigma, rng) -> TraitPair:
    """One draw of (theta, tau) from N(0, sigma)."""
    lower = psd_factor(sigma)
    theta, tau = lower @ rng.standard_normal(2)
    return TraitPair(float(theta), float(tau))


def _draw_index(probs, rng):
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(probs), u, side="right")),
               len(probs) - 1)


def simulate_record(task: TaskDefinition, traits: TraitPair, params: TaskParams,
                    rng, max_steps: int = 500,
                    first_action_gap="exponential",
                    person_id: str = "p1") -> ProcessRecord:
    """Simulate one record: marks from the logit model, gaps exponential.

    Stops at a terminal state, or after max_steps actions with the
    record flagged truncated.
    """
    rate = float(np.exp(params.gamma + traits.tau))
    b = params.beta + traits.theta
    if first_action_gap == "exponential":
        t = rng.exponential(1.0 / rate)
    else:
        t = float(first_action_gap)
    h = task.initial_history()
    events = []
    truncated = False
    while True:
        key = (h.current, h.status)
        cands = task.reachable[key]
        probs = softmax_values(task.effectiveness[key], b)
        state = cands[_draw_index(probs, rng)]
        events.append((t, state))
        h = advance(task, h, state)
        if h.terminated:
            break
        if len(events) >= max_steps:
            truncated = True
            break
        t += rng.exponential(1.0 / rate)
    return ProcessRecord(
        person_id=person_id,
        task_id=task.task_id,
        events=tuple(events),
        truncated=truncated,
    )


def simulate_cohort(config: SimulationConfig):
    """Simulate a full cohort with per-person independent rng streams.

    Returns
    -------
    (records, truths)
        records: list of ProcessRecord, person-major, tasks in declared
        order. truths: dict person_id -> TraitPair, in person order.
        Reproducible from config.rng_seed alone; parallel consumers see
        the same streams as this serial loop.
    """
    root = np.random.SeedSequence(config.rng_seed)
    children = root.spawn(config.num_persons)
    width = len(str(config.num_persons))
    records = []
    truths = {}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        person_id = f"p{i + 1:0{width}d}"
        traits = sample_traits(config.params.sigma, rng)
        truths[person_id] = traits
        for k, task in enumerate(config.tasks):
            records.append(
                simulate_record(
                    task,
                    traits,
                    config.params.task_params(k),
                    rng,
                    max_steps=config.max_steps,
                    first_action_gap=config.first_action_gap,
                    person_id=person_id,
                )
            )
    return records, truths


def study_params(rho: float, base: FixedParams | None = None) -> FixedParams:
    """Reference parameters with the trait correlation set to rho."""
    if base is None:
        from .io import builtin_params

        base = builtin_params().params
    s11 = base.sigma[0, 0]
    s22 = base.sigma[1, 1]
    s12 = rho * np.sqrt(s11 * s22)
    return FixedParams(
        betas=base.betas,
        gammas=base.gammas,
        sigma=np.array([[s11, s12], [s12, s22]]),
    )


def study_config(setting: str, rng_seed: int,
                 num_persons: int | None = None) -> SimulationConfig:
    """SimulationConfig for one named study setting (S1..S6)."""
    if setting not in STUDY_SETTINGS:
        raise ValueError(
            f"unknown setting {setting!r}; expected one of "
            f"{', '.join(STUDY_SETTINGS)}"
        )
    n, rho = STUDY_SETTINGS[setting]
    tasks = tuple(builtin_task(tid) for tid in ("tickets-task1", "tickets-task2"))
    return SimulationConfig(
        num_persons=num_persons if num_persons is not None else n,
        tasks=tasks,
        params=study_params(rho),
        rng_seed=rng_seed,
    )
