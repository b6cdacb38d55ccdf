"""Choice, timing, and conditional likelihood of the process model.

The model for one person on one task: given the history, the next
action is drawn from a multinomial logit over the reachable states with
utilities (beta + theta) * V, and the waiting time to the next action
is exponential with rate exp(gamma + tau). The first waiting time is
conditioned upon and never enters the likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidRecordError
from .records import ProcessRecord, validate_record
from .tasks import TaskDefinition


@dataclass(frozen=True)
class TraitPair:
    """Latent traits of a person: competency theta, log action speed tau."""

    theta: float
    tau: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.tau)):
            raise ValueError(f"traits must be finite, got {self}")


@dataclass(frozen=True)
class TaskParams:
    """Fixed parameters of one task: easiness beta, baseline log-intensity gamma."""

    beta: float
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.beta) and math.isfinite(self.gamma)):
            raise ValueError(f"task parameters must be finite, got {self}")


@dataclass(frozen=True, eq=False)
class FixedParams:
    """All fixed parameters: per-task (beta, gamma) and trait covariance."""

    betas: tuple
    gammas: tuple
    sigma: np.ndarray

    def __post_init__(self):
        from .validation import check_covariance

        betas = tuple(float(b) for b in np.atleast_1d(self.betas))
        gammas = tuple(float(g) for g in np.atleast_1d(self.gammas))
        if len(betas) != len(gammas) or not betas:
            raise ValueError("betas and gammas must be non-empty and aligned")
        if not all(math.isfinite(v) for v in betas + gammas):
            raise ValueError("betas and gammas must be finite")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "sigma", check_covariance(self.sigma))

    @property
    def num_tasks(self):
        return len(self.betas)

    def task_params(self, k: int) -> TaskParams:
        return TaskParams(beta=self.betas[k], gamma=self.gammas[k])


def choice_probabilities(cands, theta, beta):
    """Multinomial logit probabilities over candidate actions.

    Parameters
    ----------
    cands : list of (StateId, effectiveness value)
        As returned by `tasks.candidates`.
    theta, beta : float
        Only the sum beta + theta enters.

    Returns
    -------
    numpy.ndarray of probabilities aligned with `cands`, summing to 1.
    """
    if len(cands) == 0:
        raise ValueError("candidate list is empty")
    values = np.array([float(v) for _, v in cands])
    return softmax_values(values, beta + theta)


def softmax_values(values, b):
    # max-subtraction keeps exp() in range for large |b|
    z = b * np.asarray(values, dtype=float)
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def ground_intensity(tau, gamma):
    """Event rate exp(gamma + tau); the expected gap is its reciprocal."""
    if not (math.isfinite(tau) and math.isfinite(gamma)):
        raise ValueError("tau and gamma must be finite")
    return math.exp(gamma + tau)


def conditional_log_likelihood(record: ProcessRecord, task: TaskDefinition,
                               traits: TraitPair, params: TaskParams) -> float:
    """Log-likelihood of one record given traits and task parameters.

    The sum of the chosen actions' log choice probabilities plus, for
    each of the m - 1 inter-event gaps, the exponential log-density at
    rate exp(gamma + tau). The time to the first action contributes
    nothing. Records that do not end in a terminal state are rejected.
    """
    histories = validate_record(record, task)
    if not histories[-1].terminated:
        raise InvalidRecordError(
            f"record {record.person_id}/{record.task_id} does not reach a "
            f"terminal state; abandoned records have no likelihood here"
        )
    b = params.beta + traits.theta
    before = [task.initial_history()] + histories[:-1]
    total = 0.0
    for h, state in zip(before, record.states):
        key = (h.current, h.status)
        cands = task.reachable[key]
        values = np.asarray(task.effectiveness[key])
        idx = cands.index(state)
        z = b * values
        total += z[idx] - logsumexp(z)
    times = record.times
    m = len(times)
    if m >= 2:
        log_rate = params.gamma + traits.tau
        total += (m - 1) * log_rate - (times[-1] - times[0]) * math.exp(log_rate)
    return float(total)


def _masked_lse(z, mask, need_probs=False):
    """Log-sum-exp over the last axis under a 0/1 slot mask.

    Every row must have at least one unmasked slot, which also bounds
    the inner sum below by one so neither log nor division can blow up.
    When need_probs is true the normalized exponentials are returned as
    well, reusing the exponentials already computed.
    """
    live = np.broadcast_to(mask > 0, z.shape)
    zmax = np.max(z, axis=-1, initial=-np.inf, where=live)
    e = np.exp(z - zmax[..., None])
    e *= mask
    s = e.sum(axis=-1)
    lse = zmax + np.log(s)
    if need_probs:
        return lse, e / s[..., None]
    return lse


class ContextTable:
    """Distinct choice situations of a task, vectorized for grid evaluation.

    A choice situation is fully determined by the multiset of candidate
    effectiveness values and the chosen value, so records compress to
    counts over few distinct contexts.
    """

    def __init__(self):
        self._index = {}
        self._rows = []

    def key_for(self, values, chosen_value):
        key = (tuple(sorted(values)), float(chosen_value))
        col = self._index.get(key)
        if col is None:
            col = len(self._rows)
            self._index[key] = col
            self._rows.append(key)
        return col

    @property
    def num_contexts(self):
        return len(self._rows)

    def freeze(self):
        width = max(len(vals) for vals, _ in self._rows)
        values = np.zeros((len(self._rows), width))
        mask = np.zeros((len(self._rows), width))
        chosen = np.zeros(len(self._rows))
        for i, (vals, v) in enumerate(self._rows):
            values[i, : len(vals)] = vals
            mask[i, : len(vals)] = 1.0
            chosen[i] = v
        self.values = values
        self.mask = mask
        self.chosen = chosen
        return self

    def logprob(self, b):
        """Log choice probability of each context at each utility scale.

        Parameters
        ----------
        b : array of shape (Q,), the values of beta + theta.

        Returns
        -------
        (Q, C) array of log probabilities.
        """
        b = np.atleast_1d(np.asarray(b, dtype=float))
        z = b[:, None, None] * self.values[None, :, :]
        lse = logsumexp(z, axis=-1, b=self.mask[None, :, :])
        return b[:, None] * self.chosen[None, :] - lse

    def score_stats(self, b):
        """First and second derivatives of `logprob` in b.

        Returns (G, G1, G2), each (Q, C): the log probability, its
        derivative chosen - E[V], and its second derivative -Var[V]
        under the context's choice distribution.
        """
        b = np.atleast_1d(np.asarray(b, dtype=float))
        z = b[:, None, None] * self.values[None, :, :]
        lse = logsumexp(z, axis=-1, b=self.mask[None, :, :])
        G = b[:, None] * self.chosen[None, :] - lse
        p = np.exp(z - lse[:, :, None]) * self.mask[None, :, :]
        ev = np.sum(p * self.values[None, :, :], axis=-1)
        ev2 = np.sum(p * self.values[None, :, :] ** 2, axis=-1)
        G1 = self.chosen[None, :] - ev
        G2 = -(ev2 - ev ** 2)
        return G, G1, np.minimum(G2, 0.0)


@dataclass
class CompiledTask:
    """One task's records compressed to context counts and timing stats.

    Persons without a record for the task have an all-zero row and
    contribute nothing to this task's likelihood.
    """

    task: TaskDefinition
    contexts: ContextTable
    counts: np.ndarray    # (N, C) context occurrence counts
    num_gaps: np.ndarray  # (N,) m - 1, zero when absent
    duration: np.ndarray  # (N,) t_m - t_1, zero when absent
    _views: tuple | None = field(default=None, repr=False, compare=False)

    def person_contexts(self):
        """Padded per-person views of the nonzero context columns.

        Returns (idx, cnt, nnz): idx and cnt have shape (N, W) where W is
        the largest number of distinct contexts any one person visited;
        rows are padded with context 0 at count 0, which contributes
        nothing.
        """
        if self._views is None:
            n = self.counts.shape[0]
            rows = [np.flatnonzero(self.counts[i]) for i in range(n)]
            width = max([len(r) for r in rows] + [1])
            idx = np.zeros((n, width), dtype=np.intp)
            cnt = np.zeros((n, width))
            for i, r in enumerate(rows):
                idx[i, : len(r)] = r
                cnt[i, : len(r)] = self.counts[i, r]
            nnz = np.array([len(r) for r in rows], dtype=np.intp)
            self._views = (idx, cnt, nnz, {})
        return self._views[:3]

    def _row_blocks(self, num_points, budget=2_000_000):
        """Split persons into row blocks so the gathered (rows, Q, W, S)
        temporaries stay within a fixed element budget."""
        idx, cnt, nnz = self.person_contexts()
        cache = self._views[3]
        key = (num_points, budget)
        if key in cache:
            return idx, cnt, cache[key]
        n = idx.shape[0]
        slots = self.contexts.values.shape[1]
        blocks = []
        lo = 0
        while lo < n:
            hi = lo + 1
            width = max(int(nnz[lo]), 1)
            while hi < n:
                grown = max(width, int(nnz[hi]), 1)
                if (hi + 1 - lo) * num_points * grown * slots > budget:
                    break
                width = grown
                hi += 1
            blocks.append((lo, hi, width))
            lo = hi
        cache[key] = blocks
        return idx, cnt, blocks

    def choice_loglik(self, beta, theta):
        """Choice log-likelihood of each person at person-specific theta.

        Parameters
        ----------
        beta : float
            The task's easiness parameter.
        theta : array of shape (N,) or (N, Q)
            Trait values, one row per person in compile order.

        Returns
        -------
        Array matching the shape of theta.
        """
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        th = theta[:, None] if single else theta
        q = th.shape[1]
        out = np.zeros_like(th)
        ctx = self.contexts
        idx, cnt, blocks = self._row_blocks(q)
        for lo, hi, width in blocks:
            rows = idx[lo:hi, :width]
            b = beta + th[lo:hi]
            z = b[:, :, None, None] * ctx.values[rows][:, None, :, :]
            lse = _masked_lse(z, ctx.mask[rows][:, None, :, :])
            G = b[:, :, None] * ctx.chosen[rows][:, None, :] - lse
            out[lo:hi] = np.einsum("rw,rqw->rq", cnt[lo:hi, :width], G)
        return out[:, 0] if single else out

    def choice_score(self, beta, theta):
        """Choice log-likelihood and its first two theta derivatives.

        Same layout as `choice_loglik`; returns (f, f1, f2) where f1 is
        the observed-minus-expected effectiveness and f2 the negated
        choice-distribution variance, each summed over the person's
        contexts with multiplicity.
        """
        theta = np.asarray(theta, dtype=float)
        single = theta.ndim == 1
        th = theta[:, None] if single else theta
        q = th.shape[1]
        f = np.zeros_like(th)
        f1 = np.zeros_like(th)
        f2 = np.zeros_like(th)
        ctx = self.contexts
        idx, cnt, blocks = self._row_blocks(q, budget=700_000)
        for lo, hi, width in blocks:
            rows = idx[lo:hi, :width]
            b = beta + th[lo:hi]
            vals = ctx.values[rows][:, None, :, :]
            mask = ctx.mask[rows][:, None, :, :]
            z = b[:, :, None, None] * vals
            lse, p = _masked_lse(z, mask, need_probs=True)
            G = b[:, :, None] * ctx.chosen[rows][:, None, :] - lse
            ev = np.sum(p * vals, axis=-1)
            ev2 = np.sum(p * (vals * vals), axis=-1)
            G1 = ctx.chosen[rows][:, None, :] - ev
            G2 = np.minimum(-(ev2 - ev * ev), 0.0)
            w = cnt[lo:hi, :width]
            f[lo:hi] = np.einsum("rw,rqw->rq", w, G)
            f1[lo:hi] = np.einsum("rw,rqw->rq", w, G1)
            f2[lo:hi] = np.einsum("rw,rqw->rq", w, G2)
        if single:
            return f[:, 0], f1[:, 0], f2[:, 0]
        return f, f1, f2

    def timing_loglik(self, gamma, tau):
        """Timing log-likelihood of each person at person-specific tau.

        tau has shape (N,) or (N, Q); the result matches. Persons
        without a record, and single-action records, contribute zero.
        """
        tau = np.asarray(tau, dtype=float)
        gaps = self.num_gaps if tau.ndim == 1 else self.num_gaps[:, None]
        dur = self.duration if tau.ndim == 1 else self.duration[:, None]
        return gaps * (gamma + tau) - dur * np.exp(gamma + tau)

    def timing_score(self, gamma, tau):
        """Timing log-likelihood and its first two tau derivatives."""
        tau = np.asarray(tau, dtype=float)
        gaps = self.num_gaps if tau.ndim == 1 else self.num_gaps[:, None]
        dur = self.duration if tau.ndim == 1 else self.duration[:, None]
        rate = dur * np.exp(gamma + tau)
        h = gaps * (gamma + tau) - rate
        return h, gaps - rate, -rate

    def person_node_loglik(self, beta, gamma, theta, tau):
        """Conditional log-likelihood of every person at every trait node.

        theta and tau are aligned arrays of shape (Q,); the result has
        shape (N, Q).
        """
        theta = np.atleast_1d(theta)
        tau = np.atleast_1d(tau)
        G = self.contexts.logprob(beta + theta)
        ll = self.counts @ G.T
        log_rate = gamma + tau
        ll += self.num_gaps[:, None] * log_rate[None, :]
        ll -= self.duration[:, None] * np.exp(log_rate)[None, :]
        return ll


def compile_cohort(records, tasks):
    """Compress records for grid-based likelihood evaluation.

    Parameters
    ----------
    records : iterable of ProcessRecord
        All records must be complete (end in a terminal state).
    tasks : mapping task_id -> TaskDefinition
        Tasks to include; records of other tasks are an error.

    Returns
    -------
    (person_ids, compiled) where compiled maps task_id -> CompiledTask
    and person rows follow first appearance order in `records`.
    """
    records = list(records)
    person_index = {}
    person_ids = []
    for r in records:
        if r.task_id not in tasks:
            raise InvalidRecordError(
                f"record {r.person_id} is for unknown task {r.task_id!r}"
            )
        if r.person_id not in person_index:
            person_index[r.person_id] = len(person_ids)
            person_ids.append(r.person_id)
    n = len(person_ids)
    compiled = {}
    for task_id, task in tasks.items():
        table = ContextTable()
        cells = {}
        num_gaps = np.zeros(n)
        duration = np.zeros(n)
        seen = set()
        for r in records:
            if r.task_id != task_id:
                continue
            if r.person_id in seen:
                raise InvalidRecordError(
                    f"person {r.person_id} has multiple records for {task_id}"
                )
            seen.add(r.person_id)
            row = person_index[r.person_id]
            histories = validate_record(r, task)
            if not histories[-1].terminated:
                raise InvalidRecordError(
                    f"record {r.person_id}/{task_id} does not reach a terminal "
                    f"state"
                )
            before = [task.initial_history()] + histories[:-1]
            for h, state in zip(before, r.states):
                key = (h.current, h.status)
                cands = task.reachable[key]
                values = task.effectiveness[key]
                col = table.key_for(values, values[cands.index(state)])
                cells[(row, col)] = cells.get((row, col), 0.0) + 1.0
            times = r.times
            num_gaps[row] = len(times) - 1
            duration[row] = times[-1] - times[0]
        if table.num_contexts == 0:
            # no records for this task: keep a single dummy context
            table.key_for((1.0,), 1.0)
        table.freeze()
        counts = np.zeros((n, table.num_contexts))
        for (row, col), count in cells.items():
            counts[row, col] = count
        compiled[task_id] = CompiledTask(
            task=task,
            contexts=table,
            counts=counts,
            num_gaps=num_gaps,
            duration=duration,
        )
    return person_ids, compiled
