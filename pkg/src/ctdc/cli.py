"""Command-line pipeline: simulate, fit, score, summarize, outcomes, regress,
and a one-shot simulation-study reproduction.

Exit codes: 0 success, 2 usage, 3 schema or task-file problems, 4 bad
record data, 5 estimation or convergence failures.
"""

from __future__ import annotations

import datetime
import functools
import json
import os
import sys
import time

import click
import numpy as np

from . import __version__
from . import io as diskio
from .errors import (EstimationError, InvalidRecordError, SchemaError,
                     TaskFileError)
from .estimate import FitOptions, fit_em
from .records import summarize
from .regression import run_validation_suite
from .scoring import score_eap
from .simulate import (STUDY_SETTINGS, SimulationConfig, simulate_cohort,
                       study_params)
from .study import run_sim_study
from .tasks import BUILTIN_TASK_IDS, builtin_task, derive_outcome, load_task

EXIT_SCHEMA = 3
EXIT_DATA = 4
EXIT_ESTIMATION = 5


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SchemaError, TaskFileError) as exc:
            _fail(EXIT_SCHEMA, str(exc))
        except InvalidRecordError as exc:
            _fail(EXIT_DATA, str(exc))
        except EstimationError as exc:
            _fail(EXIT_ESTIMATION, str(exc))

    return wrapper


def _resolve_tasks(spec: str):
    """Comma-separated builtin ids and/or task file paths -> ordered dict."""
    out = {}
    for token in [t.strip() for t in spec.split(",") if t.strip()]:
        if token in BUILTIN_TASK_IDS:
            task = builtin_task(token)
        elif os.path.exists(token):
            task = load_task(token)
        else:
            raise TaskFileError(
                f"{token!r} is neither a builtin task id nor a task file path"
            )
        if task.task_id in out:
            raise TaskFileError(f"duplicate task {task.task_id}")
        out[task.task_id] = task
    if not out:
        raise TaskFileError("no tasks given")
    return out


def _manifest(out_dir, command: str, config: dict, seed, inputs, outputs,
              started: float):
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [os.fspath(p) for p in inputs],
        "outputs": [os.fspath(p) for p in outputs],
        "version": __version__,
        "started_at": datetime.datetime.now(datetime.timezone.utc)
        .isoformat(timespec="seconds"),
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    path = os.path.join(out_dir, f"{command}_manifest.json")
    diskio.write_manifest(path, payload)
    return path


def _read_logs(path, tasks, include_incomplete=False, skip_unknown_tasks=False):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise SchemaError(f"cannot read log file {path}: {exc}") from exc
    return diskio.parse_logs(
        text, tasks,
        include_incomplete=include_incomplete,
        skip_unknown_tasks=skip_unknown_tasks,
    )


def _echo_rejects(rejects):
    if not rejects:
        return
    by_reason = {}
    for r in rejects:
        by_reason[r.reason] = by_reason.get(r.reason, 0) + 1
    parts = ", ".join(f"{v} {k}" for k, v in sorted(by_reason.items()))
    click.echo(f"rejected {len(rejects)} record group(s): {parts}")


@click.group()
@click.version_option(version=__version__, prog_name="ctdc")
def main():
    """Measurement-model toolkit for problem-solving process logs."""


@main.command()
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML run config; command-line flags override its keys.")
@click.option("--setting", type=click.Choice(sorted(STUDY_SETTINGS)),
              default=None, help="Named study setting fixing persons and rho.")
@click.option("--persons", type=int, default=None)
@click.option("--tasks", "tasks_spec", default=None,
              help="Comma-separated builtin task ids or task file paths.")
@click.option("--params", "params_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Generating parameter file (default: bundled reference).")
@click.option("--rho", type=float, default=None,
              help="Override the trait correlation of the generating sigma.")
@click.option("--reps", type=int, default=None, help="Replications (default 1).")
@click.option("--seed", type=int, default=None, help="Base seed (default 0).")
@click.option("--out", "out_dir", default=None,
              type=click.Path(file_okay=False))
@click.option("--max-steps", type=int, default=None)
@click.option("--first-gap", "first_gap", default=None,
              help='"exponential" or a fixed number of seconds.')
@_handle_errors
def simulate(config_path, setting, persons, tasks_spec, params_path, rho,
             reps, seed, out_dir, max_steps, first_gap):
    """Simulate cohorts of process records with known true traits."""
    started = time.monotonic()
    cfg = diskio.load_config(config_path) if config_path else {}
    overrides = {
        "setting": setting, "persons": persons, "tasks": tasks_spec,
        "params": params_path, "rho": rho, "reps": reps, "seed": seed,
        "out": out_dir, "max_steps": max_steps, "first_action_gap": first_gap,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})

    setting = cfg.get("setting")
    if setting is not None and setting not in STUDY_SETTINGS:
        raise SchemaError(
            f"unknown setting {setting!r}; expected one of "
            f"{', '.join(STUDY_SETTINGS)}"
        )
    persons = cfg.get("persons")
    rho = cfg.get("rho")
    if setting is not None:
        base_n, base_rho = STUDY_SETTINGS[setting]
        persons = base_n if persons is None else int(persons)
        rho = base_rho if rho is None else float(rho)
    if persons is None:
        raise click.UsageError("give --persons or --setting (or a config key)")

    params_file = (diskio.load_params(cfg["params"]) if cfg.get("params")
                   else diskio.builtin_params())
    tasks = _resolve_tasks(cfg.get("tasks") or ",".join(params_file.tasks))

    params = params_file.params
    if set(tasks) != set(params_file.tasks):
        index = {tid: i for i, tid in enumerate(params_file.tasks)}
        missing = [tid for tid in tasks if tid not in index]
        if missing:
            raise SchemaError(
                f"parameter file has no entry for task(s): {', '.join(missing)}"
            )
        keep = [index[tid] for tid in tasks]
        params = type(params)(
            betas=tuple(params.betas[i] for i in keep),
            gammas=tuple(params.gammas[i] for i in keep),
            sigma=params.sigma,
        )
    if rho is not None:
        params = study_params(float(rho), base=params)

    reps = int(cfg.get("reps", 1))
    seed = int(cfg.get("seed", 0))
    out_dir = os.fspath(cfg.get("out", "."))
    max_steps = int(cfg.get("max_steps", 500))
    first_gap = cfg.get("first_action_gap", "exponential")
    if reps < 1:
        raise click.UsageError("--reps must be at least 1")
    os.makedirs(out_dir, exist_ok=True)

    outputs = []
    for rep in range(reps):
        rep_seed = int(
            np.random.SeedSequence([seed, rep]).generate_state(1, np.uint64)[0]
        )
        sim = SimulationConfig(
            num_persons=int(persons), tasks=tuple(tasks.values()),
            params=params, rng_seed=rep_seed, max_steps=max_steps,
            first_action_gap=first_gap,
        )
        records, truths = simulate_cohort(sim)
        logs_path = os.path.join(out_dir, f"logs_rep{rep:03d}.csv")
        truth_path = os.path.join(out_dir, f"truth_rep{rep:03d}.csv")
        diskio._atomic_write(logs_path, diskio.write_logs(records, tasks))
        diskio.write_truth(truth_path, truths)
        outputs += [logs_path, truth_path]

    resolved = {
        "setting": setting, "persons": int(persons), "rho": rho,
        "tasks": list(tasks), "reps": reps, "seed": seed,
        "max_steps": max_steps, "first_action_gap": first_gap,
        "beta": list(params.betas), "gamma": list(params.gammas),
        "sigma": [list(map(float, row)) for row in params.sigma],
    }
    _manifest(out_dir, "simulate", resolved, seed,
              [p for p in (config_path, cfg.get("params")) if p],
              outputs, started)
    click.echo(f"simulate: wrote {reps} cohort(s) of {persons} persons to "
               f"{out_dir}")


@main.command()
@click.option("--logs", "logs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--tasks", "tasks_spec", default=",".join(BUILTIN_TASK_IDS),
              show_default=True,
              help="Comma-separated builtin task ids or task file paths.")
@click.option("--out", "out_dir", default=".",
              type=click.Path(file_okay=False))
@click.option("--points", type=int, default=21, show_default=True,
              help="Quadrature points per latent dimension.")
@click.option("--max-iters", type=int, default=500, show_default=True)
@click.option("--loglik-tol", type=float, default=1e-6, show_default=True)
@click.option("--polish/--no-polish", default=True,
              help="Newton refinement after EM (on by default).")
@click.option("--se/--no-se", "compute_se", default=True,
              help="Standard errors via the numerical Hessian (on by default).")
@_handle_errors
def fit(logs_path, tasks_spec, out_dir, points, max_iters, loglik_tol, polish,
        compute_se):
    """Fit the measurement model to a log file by maximum likelihood."""
    started = time.monotonic()
    tasks = _resolve_tasks(tasks_spec)
    records, rejects = _read_logs(logs_path, tasks, skip_unknown_tasks=True)
    _echo_rejects(rejects)
    if not records:
        raise InvalidRecordError(f"no records in {logs_path}")

    options = FitOptions(
        points_per_dim=points, max_iters=max_iters, loglik_tol=loglik_tol,
        polish=polish, compute_se=compute_se,
    )
    result = fit_em(records, tasks, options=options)

    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(out_dir, "params.json")
    report_path = os.path.join(out_dir, "report.txt")
    diskio.save_params(
        params_path, result.task_ids, result.params,
        se=result.std_errors, quadrature_points=result.points_per_dim,
        note="maximum marginal likelihood fit",
        provenance={
            "logs": os.fspath(logs_path),
            "persons": len(result.person_ids),
            "converged": result.converged,
            "em_iterations": result.em_iterations,
            "final_marginal_loglik": result.final_marginal_loglik,
        },
    )
    report = _fit_report(result, logs_path, rejects)
    diskio._atomic_write(report_path, report)
    _manifest(out_dir, "fit",
              {"tasks": list(result.task_ids), "points_per_dim": points,
               "max_iters": max_iters, "loglik_tol": loglik_tol,
               "polish": polish, "compute_se": compute_se},
              None, [logs_path], [params_path, report_path], started)
    click.echo(report, nl=False)
    if not result.converged:
        _fail(EXIT_ESTIMATION,
              f"fit did not converge in {result.em_iterations} iterations "
              f"(outputs were written to {out_dir})")


def _fit_report(result, logs_path, rejects) -> str:
    se = result.std_errors
    lines = [
        f"fit of {len(result.task_ids)} task(s) on {logs_path}",
        f"persons: {len(result.person_ids)}",
        f"dropped records: {result.num_dropped_records}",
        f"rejected groups: {len(rejects)}",
        f"converged: {result.converged}",
        f"em iterations: {result.em_iterations}",
        f"polished: {result.polished}",
        f"marginal loglik: {result.final_marginal_loglik:.6f}",
        "",
        "parameter estimates (standard errors):",
    ]

    def with_se(value, err):
        if err is None:
            return f"{value: .4f}"
        return f"{value: .4f} ({err:.4f})"

    for k, tid in enumerate(result.task_ids):
        b_se = se["betas"][k] if se else None
        g_se = se["gammas"][k] if se else None
        lines.append(f"  {tid}: beta = {with_se(result.params.betas[k], b_se)}"
                     f", gamma = {with_se(result.params.gammas[k], g_se)}")
    s = result.params.sigma
    s_se = se["sigma"] if se else (None, None, None)
    lines.append(f"  sigma11 = {with_se(float(s[0, 0]), s_se[0])}")
    lines.append(f"  sigma12 = {with_se(float(s[0, 1]), s_se[1])}")
    lines.append(f"  sigma22 = {with_se(float(s[1, 1]), s_se[2])}")
    lines.append(f"  trait correlation rho = {result.rho:.4f}")
    if result.se_note:
        lines.append(f"note: {result.se_note}")
    return "\n".join(lines) + "\n"


@main.command()
@click.option("--logs", "logs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--params", "params_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--tasks", "tasks_spec", default=None,
              help="Task files for non-builtin task ids in the parameter file.")
@click.option("--points", type=int, default=41, show_default=True)
@click.option("--map/--no-map", "include_map", default=False,
              help="Also compute posterior-mode estimates.")
@click.option("--out", "out_path", default="scores.csv",
              type=click.Path(dir_okay=False), show_default=True)
@_handle_errors
def score(logs_path, params_path, tasks_spec, points, include_map, out_path):
    """Score persons in a log file under a fitted parameter file."""
    started = time.monotonic()
    params_file = diskio.load_params(params_path)
    tasks = _resolve_tasks(tasks_spec or ",".join(params_file.tasks))
    if list(tasks) != list(params_file.tasks):
        raise SchemaError(
            f"tasks {list(tasks)} do not match the parameter file's "
            f"{list(params_file.tasks)}"
        )
    records, rejects = _read_logs(logs_path, tasks, skip_unknown_tasks=True)
    _echo_rejects(rejects)

    roster = []
    for r in records:
        if r.person_id not in roster:
            roster.append(r.person_id)
    for rej in rejects:
        if rej.person_id not in roster:
            roster.append(rej.person_id)
    if not roster:
        raise InvalidRecordError(f"no persons in {logs_path}")

    estimates = score_eap(
        records, tasks, params_file.params, points_per_dim=points,
        person_ids=roster, include_map=include_map,
    )
    diskio.write_scores(out_path, estimates)
    out_dir = os.path.dirname(os.fspath(out_path)) or "."
    _manifest(out_dir, "score",
              {"points_per_dim": points, "map": include_map,
               "tasks": list(tasks)},
              None, [logs_path, params_path], [out_path], started)
    click.echo(f"score: wrote {len(estimates)} rows to {out_path}")


@main.command("summarize")
@click.option("--logs", "logs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--tasks", "tasks_spec", default=",".join(BUILTIN_TASK_IDS),
              show_default=True)
@click.option("--out", "out_path", default="summary.csv",
              type=click.Path(dir_okay=False), show_default=True)
@_handle_errors
def summarize_cmd(logs_path, tasks_spec, out_path):
    """Per-record summary statistics (actions, duration, mean gap)."""
    started = time.monotonic()
    tasks = _resolve_tasks(tasks_spec)
    records, rejects = _read_logs(logs_path, tasks, include_incomplete=True,
                                  skip_unknown_tasks=True)
    _echo_rejects(rejects)
    rows = []
    for r in records:
        m, duration, mean_gap = summarize(r)
        rows.append([r.person_id, r.task_id, m, float(duration),
                     "" if mean_gap is None else float(mean_gap)])
    diskio.write_table(out_path,
                       ["person_id", "task_id", "num_actions", "duration",
                        "mean_gap"], rows)
    out_dir = os.path.dirname(os.fspath(out_path)) or "."
    _manifest(out_dir, "summarize", {"tasks": list(tasks)}, None,
              [logs_path], [out_path], started)
    click.echo(f"summarize: wrote {len(rows)} rows to {out_path}")


@main.command()
@click.option("--logs", "logs_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--tasks", "tasks_spec", default=",".join(BUILTIN_TASK_IDS),
              show_default=True)
@click.option("--out", "out_path", default="outcomes.csv",
              type=click.Path(dir_okay=False), show_default=True)
@_handle_errors
def outcomes(logs_path, tasks_spec, out_path):
    """Binary success/failure outcomes derived from complete records."""
    started = time.monotonic()
    tasks = _resolve_tasks(tasks_spec)
    records, rejects = _read_logs(logs_path, tasks, skip_unknown_tasks=True)
    _echo_rejects(rejects)
    rows = [
        (r.person_id, r.task_id, int(derive_outcome(tasks[r.task_id], r)))
        for r in records
    ]
    diskio.write_outcomes(out_path, rows)
    out_dir = os.path.dirname(os.fspath(out_path)) or "."
    _manifest(out_dir, "outcomes", {"tasks": list(tasks)}, None,
              [logs_path], [out_path], started)
    click.echo(f"outcomes: wrote {len(rows)} rows to {out_path}")


@main.command()
@click.option("--scores-joint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--scores-task1", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--scores-task2", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--outcomes", "outcomes_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--criterion", "criterion_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--bootstrap-reps", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", default=".",
              type=click.Path(file_okay=False))
@_handle_errors
def regress(scores_joint, scores_task1, scores_task2, outcomes_path,
            criterion_path, bootstrap_reps, seed, out_dir):
    """Criterion regressions M1-M8 with bootstrap R-squared differences."""
    started = time.monotonic()
    sj = diskio.scores_as_mapping(diskio.read_scores(scores_joint))
    s1 = diskio.scores_as_mapping(diskio.read_scores(scores_task1))
    s2 = diskio.scores_as_mapping(diskio.read_scores(scores_task2))
    outcome_rows = diskio.read_outcomes(outcomes_path)
    task_ids = []
    for _, task_id, _ in outcome_rows:
        if task_id not in task_ids:
            task_ids.append(task_id)
    if len(task_ids) != 2:
        raise SchemaError(
            f"{outcomes_path} covers {len(task_ids)} task(s); the validation "
            f"suite needs exactly 2"
        )
    om = diskio.outcomes_as_mapping(outcome_rows, task_ids)
    criterion = diskio.read_criterion(criterion_path)

    suite = run_validation_suite(
        criterion, sj, s1, s2, om,
        bootstrap_reps=bootstrap_reps, rng_seed=seed,
    )

    os.makedirs(out_dir, exist_ok=True)
    r2_path = os.path.join(out_dir, "r_squared.csv")
    coef_path = os.path.join(out_dir, "coefficients.csv")
    delta_path = os.path.join(out_dir, "deltas.csv")
    report_path = os.path.join(out_dir, "report.txt")

    diskio.write_table(
        r2_path, ["model", "r_squared", "n"],
        [[name, float(suite.r_squared[name]), suite.n]
         for name in sorted(suite.r_squared)],
    )
    coef_rows = []
    for name in sorted(suite.results):
        res = suite.results[name]
        for term, c, s, t, p in zip(res.names, res.coef, res.se, res.t, res.p):
            coef_rows.append([name, term, float(c), float(s), float(t),
                              float(p)])
    diskio.write_table(
        coef_path,
        ["model", "term", "estimate", "std_error", "t_value", "p_value"],
        coef_rows,
    )
    diskio.write_table(
        delta_path, ["pair", "delta", "lower", "upper"],
        [[d.label, float(d.delta), float(d.lower), float(d.upper)]
         for d in suite.deltas],
    )

    lines = [f"criterion regressions on {suite.n} persons", "",
             "r-squared by model:"]
    for name in sorted(suite.r_squared):
        lines.append(f"  {name}: {suite.r_squared[name]:.4f}")
    lines.append("")
    lines.append("r-squared differences (95% bootstrap CI):")
    for d in suite.deltas:
        lines.append(f"  {d.label}: {d.delta:.4f} [{d.lower:.4f}, "
                     f"{d.upper:.4f}]")
    report = "\n".join(lines) + "\n"
    diskio._atomic_write(report_path, report)

    _manifest(out_dir, "regress",
              {"bootstrap_reps": bootstrap_reps, "tasks": task_ids},
              seed,
              [scores_joint, scores_task1, scores_task2, outcomes_path,
               criterion_path],
              [r2_path, coef_path, delta_path, report_path], started)
    click.echo(report, nl=False)


@main.command("repro-sim-study")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--settings", "settings_spec", default=None,
              help="Comma-separated subset of S1..S6 (default: all six).")
@click.option("--reps", type=int, default=50, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel replications.")
@click.option("--persons", type=int, default=None,
              help="Override the per-setting cohort size (for quick runs).")
@click.option("--points", type=int, default=21, show_default=True)
@click.option("--scoring-points", type=int, default=41, show_default=True)
@click.option("--resume/--no-resume", default=True,
              help="Reuse per-replication checkpoints when present.")
@_handle_errors
def repro_sim_study(out_dir, seed, settings_spec, reps, jobs, persons, points,
                    scoring_points, resume):
    """Rerun the simulation study; emits plot-ready error tables."""
    started = time.monotonic()
    settings = None
    if settings_spec:
        settings = [s.strip() for s in settings_spec.split(",") if s.strip()]
        unknown = [s for s in settings if s not in STUDY_SETTINGS]
        if unknown:
            raise click.UsageError(
                f"unknown settings: {', '.join(unknown)} "
                f"(expected among {', '.join(STUDY_SETTINGS)})"
            )
    payloads, paths = run_sim_study(
        out_dir, seed, settings=settings, reps=reps, n_jobs=jobs,
        points_per_dim=points, scoring_points_per_dim=scoring_points,
        num_persons=persons, resume=resume,
    )
    _manifest(out_dir, "repro_sim_study",
              {"settings": settings or list(STUDY_SETTINGS), "reps": reps,
               "jobs": jobs, "persons": persons, "points_per_dim": points,
               "scoring_points_per_dim": scoring_points, "resume": resume},
              seed, [], list(paths.values()), started)
    converged = sum(1 for p in payloads if p["converged"])
    click.echo(
        f"repro-sim-study: {len(payloads)} replications "
        f"({converged} converged) -> {', '.join(paths.values())}"
    )


if __name__ == "__main__":
    main()
