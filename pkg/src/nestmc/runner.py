"""Experiment grids over depth ``p`` and particle scale ``ipart``, budget reports and plan previews."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from nestmc import budget
from nestmc.config import RunConfig
from nestmc.errors import ConfigError
from nestmc.estimators import ESTIMATORS, EstimateResult, _ESTIMATOR_FUNCS, expected_evaluations
from nestmc.plan import NestingPlan
from nestmc.problems import Problem, get_problem
from nestmc.switching import SwitchDensity

RECORD_FIELDS = (
    "problem",
    "estimator",
    "p",
    "ipart",
    "rep",
    "counts",
    "lam",
    "shape_u",
    "seed",
    "estimate",
    "std_error",
    "n_outer",
    "evaluations",
    "wall_time",
    "reference",
    "error",
    "partial",
    "config_digest",
)


@dataclass
class RunRecord:
    problem: str
    estimator: str
    p: int
    ipart: int
    rep: int
    counts: tuple[int, ...]
    lam: float
    shape_u: float
    seed: int
    estimate: float
    std_error: float
    n_outer: int
    evaluations: int
    wall_time: float
    reference: float | None
    error: float | None
    partial: bool
    config_digest: str

    def as_row(self) -> dict:
        row = asdict(self)
        row["counts"] = "x".join(str(n) for n in self.counts)
        return row


@dataclass
class RunOutcome:
    records: list[RunRecord]
    summary: list[dict]
    partial: bool


def build_problem(config: RunConfig) -> Problem:
    """Instantiate the configured problem (``custom`` builds from built-in forms)."""
    params = dict(config.problem_params)
    if config.problem == "custom":
        from nestmc.problems import make_custom

        try:
            problem = make_custom(**params)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad custom problem: {exc}") from None
    else:
        problem = get_problem(config.problem, **params)
    if config.linear:
        problem = problem.linearized()
    if config.x0 is not None:
        if len(config.x0) != problem.dim:
            raise ConfigError(f"run.x0 has {len(config.x0)} entries, the problem has dimension {problem.dim}")
        problem = problem.with_x0(np.asarray(config.x0))
    return problem


def check_compatible(config: RunConfig, problem: Problem) -> None:
    if config.estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {config.estimator!r}")
    if config.estimator == "value" and problem.driver.uses_z:
        raise ConfigError(f"estimator 'value' cannot handle the gradient-dependent driver of {problem.name!r}")
    if config.estimator != "value" and not problem.terminal.has_gradient:
        raise ConfigError(f"estimator {config.estimator!r} needs a terminal gradient, {problem.name!r} has none")


def grid(config: RunConfig) -> list[tuple[int, int, NestingPlan]]:
    return [
        (p, ipart, NestingPlan.from_base(config.base, ipart, p))
        for p in config.switches
        for ipart in range(config.ipart_min, config.ipart_max + 1)
    ]


def _reference(problem: Problem) -> float | None:
    return None if problem.reference is None else float(problem.reference)


class _Sink:
    """Appends records to the output file as they arrive."""

    def __init__(self, path: str | None, fmt: str):
        self.path = Path(path) if path else None
        self.fmt = fmt
        self._fh = None
        self._writer = None

    def open(self, config: RunConfig):
        if self.path is None:
            return self
        self.path.parent.mkdir(parents=True, exist_ok=True)
        config_path = self.path.with_name(self.path.name + ".config.json")
        config_path.write_text(config.dumps() + "\n")
        self._fh = open(self._records_path(), "w", newline="")
        if self.fmt == "csv":
            self._writer = csv.DictWriter(self._fh, fieldnames=RECORD_FIELDS)
            self._writer.writeheader()
        return self

    def _records_path(self) -> Path:
        return self.path.with_name(self.path.name + (".csv" if self.fmt == "csv" else ".jsonl"))

    def write(self, record: RunRecord):
        if self._fh is None:
            return
        if self._writer is not None:
            self._writer.writerow(record.as_row())
        else:
            self._fh.write(json.dumps(record.as_row(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self, summary: list[dict]):
        if self._fh is None:
            return
        self._fh.close()
        if summary:
            with open(self.path.with_name(self.path.name + ".summary.csv"), "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(summary[0]))
                writer.writeheader()
                writer.writerows(summary)


def _summarize(p, ipart, plan, reps: list[RunRecord], reference) -> dict:
    vals = np.array([r.estimate for r in reps])
    n = len(vals)
    mean = math.fsum(vals) / n
    if n > 1:
        se = math.sqrt(math.fsum((vals - mean) ** 2) / (n - 1) / n)
    else:
        se = reps[0].std_error
    return {
        "p": p,
        "ipart": ipart,
        "counts": "x".join(str(c) for c in plan.counts),
        "replications": n,
        "mean": mean,
        "std_error": se,
        "reference": reference,
        "error": None if reference is None else mean - reference,
        "evaluations": sum(r.evaluations for r in reps),
        "wall_time": sum(r.wall_time for r in reps),
        "partial": any(r.partial for r in reps),
    }


def run(config: RunConfig, progress: Callable[[RunRecord], None] | None = None) -> RunOutcome:
    """Run every ``(p, ipart, replication)`` of the grid; records are flushed as they complete.

    Replication ``r`` at every grid point uses stream ``r`` under the config
    seed, so a one-point grid reproduces :func:`nestmc.estimators.replicate`.
    """
    problem = build_problem(config)
    check_compatible(config, problem)
    density = SwitchDensity(config.lam, config.shape_u)
    fn = _ESTIMATOR_FUNCS[config.estimator]
    reference = _reference(problem)
    digest = config.digest()
    sink = _Sink(config.output_path, config.output_format).open(config)
    records: list[RunRecord] = []
    summary: list[dict] = []
    t0 = time.perf_counter()
    stopped = False
    try:
        for p, ipart, plan in grid(config):
            reps = []
            for rep in range(config.replications):
                left = None
                if config.time_budget is not None:
                    left = config.time_budget - (time.perf_counter() - t0)
                    if left <= 0:
                        stopped = True
                        break
                res: EstimateResult = fn(
                    problem,
                    plan,
                    density,
                    config.seed,
                    replication=rep,
                    workers=config.workers or None,
                    time_budget=left,
                )
                if res.n_outer == 0:
                    stopped = True
                    break
                rec = RunRecord(
                    problem=problem.name,
                    estimator=config.estimator,
                    p=p,
                    ipart=ipart,
                    rep=rep,
                    counts=plan.counts,
                    lam=config.lam,
                    shape_u=config.shape_u,
                    seed=config.seed,
                    estimate=res.value,
                    std_error=res.std_error,
                    n_outer=res.n_outer,
                    evaluations=res.evaluations,
                    wall_time=res.wall_time,
                    reference=reference,
                    error=None if reference is None else res.value - reference,
                    partial=res.partial,
                    config_digest=digest,
                )
                records.append(rec)
                reps.append(rec)
                sink.write(rec)
                if progress is not None:
                    progress(rec)
                if res.partial:
                    stopped = True
                    break
            if reps:
                summary.append(_summarize(p, ipart, plan, reps, reference))
            if stopped:
                break
    finally:
        sink.close(summary)
    return RunOutcome(records, summary, stopped)


# ---------------------------------------------------------------------------


def report_budget(config: RunConfig) -> list[dict]:
    """Bias terms ``b(p)`` and variance coefficients ``v(i)`` per density rate, plus an allocation if a target is set.

    A problem without documented constants raises :class:`ConfigError`; no value is ever defaulted to zero.
    """
    problem = build_problem(config)
    consts = problem.budget_constants
    if consts is None:
        raise ConfigError(f"budget constants are not available for problem {problem.name!r}")
    rows = []
    for lam in config.budget_lambdas or (config.lam,):
        inputs = consts.at(lam, config.shape_u)
        eb = budget.error_budget(inputs, config.p_max, config.i_max)
        row = {"problem": problem.name, "lam": lam, "horizon": problem.horizon}
        row.update({f"bias_p{p}": v for p, v in eb.bias_terms.items()})
        row.update({f"var_i{i}": v for i, v in eb.var_coeffs.items()})
        if config.target_accuracy is not None:
            p = max(config.switches)
            row["target"] = config.target_accuracy
            row["alloc_p"] = p
            try:
                alloc = budget.allocate_particles(inputs, p, config.target_accuracy)
                row["allocation"] = "x".join(str(n) for n in alloc.counts)
                row["allocation_bound"] = budget.total_bound(inputs, alloc)
            except budget.InfeasibleBudgetError as exc:
                row["allocation"] = "infeasible"
                row["allocation_bound"] = exc.min_bound
        rows.append(row)
    return rows


def budget_table(rows: list[dict], p_max: int = 5, i_max: int = 4) -> str:
    """Bias/variance coefficients laid out with one column per density rate."""
    head = "term".ljust(10) + "".join(f"lam={r['lam']:<10g}" for r in rows)
    lines = [head]
    for p in range(1, p_max + 1):
        lines.append(f"bias p={p}".ljust(10) + "".join(f"{r[f'bias_p{p}']:<14.4g}" for r in rows))
    for i in range(i_max + 1):
        lines.append(f"var i={i}".ljust(10) + "".join(f"{r[f'var_i{i}']:<14.4g}" for r in rows))
    return "\n".join(lines)


def plan_preview(config: RunConfig) -> list[dict]:
    """Per grid point: counts, expected nodes per level and expected driver calls."""
    problem = build_problem(config)
    check_compatible(config, problem)
    density = SwitchDensity(config.lam, config.shape_u)
    rows = []
    for p, ipart, plan in grid(config):
        nodes = []
        prod = 1.0
        for i, n in enumerate(plan.counts):
            prod *= n
            states = 2.0 ** (i + 1) if config.estimator == "grad2" else 1.0
            nodes.append(prod * states * density.prob_sum_below(i, problem.horizon))
        rows.append({
            "p": p,
            "ipart": ipart,
            "counts": "x".join(str(n) for n in plan.counts),
            "expected_nodes_per_level": [float(f"{v:.4g}") for v in nodes],
            "expected_evaluations": expected_evaluations(plan, density, problem.horizon, config.estimator),
            "replications": config.replications,
        })
    return rows


def write_rows(rows: Iterable[dict], path: str | None, fmt: str) -> str:
    """Serialize rows as JSON lines or CSV; returns the text and writes it when ``path`` is given."""
    rows = list(rows)
    if fmt == "csv":
        import io

        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (json.dumps(v) if isinstance(v, (list, tuple)) else v) for k, v in r.items()})
        text = buf.getvalue()
    else:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text
