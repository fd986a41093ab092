"""Command-line entry point: ``nestmc run|budget|allocate|reference|list-problems``.

Exit codes: 0 success, 2 configuration error, 3 infeasible accuracy target,
4 time budget reached (partial output written).
"""

from __future__ import annotations

import json
import sys

import click

from nestmc import budget, config as cfg, runner
from nestmc.errors import ConfigError, InfeasibleBudgetError
from nestmc.problems import DESCRIPTIONS, linear_reference, list_problems, hjb_reference

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_TIME_BUDGET = 4


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(config_path, problem, **overrides) -> cfg.RunConfig:
    if config_path:
        conf = cfg.load(config_path)
    elif problem:
        # no plan given: a long placeholder base so any --switches value validates
        conf = cfg.RunConfig(problem=problem, base=(1000,) * 8)
    else:
        raise ConfigError("give --config PATH or --problem NAME")
    if problem and config_path:
        overrides["problem"] = problem
    return conf.with_overrides(**overrides)


def _common_overrides(seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget):
    over = dict(seed=seed, workers=workers, lam=lam, shape_u=shape_u, output_path=out, output_format=fmt,
                time_budget=time_budget)
    if ipart_range:
        over["ipart_min"], over["ipart_max"] = cfg.parse_range(ipart_range)
    if switches is not None:
        over["switches"] = (switches,)
    return over


def _options(fn):
    decorators = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML or JSON run config."),
        click.option("--problem", help="Catalog problem name (when no config is given, or to override it)."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Root seed (unsigned 64-bit)."),
        click.option("--workers", type=click.IntRange(0), help="Worker threads (0: one per CPU)."),
        click.option("--ipart-range", help="Particle scales A..B; counts are multiplied by 2**ipart."),
        click.option("--switches", type=click.IntRange(1), help="Number of switches p."),
        click.option("--lambda", "lam", type=float, help="Rate of the switching law."),
        click.option("--shape-u", type=float, help="Shape of the switching law (1 is exponential)."),
        click.option("--out", type=click.Path(), help="Output path prefix."),
        click.option("--format", "fmt", type=click.Choice(cfg.OUTPUT_FORMATS), help="Record format."),
        click.option("--time-budget", type=float, help="Wall-clock budget in seconds."),
    ]
    for dec in reversed(decorators):
        fn = dec(fn)
    return fn


def _guard(fn):
    """Map library errors to exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InfeasibleBudgetError as exc:
            _fail(str(exc), EXIT_INFEASIBLE)
        except ConfigError as exc:
            _fail(str(exc), EXIT_CONFIG)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="nestmc")
def main():
    """Nested Monte Carlo solvers for semi-linear parabolic PDEs."""


@main.command()
@_options
@click.option("--replications", type=click.IntRange(1), help="Replications per grid point.")
@click.option("--print-plan", is_flag=True, help="Print expected per-level costs and exit without running.")
@_guard
def run(config_path, problem, seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget,
        replications, print_plan):
    """Run the (switches, ipart) grid of a config and write one record per replication."""
    over = _common_overrides(seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget)
    over["replications"] = replications
    conf = _load(config_path, problem, **over)
    if print_plan:
        for row in runner.plan_preview(conf):
            click.echo(json.dumps(row))
        return

    def progress(rec):
        flag = " (partial)" if rec.partial else ""
        click.echo(
            f"p={rec.p} ipart={rec.ipart} rep={rec.rep} estimate={rec.estimate:.6g} "
            f"se={rec.std_error:.3g} evals={rec.evaluations} time={rec.wall_time:.1f}s{flag}",
            err=True,
        )

    outcome = runner.run(conf, progress=progress)
    click.echo(runner.write_rows(outcome.summary, None, "csv"), nl=False)
    if outcome.partial:
        click.echo("time budget reached; partial results written", err=True)
        sys.exit(EXIT_TIME_BUDGET)


@main.command("budget")
@_options
@click.option("--lambdas", help="Comma-separated density rates (one column each).")
@click.option("--target", type=float, help="Accuracy target; adds a recommended allocation.")
@_guard
def budget_cmd(config_path, problem, seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget,
               lambdas, target):
    """Print the bias and variance coefficients of the error bound."""
    over = _common_overrides(seed, workers, ipart_range, switches, lam, shape_u, None, None, time_budget)
    over["target_accuracy"] = target
    if lambdas:
        try:
            over["budget_lambdas"] = tuple(float(v) for v in lambdas.split(","))
        except ValueError:
            raise ConfigError(f"--lambdas expects comma-separated numbers, got {lambdas!r}") from None
    conf = _load(config_path, problem, **over)
    rows = runner.report_budget(conf)
    if fmt or out:
        text = runner.write_rows(rows, out, fmt or "jsonl")
        if not out:
            click.echo(text, nl=False)
    else:
        click.echo(runner.budget_table(rows, conf.p_max, conf.i_max))
        for r in rows:
            if "allocation" in r:
                click.echo(f"lam={r['lam']:g}: allocation for target {r['target']:.4g} with p={r['alloc_p']}: "
                           f"{r['allocation']} (bound {r['allocation_bound']:.4g})")


@main.command()
@_options
@click.option("--target", type=float, required=True, help="Squared-error target.")
@click.option("--cost-model", type=click.Choice(["expected_nodes", "unit"]), default="expected_nodes")
@_guard
def allocate(config_path, problem, seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget,
             target, cost_model):
    """Cheapest particle counts whose error bound meets TARGET."""
    over = _common_overrides(seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget)
    conf = _load(config_path, problem, **over)
    prob = runner.build_problem(conf)
    if prob.budget_constants is None:
        raise ConfigError(f"budget constants are not available for problem {prob.name!r}")
    inputs = prob.budget_constants.at(conf.lam, conf.shape_u)
    p = max(conf.switches)
    plan = budget.allocate_particles(inputs, p, target, cost_model)
    row = {
        "problem": prob.name,
        "lam": conf.lam,
        "p": p,
        "target": target,
        "counts": list(plan.counts),
        "bound": budget.total_bound(inputs, plan),
        "cost": budget.plan_cost(inputs, plan, cost_model),
        "cost_model": cost_model,
    }
    click.echo(runner.write_rows([row], conf.output_path if out else None, conf.output_format), nl=False)


@main.command()
@_options
@click.option("--n-mc", type=click.IntRange(1), default=1_000_000, show_default=True)
@_guard
def reference(config_path, problem, seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget, n_mc):
    """Reference value of the problem (closed form, published value or plain Monte Carlo)."""
    over = _common_overrides(seed, workers, ipart_range, switches, lam, shape_u, out, fmt, time_budget)
    conf = _load(config_path, problem, **over)
    prob = runner.build_problem(conf)
    s = conf.seed
    if prob.name == "hjb" and not conf.linear:
        p = prob.params
        value, se = hjb_reference(p["d"], p["theta_coef"], p["T"], n_mc, s)
        source = "monte-carlo"
    elif prob.driver.form == "zero":
        value, se = linear_reference(prob, n_mc, s)
        source = "monte-carlo (f = 0)"
    elif prob.reference is not None:
        value, se, source = prob.reference, prob.reference_se, prob.reference_source
    else:
        raise ConfigError(f"no reference available for {prob.name!r}")
    row = {"problem": prob.name, "reference": value, "std_error": se, "source": source}
    click.echo(runner.write_rows([row], out, fmt or "jsonl"), nl=False)


@main.command("list-problems")
def list_problems_cmd():
    """List the catalog problems."""
    for name in list_problems():
        click.echo(f"{name:12s} {DESCRIPTIONS[name]}")
    click.echo(f"{'custom':12s} built-in terminal and driver forms assembled from a config")


if __name__ == "__main__":
    main()
