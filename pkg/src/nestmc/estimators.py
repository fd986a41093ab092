"""Nested Monte Carlo estimators over randomized switching dates.

Three estimators share one compiled recursion (see ``_kernels``):

* :func:`estimate_value` for drivers depending on ``(t, x, u)``;
* :func:`estimate_gradient_scheme1`, where inner nodes estimate ``Du`` with a
  Malliavin weight and a ``g(parent)`` control variate;
* :func:`estimate_gradient_scheme2`, where inner nodes estimate ``Du`` from
  antithetic pairs. Plan counts are numbers of pairs.

Outer samples are split into fixed chunks and run on a thread pool (the
kernels release the GIL). Every outer sample draws from a stream derived from
the root seed and its index alone, and the merge is an exact ``math.fsum``
over per-sample values in index order, so results do not depend on the
number of workers or the chunk size.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from nestmc import _kernels as kern
from nestmc.errors import ConfigError
from nestmc.plan import NestingPlan
from nestmc.problems import Problem
from nestmc.rng import derive_key, seed_key
from nestmc.switching import SwitchDensity

__all__ = [
    "NestingPlan",
    "EstimateResult",
    "weight_phi_hat",
    "weight_phi_cv",
    "estimate_value",
    "estimate_gradient_scheme1",
    "estimate_gradient_scheme2",
    "replicate",
    "expected_evaluations",
    "root_key_for",
]

ESTIMATORS = ("value", "grad1", "grad2")
_MODES = {"value": kern.MODE_VALUE, "grad1": kern.MODE_MALLIAVIN, "grad2": kern.MODE_ANTITHETIC}


@dataclass
class EstimateResult:
    """Outcome of one estimate (or of :func:`replicate`).

    ``std_error`` is the sample standard deviation of the outer contributions
    over ``sqrt(n_outer)`` for a single run, and the spread of the replicate
    values over ``sqrt(n_reps)`` for a replicated run. ``evaluations``
    counts driver calls. ``partial`` is set when a time budget stopped the
    run early; the estimate then uses the completed outer samples only.
    """

    value: float
    std_error: float
    n_outer: int
    wall_time: float
    evaluations: int
    gradient: np.ndarray | None = None
    gradient_se: np.ndarray | None = None
    partial: bool = False
    horizon_evaluations: int = 0
    replicates: tuple[float, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def confidence_interval(self, z: float = 1.96) -> tuple[float, float]:
        return self.value - z * self.std_error, self.value + z * self.std_error

    def as_dict(self) -> dict:
        out = {
            "value": self.value,
            "std_error": self.std_error,
            "n_outer": self.n_outer,
            "wall_time": self.wall_time,
            "evaluations": self.evaluations,
            "partial": self.partial,
        }
        if self.gradient is not None:
            out["gradient"] = [float(v) for v in self.gradient]
            out["gradient_se"] = [float(v) for v in self.gradient_se]
        if self.replicates:
            out["replicates"] = list(self.replicates)
        return out


# ---------------------------------------------------------------------------
# single-node weights (Python reference versions of what the kernel does)


def weight_phi_hat(s: float, t: float, horizon: float, density: SwitchDensity, g_value: float, f_value: float,
                   at_horizon: bool | None = None) -> float:
    """Contribution of one child: ``g / P(tau > T - s)`` at the horizon, ``f / rho(t - s)`` before it."""
    hit = t >= horizon if at_horizon is None else at_horizon
    if hit:
        return g_value / density.survival(horizon - s)
    return f_value / density.pdf(t - s)


def weight_phi_cv(s: float, t: float, horizon: float, density: SwitchDensity, g_child: float, g_parent: float,
                  f_value: float, at_horizon: bool | None = None) -> float:
    """:func:`weight_phi_hat` with ``g(parent)`` subtracted as a control variate in the horizon branch."""
    hit = t >= horizon if at_horizon is None else at_horizon
    if hit:
        return (g_child - g_parent) / density.survival(horizon - s)
    return f_value / density.pdf(t - s)


# ---------------------------------------------------------------------------


def root_key_for(seed: int, replication: int = 0) -> np.uint64:
    """Root stream key of replication ``replication`` under ``seed``."""
    return np.uint64(derive_key(seed_key(seed), np.uint64(replication)))


def _kernel_spec(problem: Problem, plan: NestingPlan, density: SwitchDensity, mode: int) -> kern.KernelSpec:
    sde = problem.sde
    d = sde.dim
    diag = sde.sigma_diag is not None
    sinvt = sde.sigma_inv_t if sde.sigma_inv_t is not None else np.full((d, d), np.nan)
    return kern.KernelSpec(
        mode=mode,
        depth=plan.depth,
        counts=np.asarray(plan.counts, dtype=np.int64),
        horizon=float(problem.horizon),
        lam=density.lam,
        shape_u=density.shape_u,
        log_norm=density.log_norm,
        mu=np.ascontiguousarray(sde.mu),
        sig=np.ascontiguousarray(sde.sigma),
        sig_d=np.ascontiguousarray(sde.sigma_diag if diag else np.zeros(d)),
        sinvt=np.ascontiguousarray(sinvt),
        sinvt_d=np.ascontiguousarray(np.diag(sinvt) if diag else np.zeros(d)),
        diag=diag,
        tkind=problem.terminal.kind,
        tpar=np.ascontiguousarray(problem.terminal.params),
        fkind=problem.driver.kind,
        fpar=np.ascontiguousarray(problem.driver.params),
    )


def _as_plan(plan) -> NestingPlan:
    if isinstance(plan, NestingPlan):
        return plan
    try:
        return NestingPlan(tuple(plan))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid plan {plan!r}: {exc}") from None


def _check(problem: Problem, plan: NestingPlan, density: SwitchDensity, estimator: str):
    if estimator == "value":
        if problem.driver.uses_z:
            raise ConfigError(f"the value estimator does not support the gradient-dependent driver {problem.driver.form!r}")
        if not density.is_exponential:
            warnings.warn("the value estimator is analyzed for the exponential law only", stacklevel=3)
    else:
        if not problem.terminal.has_gradient:
            raise ConfigError(f"terminal form {problem.terminal.form!r} has no gradient; gradient schemes need Dg")
        if problem.sde.sigma_inv_t is None:
            raise ConfigError("gradient schemes need an invertible sigma")
        if density.shape_u >= 1.0:
            warnings.warn("gradient schemes are analyzed for shape_u < 1; running anyway", stacklevel=3)
        if estimator == "grad2" and 2**plan.depth * problem.dim > 50_000_000:
            raise ConfigError(f"antithetic workspace 2**{plan.depth} x {problem.dim} is too large")


# driver calls per chunk; keeps time-budget checks a fraction of a second apart
_CHUNK_WORK = 2_000_000


def _default_chunk(n_outer: int, workers: int, work_per_outer: float = 1.0) -> int:
    by_work = max(1, int(_CHUNK_WORK / max(work_per_outer, 1.0)))
    return max(1, min(2048, by_work, math.ceil(n_outer / (8 * workers))))


def _fsum_moments(vals: np.ndarray) -> tuple[float, float]:
    n = vals.shape[0]
    mean = math.fsum(vals) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((vals - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _tau_deciles(taus: np.ndarray, contrib2: np.ndarray) -> list[dict]:
    edges = np.quantile(taus, np.linspace(0.0, 1.0, 11))
    idx = np.clip(np.searchsorted(edges, taus, side="right") - 1, 0, 9)
    rows = []
    for b in range(10):
        sel = idx == b
        rows.append({
            "tau_lo": float(edges[b]),
            "tau_hi": float(edges[b + 1]),
            "count": int(sel.sum()),
            "second_moment": float(contrib2[sel].mean()) if sel.any() else math.nan,
        })
    return rows


def _run(problem, plan, density, estimator, seed, replication, x0, workers, chunk_size, time_budget, diagnostics):
    plan = _as_plan(plan)
    if not isinstance(density, SwitchDensity):
        density = SwitchDensity(*density) if isinstance(density, tuple) else SwitchDensity(float(density))
    _check(problem, plan, density, estimator)
    mode = _MODES[estimator]
    spec = _kernel_spec(problem, plan, density, mode)
    start = problem.x0 if x0 is None else np.asarray(x0, dtype=float)
    if start.shape != (problem.dim,):
        raise ConfigError(f"x0 must have shape ({problem.dim},)")
    start = np.ascontiguousarray(start)
    key = root_key_for(seed, replication)
    workers = max(1, int(workers or os.cpu_count() or 1))
    n0 = plan.n_outer
    if chunk_size:
        chunk = int(chunk_size)
    else:
        per_outer = expected_evaluations(plan, density, problem.horizon, estimator) / n0
        chunk = _default_chunk(n0, workers, per_outer)
    bounds = [(j, min(j + chunk, n0)) for j in range(0, n0, chunk)]

    t0 = time.perf_counter()
    results: list = [None] * len(bounds)
    stopped = False

    def over_budget():
        return time_budget is not None and time.perf_counter() - t0 > time_budget

    if workers == 1:
        for c, (j0, j1) in enumerate(bounds):
            if over_budget():
                stopped = True
                break
            results[c] = kern.run_chunk(spec, key, start, j0, j1)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            inflight: deque = deque()
            nxt = 0
            while True:
                while nxt < len(bounds) and len(inflight) < 2 * workers and not stopped:
                    if over_budget():
                        stopped = True
                        break
                    j0, j1 = bounds[nxt]
                    inflight.append((nxt, pool.submit(kern.run_chunk, spec, key, start, j0, j1)))
                    nxt += 1
                if not inflight:
                    break
                c, fut = inflight.popleft()
                results[c] = fut.result()
    wall = time.perf_counter() - t0

    # keep a contiguous prefix so a partial result is still a deterministic function of the seed
    done = []
    for r in results:
        if r is None:
            break
        done.append(r)
    partial = len(done) < len(bounds)
    if not done:
        return EstimateResult(math.nan, math.nan, 0, wall, 0, partial=True)
    vals = np.concatenate([r[0] for r in done])
    taus = np.concatenate([r[2] for r in done])
    tally = np.sum([r[3] for r in done], axis=0)
    value, se = _fsum_moments(vals)
    grad = grad_se = None
    diag_out = {}
    if mode != kern.MODE_VALUE:
        grads = np.concatenate([r[1] for r in done])
        moments = [_fsum_moments(grads[:, i]) for i in range(problem.dim)]
        grad = np.array([m for m, _ in moments])
        grad_se = np.array([s for _, s in moments])
        if diagnostics:
            contrib2 = np.sum(grads * grads, axis=1)
            diag_out["max_abs_gradient_contribution"] = float(np.sqrt(contrib2.max()))
            diag_out["tau_deciles"] = _tau_deciles(taus, contrib2)
    if diagnostics:
        diag_out["max_abs_contribution"] = float(np.abs(vals).max())
        diag_out.setdefault("tau_deciles", _tau_deciles(taus, vals * vals))
        diag_out["value_samples"] = vals
    return EstimateResult(
        value=value,
        std_error=se,
        n_outer=int(vals.shape[0]),
        wall_time=wall,
        evaluations=int(tally[0]),
        gradient=grad,
        gradient_se=grad_se,
        partial=partial or stopped,
        horizon_evaluations=int(tally[1]),
        diagnostics=diag_out,
    )


def estimate_value(problem: Problem, plan, density: SwitchDensity, seed: int = 0, *, replication: int = 0,
                   x0=None, workers: int | None = None, chunk_size: int | None = None,
                   time_budget: float | None = None, diagnostics: bool = False) -> EstimateResult:
    """Estimate ``u(0, x0)`` for a driver depending on ``(t, x, u)``.

    Each node draws ``plan[i]`` children at depth ``i``; nodes whose date
    reaches the horizon stop and contribute ``g``; depth-``p`` nodes use
    ``g`` as the continuation value.
    """
    return _run(problem, plan, density, "value", seed, replication, x0, workers, chunk_size, time_budget, diagnostics)


def estimate_gradient_scheme1(problem: Problem, plan, density: SwitchDensity, seed: int = 0, *, replication: int = 0,
                              x0=None, workers: int | None = None, chunk_size: int | None = None,
                              time_budget: float | None = None, diagnostics: bool = False) -> EstimateResult:
    """Value and gradient at ``(0, x0)``; inner gradients by Malliavin weights with a ``g`` control variate."""
    return _run(problem, plan, density, "grad1", seed, replication, x0, workers, chunk_size, time_budget, diagnostics)


def estimate_gradient_scheme2(problem: Problem, plan, density: SwitchDensity, seed: int = 0, *, replication: int = 0,
                              x0=None, workers: int | None = None, chunk_size: int | None = None,
                              time_budget: float | None = None, diagnostics: bool = False) -> EstimateResult:
    """Value and gradient at ``(0, x0)`` from antithetic pairs; ``plan[i]`` counts pairs."""
    return _run(problem, plan, density, "grad2", seed, replication, x0, workers, chunk_size, time_budget, diagnostics)


_ESTIMATOR_FUNCS = {
    "value": estimate_value,
    "grad1": estimate_gradient_scheme1,
    "grad2": estimate_gradient_scheme2,
}


def replicate(estimator: str, problem: Problem, plan, density: SwitchDensity, n_reps: int, seed: int = 0,
              **kwargs) -> EstimateResult:
    """Mean of ``n_reps`` independent estimates; replication ``r`` uses stream ``r`` under ``seed``.

    With ``n_reps == 1`` the result equals the single run with that seed.
    A time budget applies to the whole set of replications.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if estimator not in _ESTIMATOR_FUNCS:
        raise ConfigError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    fn = _ESTIMATOR_FUNCS[estimator]
    budget = kwargs.pop("time_budget", None)
    t0 = time.perf_counter()
    runs = []
    for r in range(n_reps):
        left = None if budget is None else budget - (time.perf_counter() - t0)
        if left is not None and left <= 0:
            break
        res = fn(problem, plan, density, seed, replication=r, time_budget=left, **kwargs)
        if res.n_outer == 0:
            break
        runs.append(res)
        if res.partial:
            break
    if not runs:
        return EstimateResult(math.nan, math.nan, 0, time.perf_counter() - t0, 0, partial=True)
    if len(runs) == 1:
        only = runs[0]
        only.replicates = (only.value,)
        only.partial = only.partial or n_reps > 1
        return only
    vals = np.array([r.value for r in runs])
    value, se = _fsum_moments(vals)
    grad = grad_se = None
    if runs[0].gradient is not None:
        gmat = np.array([r.gradient for r in runs])
        moments = [_fsum_moments(gmat[:, i]) for i in range(gmat.shape[1])]
        grad = np.array([m for m, _ in moments])
        grad_se = np.array([s for _, s in moments])
    return EstimateResult(
        value=value,
        std_error=se,
        n_outer=sum(r.n_outer for r in runs),
        wall_time=sum(r.wall_time for r in runs),
        evaluations=sum(r.evaluations for r in runs),
        gradient=grad,
        gradient_se=grad_se,
        partial=len(runs) < n_reps or any(r.partial for r in runs),
        horizon_evaluations=sum(r.horizon_evaluations for r in runs),
        replicates=tuple(float(v) for v in vals),
        diagnostics={"replicate_std_errors": [r.std_error for r in runs]},
    )


def expected_evaluations(plan, density: SwitchDensity, horizon: float, estimator: str = "value") -> float:
    """Expected number of driver calls of one estimate.

    A depth-``i`` node (``i >= 1``) calls the driver when its date is before
    the horizon, which happens with probability ``P(Gamma(i*u, lam) < T)``;
    there are ``prod_{j<i} N_j`` of them, times ``2**i`` mirrored states
    for the antithetic scheme.
    """
    plan = _as_plan(plan)
    total = 0.0
    nodes = 1.0
    for i in range(1, plan.depth + 1):
        nodes *= plan.counts[i - 1]
        states = 2.0**i if estimator == "grad2" else 1.0
        total += nodes * states * density.prob_sum_below(i, horizon)
    return total
