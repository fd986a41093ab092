"""A-priori error bounds for the nested estimators and particle allocation.

Every constant (Lipschitz, Hölder, moment bounds) is an explicit input; none
is inferred from a driver. ``ProblemConstants`` holds the problem-dependent
part and ``ProblemConstants.at(lam, shape_u)`` attaches a switching law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from nestmc._special import gammainc_lower
from nestmc.errors import InfeasibleBudgetError
from nestmc.plan import NestingPlan
from nestmc.rng import RandomStream
from nestmc.sde import ConstantSde
from nestmc.switching import SwitchDensity


@dataclass(frozen=True)
class ProblemConstants:
    """Density-free constants of a problem.

    ``lipschitz_u`` bounds the driver's dependence on the value (or gradient)
    argument; ``holder_const`` and ``holder_exp`` bound the time regularity of
    the solution. ``sup_f2`` bounds ``sup_t E[f^2]``, ``g2`` bounds
    ``E[g(X_T)^2]`` and ``f_hat`` bounds ``sup_t E[f^4]^(1/2)``. The remaining
    Lipschitz constants are only needed by the gradient-scheme bounds.
    """

    lipschitz_u: float
    holder_const: float
    holder_exp: float
    horizon: float
    sup_f2: float
    g2: float
    terminal_lipschitz: float | None = None
    gradient_lipschitz: float | None = None
    driver_x_lipschitz: float | None = None
    f_hat: float | None = None
    notes: str = ""

    def __post_init__(self):
        for name in ("lipschitz_u", "holder_const", "sup_f2", "g2", "horizon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.holder_exp <= 1.0:
            raise ValueError("holder_exp must lie in (0, 1]")
        for name in ("terminal_lipschitz", "gradient_lipschitz", "driver_x_lipschitz", "f_hat"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    def at(self, lam: float, shape_u: float = 1.0) -> BudgetInputs:
        return BudgetInputs(lam=lam, shape_u=shape_u, **{f: getattr(self, f) for f in _CONSTANT_FIELDS})


_CONSTANT_FIELDS = (
    "lipschitz_u",
    "holder_const",
    "holder_exp",
    "horizon",
    "sup_f2",
    "g2",
    "terminal_lipschitz",
    "gradient_lipschitz",
    "driver_x_lipschitz",
    "f_hat",
)


@dataclass(frozen=True)
class BudgetInputs(ProblemConstants):
    lam: float = 1.0
    shape_u: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.lam > 0.0:
            raise ValueError("lam must be positive")
        if not self.shape_u > 0.0:
            raise ValueError("shape_u must be positive")

    def with_density(self, lam: float, shape_u: float | None = None) -> BudgetInputs:
        return replace(self, lam=lam, shape_u=self.shape_u if shape_u is None else shape_u)


def _counts(plan) -> tuple[int, ...]:
    counts = plan.counts if isinstance(plan, NestingPlan) else tuple(plan)
    if not counts or any(n < 1 for n in counts):
        raise ValueError("plan counts must be positive")
    return tuple(counts)


def bias_term(inputs: BudgetInputs, p: int) -> float:
    """Truncation bias after ``p`` switches."""
    if p < 1:
        raise ValueError("p must be >= 1")
    k2 = inputs.lipschitz_u**2
    t = inputs.horizon
    lam = inputs.lam
    return (
        k2**p
        * math.exp(lam * t)
        / lam**p
        * t ** (2.0 * inputs.holder_exp)
        * inputs.holder_const**2
        * t**p
        / (p * math.gamma(p))
    )


def kappa(inputs: BudgetInputs, i: int) -> float:
    if i < 0:
        raise ValueError("i must be >= 0")
    t = inputs.horizon
    f_part = 4.0 * t / (inputs.lam * math.factorial(i + 1)) * inputs.sup_f2
    g_factor = 1.0 if i == 0 else 1.0 / (i * math.gamma(i))
    return f_part + 2.0 * inputs.g2 * g_factor


def variance_coeff(inputs: BudgetInputs, i: int) -> float:
    """Level-``i`` variance coefficient; contributes ``v(i) / N_i`` to the bound."""
    t = inputs.horizon
    lam = inputs.lam
    return inputs.lipschitz_u ** (2 * i) * t**i * math.exp(lam * t) / lam**i * kappa(inputs, i)


def _inflation(counts, i: int) -> float:
    # prod_{j=1}^{i} (1 + 8 / N_{j-1})
    out = 1.0
    for j in range(1, i + 1):
        out *= 1.0 + 8.0 / counts[j - 1]
    return out


def total_bound(inputs: BudgetInputs, plan) -> float:
    """Squared-error bound of the value estimator for ``plan``."""
    counts = _counts(plan)
    p = len(counts)
    total = _inflation(counts, p) * bias_term(inputs, p)
    for i in range(p):
        total += variance_coeff(inputs, i) / counts[i] * _inflation(counts, i)
    return total


@dataclass(frozen=True)
class ErrorBudget:
    inputs: BudgetInputs
    bias_terms: dict[int, float]
    kappa: dict[int, float]
    var_coeffs: dict[int, float]

    def total_bound(self, plan) -> float:
        return total_bound(self.inputs, plan)

    def as_records(self) -> list[dict]:
        rows = [{"term": "bias", "index": p, "value": v} for p, v in self.bias_terms.items()]
        rows += [{"term": "var", "index": i, "value": v} for i, v in self.var_coeffs.items()]
        return rows


def error_budget(inputs: BudgetInputs, p_max: int = 5, i_max: int = 4) -> ErrorBudget:
    return ErrorBudget(
        inputs,
        {p: bias_term(inputs, p) for p in range(1, p_max + 1)},
        {i: kappa(inputs, i) for i in range(i_max + 1)},
        {i: variance_coeff(inputs, i) for i in range(i_max + 1)},
    )


# ---------------------------------------------------------------------------
# gradient-scheme bounds


@dataclass(frozen=True)
class SigmaConstants:
    """Moments of ``phi = |sigma^{-T} G|^2`` for a standard Gaussian ``G``.

    ``c_sigma`` is exact; the other three are Monte Carlo estimates whose
    standard errors are kept in ``std_errors``.
    """

    c_sigma: float
    c_tilde: float
    c_bar: float
    bar_c_sigma: float
    std_errors: dict = field(default_factory=dict)


def sigma_constants(sde: ConstantSde, horizon: float, n_mc: int = 200_000, seed: int = 0) -> SigmaConstants:
    if sde.sigma_inv_t is None:
        raise ValueError("sigma must be invertible")
    inv = sde.sigma_inv_t.T
    c_sigma = float(np.sum(inv * inv))
    stream = RandomStream(seed, 0x5167)
    g = stream.normal(n_mc * sde.dim).reshape(n_mc, sde.dim)
    phi = np.sum((g @ sde.sigma_inv_t.T) ** 2, axis=1)
    sg2 = np.sum(sde.diffuse(g) ** 2, axis=1)
    mu2 = float(sde.mu @ sde.mu)

    def mean_se(sample):
        return float(sample.mean()), float(sample.std(ddof=1) / math.sqrt(n_mc))

    phi2, phi2_se = mean_se(phi**2)
    c_tilde = math.sqrt(phi2)
    c_bar, c_bar_se = mean_se((2.0 * mu2 * horizon + 2.0 * sg2) * phi)
    bar_c, bar_c_se = mean_se(4.0 * phi * sg2)
    return SigmaConstants(
        c_sigma,
        c_tilde,
        c_bar,
        bar_c,
        # delta method for the square root
        {"c_tilde": phi2_se / (2.0 * c_tilde), "c_bar": c_bar_se, "bar_c_sigma": bar_c_se},
    )


def _require_gamma(inputs: BudgetInputs):
    u = inputs.shape_u
    if not u < 1.0:
        raise ValueError(f"the gradient-scheme bounds need shape_u < 1, got {u}")
    return u


def _require(inputs: BudgetInputs, *names):
    missing = [n for n in names if getattr(inputs, n) is None]
    if missing:
        raise ValueError(f"missing constants for this bound: {', '.join(missing)}")


def _horizon_mass(inputs: BudgetInputs) -> float:
    # Gamma(u) - gamma(u, lam T), i.e. Gamma(u) * P(tau > T)
    u = inputs.shape_u
    return math.gamma(u) * (1.0 - gammainc_lower(u, inputs.lam * inputs.horizon))


def _semilinear_bias(inputs, sc, counts):
    u = inputs.shape_u
    p = len(counts)
    t, lam = inputs.horizon, inputs.lam
    return (
        _inflation(counts, p)
        * math.gamma(u) ** p
        * math.exp(lam * t)
        / lam**p
        * t ** ((1 - u) * p + 1 + 2 * inputs.holder_exp)
        / ((1 - u) ** (p - 1) * (2 - u))
        * sc.c_sigma ** (p - 1)
        * inputs.holder_const**2
        * inputs.lipschitz_u ** (2 * p)
    )


def _terminal_term(inputs, counts):
    return 2.0 / counts[0] * math.gamma(inputs.shape_u) / _horizon_mass(inputs) * inputs.g2


def semilinear_bound_scheme1(inputs: BudgetInputs, sc: SigmaConstants, plan) -> float:
    """Squared-error bound of the Malliavin-weight gradient scheme (gamma law, ``shape_u < 1``)."""
    u = _require_gamma(inputs)
    _require(inputs, "f_hat", "terminal_lipschitz")
    counts = _counts(plan)
    p = len(counts)
    t, lam, k = inputs.horizon, inputs.lam, inputs.lipschitz_u
    eg = math.exp(lam * t)
    total = _semilinear_bias(inputs, sc, counts)
    for i in range(p):
        total += (
            4.0
            * k ** (2 * i)
            / counts[i]
            * _inflation(counts, i)
            * math.gamma(u) ** (i + 1)
            * eg
            / lam ** (i + 1)
            * t ** ((1 - u) * (i + 1) + 1)
            / ((1 - u) ** i * (2 - u))
            * sc.c_tilde**i
            * inputs.f_hat
        )
    for i in range(1, p):
        total += (
            2.0
            * k ** (2 * i)
            / counts[i]
            * _inflation(counts, i)
            * math.gamma(u) ** (i + 1)
            * eg
            / lam**i
            * t ** ((1 - u) * i + 1)
            / ((1 - u) ** (i - 1) * (2 - u))
            * sc.c_bar
            * sc.c_sigma ** (i - 1)
            * inputs.terminal_lipschitz**2
            / _horizon_mass(inputs)
        )
    return total + _terminal_term(inputs, counts)


def antithetic_constant(inputs: BudgetInputs, sc: SigmaConstants) -> float:
    """Constant multiplying the level terms of the antithetic bound.

    Taken as ``(K_under + K * K_bar)^2 * bar_c_sigma``: the driver's spatial
    Lipschitz constant plus the gradient's, propagated through ``f``.
    """
    _require(inputs, "gradient_lipschitz", "driver_x_lipschitz")
    return (inputs.driver_x_lipschitz + inputs.lipschitz_u * inputs.gradient_lipschitz) ** 2 * sc.bar_c_sigma


def semilinear_bound_scheme2(inputs: BudgetInputs, sc: SigmaConstants, plan) -> float:
    """Squared-error bound of the antithetic gradient scheme (gamma law, ``shape_u < 1``)."""
    u = _require_gamma(inputs)
    _require(inputs, "f_hat", "terminal_lipschitz", "gradient_lipschitz", "driver_x_lipschitz")
    counts = _counts(plan)
    p = len(counts)
    t, lam, k = inputs.horizon, inputs.lam, inputs.lipschitz_u
    eg = math.exp(lam * t)
    c_anti = antithetic_constant(inputs, sc)
    total = _semilinear_bias(inputs, sc, counts)
    for i in range(1, p):
        infl = _inflation(counts, i)
        total += (
            k ** (2 * i)
            / counts[i]
            * infl
            * c_anti
            * sc.c_sigma ** (i - 1)
            * math.gamma(u) ** (i + 1)
            * eg
            / lam ** (i + 1)
            * t ** ((1 - u) * i + 3 - u)
            / ((2 - u) ** 2 * (1 - u) ** (i - 1))
        )
        total += (
            k ** (2 * i)
            / (2.0 * counts[i])
            * infl
            * sc.c_sigma ** (i - 1)
            * inputs.terminal_lipschitz**2
            * math.gamma(u) ** (i + 1)
            * eg
            / (lam**i * _horizon_mass(inputs))
            * sc.bar_c_sigma
            * t ** ((1 - u) * i + 1)
            / ((2 - u) * (1 - u) ** (i - 1))
        )
    total += 4.0 / counts[0] * math.gamma(u) / lam * eg * t ** (2 - u) / (2 - u) * inputs.f_hat
    return total + _terminal_term(inputs, counts)


# ---------------------------------------------------------------------------
# allocation


def level_reach_probabilities(inputs: BudgetInputs, p: int) -> list[float]:
    """``q_i = P(T_i < T)``: chance that a depth-``i`` node is expanded (``q_0 = 1``)."""
    density = SwitchDensity(inputs.lam, inputs.shape_u)
    return [density.prob_sum_below(i, inputs.horizon) for i in range(p)]


def plan_cost(inputs: BudgetInputs, plan, cost_model: str = "expected_nodes") -> float:
    """Tree size of ``plan``: ``sum_i q_i * prod_{j<=i} N_j``.

    ``cost_model="unit"`` sets every ``q_i`` to 1 (every level fully expanded).
    """
    counts = _counts(plan)
    if cost_model == "expected_nodes":
        q = level_reach_probabilities(inputs, len(counts))
    elif cost_model == "unit":
        q = [1.0] * len(counts)
    else:
        raise ValueError(f"unknown cost model {cost_model!r}")
    total, prod = 0.0, 1.0
    for qi, n in zip(q, counts):
        prod *= n
        total += qi * prod
    return total


def allocate_particles(
    inputs: BudgetInputs, p: int, target_accuracy: float, cost_model: str = "expected_nodes"
) -> NestingPlan:
    """Cheapest plan (under ``cost_model``) whose :func:`total_bound` is at most the target."""
    if p < 1:
        raise ValueError("p must be >= 1")
    floor = bias_term(inputs, p)
    if not target_accuracy > floor:
        raise InfeasibleBudgetError(
            f"target {target_accuracy:.4g} is not above the depth-{p} bias b({p}) = {floor:.4g}; "
            "increase p or relax the target",
            min_bound=floor,
        )
    v = [variance_coeff(inputs, i) for i in range(p)]
    if p == 1:
        # (1 + 8/N) b + v0/N <= target  <=>  N >= (v0 + 8 b) / (target - b)
        n0 = max(1, math.ceil((v[0] + 8.0 * floor) / (target_accuracy - floor)))
        return _verified(inputs, (n0,), target_accuracy)

    def cost(logn):
        return math.log(plan_cost(inputs, np.exp(logn), cost_model))

    def slack(logn):
        return 1.0 - total_bound(inputs, np.exp(logn)) / target_accuracy

    best = None
    # start from equal shares of the variance budget, then let SLSQP trade levels off
    spare = target_accuracy - floor
    for share in (0.3, 0.5, 0.7, 0.9):
        n_start = [max(1.0, p * v[i] / (share * spare)) for i in range(p)]
        x0 = np.log(n_start)
        res = optimize.minimize(
            cost,
            x0,
            method="SLSQP",
            bounds=[(0.0, 60.0)] * p,
            constraints=[{"type": "ineq", "fun": slack}],
            options={"maxiter": 500, "ftol": 1e-12},
        )
        counts = _round_feasible(inputs, np.exp(res.x), target_accuracy)
        if counts is None:
            continue
        c = plan_cost(inputs, counts, cost_model)
        if best is None or c < best[0]:
            best = (c, counts)
    if best is None:
        raise InfeasibleBudgetError(f"no feasible plan found for target {target_accuracy:.4g}", min_bound=floor)
    return _verified(inputs, best[1], target_accuracy)


def _round_feasible(inputs, n_cont, target):
    counts = [max(1, math.ceil(n - 1e-9)) for n in n_cont]
    # the bound is decreasing in every N_i; nudge up if the optimizer stopped just outside
    for _ in range(200):
        if total_bound(inputs, counts) <= target:
            return tuple(counts)
        counts = [math.ceil(n * 1.01) for n in counts]
    return None


def _verified(inputs, counts, target) -> NestingPlan:
    plan = NestingPlan(tuple(int(n) for n in counts))
    bound = total_bound(inputs, plan)
    if bound > target:
        raise AssertionError(f"allocated plan violates its bound ({bound} > {target})")
    return plan
