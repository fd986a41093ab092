"""Catalog of benchmark semi-linear PDEs and their reference values.

Each problem couples a :class:`~nestmc.sde.ConstantSde` with a terminal
condition ``g`` and a driver ``f(t, x, y, z)`` (``y`` the value, ``z`` the
spatial gradient of the solution). Terminals and drivers are chosen from a
fixed set of functional forms shared with the compiled kernels, so the
Python evaluators below and the estimators run the same formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numba import njit
from scipy.special import ndtr

from nestmc import _kernels as kern
from nestmc.budget import ProblemConstants
from nestmc.errors import ConfigError
from nestmc.rng import RandomStream
from nestmc.sde import ConstantSde, log_asset_transform
from nestmc.switching import SwitchDensity

TERMINAL_KINDS = {
    "constant": kern.T_CONST,
    "linear": kern.T_LINEAR,
    "cos_sum": kern.T_COS_SUM,
    "sign_count": kern.T_SIGN_COUNT,
    "min_exp": kern.T_MIN_EXP,
    "logistic": kern.T_LOGISTIC,
    "log_norm": kern.T_LOG_NORM,
}

DRIVER_KINDS = {
    "zero": kern.F_ZERO,
    "affine": kern.F_AFFINE,
    "toy_cosine": kern.F_TOY_COSINE,
    "cva": kern.F_CVA,
    "default_risk": kern.F_DEFAULT_RISK,
    "burgers": kern.F_BURGERS,
    "hjb": kern.F_HJB,
}

# which arguments each driver form reads: (uses_y, uses_z)
_DRIVER_ARGS = {
    "zero": (False, False),
    "toy_cosine": (True, False),
    "cva": (True, False),
    "default_risk": (True, False),
    "burgers": (True, True),
    "hjb": (False, True),
}


@njit(cache=True, nogil=True)
def _terminal_rows(kind, par, x, out):
    for r in range(x.shape[0]):
        out[r] = kern.terminal_value(kind, par, x, r)


@njit(cache=True, nogil=True)
def _terminal_gradient_rows(kind, par, x, out):
    for r in range(x.shape[0]):
        kern.terminal_gradient(kind, par, x, r, out, r)


@njit(cache=True, nogil=True)
def _driver_rows(kind, par, t, x, y, z, out):
    for r in range(x.shape[0]):
        out[r] = kern.driver_value(kind, par, t[r], x, r, y[r], z)


def _params(values) -> np.ndarray:
    arr = np.array(values, dtype=float).ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Terminal:
    """Terminal condition ``g`` of a built-in form."""

    form: str
    params: np.ndarray = field(default_factory=lambda: _params([0.0]))

    def __post_init__(self):
        if self.form not in TERMINAL_KINDS:
            raise ConfigError(f"unknown terminal form {self.form!r}; choose from {sorted(TERMINAL_KINDS)}")
        p = _params(self.params)
        object.__setattr__(self, "params", p if p.size else _params([0.0]))

    @property
    def kind(self) -> int:
        return TERMINAL_KINDS[self.form]

    @property
    def has_gradient(self) -> bool:
        return self.form != "sign_count"

    def value(self, x):
        """``g`` at one point (returns a float) or at each row of a batch."""
        single = np.ndim(x) == 1
        xs = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        out = np.empty(xs.shape[0])
        _terminal_rows(self.kind, self.params, xs, out)
        return float(out[0]) if single else out

    def gradient(self, x):
        if not self.has_gradient:
            raise ConfigError(f"terminal form {self.form!r} has no gradient")
        single = np.ndim(x) == 1
        xs = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
        out = np.empty_like(xs)
        _terminal_gradient_rows(self.kind, self.params, xs, out)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class Driver:
    """Driver ``f(t, x, y, z)`` of a built-in form with its Lipschitz constants.

    ``lipschitz_u``/``lipschitz_z``/``lipschitz_x`` bound the driver's
    sensitivity to ``y``, ``z`` and ``x``; ``None`` means not available (or
    only valid on a restricted domain, see ``domain_note``).
    """

    form: str
    params: np.ndarray = field(default_factory=lambda: _params([0.0]))
    lipschitz_u: float | None = None
    lipschitz_z: float | None = None
    lipschitz_x: float | None = None
    domain_note: str = ""

    def __post_init__(self):
        if self.form not in DRIVER_KINDS:
            raise ConfigError(f"unknown driver form {self.form!r}; choose from {sorted(DRIVER_KINDS)}")
        p = _params(self.params)
        object.__setattr__(self, "params", p if p.size else _params([0.0]))

    @property
    def kind(self) -> int:
        return DRIVER_KINDS[self.form]

    @property
    def uses_y(self) -> bool:
        if self.form == "affine":
            return self.params.size > 1 and self.params[1] != 0.0
        return _DRIVER_ARGS[self.form][0]

    @property
    def uses_z(self) -> bool:
        if self.form == "affine":
            return bool(np.any(self.params[2:] != 0.0))
        return _DRIVER_ARGS[self.form][1]

    def evaluate(self, t, x, y, z=None):
        """Vectorized ``f``: ``x`` and ``z`` are points or row batches, ``t`` and ``y`` scalars or vectors."""
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        single = np.ndim(x) == 1 and np.ndim(y) == 0 and np.ndim(t) == 0
        d = xs.shape[1]
        n = max(xs.shape[0], np.size(y), np.size(t), 1 if z is None else np.atleast_2d(z).shape[0])
        xs = np.ascontiguousarray(np.broadcast_to(xs, (n, d)))
        zs = np.zeros((n, d)) if z is None else np.ascontiguousarray(np.broadcast_to(np.asarray(z, float), (n, d)))
        ts = np.ascontiguousarray(np.broadcast_to(np.asarray(t, float), (n,)))
        ys = np.ascontiguousarray(np.broadcast_to(np.asarray(y, float), (n,)))
        out = np.empty(n)
        _driver_rows(self.kind, self.params, ts, xs, ys, zs, out)
        return float(out[0]) if single else out

    def __call__(self, t, x, y, z=None):
        return self.evaluate(t, x, y, z)


@dataclass(frozen=True, eq=False)
class Problem:
    """A semi-linear PDE posed on ``[0, horizon]``, solved at ``(0, sde.x0)``.

    ``reference`` is the best available value of ``u(0, x0)`` with its
    standard error (``0`` for closed forms) and ``reference_source`` saying
    where it comes from. ``solution`` is the closed-form ``u(t, x)`` when one
    is known.
    """

    name: str
    sde: ConstantSde
    horizon: float
    terminal: Terminal
    driver: Driver
    budget_constants: ProblemConstants | None = None
    reference: float | None = None
    reference_se: float = 0.0
    reference_source: str = ""
    solution: Callable | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.driver.uses_z and not self.terminal.has_gradient:
            raise ConfigError("a gradient-dependent driver needs a terminal condition with a gradient")

    @property
    def dim(self) -> int:
        return self.sde.dim

    @property
    def x0(self) -> np.ndarray:
        return self.sde.x0

    def g(self, x):
        return self.terminal.value(x)

    def dg(self, x):
        return self.terminal.gradient(x)

    def f(self, t, x, y, z=None):
        return self.driver.evaluate(t, x, y, z)

    def with_x0(self, x0) -> Problem:
        sol = self.solution
        ref = float(sol(0.0, np.asarray(x0, float))) if sol is not None else None
        source = "analytic" if sol is not None else ""
        return replace(self, sde=self.sde.with_x0(x0), reference=ref, reference_se=0.0, reference_source=source)

    def with_driver(self, driver: Driver) -> Problem:
        """Same problem with another driver; references that no longer apply are dropped."""
        return replace(self, driver=driver, reference=None, reference_se=0.0, reference_source="", solution=None)

    def linearized(self) -> Problem:
        """The ``f = 0`` variant."""
        return self.with_driver(Driver("zero", lipschitz_u=0.0, lipschitz_z=0.0, lipschitz_x=0.0))


# ---------------------------------------------------------------------------
# catalog


def make_toy_cosine(d: int = 6, a: float = 0.1, r: float = 0.1, mu0: float = 0.2, sigma0: float = 1.0, T: float = 1.0, x0=0.0):
    """``u(t, x) = exp(a (T - t)) cos(sum x)`` with a clamped quadratic non-linearity."""
    _check_dim(d)
    sde = ConstantSde(d, mu0 / d, sigma0 / math.sqrt(d) * np.ones(d), x0)
    growth = math.exp(a * T)
    driver = Driver("toy_cosine", [a, r, mu0, sigma0, T], lipschitz_u=2.0 * r * growth, lipschitz_z=0.0)

    def solution(t, x):
        x = np.asarray(x, float)
        return np.exp(a * (T - np.asarray(t, float))) * np.cos(x.sum(axis=-1))

    consts = ProblemConstants(
        lipschitz_u=2.0 * r * growth,
        holder_const=2.0 * a * growth,
        holder_exp=1.0,
        horizon=T,
        sup_f2=(a + 0.5 * sigma0**2 + mu0) ** 2 * growth**2,
        g2=1.0,
        notes="time-Hoelder constant taken as 2 a exp(aT); a exp(aT) gives a bias four times smaller",
    )
    return Problem(
        "toy_cosine",
        sde,
        T,
        Terminal("cos_sum"),
        driver,
        consts,
        reference=float(solution(0.0, sde.x0)),
        reference_source="analytic",
        solution=solution,
        params=dict(d=d, a=a, r=r, mu0=mu0, sigma0=sigma0, T=T),
    )


CVA_PUBLISHED_INTERVAL = (0.4880, 0.4883)


def make_cva(d: int = 6, beta: float = 0.03, sigma0: float = 0.2, T: float = 1.0):
    """Counterparty-risk adjustment on ``d`` digital-like payoffs in log coordinates (assets start at 1)."""
    _check_dim(d)
    sde = ConstantSde(d, -0.5 * sigma0**2, sigma0 * np.ones(d), 0.0)
    driver = Driver("cva", [beta], lipschitz_u=beta, lipschitz_z=0.0, lipschitz_x=0.0)
    consts = ProblemConstants(
        lipschitz_u=beta,
        holder_const=2.0 * d,
        holder_exp=1.0,
        horizon=T,
        sup_f2=beta**2 * d**2,
        g2=float(d * d),
        notes="holder_const and g2 are crude bounds from |g| <= d",
    )
    lo, hi = CVA_PUBLISHED_INTERVAL
    if beta == 0.0:
        ref, source = cva_linear_value(d, sigma0, T), "analytic"
    else:
        ref, source = 0.5 * (lo + hi), "published interval"
    return Problem(
        "cva",
        sde,
        T,
        Terminal("sign_count"),
        driver,
        consts,
        reference=ref,
        reference_se=0.0 if beta == 0.0 else 0.5 * (hi - lo),
        reference_source=source,
        params=dict(d=d, beta=beta, sigma0=sigma0, T=T),
    )


def cva_linear_value(d: int, sigma0: float, T: float) -> float:
    """``E[g(X_T)]`` of the CVA payoff: each coordinate contributes ``1 - 2 P(X_T > 0)``."""
    p_up = float(ndtr(-0.5 * sigma0 * math.sqrt(T)))
    return d * (1.0 - 2.0 * p_up)


BS_PUBLISHED_VALUE = 58.42
BS_LINEAR_PUBLISHED_VALUE = 60.78


def make_bs_default(
    d: int = 100,
    spot: float = 100.0,
    mu0: float = 0.02,
    sigma0: float = 0.2,
    delta: float = 2.0 / 3.0,
    rate: float = 0.02,
    gamma_h: float = 0.2,
    gamma_l: float = 0.02,
    v_h: float = 50.0,
    v_l: float = 70.0,
    T: float = 1.0,
):
    """European claim on the minimum of ``d`` assets with a value-dependent default intensity.

    The state is the log of the assets, so the simulated drift is ``mu0 - sigma0**2 / 2``.
    """
    _check_dim(d)
    sde = log_asset_transform(spot, mu0, sigma0, d)
    scale = 1.0 - delta + rate
    slope = (gamma_h - gamma_l) / (v_h - v_l)
    # d/dy [Q(y) y] is Q + Q' y; its extreme is at an end of the ramp or on the flat parts
    ramp_ends = [gamma_h + 2.0 * slope * v - slope * v_h for v in (v_h, v_l)]
    lipschitz = scale * max(abs(gamma_h), abs(gamma_l), *(abs(v) for v in ramp_ends))
    driver = Driver(
        "default_risk",
        [delta, rate, gamma_h, gamma_l, v_h, v_l],
        lipschitz_u=lipschitz,
        lipschitz_z=0.0,
        lipschitz_x=0.0,
    )
    k_budget = scale * gamma_h
    consts = ProblemConstants(
        lipschitz_u=k_budget,
        holder_const=200.0,
        holder_exp=1.0,
        horizon=T,
        sup_f2=k_budget**2 * spot**2,
        g2=100.0,
        notes="budget constants reproduce the published coefficient table (K = (1-delta+R) gamma_h, g2 = 100); "
        "the driver's global Lipschitz constant in y is larger",
    )
    return Problem(
        "bs_default",
        sde,
        T,
        Terminal("min_exp"),
        driver,
        consts,
        reference=BS_PUBLISHED_VALUE,
        reference_se=float("nan"),
        reference_source="published",
        params=dict(d=d, spot=spot, mu0=mu0, sigma0=sigma0, delta=delta, rate=rate, gamma_h=gamma_h,
                    gamma_l=gamma_l, v_h=v_h, v_l=v_l, T=T),
    )


def _logistic(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def make_burgers(d: int = 10, T: float = 1.0, sigma_scale: float | None = None):
    """Multidimensional Burgers-type equation with solution ``psi(t + sum(x)/d)``, ``psi`` the logistic function.

    ``sigma = d * I`` by default; ``sigma_scale`` overrides the multiple of ``I``.
    """
    _check_dim(d)
    scale = float(d) if sigma_scale is None else float(sigma_scale)
    sde = ConstantSde(d, 0.0, scale * np.ones(d), 0.0)
    c = (2.0 + d) / (2.0 * d)
    sqd = math.sqrt(d)
    driver = Driver(
        "burgers",
        [d],
        lipschitz_u=None,
        lipschitz_z=max(c, 1.0 - c) * d * sqd,
        lipschitz_x=0.0,
        domain_note="lipschitz_z holds for y in [0, 1]; f is not globally Lipschitz in y",
    )

    def solution(t, x):
        x = np.asarray(x, float)
        return _logistic(np.asarray(t, float) + x.sum(axis=-1) / d)

    # |psi''| <= 1/(6 sqrt 3) ~ 0.0962
    psi2 = 1.0 / (6.0 * math.sqrt(3.0))
    consts = ProblemConstants(
        lipschitz_u=max(c, 1.0 - c) * d * sqd,
        holder_const=psi2 / sqd,
        holder_exp=1.0,
        horizon=T,
        sup_f2=(max(c, 1.0 - c) * d * 0.25) ** 2,
        g2=1.0,
        terminal_lipschitz=0.25 / sqd,
        gradient_lipschitz=psi2 / d,
        driver_x_lipschitz=0.0,
        f_hat=(max(c, 1.0 - c) * d * 0.25) ** 2,
        notes="bounds use 0 < u < 1 and |sum Du| <= 1/4",
    )
    return Problem(
        "burgers",
        sde,
        T,
        Terminal("logistic", [T, 1.0 / d]),
        driver,
        consts,
        reference=float(solution(0.0, sde.x0)),
        reference_source="analytic",
        solution=solution,
        params=dict(d=d, T=T, sigma_scale=scale),
    )


def make_hjb(d: int = 100, theta_coef: float = 1.0, T: float = 1.0, n_ref: int = 1_000_000, seed: int = 0):
    """Hamilton-Jacobi-Bellman control problem with a quadratic (truncated) gradient cost."""
    _check_dim(d)
    if not theta_coef > 0:
        raise ConfigError("theta_coef must be positive")
    sde = ConstantSde(d, 0.0, math.sqrt(2.0) * np.ones(d), 0.0)
    driver = Driver("hjb", [theta_coef], lipschitz_u=0.0, lipschitz_z=2.0 * theta_coef, lipschitz_x=0.0)
    g2 = math.log((1.0 + 2.0 * d * T) / 2.0) ** 2
    consts = ProblemConstants(
        lipschitz_u=2.0 * theta_coef,
        holder_const=1.0,
        holder_exp=0.5,
        horizon=T,
        sup_f2=theta_coef**2,
        g2=g2,
        terminal_lipschitz=1.0,
        gradient_lipschitz=2.0,
        driver_x_lipschitz=0.0,
        f_hat=theta_coef**2,
        notes="g2 uses E|X_T|^2 = 2dT; holder_const is an order-of-magnitude placeholder",
    )
    value, se = hjb_reference(d, theta_coef, T, n_ref, seed) if n_ref else (None, 0.0)
    return Problem(
        "hjb",
        sde,
        T,
        Terminal("log_norm"),
        driver,
        consts,
        reference=value,
        reference_se=se,
        reference_source="monte-carlo" if n_ref else "",
        params=dict(d=d, theta_coef=theta_coef, T=T),
    )


def hjb_reference(d: int, theta_coef: float, T: float, n_mc: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """``-(1/theta) log E[exp(-theta g(sqrt(2) W_T))]`` by Monte Carlo, with a delta-method standard error.

    ``|sqrt(2) W_T|^2 = 2 T chi2_d``, and a chi-square with ``d`` degrees of
    freedom is a Gamma(d/2) variable of rate 1/2.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    chi2 = SwitchDensity(0.5, 0.5 * d).sample(RandomStream(seed, 0x4A4B), n_mc)
    # exp(-theta g) with g = log((1 + r2) / 2)
    weights = np.exp(-theta_coef * np.log1p(2.0 * T * chi2) + theta_coef * math.log(2.0))
    mean = math.fsum(weights) / n_mc
    se_mean = float(weights.std(ddof=1)) / math.sqrt(n_mc) if n_mc > 1 else 0.0
    return -math.log(mean) / theta_coef, se_mean / (theta_coef * mean)


def linear_reference(problem: Problem, n_mc: int = 1_000_000, seed: int = 0, batch: int = 100_000) -> tuple[float, float]:
    """Plain Monte Carlo of ``E[g(X_T)]`` (the solution when ``f = 0``) and its standard error."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    stream = RandomStream(seed, 0x11E4)
    total = []
    done = 0
    while done < n_mc:
        m = min(batch, n_mc - done)
        xt = problem.sde.sample_terminal(problem.horizon, stream, m)
        total.append(problem.terminal.value(xt))
        done += m
    vals = np.concatenate(total)
    mean = math.fsum(vals) / n_mc
    se = float(vals.std(ddof=1)) / math.sqrt(n_mc) if n_mc > 1 else 0.0
    return mean, se


def make_custom(
    dim: int,
    horizon: float,
    terminal: dict | Terminal,
    driver: dict | Driver,
    mu=0.0,
    sigma=1.0,
    x0=0.0,
    name: str = "custom",
) -> Problem:
    """Problem assembled from built-in terminal and driver forms (``{"form": ..., "params": [...]}``)."""
    _check_dim(dim)
    term = terminal if isinstance(terminal, Terminal) else Terminal(terminal["form"], terminal.get("params", [0.0]))
    drv = driver if isinstance(driver, Driver) else Driver(driver["form"], driver.get("params", [0.0]))
    return Problem(name, ConstantSde(dim, mu, sigma, x0), float(horizon), term, drv,
                   params=dict(dim=dim, horizon=horizon))


def _check_dim(d):
    if int(d) != d or d < 1:
        raise ConfigError(f"dimension must be a positive integer, got {d}")


CATALOG: dict[str, Callable[..., Problem]] = {
    "toy_cosine": make_toy_cosine,
    "cva": make_cva,
    "bs_default": make_bs_default,
    "burgers": make_burgers,
    "hjb": make_hjb,
}

DESCRIPTIONS = {
    "toy_cosine": "cosine solution with a clamped quadratic non-linearity in u (closed form)",
    "cva": "counterparty valuation adjustment, f = beta (u+ - u), digital payoffs",
    "bs_default": "Black-Scholes claim on the minimum of d assets with default risk",
    "burgers": "Burgers-type equation with a logistic travelling-wave solution",
    "hjb": "HJB control problem with quadratic gradient cost (semi-explicit reference)",
}


def list_problems() -> list[str]:
    return sorted(CATALOG)


def get_problem(name: str, **params) -> Problem:
    """Build a catalog problem by name; unknown names or parameters raise :class:`ConfigError`."""
    if name not in CATALOG:
        raise ConfigError(f"unknown problem {name!r}; available: {', '.join(list_problems())}")
    try:
        return CATALOG[name](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None
