"""Randomized switching times: exponential/gamma densities and capped date sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from nestmc._special import gammainc_lower, gammainc_upper
from nestmc.rng import RandomStream, normal_at, uniform_at


@njit(cache=True, nogil=True)
def log_norm_const(lam, shape_u):
    return shape_u * math.log(lam) - math.lgamma(shape_u)


@njit(cache=True, nogil=True)
def density_value(lam, shape_u, log_norm, x):
    if shape_u == 1.0:
        return lam * math.exp(-lam * x)
    return math.exp(log_norm + (shape_u - 1.0) * math.log(x) - lam * x)


@njit(cache=True, nogil=True)
def survival_value(lam, shape_u, t):
    if t <= 0.0:
        return 1.0
    if shape_u == 1.0:
        return math.exp(-lam * t)
    return gammainc_upper(shape_u, lam * t)


@njit(cache=True, nogil=True)
def _gamma_small_shape(a, key, c):
    # Ahrens-Dieter GS rejection sampler, valid for 0 < a < 1.
    b = 1.0 + a / math.e
    while True:
        p, c = uniform_at(key, c)
        p *= b
        w, c = uniform_at(key, c)
        if p <= 1.0:
            x = p ** (1.0 / a)
            if x > 0.0 and w <= math.exp(-x):
                return x, c
        else:
            x = -math.log((b - p) / a)
            if x > 0.0 and w <= x ** (a - 1.0):
                return x, c


@njit(cache=True, nogil=True)
def _gamma_large_shape(a, key, c):
    # Marsaglia-Tsang, valid for a >= 1.
    dd = a - 1.0 / 3.0
    cc = 1.0 / math.sqrt(9.0 * dd)
    while True:
        z, c = normal_at(key, c)
        v = 1.0 + cc * z
        if v <= 0.0:
            continue
        v = v * v * v
        w, c = uniform_at(key, c)
        if math.log(w) < 0.5 * z * z + dd - dd * v + dd * math.log(v):
            return dd * v, c


@njit(cache=True, nogil=True)
def sample_tau(lam, shape_u, key, c):
    """One switching increment (strictly positive) and the advanced counter."""
    if shape_u == 1.0:
        w, c = uniform_at(key, c)
        return -math.log(w) / lam, c
    if shape_u < 1.0:
        x, c = _gamma_small_shape(shape_u, key, c)
    else:
        x, c = _gamma_large_shape(shape_u, key, c)
    return x / lam, c


@njit(cache=True, nogil=True)
def _sample_many(lam, shape_u, st, out):
    key = st[0]
    c = st[1]
    for i in range(out.shape[0]):
        out[i], c = sample_tau(lam, shape_u, key, c)
    st[1] = c


@njit(cache=True, nogil=True)
def _survival_many(lam, shape_u, t, out):
    for i in range(t.shape[0]):
        out[i] = survival_value(lam, shape_u, t[i])


@dataclass(frozen=True)
class SwitchDensity:
    """Gamma law of the switching increments; ``shape_u == 1`` is the exponential law.

    ``pdf(x) = lam**u * x**(u-1) * exp(-lam*x) / Gamma(u)``
    """

    lam: float
    shape_u: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not (self.shape_u > 0.0 and math.isfinite(self.shape_u)):
            raise ValueError(f"shape_u must be positive, got {self.shape_u}")
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "shape_u", float(self.shape_u))

    @classmethod
    def exponential(cls, lam: float) -> SwitchDensity:
        return cls(lam, 1.0)

    @property
    def is_exponential(self) -> bool:
        return self.shape_u == 1.0

    @property
    def log_norm(self) -> float:
        return float(log_norm_const(self.lam, self.shape_u))

    @property
    def mean(self) -> float:
        return self.shape_u / self.lam

    def pdf(self, x):
        x_arr = np.asarray(x, dtype=float)
        if np.any(x_arr <= 0.0):
            raise ValueError("pdf is only defined for x > 0")
        if self.is_exponential:
            out = self.lam * np.exp(-self.lam * x_arr)
        else:
            out = np.exp(self.log_norm + (self.shape_u - 1.0) * np.log(x_arr) - self.lam * x_arr)
        return float(out) if out.ndim == 0 else out

    def survival(self, t):
        """``P(tau > t)``."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0.0):
            raise ValueError("survival requires t >= 0")
        if t_arr.ndim == 0:
            return float(survival_value(self.lam, self.shape_u, float(t_arr)))
        flat = t_arr.ravel()
        out = np.empty_like(flat)
        _survival_many(self.lam, self.shape_u, flat, out)
        return out.reshape(t_arr.shape)

    def cdf(self, t):
        return 1.0 - self.survival(t)

    def prob_sum_below(self, n: int, horizon: float) -> float:
        """``P(tau_1 + ... + tau_n < horizon)``; the sum of ``n`` increments is Gamma(n*u, lam)."""
        if n == 0:
            return 1.0
        return float(gammainc_lower(n * self.shape_u, self.lam * horizon))

    def sample(self, stream: RandomStream, size: int | None = None):
        if size is None:
            return float(self.sample(stream, 1)[0])
        out = np.empty(int(size))
        _sample_many(self.lam, self.shape_u, stream.state, out)
        return out


def sample_increment(density: SwitchDensity, stream: RandomStream) -> float:
    return density.sample(stream)


def cap_date(t: float, tau: float, horizon: float) -> tuple[float, bool]:
    """``min(t + tau, horizon)`` and whether the horizon was reached."""
    if t >= horizon:
        raise ValueError(f"date {t} is already at the horizon {horizon}; the recursion should have stopped")
    nxt = t + tau
    if nxt >= horizon:
        return horizon, True
    return nxt, False


def extend_schedule(t: float, density: SwitchDensity, horizon: float, stream: RandomStream) -> tuple[float, bool]:
    """Draw the next switching date after ``t``, capped at ``horizon``."""
    if t >= horizon:
        raise ValueError(f"date {t} is already at the horizon {horizon}; the recursion should have stopped")
    return cap_date(t, density.sample(stream), horizon)


@dataclass(frozen=True)
class SwitchSchedule:
    dates: tuple[float, ...]
    horizon: float

    def __post_init__(self):
        d = self.dates
        if not d or d[0] != 0.0:
            raise ValueError("a schedule starts at date 0")
        for a, b in zip(d, d[1:]):
            if b < a or b > self.horizon:
                raise ValueError("schedule dates must be non-decreasing and capped at the horizon")
            if a == self.horizon and b != self.horizon:
                raise ValueError("dates after the horizon must equal the horizon")

    @property
    def n_before_horizon(self) -> int:
        """Number of switching dates ``T_k``, ``k >= 1``, strictly below the horizon."""
        return sum(1 for t in self.dates[1:] if t < self.horizon)

    @classmethod
    def simulate(
        cls, density: SwitchDensity, horizon: float, stream: RandomStream, max_dates: int | None = None
    ) -> SwitchSchedule:
        """Dates ``T_0 = 0, T_1, ...`` up to and including the first one capped at ``horizon``."""
        dates = [0.0]
        t = 0.0
        while t < horizon and (max_dates is None or len(dates) < max_dates):
            t, _ = extend_schedule(t, density, horizon, stream)
            dates.append(t)
        return cls(tuple(dates), horizon)
