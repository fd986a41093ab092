"""Constant-coefficient diffusion ``dX = mu dt + sigma dW``: exact stepping and Malliavin weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nestmc.rng import RandomStream

_MAX_COND = 1e12


def _as_vector(v, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ConstantSde:
    """Arithmetic Brownian motion in ``R^d``.

    ``sigma`` may be given as a scalar (meaning ``scalar * I``), a length-``d``
    diagonal or a full ``d x d`` matrix. ``sigma_inv_t`` (the transpose of the
    inverse) is factorized once here; a near-singular ``sigma`` is rejected
    unless ``require_invertible=False``.
    """

    dim: int
    mu: np.ndarray
    sigma: np.ndarray
    x0: np.ndarray = 0.0
    require_invertible: bool = True
    sigma_inv_t: np.ndarray | None = field(init=False)
    sigma_diag: np.ndarray | None = field(init=False)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ValueError("dim must be >= 1")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "mu", _as_vector(self.mu, d, "mu"))
        object.__setattr__(self, "x0", _as_vector(self.x0, d, "x0"))
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim == 0:
            sig = float(sig) * np.eye(d)
        elif sig.ndim == 1:
            sig = np.diag(_as_vector(sig, d, "sigma"))
        if sig.shape != (d, d):
            raise ValueError(f"sigma must be ({d}, {d}), got {sig.shape}")
        sig = sig.copy()
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)

        is_diag = np.count_nonzero(sig - np.diag(np.diag(sig))) == 0
        diag = np.diag(sig).copy() if is_diag else None
        if diag is not None:
            diag.setflags(write=False)
        object.__setattr__(self, "sigma_diag", diag)

        inv_t = None
        cond = np.linalg.cond(sig) if np.all(np.isfinite(sig)) else np.inf
        if cond < _MAX_COND:
            if diag is not None:
                inv_t = np.diag(1.0 / diag)
            else:
                inv_t = np.linalg.inv(sig).T
            inv_t.setflags(write=False)
        elif self.require_invertible:
            raise ValueError(f"sigma is singular or ill-conditioned (cond={cond:.3g})")
        object.__setattr__(self, "sigma_inv_t", inv_t)

    @classmethod
    def scalar(cls, dim: int, mu: float, sigma: float, x0=0.0) -> ConstantSde:
        return cls(dim, mu, float(sigma) * np.ones(dim), x0)

    @property
    def is_diagonal(self) -> bool:
        return self.sigma_diag is not None

    def with_x0(self, x0) -> ConstantSde:
        return ConstantSde(self.dim, self.mu, self.sigma, x0, self.require_invertible)

    def diffuse(self, gauss: np.ndarray) -> np.ndarray:
        """``sigma @ gauss`` for one vector or a batch of row vectors."""
        if self.sigma_diag is not None:
            return gauss * self.sigma_diag
        return gauss @ self.sigma.T

    def terminal_mean(self, horizon: float) -> np.ndarray:
        return self.x0 + self.mu * horizon

    def terminal_cov(self, horizon: float) -> np.ndarray:
        return self.sigma @ self.sigma.T * horizon

    def sample_terminal(self, horizon: float, stream: RandomStream, n: int) -> np.ndarray:
        """``n`` exact draws of ``X_T`` started from ``x0``; shape ``(n, d)``."""
        g = stream.normal(n * self.dim).reshape(n, self.dim)
        return self.x0 + self.mu * horizon + math.sqrt(horizon) * self.diffuse(g)


@dataclass(frozen=True, eq=False)
class PathNode:
    time: float
    state: np.ndarray
    gauss_increment: np.ndarray | None = None
    dt_last: float = 0.0


def start_node(sde: ConstantSde, time: float = 0.0) -> PathNode:
    return PathNode(float(time), sde.x0.copy())


def step(sde: ConstantSde, node: PathNode, dt: float, gauss) -> PathNode:
    """Exact step: ``state + mu*dt + sigma*sqrt(dt)*gauss``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g = np.asarray(gauss, dtype=float)
    if g.shape != (sde.dim,):
        raise ValueError(f"gauss must have shape ({sde.dim},)")
    state = node.state + sde.mu * dt + math.sqrt(dt) * sde.diffuse(g)
    return PathNode(node.time + dt, state, g.copy(), float(dt))


def antithetic_step(sde: ConstantSde, node: PathNode, dt: float, gauss) -> tuple[PathNode, PathNode]:
    """Children of ``node`` driven by ``+gauss`` and ``-gauss``."""
    g = np.asarray(gauss, dtype=float)
    return step(sde, node, dt, g), step(sde, node, dt, -g)


def malliavin_weight(sde: ConstantSde, gauss, dt: float) -> np.ndarray:
    """``sigma^{-T} W_dt / dt`` with ``W_dt = sqrt(dt) * gauss``.

    Works on a single vector or a batch of row vectors.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if sde.sigma_inv_t is None:
        raise ValueError("Malliavin weights need an invertible sigma")
    g = np.asarray(gauss, dtype=float)
    if sde.sigma_diag is not None:
        return g / sde.sigma_diag / math.sqrt(dt)
    return g @ sde.sigma_inv_t.T / math.sqrt(dt)


def log_asset_transform(spot, mu0: float, sigma0: float, dim: int = 1) -> ConstantSde:
    """Log-coordinates of Black-Scholes assets: drift ``mu0 - sigma0**2/2``, volatility ``sigma0``."""
    s = np.asarray(spot, dtype=float)
    if np.any(s <= 0.0):
        raise ValueError("spot must be positive")
    x0 = np.log(np.broadcast_to(s, (dim,)))
    return ConstantSde(dim, mu0 - 0.5 * sigma0**2, sigma0 * np.ones(dim), x0)
