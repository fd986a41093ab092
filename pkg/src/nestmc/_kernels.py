"""Compiled recursion shared by the three nested estimators.

Problems are described to the kernels by integer kinds plus float parameter
arrays, so one compiled function serves every catalog problem. A node at
depth ``level`` owns ``V`` states that share one random stream: ``V == 1``
for the value and Malliavin schemes, ``V == 2**level`` for the antithetic
scheme where a node and its mirrored siblings reuse the same switching
increments and Gaussian draws. All scratch memory is preallocated per level.
"""

from __future__ import annotations

import math
from collections import namedtuple

import numpy as np
from numba import njit

from nestmc.rng import derive_key, normal_at, uniform_at
from nestmc.switching import density_value, sample_tau, survival_value

MODE_VALUE = 0
MODE_MALLIAVIN = 1
MODE_ANTITHETIC = 2

# terminal kinds
T_CONST = 0
T_LINEAR = 1  # tpar = [offset, a_1..a_d]
T_COS_SUM = 2
T_SIGN_COUNT = 3  # sum_i (1 - 2 * 1{x_i > 0})
T_MIN_EXP = 4
T_LOGISTIC = 5  # tpar = [shift, scale]: logistic(shift + scale * sum x)
T_LOG_NORM = 6  # log((1 + |x|^2) / 2)

# driver kinds
F_ZERO = 0
F_AFFINE = 1  # fpar = [c, c_y, b_1..b_d]: c + c_y * y + b . z
F_TOY_COSINE = 2  # fpar = [a, r, mu0, sigma0, T]
F_CVA = 3  # fpar = [beta]
F_DEFAULT_RISK = 4  # fpar = [delta, R, gamma_h, gamma_l, v_h, v_l]
F_BURGERS = 5  # fpar = [d]
F_HJB = 6  # fpar = [theta]

KernelSpec = namedtuple(
    "KernelSpec",
    "mode depth counts horizon lam shape_u log_norm mu sig sig_d sinvt sinvt_d diag tkind tpar fkind fpar",
)


@njit(cache=True, nogil=True)
def _logistic(s):
    if s >= 0.0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


@njit(cache=True, nogil=True, inline="always")
def _row_sum(x, r):
    acc = 0.0
    for i in range(x.shape[1]):
        acc += x[r, i]
    return acc


@njit(cache=True, nogil=True, inline="always")
def _row_sq(x, r):
    acc = 0.0
    for i in range(x.shape[1]):
        acc += x[r, i] * x[r, i]
    return acc


# Helpers below take a matrix plus a row index rather than a row view: views
# cost an atomic reference-count round trip each, which dominates leaf work.


@njit(cache=True, nogil=True, inline="always")
def terminal_value(kind, par, x, r):
    """``g(x[r])``."""
    d = x.shape[1]
    if kind == T_CONST:
        return par[0]
    if kind == T_LINEAR:
        acc = par[0]
        # missing coefficients count as zero
        for i in range(min(d, par.shape[0] - 1)):
            acc += par[1 + i] * x[r, i]
        return acc
    if kind == T_COS_SUM:
        return math.cos(_row_sum(x, r))
    if kind == T_SIGN_COUNT:
        acc = 0.0
        for i in range(d):
            acc += -1.0 if x[r, i] > 0.0 else 1.0
        return acc
    if kind == T_MIN_EXP:
        lo = x[r, 0]
        for i in range(1, d):
            lo = min(lo, x[r, i])
        return math.exp(lo)
    if kind == T_LOGISTIC:
        return _logistic(par[0] + par[1] * _row_sum(x, r))
    if kind == T_LOG_NORM:
        return math.log(0.5 * (1.0 + _row_sq(x, r)))
    return math.nan


@njit(cache=True, nogil=True, inline="always")
def terminal_gradient(kind, par, x, r, out, ro):
    """``out[ro] = Dg(x[r])``."""
    d = x.shape[1]
    if kind == T_LINEAR:
        for i in range(d):
            out[ro, i] = par[1 + i] if i + 1 < par.shape[0] else 0.0
    elif kind == T_COS_SUM:
        v = -math.sin(_row_sum(x, r))
        for i in range(d):
            out[ro, i] = v
    elif kind == T_MIN_EXP:
        k = 0
        for i in range(1, d):
            if x[r, i] < x[r, k]:
                k = i
        for i in range(d):
            out[ro, i] = 0.0
        out[ro, k] = math.exp(x[r, k])
    elif kind == T_LOGISTIC:
        p = _logistic(par[0] + par[1] * _row_sum(x, r))
        v = p * (1.0 - p) * par[1]
        for i in range(d):
            out[ro, i] = v
    elif kind == T_LOG_NORM:
        c = 2.0 / (1.0 + _row_sq(x, r))
        for i in range(d):
            out[ro, i] = c * x[r, i]
    elif kind == T_CONST or kind == T_SIGN_COUNT:
        for i in range(d):
            out[ro, i] = 0.0
    else:
        for i in range(d):
            out[ro, i] = math.nan


@njit(cache=True, nogil=True, inline="always")
def driver_value(kind, par, t, x, r, y, z):
    """``f(t, x[r], y, z[r])``."""
    if kind == F_ZERO:
        return 0.0
    if kind == F_AFFINE:
        acc = par[0] + (par[1] * y if par.shape[0] > 1 else 0.0)
        for i in range(min(z.shape[1], par.shape[0] - 2)):
            acc += par[2 + i] * z[r, i]
        return acc
    if kind == F_TOY_COSINE:
        a, rr, mu0, s0, horizon = par[0], par[1], par[2], par[3], par[4]
        e = math.exp(a * (horizon - t))
        sx = _row_sum(x, r)
        c = math.cos(sx)
        clamped = max(-e, min(y, e))
        return c * (a + 0.5 * s0 * s0) * e + math.sin(sx) * mu0 * e - rr * c * c * e * e + rr * clamped * clamped
    if kind == F_CVA:
        return par[0] * (max(y, 0.0) - y)
    if kind == F_DEFAULT_RISK:
        delta, rate, gh, gl, vh, vl = par[0], par[1], par[2], par[3], par[4], par[5]
        slope = (gh - gl) / (vh - vl)
        q = min(gh, max(gl, slope * (y - vh) + gh))
        return -(1.0 - delta + rate) * q * y
    if kind == F_BURGERS:
        dim = par[0]
        return (y - (2.0 + dim) / (2.0 * dim)) * (dim * _row_sum(z, r))
    if kind == F_HJB:
        return -par[0] * min(_row_sq(z, r), 1.0)
    return math.nan


@njit(cache=True, nogil=True)
def _node(
    level, s, nv, key, j0, j1,
    mode, depth, counts, horizon, lam, shape_u, log_norm,
    mu, sig, sig_d, sinvt, sinvt_d, diag, tkind, tpar, fkind, fpar,
    wx, wy, wz, wphi, wgauss, wweight, tally,
    rec_val, rec_grad, rec_tau,
):
    """Evaluate the node whose ``nv`` states sit in ``wx[level, :nv]`` at date ``s``.

    Results go to ``wy[level, :nv]`` and ``wz[level, :nv]`` (averages over the
    children). At ``level == 0`` the children ``j0 <= j < j1`` are recorded
    individually in ``rec_*`` instead of being averaged.
    """
    d = mu.shape[0]
    nc = 2 * nv if mode == MODE_ANTITHETIC else nv
    leaf_children = level + 1 == depth
    gauss = wgauss[level]
    xs = wx[level]
    xc = wx[level + 1]
    yc = wy[level + 1]
    zc = wz[level + 1]
    phi = wphi[level]
    acc_y = wy[level]
    acc_z = wz[level]
    for v in range(nv):
        acc_y[v] = 0.0
        for i in range(d):
            acc_z[v, i] = 0.0
    g_parent = 0.0
    if mode == MODE_MALLIAVIN:
        g_parent = terminal_value(tkind, tpar, xs, 0)
    surv = survival_value(lam, shape_u, horizon - s)
    inv_surv = 1.0 / surv
    exponential = shape_u == 1.0

    if level == 0:
        lo, hi = j0, j1
    else:
        lo, hi = 0, counts[level]
    for m in range(lo, hi):
        child_key = derive_key(key, m)
        ctr = np.uint64(0)
        if exponential:
            # With tau = -log(w)/lam: tau >= T - s  <=>  w <= survival(T - s),
            # and 1/rho(tau) = 1/(lam*w); no log/exp on the common paths.
            w, ctr = uniform_at(child_key, ctr)
            hit = w <= surv
            tau = -math.log(w) / lam if (level == 0 or not hit) else horizon - s
            inv_rho = 1.0 / (lam * w)
        else:
            tau, ctr = sample_tau(lam, shape_u, child_key, ctr)
            hit = s + tau >= horizon
            inv_rho = 0.0 if hit else 1.0 / density_value(lam, shape_u, log_norm, tau)
        if hit:
            t = horizon
            dt = horizon - s
        else:
            t = s + tau
            dt = tau
        sq = math.sqrt(dt)
        antithetic = mode == MODE_ANTITHETIC
        if diag:
            # draw, scale and move in one pass over the coordinates
            if antithetic:
                for i in range(d):
                    z, ctr = normal_at(child_key, ctr)
                    gauss[i] = z
                    step = sig_d[i] * sq * z
                    drift = mu[i] * dt
                    for v in range(nv):
                        base = xs[v, i] + drift
                        xc[v, i] = base + step
                        xc[nv + v, i] = base - step
            else:
                for i in range(d):
                    z, ctr = normal_at(child_key, ctr)
                    gauss[i] = z
                    xc[0, i] = xs[0, i] + mu[i] * dt + sig_d[i] * sq * z
        else:
            for i in range(d):
                gauss[i], ctr = normal_at(child_key, ctr)
            for i in range(d):
                acc = 0.0
                for k in range(d):
                    acc += sig[i, k] * gauss[k]
                step = sq * acc
                drift = mu[i] * dt
                for v in range(nv):
                    base = xs[v, i] + drift
                    xc[v, i] = base + step
                    if antithetic:
                        xc[nv + v, i] = base - step

        if hit:
            for c in range(nc):
                phi[c] = terminal_value(tkind, tpar, xc, c) * inv_surv
        else:
            if leaf_children:
                for c in range(nc):
                    yc[c] = terminal_value(tkind, tpar, xc, c)
                    if mode != MODE_VALUE:
                        terminal_gradient(tkind, tpar, xc, c, zc, c)
            else:
                _node(
                    level + 1, t, nc, child_key, 0, 0,
                    mode, depth, counts, horizon, lam, shape_u, log_norm,
                    mu, sig, sig_d, sinvt, sinvt_d, diag, tkind, tpar, fkind, fpar,
                    wx, wy, wz, wphi, wgauss, wweight, tally,
                    rec_val, rec_grad, rec_tau,
                )
            for c in range(nc):
                phi[c] = driver_value(fkind, fpar, t, xc, c, yc[c], zc) * inv_rho
            tally[0] += nc
            if t >= horizon:
                tally[1] += 1

        if mode != MODE_VALUE:
            if diag:
                for i in range(d):
                    wweight[i] = sinvt_d[i] * gauss[i] / sq
            else:
                for i in range(d):
                    acc = 0.0
                    for k in range(d):
                        acc += sinvt[i, k] * gauss[k]
                    wweight[i] = acc / sq

        if level == 0:
            r = m - j0
            rec_tau[r] = tau
            if mode == MODE_VALUE:
                rec_val[r] = phi[0]
            elif mode == MODE_MALLIAVIN:
                rec_val[r] = phi[0]
                cv = phi[0] - g_parent * inv_surv if hit else phi[0]
                for i in range(d):
                    rec_grad[r, i] = wweight[i] * cv
            else:
                rec_val[r] = 0.5 * (phi[0] + phi[1])
                half = 0.5 * (phi[0] - phi[1])
                for i in range(d):
                    rec_grad[r, i] = wweight[i] * half
            continue

        if mode == MODE_VALUE:
            acc_y[0] += phi[0]
        elif mode == MODE_MALLIAVIN:
            acc_y[0] += phi[0]
            cv = phi[0] - g_parent * inv_surv if hit else phi[0]
            for i in range(d):
                acc_z[0, i] += wweight[i] * cv
        else:
            for v in range(nv):
                acc_y[v] += 0.5 * (phi[v] + phi[nv + v])
                half = 0.5 * (phi[v] - phi[nv + v])
                for i in range(d):
                    acc_z[v, i] += wweight[i] * half

    if level > 0:
        n = float(hi - lo)
        for v in range(nv):
            acc_y[v] /= n
            for i in range(d):
                acc_z[v, i] /= n


@njit(cache=True, nogil=True)
def run_outer(
    root_key, x0, j0, j1,
    mode, depth, counts, horizon, lam, shape_u, log_norm,
    mu, sig, sig_d, sinvt, sinvt_d, diag, tkind, tpar, fkind, fpar,
    rec_val, rec_grad, rec_tau, tally,
):
    """Outer samples ``j0 <= j < j1`` of one estimate; fills the per-sample records."""
    d = x0.shape[0]
    vmax = 2**depth if mode == MODE_ANTITHETIC else 1
    wx = np.zeros((depth + 1, vmax, d))
    wy = np.zeros((depth + 1, vmax))
    wz = np.zeros((depth + 1, vmax, d))
    wphi = np.zeros((depth + 1, vmax))
    wgauss = np.zeros((depth + 1, d))
    wweight = np.zeros(d)
    wx[0, 0, :] = x0
    _node(
        0, 0.0, 1, root_key, j0, j1,
        mode, depth, counts, horizon, lam, shape_u, log_norm,
        mu, sig, sig_d, sinvt, sinvt_d, diag, tkind, tpar, fkind, fpar,
        wx, wy, wz, wphi, wgauss, wweight, tally,
        rec_val, rec_grad, rec_tau,
    )


def run_chunk(spec: KernelSpec, root_key, x0, j0: int, j1: int):
    """Run outer samples ``[j0, j1)``; returns ``(values, gradients, taus, tally)``."""
    n = j1 - j0
    d = x0.shape[0]
    rec_val = np.empty(n)
    rec_grad = np.zeros((n, d)) if spec.mode != MODE_VALUE else np.zeros((0, d))
    rec_tau = np.empty(n)
    tally = np.zeros(2, dtype=np.int64)
    run_outer(
        np.uint64(root_key), x0, j0, j1,
        spec.mode, spec.depth, spec.counts, spec.horizon, spec.lam, spec.shape_u, spec.log_norm,
        spec.mu, spec.sig, spec.sig_d, spec.sinvt, spec.sinvt_d, spec.diag,
        spec.tkind, spec.tpar, spec.fkind, spec.fpar,
        rec_val, rec_grad, rec_tau, tally,
    )
    return rec_val, rec_grad, rec_tau, tally
