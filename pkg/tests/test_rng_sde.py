import math

import numpy as np
import pytest
from scipy import stats

from nestmc import ConstantSde, RandomStream
from nestmc.rng import derive_key, seed_key
from nestmc.sde import antithetic_step, log_asset_transform, malliavin_weight, start_node, step


def test_stream_reproducible_and_spawn_distinct():
    a = RandomStream(42, 1, 2).uniform(100)
    b = RandomStream(42, 1, 2).uniform(100)
    np.testing.assert_array_equal(a, b)
    parent = RandomStream(42)
    kids = [parent.spawn(i).uniform(50) for i in range(3)]
    assert not np.array_equal(kids[0], kids[1])
    np.testing.assert_array_equal(parent.spawn(1).uniform(50), kids[1])


def test_keys_are_uint64():
    assert isinstance(seed_key(2**64 - 1), np.uint64)
    assert isinstance(np.uint64(derive_key(seed_key(0), np.uint64(7))), np.uint64)
    RandomStream(2**64 - 1, 2**63).uniform(3)


def test_uniform_distribution():
    u = RandomStream(7).uniform(500_000)
    assert u.min() > 0.0 and u.max() < 1.0
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_normal_distribution():
    z = RandomStream(8).normal(1_000_000)
    assert stats.kstest(z[:200_000], "norm").pvalue > 0.01
    assert abs(z.mean()) < 3 / 1000
    assert abs(z.var() - 1) < 3 * math.sqrt(2) / 1000
    # tail beyond the ziggurat base strip
    assert np.mean(np.abs(z) > 3.5) == pytest.approx(2 * stats.norm.sf(3.5), rel=0.1)


def test_copy_keeps_position():
    s = RandomStream(3)
    s.uniform(5)
    c = s.copy()
    assert c.counter == s.counter
    np.testing.assert_array_equal(c.normal(10), s.normal(10))


def test_sde_construction_forms():
    full = ConstantSde(2, [0.1, 0.0], [[1.0, 0.0], [0.5, 2.0]])
    assert not full.is_diagonal
    np.testing.assert_allclose(full.sigma_inv_t, np.linalg.inv(full.sigma).T)
    assert ConstantSde(3, 0.0, 2.0).is_diagonal
    with pytest.raises(ValueError):
        ConstantSde(2, 0.0, [[1.0, 1.0], [1.0, 1.0]])
    sing = ConstantSde(2, 0.0, [[1.0, 1.0], [1.0, 1.0]], require_invertible=False)
    assert sing.sigma_inv_t is None


def test_step_closed_forms():
    sde = ConstantSde(3, 0.0, 1.0)
    assert np.all(step(sde, start_node(sde), 1.0, np.zeros(3)).state == 0)
    one = ConstantSde(1, 0.2, 1.0)
    node = step(one, start_node(one), 0.25, [2.0])
    assert node.state[0] == pytest.approx(1.05)
    assert node.time == 0.25
    with pytest.raises(ValueError):
        step(one, start_node(one), 0.0, [1.0])


def test_step_covariance():
    sigma = np.array([[1.0, 0.0], [0.6, 0.8]])
    sde = ConstantSde(2, [0.1, -0.2], sigma)
    n, dt = 1_000_000, 0.5
    g = RandomStream(21).normal(2 * n).reshape(n, 2)
    x = sde.x0 + sde.mu * dt + math.sqrt(dt) * sde.diffuse(g)
    cov = np.cov(x.T)
    target = sigma @ sigma.T * dt
    # var of a sample covariance entry is (s_ii s_jj + s_ij^2) / n
    tol = 3 * np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(cov - target) <= tol)
    np.testing.assert_allclose(x.mean(axis=0), sde.mu * dt, atol=3 * math.sqrt(dt / n) * 1.1)


def test_antithetic_step():
    sde = ConstantSde(2, 0.0, [[1.0, 0.0], [0.3, 1.2]], x0=[1.0, -1.0])
    g = np.array([0.4, -1.3])
    plus, minus = antithetic_step(sde, start_node(sde), 0.36, g)
    np.testing.assert_allclose(plus.state - sde.x0, 0.6 * sde.sigma @ g)
    np.testing.assert_allclose(0.5 * (plus.state + minus.state), sde.x0)
    drift = ConstantSde(2, [0.5, 1.0], 1.0)
    p, m = antithetic_step(drift, start_node(drift), 0.2, g)
    np.testing.assert_allclose(0.5 * (p.state + m.state), drift.mu * 0.2)


def test_antithetic_odd_moments_cancel():
    sde = ConstantSde(1, 0.0, 1.5)
    g = RandomStream(5).normal(100_000)
    total = 0.0
    for sign in (1.0, -1.0):
        inc = sign * math.sqrt(0.3) * 1.5 * g
        total += np.sum(inc**3 + inc)
    assert abs(total) < 1e-9


def test_malliavin_weight_closed_forms():
    assert malliavin_weight(ConstantSde(1, 0.0, 1.0), [1.0], 1.0)[0] == pytest.approx(1.0)
    assert malliavin_weight(ConstantSde(1, 0.0, 2.0), [1.0], 0.25)[0] == pytest.approx(1.0)
    full = ConstantSde(2, 0.0, [[1.0, 0.0], [0.5, 2.0]])
    g = np.array([0.3, -0.7])
    np.testing.assert_allclose(malliavin_weight(full, g, 0.5), np.linalg.inv(full.sigma).T @ g / math.sqrt(0.5))


def test_malliavin_weight_matches_finite_difference():
    d, dt = 3, 0.4
    sde = ConstantSde(d, 0.1, [0.9, 1.1, 0.7], x0=[0.2, -0.1, 0.4])
    n = 2_000_000
    g = RandomStream(31).normal(n * d).reshape(n, d)
    xt = sde.x0 + sde.mu * dt + math.sqrt(dt) * sde.diffuse(g)
    est = (malliavin_weight(sde, g, dt) * np.cos(xt.sum(axis=1))[:, None]).mean(axis=0)
    # independent plain MC with common numbers for the central difference
    g2 = RandomStream(32).normal(n * d).reshape(n, d)
    h = 1e-3

    def plain(x0):
        return np.cos((x0 + sde.mu * dt + math.sqrt(dt) * sde.diffuse(g2)).sum(axis=1)).mean()

    fd = np.array([(plain(sde.x0 + h * e) - plain(sde.x0 - h * e)) / (2 * h) for e in np.eye(d)])
    # closed form: grad E cos(S) = -sin(m) exp(-v/2) in every coordinate
    m = (sde.x0 + sde.mu * dt).sum()
    v = dt * np.sum(sde.sigma_diag**2)
    exact = -math.sin(m) * math.exp(-v / 2)
    np.testing.assert_allclose(fd, exact, rtol=1e-2)
    np.testing.assert_allclose(est, fd, rtol=1e-2)


def test_log_asset_transform():
    sde = log_asset_transform(100.0, 0.02, 0.2)
    assert sde.mu[0] == pytest.approx(0.0, abs=1e-15)
    assert sde.x0[0] == pytest.approx(math.log(100))
    unit = log_asset_transform(1.0, 0.0, 0.2)
    assert unit.x0[0] == 0.0 and unit.mu[0] == pytest.approx(-0.02)
    with pytest.raises(ValueError):
        log_asset_transform(0.0, 0.0, 0.2)


def test_log_asset_mean_price():
    sde = log_asset_transform(100.0, 0.05, 0.3)
    n = 1_000_000
    s = np.exp(sde.sample_terminal(1.0, RandomStream(41), n)[:, 0])
    assert abs(s.mean() - 100 * math.exp(0.05)) <= 3 * s.std() / math.sqrt(n)


def test_terminal_law_is_exact():
    sde = ConstantSde(2, [0.3, -0.1], [[1.0, 0.0], [0.4, 0.5]], x0=[1.0, 2.0])
    n = 400_000
    x = sde.sample_terminal(2.0, RandomStream(51), n)
    np.testing.assert_allclose(x.mean(axis=0), sde.terminal_mean(2.0), atol=0.01)
    np.testing.assert_allclose(np.cov(x.T), sde.terminal_cov(2.0), atol=0.02)
    # the same law reached through a chain of intermediate switching dates
    stream = RandomStream(52)
    dates = [0.0, 0.3, 1.1, 2.0]
    y = np.tile(sde.x0, (n, 1))
    for a, b in zip(dates, dates[1:]):
        y = y + sde.mu * (b - a) + math.sqrt(b - a) * sde.diffuse(stream.normal(2 * n).reshape(n, 2))
    np.testing.assert_allclose(y.mean(axis=0), sde.terminal_mean(2.0), atol=0.01)
    np.testing.assert_allclose(np.cov(y.T), sde.terminal_cov(2.0), atol=0.02)
