import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from nestmc import RandomStream, SwitchDensity
from nestmc._special import gammainc_lower, gammainc_upper, lower_incomplete_gamma, upper_incomplete_gamma
from nestmc.switching import SwitchSchedule, cap_date, extend_schedule, sample_increment


@pytest.mark.parametrize("a", [0.1, 0.5, 0.8, 0.9, 1.0, 2.5, 7.0, 50.0])
@pytest.mark.parametrize("x", [1e-6, 0.01, 0.3, 1.0, 4.0, 20.0, 80.0])
def test_regularized_incomplete_gamma_matches_scipy(a, x):
    assert gammainc_lower(a, x) == pytest.approx(special.gammainc(a, x), rel=1e-12, abs=1e-15)
    assert gammainc_upper(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-11, abs=1e-300)


def test_unregularized_incomplete_gamma():
    a, x = 0.9, 0.1
    assert lower_incomplete_gamma(a, x) == pytest.approx(special.gammainc(a, x) * special.gamma(a), rel=1e-12)
    assert upper_incomplete_gamma(a, x) == pytest.approx(special.gammaincc(a, x) * special.gamma(a), rel=1e-12)


def test_pdf_closed_forms():
    assert SwitchDensity(0.4).pdf(1e-12) == pytest.approx(0.4)
    assert SwitchDensity(0.2).pdf(1.0) == pytest.approx(0.2 * math.exp(-0.2), rel=1e-14)
    assert SwitchDensity(0.2).pdf(1.0) == pytest.approx(0.163746, abs=1e-6)


def test_gamma_pdf_against_independent_normalization():
    lam, u = 0.1, 0.9
    norm, _ = integrate.quad(lambda t: t ** (u - 1) * math.exp(-lam * t), 0, np.inf)
    expected = 0.5 ** (u - 1) * math.exp(-lam * 0.5) / norm
    assert SwitchDensity(lam, u).pdf(0.5) == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("u", [0.5, 0.8, 0.9, 1.0])
def test_pdf_integrates_to_one(u):
    lam = 0.3
    dens = SwitchDensity(lam, u)
    mass, _ = integrate.quad(dens.pdf, 0, 50 / lam, limit=200, points=[1e-8, 1.0])
    assert mass >= 1 - 1e-8


def test_pdf_rejects_nonpositive():
    with pytest.raises(ValueError):
        SwitchDensity(0.2).pdf(0.0)


@pytest.mark.parametrize("bad", [dict(lam=0.0), dict(lam=-1.0), dict(lam=1.0, shape_u=0.0), dict(lam=float("inf"))])
def test_density_validation(bad):
    with pytest.raises(ValueError):
        SwitchDensity(**bad)


def test_survival_closed_forms():
    assert SwitchDensity(0.2).survival(1.0) == pytest.approx(math.exp(-0.2), rel=1e-14)
    for lam, u in [(0.1, 0.9), (2.0, 0.5), (0.7, 1.0)]:
        assert SwitchDensity(lam, u).survival(0.0) == 1.0
    with pytest.raises(ValueError):
        SwitchDensity(0.2).survival(-0.1)


def test_survival_matches_scipy_gamma():
    t = np.linspace(0.0, 30.0, 61)
    for lam, u in [(0.1, 0.9), (0.2, 0.8), (1.5, 0.5)]:
        got = SwitchDensity(lam, u).survival(t)
        np.testing.assert_allclose(got, stats.gamma.sf(t, u, scale=1 / lam), rtol=1e-11, atol=1e-300)


def test_survival_against_sampler_fraction():
    dens = SwitchDensity(0.1, 0.9)
    n = 10_000_000
    draws = dens.sample(RandomStream(3, 1), n)
    p = dens.survival(1.0)
    frac = np.mean(draws > 1.0)
    assert abs(frac - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_exponential_sample_mean():
    draws = SwitchDensity(0.5).sample(RandomStream(1), 1_000_000)
    assert abs(draws.mean() - 2.0) <= 0.006


def test_gamma_sample_mean():
    n = 1_000_000
    draws = SwitchDensity(0.2, 0.8).sample(RandomStream(2), n)
    sd = math.sqrt(0.8) / 0.2
    assert abs(draws.mean() - 4.0) <= 3 * sd / math.sqrt(n)
    assert np.all(draws > 0)


@pytest.mark.parametrize("lam,u", [(0.2, 0.8), (0.1, 0.9), (0.4, 1.0), (0.5, 50.0)])
def test_sampler_ks(lam, u):
    draws = SwitchDensity(lam, u).sample(RandomStream(5, int(10 * u)), 200_000)
    res = stats.kstest(draws, stats.gamma(u, scale=1 / lam).cdf)
    assert res.pvalue > 0.01


def test_sampler_reproducible_and_independent():
    a = SwitchDensity(0.3, 0.9).sample(RandomStream(9, 4), 1000)
    b = SwitchDensity(0.3, 0.9).sample(RandomStream(9, 4), 1000)
    c = SwitchDensity(0.3, 0.9).sample(RandomStream(9, 5), 1000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert isinstance(sample_increment(SwitchDensity(0.3), RandomStream(1)), float)


def test_prob_sum_below():
    dens = SwitchDensity(0.4, 0.9)
    assert dens.prob_sum_below(0, 1.0) == 1.0
    assert dens.prob_sum_below(3, 1.0) == pytest.approx(stats.gamma.cdf(1.0, 2.7, scale=2.5), rel=1e-12)


def test_cap_date():
    assert cap_date(0.0, 0.3, 1.0) == (0.3, False)
    assert cap_date(0.9, 0.5, 1.0) == (1.0, True)
    with pytest.raises(ValueError):
        cap_date(1.0, 0.1, 1.0)


def test_first_date_at_horizon_frequency():
    dens = SwitchDensity(0.4)
    stream = RandomStream(11)
    n = 1_000_000
    draws = dens.sample(stream, n)
    hits = np.mean(draws >= 1.0)
    p = math.exp(-0.4)
    assert abs(hits - p) <= 3 * math.sqrt(p * (1 - p) / n)
    t, hit = extend_schedule(0.0, dens, 1.0, RandomStream(12))
    assert 0 < t <= 1.0 and hit == (t == 1.0)


def test_schedule_simulation():
    sched = SwitchSchedule.simulate(SwitchDensity(3.0), 1.0, RandomStream(4))
    assert sched.dates[0] == 0.0 and sched.dates[-1] == 1.0
    assert all(b > a for a, b in zip(sched.dates, sched.dates[1:]))
    assert sched.n_before_horizon == len(sched.dates) - 2
    with pytest.raises(ValueError):
        SwitchSchedule((0.0, 0.5, 0.4), 1.0)
