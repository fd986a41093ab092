import math
import warnings

import numpy as np
import pytest

from nestmc import (
    ConfigError,
    NestingPlan,
    RandomStream,
    SwitchDensity,
    estimate_gradient_scheme1,
    estimate_gradient_scheme2,
    estimate_value,
    expected_evaluations,
    make_burgers,
    make_custom,
    make_cva,
    make_hjb,
    make_toy_cosine,
    replicate,
    weight_phi_cv,
    weight_phi_hat,
)

GRADIENT_SCHEMES = [estimate_gradient_scheme1, estimate_gradient_scheme2]


def quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


def linear_problem(dim=3, coeffs=(0.5, -1.0, 2.0), offset=0.7, driver=None):
    return make_custom(
        dim,
        1.0,
        {"form": "linear", "params": [offset, *coeffs]},
        driver or {"form": "zero"},
        mu=[0.1, -0.2, 0.3][:dim],
        sigma=[1.0, 0.5, 1.5][:dim],
        x0=[0.2, 0.0, -0.4][:dim],
    )


def test_weight_closed_forms():
    assert weight_phi_hat(0.0, 1.0, 1.0, SwitchDensity(0.2), 1.0, 0.0) == pytest.approx(math.exp(0.2))
    assert weight_phi_hat(0.0, 1.0, 1.0, SwitchDensity(0.2), 1.0, 0.0) == pytest.approx(1.2214, abs=1e-4)
    assert weight_phi_hat(0.0, 0.5, 1.0, SwitchDensity(0.4), 0.0, 2.0) == pytest.approx(6.1070, abs=1e-4)
    assert weight_phi_cv(0.0, 1.0, 1.0, SwitchDensity(0.2), 3.0, 3.0, 9.0) == 0.0
    assert weight_phi_cv(0.0, 1.0, 1.0, SwitchDensity(0.2), 2.0, 0.5, 0.0) == pytest.approx(1.5 * math.exp(0.2))
    assert weight_phi_cv(0.3, 0.5, 1.0, SwitchDensity(0.4), 2.0, 0.5, 1.0) == pytest.approx(1 / (0.4 * math.exp(-0.08)))


def test_weight_over_random_date_recovers_terminal_mean():
    prob = make_toy_cosine(d=2, x0=0.2)
    dens = SwitchDensity(0.8)
    n = 100_000
    taus = dens.sample(RandomStream(3), n)
    xt = prob.sde.sample_terminal(prob.horizon, RandomStream(4), n)
    gvals = prob.g(xt)
    w = np.array([weight_phi_hat(0.0, min(tau, 1.0), 1.0, dens, gv, 0.0) for tau, gv in zip(taus, gvals)])
    plain = gvals.mean()
    se = math.sqrt(w.var() / n + gvals.var() / n)
    assert abs(w.mean() - plain) <= 3 * se


def test_toy_value_estimate():
    prob = make_toy_cosine()
    res = estimate_value(prob, (20000, 200), SwitchDensity(0.4), seed=1)
    assert abs(res.value - math.exp(0.1)) <= 3 * res.std_error + 0.003
    assert res.n_outer == 20000 and not res.partial
    lo, hi = res.confidence_interval()
    assert lo < res.value < hi


@pytest.mark.parametrize("plan", [(40000,), (4000, 10), (2000, 5, 3)])
def test_constant_driver_gives_c_times_horizon(plan):
    c = 1.7
    prob = make_custom(2, 1.3, {"form": "constant", "params": [0.0]}, {"form": "affine", "params": [c]})
    res = estimate_value(prob, plan, SwitchDensity(1.0), seed=2)
    assert abs(res.value - c * 1.3) <= 3 * res.std_error


@pytest.mark.parametrize("scheme", GRADIENT_SCHEMES)
def test_linear_terminal_gradient(scheme):
    prob = linear_problem()
    res = quiet(scheme, prob, (20000, 4), SwitchDensity(0.5, 0.9), seed=3)
    a = np.array([0.5, -1.0, 2.0])
    expected = 0.7 + a @ (prob.x0 + prob.sde.mu)
    assert abs(res.value - expected) <= 3 * res.std_error
    assert np.all(np.abs(res.gradient - a) <= 3 * res.gradient_se + 1e-12)


def test_toy_gradient_matches_analytic():
    prob = make_toy_cosine(d=6, x0=0.1)
    res = estimate_gradient_scheme1(prob, (20000, 50), SwitchDensity(0.4, 0.9), seed=5)
    exact = -math.exp(0.1) * math.sin(0.6)
    assert np.all(np.abs(res.gradient - exact) <= 3 * res.gradient_se + 0.01)
    assert abs(res.value - prob.reference) <= 3 * res.std_error + 0.01


@pytest.mark.parametrize("estimator", ["value", "grad1", "grad2"])
def test_worker_and_chunk_invariance(estimator):
    prob = make_toy_cosine(d=3, x0=0.2)
    plan = (3000, 6, 3)
    dens = SwitchDensity(0.6, 0.9 if estimator != "value" else 1.0)
    fn = {"value": estimate_value, "grad1": estimate_gradient_scheme1, "grad2": estimate_gradient_scheme2}[estimator]
    runs = [quiet(fn, prob, plan, dens, seed=9, workers=w, chunk_size=c) for w, c in [(1, None), (4, 7), (3, 1000)]]
    for other in runs[1:]:
        assert other.value == runs[0].value
        assert other.std_error == runs[0].std_error
        assert other.evaluations == runs[0].evaluations
        if estimator != "value":
            np.testing.assert_array_equal(other.gradient, runs[0].gradient)


def test_seed_and_replication_change_stream():
    prob = make_toy_cosine(d=2)
    dens = SwitchDensity(0.5)
    a = estimate_value(prob, (500, 3), dens, seed=1)
    assert estimate_value(prob, (500, 3), dens, seed=1).value == a.value
    assert estimate_value(prob, (500, 3), dens, seed=2).value != a.value
    assert estimate_value(prob, (500, 3), dens, seed=1, replication=1).value != a.value


@pytest.mark.parametrize("estimator", ["value", "grad2"])
def test_evaluation_count_matches_expectation(estimator):
    prob = make_toy_cosine(d=2)
    plan = NestingPlan((4000, 20, 5))
    dens = SwitchDensity(3.0, 1.0 if estimator == "value" else 0.9)
    fn = estimate_value if estimator == "value" else estimate_gradient_scheme2
    res = quiet(fn, prob, plan, dens, seed=4)
    expected = expected_evaluations(plan, dens, prob.horizon, estimator)
    assert abs(res.evaluations / expected - 1) <= 0.01
    assert res.horizon_evaluations == 0


def test_replicate_single_equals_run():
    prob = make_toy_cosine(d=2)
    dens = SwitchDensity(0.4)
    one = replicate("value", prob, (800, 4), dens, 1, seed=12)
    run = estimate_value(prob, (800, 4), dens, seed=12)
    assert one.value == run.value and one.std_error == run.std_error
    many = replicate("value", prob, (800, 4), dens, 3, seed=12)
    singles = [estimate_value(prob, (800, 4), dens, seed=12, replication=r).value for r in range(3)]
    assert many.replicates == tuple(singles)
    assert many.value == pytest.approx(np.mean(singles), rel=1e-15)
    with pytest.raises(ValueError):
        replicate("value", prob, (10,), dens, 0)
    with pytest.raises(ConfigError):
        replicate("nope", prob, (10,), dens, 1)


def test_replicate_standard_error_scaling():
    prob = make_cva()
    dens = SwitchDensity(0.1)
    plan = (4000, 8, 1)
    single = estimate_value(prob, plan, dens, seed=21)
    rep = replicate("value", prob, plan, dens, 16, seed=21)
    # the spread of 16 replicate means estimates single.std_error / 4 up to chi-square noise
    ratio = rep.std_error / (single.std_error / 4)
    assert 0.55 <= ratio <= 1.5


def test_time_budget_returns_deterministic_prefix():
    prob = make_toy_cosine(d=2)
    dens = SwitchDensity(0.3)
    plan = (200_000, 40)
    part = estimate_value(prob, plan, dens, seed=6, workers=1, chunk_size=500, time_budget=0.05)
    assert part.partial and 0 < part.n_outer < 200_000
    full = estimate_value(prob, (part.n_outer, 40), dens, seed=6, diagnostics=True)
    assert part.value == full.value


def test_configuration_errors():
    hjb = make_hjb(d=3, n_ref=0)
    with pytest.raises(ConfigError):
        estimate_value(hjb, (10, 2), SwitchDensity(0.5))
    with pytest.raises(ConfigError):
        estimate_gradient_scheme1(make_cva(), (10, 2), SwitchDensity(0.5, 0.9))
    with pytest.raises(ConfigError):
        estimate_value(make_toy_cosine(d=2), (10, 2), SwitchDensity(0.5), x0=[0.0])
    with pytest.raises(ConfigError):
        estimate_value(make_toy_cosine(d=2), (10, 0), SwitchDensity(0.5))
    with pytest.warns(UserWarning):
        estimate_value(make_toy_cosine(d=2), (10, 2), SwitchDensity(0.5, 0.9))
    with pytest.warns(UserWarning):
        estimate_gradient_scheme2(hjb, (10, 2), SwitchDensity(0.5, 1.0))


def test_antithetic_contributions_stay_bounded_for_small_increments():
    # driver linear in the gradient and a linear terminal condition
    drv = {"form": "affine", "params": [0.0, 0.0, 0.5, 0.5]}
    prob = linear_problem(dim=2, coeffs=(1.0, -0.5), driver=drv)
    dens = SwitchDensity(1.0, 0.9)
    first = estimate_gradient_scheme1(prob, (40000, 4), dens, seed=8, diagnostics=True)
    second = estimate_gradient_scheme2(prob, (40000, 4), dens, seed=8, diagnostics=True)
    m1 = [row["second_moment"] for row in first.diagnostics["tau_deciles"]]
    m2 = [row["second_moment"] for row in second.diagnostics["tau_deciles"]]
    # Malliavin weights without a control variate grow like 1 / tau in the smallest decile
    assert m1[0] > 5 * np.median(m1)
    # antithetic differences cancel before the horizon; the horizon branch sets the scale
    assert m2[0] <= max(m2)
    assert m2[0] < m1[0] / 10
    # both schemes agree on the linear answer
    a = np.array([1.0, -0.5])
    for res in (first, second):
        assert np.all(np.abs(res.gradient - a) <= 4 * res.gradient_se)


def test_burgers_small_plan_runs_and_records_diagnostics():
    res = estimate_gradient_scheme2(make_burgers(d=4), (200, 5, 5), SwitchDensity(0.1, 0.9), seed=1, diagnostics=True)
    assert math.isfinite(res.value) and res.gradient.shape == (4,)
    assert len(res.diagnostics["tau_deciles"]) == 10
    assert res.diagnostics["value_samples"].shape == (200,)
    assert set(res.as_dict()) >= {"value", "std_error", "gradient", "evaluations"}
