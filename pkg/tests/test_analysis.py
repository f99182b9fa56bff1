import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvparticles import analysis as an

from oracles import bisect, rate_root_bisect

OPINION = dict(a1=5.0, a2=1.0, b1=7.0, b2=2.0)


def test_estimate_rate_on_synthetic_exponential():
    t = np.linspace(0, 3, 301)
    rep = an.estimate_rate(t, np.exp(-4 * t), window=(0.5, 3))
    assert rep.empirical_rate == pytest.approx(-4, abs=1e-12)
    assert rep.r_squared == pytest.approx(1.0)
    assert rep.n_points == 251 and rep.empirical_decay == pytest.approx(4)
    flat = an.estimate_rate(t, np.full_like(t, 2.5))
    assert flat.empirical_rate == pytest.approx(0, abs=1e-14)
    assert an.default_window(t) == (1.0, 3.0)


@given(st.floats(1e-6, 1e6), st.floats(-5, 5))
def test_estimate_rate_is_scale_invariant(c, rate):
    t = np.linspace(0, 2, 41)
    v = np.exp(rate * t + 0.1 * np.sin(7 * t))
    a = an.estimate_rate(t, v).empirical_rate
    b = an.estimate_rate(t, c * v).empirical_rate
    assert a == pytest.approx(b, abs=1e-9)


def test_estimate_rate_rejects_bad_input():
    t = np.linspace(0, 1, 20)
    v = np.exp(-t)
    with pytest.raises(ValueError):
        an.estimate_rate(t, np.where(t > 0.5, 0.0, v))
    with pytest.raises(ValueError):
        an.estimate_rate(t, v, window=(0.9, 1.0))
    with pytest.raises(ValueError):
        an.estimate_rate(t, v, window=(0.5, 0.5))
    with pytest.raises(ValueError):
        an.estimate_rate(t, v[:-1])


def test_pathwise_rates():
    t = np.linspace(0, 3, 61)
    per = np.exp(np.outer(t, [-1.0, -2.0, -3.0]))
    rep = an.pathwise_rates(t, per)
    assert rep.median == pytest.approx(-2) and rep.min == pytest.approx(-3) and rep.max == pytest.approx(-1)
    assert rep.all_negative


def test_ms_rate_examples():
    lam, theta = an.ms_rate_equation(0.005, **OPINION)
    assert theta == pytest.approx(3.9944, abs=1e-3)
    assert theta == pytest.approx(-math.log(1 + 9 * 0.005**2 - 4 * 0.005) / 0.005, rel=1e-14)
    assert lam == pytest.approx(math.exp(theta))
    assert an.ms_rate_root(0.005, **OPINION) == pytest.approx(theta, rel=1e-10)
    assert an.ms_rate_equation(1e-6, **OPINION)[1] == pytest.approx(4, abs=1e-4)
    for dt in (0.01, 0.1, 0.2):
        assert an.ms_rate_equation(dt, 3, 1, 0, 0)[1] == pytest.approx(-math.log(1 - 2 * dt) / dt, rel=1e-14)


def test_ms_rate_domain():
    assert an.ms_stepsize_bound(**OPINION) == pytest.approx(4 / 9)
    with pytest.raises(an.RateDomainError):
        an.ms_rate_equation(0.45, **OPINION)
    with pytest.raises(an.RateDomainError):
        an.ms_rate_equation(0.01, 1, 1, 7, 2)


def test_theta_decreases_in_dt():
    grid = np.linspace(1e-4, an.ms_stepsize_bound(**OPINION) * 0.999, 200)
    th = [an.ms_rate_equation(float(dt), **OPINION)[1] for dt in grid]
    assert np.all(np.diff(th) < 0)


@pytest.mark.parametrize("k", range(2, 7))
def test_limits_are_approached_at_rate_dt(k):
    dt = 10.0**-k
    assert abs(an.ms_rate_equation(dt, **OPINION)[1] - 4) <= 50 * dt
    assert abs(an.as_rate_equation(dt, 7, 2, 5, 1)[1] - 4) <= 50 * dt
    assert abs(an.bem_rate_equation(dt, 5, 1, 1, 1)[1] - 2) <= 50 * dt


def test_as_rate_examples():
    b = an.as_stepsize_bounds(7, 2, 5, 1)
    assert b["d0"] == min(b["d1"], b["d2"], b["d3"], 1.0)
    # 1 + 7D^2 - 5D has no real root, so only d2 = c1 / b1 and the cubic numerator bind.
    assert b["d1"] == math.inf and b["d2"] == pytest.approx(5 / 7)
    b0 = an.as_stepsize_bounds(1, 0, 5, 1)
    assert 1 + b0["d1"] ** 2 - 5 * b0["d1"] == pytest.approx(0, abs=1e-12)
    cubic = lambda D: 2 * 49 * D**3 - (7 + 10 + 105) * D**2 + (14 + 4 + 25) * D + 1 - 5  # noqa: E731
    assert b["d3"] == pytest.approx(bisect(cubic, 0.0, 0.3), abs=1e-10)
    _, xi = an.as_rate_equation(0.01, 7, 2, 5, 1)
    base = 1 + 7e-4 - 0.05
    assert xi == pytest.approx(-math.log(base) / 0.01 - (0.02 + 1) / base, rel=1e-13)
    assert an.as_rate_root(0.01, 7, 2, 5, 1) == pytest.approx(xi, abs=1e-10)
    # Without the quadratic terms the c2 correction is still divided by the base 1 - c1 dt.
    assert an.as_rate_equation(0.02, 0, 0, 5, 1)[1] == pytest.approx(-math.log(0.9) / 0.02 - 1 / 0.9, rel=1e-13)
    with pytest.raises(an.RateDomainError):
        an.as_rate_equation(0.01, 7, 2, 1, 5)
    with pytest.raises(an.RateDomainError):
        an.as_rate_equation(b["d0"] * 1.01, 7, 2, 5, 1)


def test_bem_rate_examples():
    _, beta = an.bem_rate_equation(0.01, 5, 1, 1, 1)
    assert beta == pytest.approx(an.bem_rate_root(0.01, 5, 1, 1, 1), abs=1e-10)
    assert an.bem_rate_equation(0.05, 4, 1, 0, 0)[1] == pytest.approx(-math.log(0.8) / 0.05 - 1 / 0.8, rel=1e-13)
    with pytest.raises(an.RateDomainError):
        an.bem_rate_equation(0.01, 3, 1, 1, 1)
    with pytest.raises(an.RateDomainError):
        an.bem_rate_equation(0.5, 5, 0, 1, 0)


def test_bem_ms_rate():
    assert an.bem_ms_rate(7, 1, 1) == 4
    assert an.bem_ms_rate(3 + 1e-3, 1, 1) == pytest.approx(1e-3)
    assert an.bem_ms_rate(2.5, 0, 0) == 2.5
    with pytest.raises(an.RateDomainError):
        an.bem_ms_rate(3, 1, 1)


def test_closed_forms_match_bisection_on_random_tuples():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 1000:
        kind = checked % 3
        if kind == 0:
            a2, b1, b2 = rng.uniform(0, 3, 3)
            a1 = a2 + rng.uniform(0.1, 5)
            dt = rng.uniform(0.01, 0.95) * an.ms_stepsize_bound(a1, a2, b1, b2)
            base = 1 + (b1 + b2) * dt * dt + (a2 - a1) * dt
            lam = an.ms_rate_equation(dt, a1, a2, b1, b2)[0]
        elif kind == 1:
            c2, b1, b2 = rng.uniform(0, 3, 3)
            c1 = c2 + rng.uniform(0.1, 5)
            dt = rng.uniform(0.01, 0.95) * an.as_stepsize_bounds(b1, b2, c1, c2)["d0"]
            base = 1 + b1 * dt * dt - c1 * dt
            lam = an.as_rate_equation(dt, b1, b2, c1, c2)[0]
            lam = math.exp(-math.log(base) / dt) if lam is None else lam
        else:
            h1, ct2, h2 = rng.uniform(0, 2, 3)
            ct1 = h1 + ct2 + h2 + rng.uniform(0.1, 5)
            dt = rng.uniform(0.01, 0.95) / (ct1 - h1)
            base = 1 + (h1 - ct1) * dt
            lam = an.bem_rate_equation(dt, ct1, ct2, h1, h2)[0]
        s = rate_root_bisect(base, dt)
        assert math.log(lam) == pytest.approx(s, rel=1e-10, abs=1e-12)
        checked += 1


def test_phi_of_n():
    assert an.phi_of_n(1, 1, 8) == 2
    assert an.phi_of_n(1, 5, 3) == 2
    assert an.phi_of_n(10**4, 1, 8) == pytest.approx(0.011)
    assert an.phi_of_n(100, 4, 8) == pytest.approx(0.1 * math.log(101) + 100 ** -0.75)
    assert an.phi_of_n(100, 6, 8) == pytest.approx(100 ** (-1 / 3) + 100 ** -0.75)
    assert np.allclose(an.phi_of_n(np.array([1, 100]), 1, 8), [2, 0.1 + 100**-0.75])
    an.phi_of_n(10, 5, 3)
    for d, q in ((5, 5 / 3), (1, 4), (3, 2), (3, 1.5)):
        with pytest.raises(ValueError):
            an.phi_of_n(10, d, q)
    with pytest.raises(ValueError):
        an.phi_of_n(0, 1, 8)
    assert an.theoretical_chaos_exponent(1, 8) == -0.5
    assert an.theoretical_chaos_exponent(1, 3) == pytest.approx(-1 / 3)
    assert an.theoretical_chaos_exponent(6, 100) == pytest.approx(-1 / 3)


@pytest.mark.parametrize("power", [1.0, 0.5])
def test_fit_chaos_rate_synthetic(power):
    n = np.array([8, 16, 32, 64, 128])
    rep = an.fit_chaos_rate(n, 3.0 * n**-power)
    assert rep.slope == pytest.approx(-power, abs=1e-12)
    assert rep.prefactor == pytest.approx(3.0)
    assert rep.theoretical_exponent == -0.5 and rep.q == 8.0
    assert rep.slope_se == pytest.approx(0, abs=1e-10)


def test_fit_chaos_rate_rejects():
    with pytest.raises(ValueError):
        an.fit_chaos_rate([8, 16, 32], [1, 1, 1])
    with pytest.raises(ValueError):
        an.fit_chaos_rate([8, 16, 32, 64], [1, 0, 1, 1])
    with pytest.raises(ValueError):
        an.fit_chaos_rate([8, 8, 16, 32], [1, 1, 1, 1])
