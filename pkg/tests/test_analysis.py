import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from manyaccess import analysis as an
from manyaccess.config import Bernoulli, ConfigError, FixedCount, SystemConfig


def cfg(Na=8, snr_db=0.0, **kw):
    params = dict(num_antennas=8, num_online=80, activity=FixedCount(Na), block_len=100,
                  frame_len=500, iterations=30, snr_db=snr_db)
    params.update(kw)
    return SystemConfig(**params)


def test_chi2_values():
    assert an.chi2_pdf(0.0, 1) == pytest.approx(1.0)
    assert an.chi2_cdf(0.0, 1) == 0.0
    assert an.chi2_cdf(np.inf, 3) == 1.0
    area, _ = integrate.quad(lambda x: an.chi2_pdf(x, 8), 0, np.inf)
    mean, _ = integrate.quad(lambda x: x * an.chi2_pdf(x, 8), 0, np.inf)
    assert area == pytest.approx(1.0, abs=1e-9)
    assert mean == pytest.approx(8.0, abs=1e-8)


@pytest.mark.parametrize("n,Na,M", [(1, 1, 8), (1, 2, 1), (2, 2, 1), (3, 8, 8), (8, 8, 8), (12, 24, 8)])
def test_ordered_density_integrates_to_one(n, Na, M):
    upper = an.ordered_upper_limit(M, Na)
    area, _ = integrate.quad(lambda x: an.ordered_density(x, n, Na, M), 0, 3 * upper, points=[M, upper],
                             limit=200)
    assert area == pytest.approx(1.0, abs=1e-7)


def test_ordered_moment_known_values():
    assert an.ordered_moment(1, 1, 8) == pytest.approx(8.0, rel=1e-8)
    assert an.ordered_moment(1, 2, 1) == pytest.approx(1.5, abs=1e-4)   # max of two Exp(1)
    assert an.ordered_moment(2, 2, 1) == pytest.approx(0.5, abs=1e-4)
    assert an.ordered_moment(1, 2, 1, power=2) == pytest.approx(3.5, abs=1e-4)


def test_ordered_moments_against_sorting():
    rng = np.random.default_rng(0)
    draws = np.sort(rng.gamma(8, 1.0, (200_000, 6)), axis=1)[:, ::-1]
    mo = an.ordered_moments(8, 6)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mo.first) <= 4 * se)


@pytest.mark.parametrize("M,Na", [(8, 24), (4, 3), (1, 5)])
def test_ordered_moments_sum_and_order(M, Na):
    mo = an.ordered_moments(M, Na)
    assert mo.first.sum() == pytest.approx(Na * M, rel=1e-6)
    assert mo.second.sum() == pytest.approx(Na * M * (M + 1), rel=1e-6)
    assert np.all(np.diff(mo.first) < 0) and np.all(np.diff(mo.second) < 0)
    assert mo.tail_sum(1) == pytest.approx(mo.first.sum())
    assert mo.tail_sum(Na + 1) == 0.0


def test_residual_variance_limits():
    c = cfg(Na=8, snr_db=3.0)
    mo = an.ordered_moments(8, 8)
    assert an.residual_noise_variance(1, c, mo) == 1.0
    zero = cfg(Na=8, snr_db=-400.0)
    for k in range(1, 9):
        assert an.residual_noise_variance(k, zero, mo) == pytest.approx(1 - (k - 1) * 100 / 4000)


def test_stats_last_iteration_and_identities():
    c = cfg(Na=8, snr_db=-10.0)
    mo = an.ordered_moments(8, 8)
    for k in range(1, 9):
        st_k = an.correlation_stats(k, c, mo)
        assert st_k.mu1 > st_k.mu0 and st_k.var0 > 0 and st_k.var1 > 0
        # mu1 - mu0 only carries the k-th active user's energy
        gap = c.rho0 * 100 / 500 * (100 + 499) * mo.mean(k) - c.rho0 * 100 ** 2 / 4000 * mo.mean(k)
        assert st_k.mu1 - st_k.mu0 == pytest.approx(gap, rel=1e-10)
    last = an.correlation_stats(8, c, mo)
    assert last.resid_var_tilde == pytest.approx(last.sigma2)
    with pytest.raises(ValueError):
        an.correlation_stats(9, c, mo)


def test_negative_variance_is_clamped_with_warning():
    c = cfg(Na=8, snr_db=0.0)
    with pytest.warns(an.ApproximationWarning):
        st_k = an.correlation_stats(1, c, an.ordered_moments(8, 8), third_moment=-1e6)
    assert st_k.clamped == ("var1",) and st_k.var1 > 0


def test_generic_means_match_first_iteration():
    c = cfg(Na=8, snr_db=1.0)
    st1 = an.correlation_stats(1, c, an.ordered_moments(8, 8))
    mu0, _ = an.correlation_means_generic(c, 1.0, 0)
    assert mu0 == pytest.approx(st1.mu0, rel=1e-6)
    mu0, mu1 = an.correlation_means_generic(c, 1.0, 0)
    assert mu1 - mu0 == pytest.approx(c.rho0 * 100 / 500 * (100 + 499) * 8 - c.rho0 * 100 ** 2 / 500)


def test_third_moment_modes():
    b = 0.2
    assert an.mp_third_moment(100, 500) == pytest.approx(0.59, abs=1e-12)
    assert an.mp_third_moment(100, 500, "mp_moment") == pytest.approx(1.64, abs=1e-12)
    assert an.mp_third_moment(100, 500) == pytest.approx((3 + 9 * b - 2 * b * b) / 8)
    assert an.mp_third_moment(100, 500, "mp_moment") == pytest.approx(1 + 3 * b + b * b)
    emp = an.mp_third_moment(100, 500, "empirical", np.random.default_rng(1))
    assert emp == pytest.approx(1 + 3 * b + b * b, rel=0.02)
    with pytest.raises(ValueError):
        an.mp_third_moment(100, 500, "guess")


@settings(max_examples=50, deadline=None)
@given(d=st.integers(1, 200), extra=st.integers(1, 800))
def test_cross_term_closed_form(d, extra):
    T = d + extra
    lam3 = an.mp_third_moment(d, T)
    bracket = 3 / 4 + 2 * d + 2 * d * d / T + d / (4 * T) - d * d / (2 * T * T)
    assert an.cross_term_factor(d, T, lam3) == pytest.approx(bracket, rel=1e-12)


def test_detection_probability_cases():
    assert an.detection_prob(N=2, Na=1, mu0=1.0, var0=1.0, mu1=1.0, var1=1.0) == pytest.approx(0.5, abs=1e-6)
    assert an.detection_prob(N=2, Na=1, mu0=0.0, var0=1e-6, mu1=10.0, var1=1e-6) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        an.detection_prob(N=3, Na=3, mu0=0, var0=1, mu1=1, var1=1)


def test_detection_probability_monte_carlo():
    rng = np.random.default_rng(2)
    m, trials = 9, 1_000_000
    active = 2.0 + rng.standard_normal(trials)
    best = np.full(trials, -np.inf)
    for _ in range(m):
        np.maximum(best, rng.standard_normal(trials), out=best)
    emp = np.mean(active > best)
    p = an.detection_prob(N=m + 1, Na=1, mu0=0.0, var0=1.0, mu1=2.0, var1=1.0)
    assert abs(p - emp) <= 3 * math.sqrt(emp * (1 - emp) / trials)


def test_gudsr_bound_single_active_user():
    c = cfg(Na=1, snr_db=-12.0, iterations=1)
    bound, probs, stats = an.gudsr_lower_bound(c, detail=True)
    assert bound == pytest.approx(probs[0])
    assert len(stats) == 1


def test_gudsr_bound_monotone_in_snr():
    grid = np.arange(-20.0, 0.01, 0.1)
    values = [an.gudsr_lower_bound(cfg(Na=8, snr_db=s)) for s in grid]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))
    assert values[0] < 0.01 and values[-1] > 0.99


def test_gudsr_bound_saturates():
    # propagated LS error grows with rho0 too, so the high-SNR bound levels off just below 1,
    # limited by the last (weakest) user
    bound, probs, _ = an.gudsr_lower_bound(cfg(Na=8, snr_db=10.0), detail=True)
    assert 0.999 < bound < 1.0 and int(np.argmin(probs)) == 7
    assert an.gudsr_lower_bound(cfg(Na=8, snr_db=30.0)) == pytest.approx(bound, abs=1e-5)


def test_gudsr_needs_fixed_activity():
    with pytest.raises(ConfigError):
        an.gudsr_lower_bound(cfg(activity=Bernoulli(0.1)))


def test_ser_conditional_endpoints():
    assert an.ser_conditional(0.0, 1.0) == pytest.approx(0.75)
    assert an.ser_conditional(1e3, 1.0) < 1e-200


def test_g_statistic():
    assert an.g0(8, 500, 30, 100) == pytest.approx(8 - 2999 / 500)
    dist = an.g_distribution(8, 500, 30, 100)
    assert dist.mean() == pytest.approx((4000 - 3000 + 1) / 500)
    area, _ = integrate.quad(lambda g: math.exp(an.g_log_pdf(g, 8, 500, 30, 100)), 0, 10, points=[2.0])
    assert area == pytest.approx(1.0, abs=1e-8)
    big = an.g_log_pdf(np.array([8.0]), 8, 1000, 1, 10)
    assert np.all(np.isfinite(big))
    with pytest.raises(ConfigError):
        an.g_distribution(8, 500, 41, 100)


def test_ser_average_close_to_mean_g_approximation():
    assert an.ser_average(8, 620, 8, 124, 2.0) == pytest.approx(an.ser_g0(8, 620, 8, 124, 2.0), rel=0.05)
    for snr in (-2.0, 2.0, 6.0):
        rho0 = 10 ** (snr / 10)
        avg = an.ser_average(8, 500, 30, 100, rho0)
        assert avg == pytest.approx(an.ser_g0(8, 500, 30, 100, rho0), rel=0.05)


def test_ser_monotone():
    snrs = np.linspace(-10, 10, 41)
    vals = [an.ser_average(8, 500, 30, 100, 10 ** (s / 10)) for s in snrs]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    by_m = [an.ser_average(M, 500, 30, 100, 2.0) for M in (7, 8, 10, 16)]
    assert all(b < a for a, b in zip(by_m, by_m[1:]))


def test_ser_diversity_slope():
    # G has MT-Kd+1 = 2 complex degrees of freedom at M=1, T=2, K=d=1: SER falls like rho0^-2
    for lo in (1e4, 1e6, 1e8):
        slope = math.log10(an.ser_average(1, 2, 1, 1, 10 * lo) / an.ser_average(1, 2, 1, 1, lo))
        assert -2.1 <= slope <= -1.9


def test_ser_prediction_fields():
    p = an.ser_prediction(cfg(Na=8, snr_db=4.0))
    assert p.g0 == pytest.approx(an.g0(8, 500, 30, 100))
    assert 0 < p.average < 0.75 and 0 < p.ser_g0 < 0.75 and p.dof == 2 * 1001


def test_coding_loss():
    assert an.coding_loss_db() == pytest.approx(0.5824, abs=1e-4)
