from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ereem_lab.fitting import (
    Z95,
    BootstrapError,
    FitError,
    UnresolvedTonesError,
    _four_tone_jac,
    _four_tone_vec,
    _lorentzian_doublet_jac,
    bootstrap_confidence,
    finite_difference_jacobian,
    fit_double_lorentzian,
    fit_ereem_data,
    fit_ereem_trace,
    fit_four_tone,
    least_squares_fit,
    lorentzian_doublet,
    refit_transverse_hyperfine,
)
from ereem_lab.nv_model import (
    TWO_PI,
    BiasField,
    SpeciesConstants,
    effective_field_decomposition,
    omega0 as model_omega0,
    relative_angle,
)
from ereem_lab.ramsey_analytic import (
    EREEM_PARAM_NAMES,
    EreemFitParams,
    FourToneParams,
    RamseyTrace,
    ereem_fit_model,
    four_tone_model,
)

N15 = SpeciesConstants.n15()


def _sine(p, x):
    return p[0] * np.sin(TWO_PI * p[1] * x + p[2]) + p[3]


def _sine_jac(p, x):
    a = TWO_PI * p[1] * x + p[2]
    return np.column_stack([np.sin(a), p[0] * np.cos(a) * TWO_PI * x, p[0] * np.cos(a), np.ones_like(x)])


# --------------------------------------------------------------------------
# generic engine
# --------------------------------------------------------------------------

def test_linear_exact():
    x = np.linspace(-2, 3, 25)
    r = least_squares_fit(lambda p, x: p[0] + p[1] * x, x, 1.5 - 0.25 * x, [0.0, 0.0])
    assert np.allclose(r.params, [1.5, -0.25], atol=1e-12, rtol=0)
    assert r.residual_norm < 1e-12 and r.converged


def test_quadratic_interpolates_three_points():
    x = np.array([-1.0, 0.5, 2.0])
    y = np.array([3.0, -1.0, 4.0])
    r = least_squares_fit(lambda p, x: p[0] + p[1] * x + p[2] * x ** 2, x, y, [0.0, 0.0, 0.0])
    assert np.allclose(r.params[0] + r.params[1] * x + r.params[2] * x ** 2, y, atol=1e-12)
    assert r.dof == 0


def test_sine_coverage():
    truth = np.array([1.0, 3.0, 0.3, 0.1])
    x = np.linspace(0.0, 1.0, 200)
    hits = np.zeros(4, dtype=int)
    for seed in range(100):
        y = _sine(truth, x) + np.random.default_rng(seed).normal(0.0, 0.01, x.size)
        r = least_squares_fit(_sine, x, y, truth * [1.1, 1.02, 0.8, 0.5], jac=_sine_jac)
        lo, hi = r.interval()
        hits += (lo <= truth) & (truth <= hi)
    assert np.all(hits >= 93), hits


def test_local_minimum_certificate():
    truth = np.array([1.0, 3.0, 0.3, 0.1])
    x = np.linspace(0.0, 1.0, 200)
    y = _sine(truth, x) + np.random.default_rng(3).normal(0.0, 0.01, x.size)
    r = least_squares_fit(_sine, x, y, truth * 1.05, jac=_sine_jac)

    def cost(p):
        d = _sine(p, x) - y
        return 0.5 * float(d @ d)

    for k in range(4):
        for sgn in (1.0, -1.0):
            p = r.params.copy()
            p[k] += sgn * 1e-6
            assert cost(p) >= r.cost * (1 - 1e-12)


def test_fixed_and_bounds():
    x = np.linspace(0, 1, 30)
    y = 2.0 + 3.0 * x
    r = least_squares_fit(lambda p, x: p[0] + p[1] * x, x, y, [2.0, 0.0], fixed=[True, False])
    assert r.params[0] == 2.0 and r.stderr[0] == 0.0 and r.params[1] == pytest.approx(3.0)
    r = least_squares_fit(lambda p, x: p[0] + p[1] * x, x, y, [0.0, 0.0], bounds=([-1, -1], [1, 1]))
    assert np.all(np.abs(r.params) <= 1.0)
    with pytest.raises(ValueError):
        least_squares_fit(lambda p, x: p[0] * x, x, y, [5.0], bounds=([0], [1]))
    with pytest.raises(ValueError):
        least_squares_fit(lambda p, x: p[0] * x, x, np.full(30, np.nan), [1.0])


def test_max_iter_exhaustion():
    x = np.linspace(0, 1, 50)
    with pytest.raises(FitError) as err:
        least_squares_fit(_sine, x, _sine([1, 3, 0.3, 0.1], x), [0.5, 2.0, 0.0, 0.0], max_iter=1)
    assert err.value.args


def test_singular_jacobian_flagged():
    x = np.linspace(0, 1, 20)
    r = least_squares_fit(lambda p, x: (p[0] + p[1]) * x, x, 2 * x, [0.5, 0.5])
    assert r.singular and math.isinf(r.condition) or r.condition > 1e8


# --------------------------------------------------------------------------
# Jacobians
# --------------------------------------------------------------------------

@given(st.integers(0, 2 ** 32 - 1))
def test_lorentzian_jacobian(seed):
    rng = np.random.default_rng(seed)
    p = np.array([1.0, rng.uniform(0.1, 1), rng.uniform(0.3, 2), 2868.0 + rng.uniform(-1, 0),
                  rng.uniform(0.1, 1), rng.uniform(0.3, 2), 2871.0 + rng.uniform(0, 1)])
    f = np.linspace(2864, 2876, 121)
    # absolute steps: a relative step on a GHz-scale centre would dominate the error
    fd = np.column_stack([(lorentzian_doublet(p + e, f) - lorentzian_doublet(p - e, f)) / 2e-6
                          for e in 1e-6 * np.eye(7)])
    J = _lorentzian_doublet_jac(p, f)
    assert np.max(np.abs(J - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))


@given(st.integers(0, 2 ** 32 - 1))
def test_four_tone_jacobian(seed):
    rng = np.random.default_rng(seed)
    p = np.array([rng.uniform(5, 8), rng.uniform(12, 20), rng.uniform(0.5, 1.5), *rng.uniform(0.1, 0.4, 4),
                  *rng.uniform(-3, 3, 4), rng.uniform(5, 20), rng.uniform(0.8, 2), rng.uniform(-0.1, 0.1)])
    tau = np.linspace(0, 8, 101)
    fd = finite_difference_jacobian(_four_tone_vec, p, tau)
    J = _four_tone_jac(p, tau)
    assert np.max(np.abs(J - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))


# --------------------------------------------------------------------------
# ODMR doublet
# --------------------------------------------------------------------------

def _doublet(split=3.03, centre=2870.0, C=(0.6, 0.6), G=(1.0, 1.0)):
    f = np.linspace(centre - 8, centre + 8, 401)
    p = [1.0, C[0], G[0], centre - split / 2, C[1], G[1], centre + split / 2]
    return f, lorentzian_doublet(p, f)


def test_odmr_symmetric_midpoint():
    f, y = _doublet(centre=2870.123)
    od = fit_double_lorentzian(f, y)
    assert od.nu_star == pytest.approx(2870.123, abs=1e-9)
    assert od.nu[0] < od.nu[1] and all(g > 0 for g in od.Gamma)


def test_odmr_splitting():
    f, y = _doublet(split=3.03, C=(0.5, 0.8), G=(0.9, 1.2))
    od = fit_double_lorentzian(f, y)
    assert abs(od.splitting / 3.03 - 1) < 1e-3


def test_odmr_noise_coverage():
    f, y0 = _doublet(split=3.03, C=(0.6, 0.6), G=(1.0, 1.0))
    depth = float(y0.max() - y0.min())
    inside, total = 0, 0
    for seed in range(40):
        y = y0 + np.random.default_rng(seed).normal(0, 0.05 * depth, f.size)
        od = fit_double_lorentzian(f, y)
        for nu, se, true in zip(od.nu, od.nu_stderr, (2870 - 1.515, 2870 + 1.515)):
            inside += abs(nu - true) <= Z95 * se
            total += 1
    assert inside / total >= 0.85


def test_odmr_single_line_rejected():
    f = np.linspace(2860, 2880, 201)
    y = lorentzian_doublet([1.0, 0.6, 1.0, 2870.0, 0.0, 1.0, 2870.0], f)
    with pytest.raises(FitError):
        fit_double_lorentzian(f, y)


# --------------------------------------------------------------------------
# two-tone fits
# --------------------------------------------------------------------------

@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_ereem_fit_is_identity_on_model_traces(seed):
    rng = np.random.default_rng(seed)
    w0 = rng.uniform(0.4, 1.5)
    beat = TWO_PI / w0
    x = np.array([rng.uniform(0.5, 1), rng.uniform(1.0, 5.0) * beat, rng.uniform(1, 2), w0, rng.uniform(8, 25),
                  rng.uniform(0.3, 2.8), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.1, 0.1)])
    tau = np.linspace(0, 3 * beat, 1500)
    r = fit_ereem_data(tau, ereem_fit_model(x, tau))
    got = EreemFitParams.from_array(r.fit.params)
    truth = EreemFitParams.from_array(x)
    for name in EREEM_PARAM_NAMES:
        a, b = getattr(got, name), getattr(truth, name)
        assert abs(a - b) <= 1e-6 * max(1.0, abs(b)), name
    assert np.max(np.abs(ereem_fit_model(got, tau) - ereem_fit_model(truth, tau))) < 1e-8


def test_ereem_closure_fixed_example():
    x = EreemFitParams(C0=0.9, T2_star=12.0, p=1.4, omega0=1.1, omega_p1=19.0, Phi=1.2, x0=0.2, x_p1=-0.4, y0=0.05)
    tau = np.linspace(0, 20, 2000)
    r = fit_ereem_trace((tau, ereem_fit_model(x, tau)))
    assert np.allclose(r.fit.params, x.to_array(), rtol=1e-6, atol=1e-9)
    assert r.chi_min == pytest.approx(abs(math.cos(1.2)), rel=1e-6)


def test_ereem_noise_at_measured_configuration():
    d = effective_field_decomposition(N15, BiasField.from_degrees(90.08, 25.72))
    x = EreemFitParams(C0=0.8, T2_star=8.0, omega0=d.omega_ms[0], omega_p1=d.omega_ms[1],
                       Phi=relative_angle(d, 0, 1))
    tau = np.linspace(0, 15, 400)
    y = ereem_fit_model(x, tau) + np.random.default_rng(11).normal(0, 0.05, tau.size)
    r = fit_ereem_data(tau, y)
    assert 0.0004 < r.omega0_stderr_MHz < 0.0024
    assert abs(r.omega0_MHz - d.omega_ms[0] / TWO_PI) < 4 * r.omega0_stderr_MHz


def test_ereem_order_violation_rejected():
    x = EreemFitParams(C0=0.9, omega0=1.1, omega_p1=19.0, Phi=1.2, x0=0.2, x_p1=-0.4)
    tau = np.linspace(0, 20, 1000)
    swapped = x.to_array()
    swapped[3], swapped[4] = 19.0 * 1.001, 1.1
    swapped[6], swapped[7] = swapped[7], swapped[6]
    with pytest.raises(FitError):
        fit_ereem_data(tau, ereem_fit_model(x, tau), init=swapped)


def test_dq_trace_sign():
    x = EreemFitParams(C0=0.9, omega0=1.1, omega_p1=19.0, Phi=1.2)
    tau = np.linspace(0, 20, 1000)
    pop = 0.5 * (1 - ereem_fit_model(x, tau))
    r = fit_ereem_trace(RamseyTrace(tau, pop, protocol="DQ"), fixed={"T2_star": math.inf, "p": 1.0})
    assert r.sign == -1.0 and r.params.omega0 == pytest.approx(1.1, rel=1e-8)


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

def _noisy_trace(sigma, seed=5):
    x = EreemFitParams(C0=0.9, T2_star=15.0, omega0=1.1, omega_p1=19.0, Phi=1.2, x0=0.2, x_p1=-0.4)
    tau = np.linspace(0, 18, 600)
    return tau, ereem_fit_model(x, tau) + np.random.default_rng(seed).normal(0, sigma, tau.size)


def test_bootstrap_deterministic():
    data = _noisy_trace(0.05)
    a = bootstrap_confidence(data, 60, seed=9)
    b = bootstrap_confidence(data, 60, seed=9)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.percentile_interval[0], b.percentile_interval[0])
    c = bootstrap_confidence(data, 60, seed=10)
    assert not np.array_equal(a.samples, c.samples)


def test_bootstrap_independent_of_workers():
    data = _noisy_trace(0.05)
    a = bootstrap_confidence(data, 40, seed=2, workers=1, chunk=10)
    b = bootstrap_confidence(data, 40, seed=2, workers=2, chunk=10)
    assert np.array_equal(a.samples, b.samples)


def test_bootstrap_zero_noise_degenerate():
    res = bootstrap_confidence(_noisy_trace(0.0), 30, seed=1)
    assert np.max(res.bootstrap_std[3:5]) < 1e-8
    assert res.failures == 0 and res.resamples == 30


def test_bootstrap_report():
    res = bootstrap_confidence(_noisy_trace(0.05), 50, seed=4)
    doc = res.as_dict()
    assert doc["resamples"] == 50
    assert 0 <= doc["parameters"]["omega0"]["normality_fraction"] <= 1
    with pytest.raises(ValueError):
        bootstrap_confidence(_noisy_trace(0.05), 0)
    assert issubclass(BootstrapError, RuntimeError)


# --------------------------------------------------------------------------
# four-tone fits
# --------------------------------------------------------------------------

def test_four_tone_closure():
    p = FourToneParams(8.0, 20.0, 1.3, amplitudes=(0.3, 0.2, 0.25, 0.15), phases=(0.1, -0.4, 0.7, 0.2),
                       T2_star=12.0, p=1.0, y0=0.02)
    tau = np.linspace(0, 20, 3000)
    r = fit_four_tone((tau, four_tone_model(p, tau)), (8.3, 19.5))
    assert abs(r.params[2] - 1.3) < 1e-8


def test_four_tone_refuses_unresolved():
    tau = np.linspace(0, 20, 3000)
    p = FourToneParams(8.0, 9.3, 1.3, amplitudes=(0.3, 0.2, 0.25, 0.15))
    with pytest.warns(Warning):
        y = four_tone_model(p, tau)
    with pytest.raises(UnresolvedTonesError):
        fit_four_tone((tau, y), (8.0, 9.3), omega0=1.3)


def test_four_tone_overlaps_two_tone_at_measured_field():
    from ereem_lab.pulse_sim import PulseSpec, simulate_ramsey_trace, transition_frequencies

    f = BiasField.from_degrees(90.08, 25.72)
    tau = np.linspace(0, 15, 600)
    rng = np.random.default_rng(0)
    centred = simulate_ramsey_trace(N15, f, "SQ+", tau, initial="unpolarized")
    r2 = fit_ereem_data(tau, centred.contrast + rng.normal(0, 0.02, tau.size), fixed={"T2_star": math.inf, "p": 1.0})
    tf = transition_frequencies(N15, f)
    carrier = tf.mean + 5.0
    offset = simulate_ramsey_trace(N15, f, "SQ+", tau, PulseSpec(carrier=carrier), initial="unpolarized")
    det = [TWO_PI * (line - carrier) for line in tf.lines]
    r4 = fit_four_tone((tau, offset.contrast + rng.normal(0, 0.02, tau.size)), det, T2_star=math.inf)
    lo2, hi2 = r2.params.omega0 - Z95 * r2.stderr["omega0"], r2.params.omega0 + Z95 * r2.stderr["omega0"]
    lo4, hi4 = r4.interval()
    assert max(lo2, lo4[2]) <= min(hi2, hi4[2])


# --------------------------------------------------------------------------
# transverse hyperfine refit
# --------------------------------------------------------------------------

THETAS = np.radians([5.0, 10.0, 20.0, 30.0, 40.0])


def _omega0s(c, B=90.0):
    return np.array([model_omega0(c, BiasField(B, t)) for t in THETAS])


def test_refit_closure():
    r = refit_transverse_hyperfine(90.0, THETAS, _omega0s(N15.with_(A_perp=3.77)), N15)
    assert abs(r.A_perp / 3.77 - 1) < 1e-3


def test_refit_identity():
    r = refit_transverse_hyperfine(90.0, THETAS, _omega0s(N15), N15)
    assert r.A_perp == pytest.approx(3.65, abs=1e-6)


def test_refit_inflated_data():
    r = refit_transverse_hyperfine(90.0, THETAS, 1.03 * _omega0s(N15), N15)
    assert 3.7 <= r.A_perp <= 3.8


def test_refit_single_weighted_point():
    th = math.radians(25.72)
    r = refit_transverse_hyperfine(90.08, [th], [TWO_PI * 0.2736], N15, sigma=TWO_PI * 0.0008)
    assert 3.70 <= r.A_perp <= 3.85
    assert 0 < r.stderr < 0.05


def test_refit_aligned_rejected():
    with pytest.raises(ValueError):
        refit_transverse_hyperfine(90.0, [0.0, 0.0, 0.0], [0.27, 0.27, 0.27], N15)
