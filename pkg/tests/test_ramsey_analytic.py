from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize_scalar

from ereem_lab.nv_model import TWO_PI, BiasField, SpeciesConstants, effective_field_decomposition, relative_angle
from ereem_lab.ramsey_analytic import (
    EreemFitParams,
    FourToneParams,
    Protocol,
    RamseyTrace,
    ResolvabilityWarning,
    analytic_trace,
    dq_signal,
    envelope,
    envelope_properties,
    ereem_fit_jacobian,
    ereem_fit_model,
    four_tone_frequencies,
    four_tone_model,
    four_tone_resolvable,
    power_spectrum,
    protocol_signal,
    spectrum_peaks,
    sq_signal,
    to_contrast,
)

F = BiasField.from_degrees
N15 = SpeciesConstants.n15()
CONFIGS = [(40.0, 5.0), (90.0, 10.0), (100.0, 15.0), (50.0, 35.0), (140.0, 40.0), (200.0, 45.0)]


def _d(B, th, c=N15):
    return effective_field_decomposition(c, F(B, th))


def test_protocol_parse():
    assert Protocol.parse("SQ") is Protocol.SQ_PLUS
    assert Protocol.parse("sq-1") is Protocol.SQ_MINUS
    assert Protocol.parse("dq") is Protocol.DQ
    assert Protocol.DQ.states == (-1, 1) and Protocol.DQ.is_dq
    with pytest.raises(ValueError):
        Protocol.parse("TQ")


def test_initial_values():
    d = _d(100.0, 15.0)
    assert sq_signal(d, 0.0) == 0.0
    assert sq_signal(d, 0.0, upper=False) == 0.0
    assert dq_signal(d, 0.0) == 1.0
    with pytest.raises(ValueError):
        sq_signal(d, -1.0)


@pytest.mark.parametrize("B,th", CONFIGS)
@pytest.mark.parametrize("proto", list(Protocol))
def test_signals_bounded(B, th, proto):
    tau = np.linspace(0.0, 50.0, 100_000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = protocol_signal(_d(B, th), proto, tau)
    assert s.min() >= 0.0 and s.max() <= 1.0


def test_aligned_field_fringe_unmodulated():
    d = _d(80.0, 0.0)
    tau = np.linspace(0.0, 10.0, 5001)
    s = sq_signal(d, tau)
    delta = 0.5 * (d.omega_ms[1] - d.omega_ms[0])
    assert np.max(np.abs(s - 0.5 * (1 - np.cos(delta * tau)))) < 1e-12
    assert np.allclose(envelope(d, "SQ+", tau), 1.0)
    assert envelope_properties(d, "SQ+").chi_min == 1.0


def test_two_peaks_split_by_omega0():
    d = _d(100.0, 15.0)
    w0, w1 = d.omega_ms[0], d.omega_ms[1]
    span = 200 * TWO_PI / w1
    tau = np.linspace(0.0, span, 8192)
    freq, power = power_spectrum(tau, sq_signal(d, tau))
    idx = np.nonzero((power[1:-1] > power[:-2]) & (power[1:-1] > power[2:]) & (power[1:-1] > 1e-3 * power.max()))[0]
    assert idx.size == 2
    peaks, _ = spectrum_peaks(freq, power, count=2)
    bin_width = 1.0 / span
    assert abs((peaks[1] - peaks[0]) - w0 / TWO_PI) < bin_width
    assert np.allclose(peaks, [(w1 - w0) / 2 / TWO_PI, (w1 + w0) / 2 / TWO_PI], atol=bin_width)


def _numeric_envelope_extrema(cphi, samples=721):
    """Min and max over the slow phase of max over the fast phase of |signal|."""
    def fringe_peak(a):
        b = np.linspace(0.0, math.pi, 181)
        vals = np.abs(np.cos(a) * np.cos(b) + cphi * np.sin(a) * np.sin(b))
        k = int(np.argmax(vals))
        r = minimize_scalar(lambda x: -abs(math.cos(a) * math.cos(x) + cphi * math.sin(a) * math.sin(x)),
                            bounds=(b[max(k - 1, 0)], b[min(k + 1, 180)]), method="bounded",
                            options={"xatol": 1e-12})
        return max(vals[k], -r.fun)

    a = np.linspace(0.0, math.pi, samples)
    env = np.array([fringe_peak(x) for x in a])
    k = int(np.argmin(env))
    r = minimize_scalar(fringe_peak, bounds=(a[max(k - 1, 0)], a[min(k + 1, samples - 1)]), method="bounded",
                        options={"xatol": 1e-12})
    return min(env.min(), r.fun), env.max()


@pytest.mark.parametrize("B,th", CONFIGS[:5])
def test_envelope_extrema_numeric(B, th):
    d = _d(B, th)
    props = envelope_properties(d, "SQ+")
    lo, hi = _numeric_envelope_extrema(math.cos(relative_angle(d, 0, 1)))
    assert abs(lo - props.chi_min) < 1e-6
    assert abs(hi - 1.0) < 1e-6
    assert props.period == pytest.approx(TWO_PI / props.beat_omega0)


@pytest.mark.parametrize("B,th", CONFIGS[:5])
def test_envelope_bounds_signal(B, th):
    d = _d(B, th)
    tau = np.linspace(0.0, 30.0, 20001)
    k = np.abs(to_contrast(sq_signal(d, tau)))
    env = envelope(d, "SQ+", tau)
    assert np.all(k <= env + 1e-12)


def test_envelope_examples():
    assert envelope_properties(_d(90.0, 10.0), "SQ+").chi_min == pytest.approx(0.3, abs=0.05)
    assert envelope_properties(_d(100.0, 15.0), "SQ+").chi_min == pytest.approx(0.20, abs=0.005)
    assert envelope_properties(_d(100.0, 0.0), "DQ").chi_min == 1.0


@given(st.floats(1.0, 200.0), st.floats(0.0, 40.0))
def test_dq_suppression_ratio(B, th):
    d = _d(B, th)
    sq = 1 - envelope_properties(d, "SQ+").chi_min
    dq = 1 - envelope_properties(d, "DQ").chi_min
    assert dq <= 0.1 * sq + 1e-15


def test_dq_example_at_50G_35deg():
    assert envelope_properties(_d(50.0, 35.0), "DQ").chi_min > 0.98


def test_dq_strong_modulation_at_800G():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert envelope_properties(_d(800.0, 60.0), "DQ").chi_min < 0.5


def _params(**kw):
    base = dict(C0=0.9, T2_star=7.0, p=1.3, omega0=1.1, omega_p1=19.0, Phi=1.2, x0=0.2, x_p1=-0.4, y0=0.05)
    base.update(kw)
    return EreemFitParams(**base)


def test_fit_model_reduces_to_signal():
    d = _d(100.0, 15.0)
    tau = np.linspace(0.0, 20.0, 4001)
    p = EreemFitParams(C0=1.0, omega0=d.omega_ms[0], omega_p1=d.omega_ms[1], Phi=relative_angle(d, 0, 1))
    assert np.max(np.abs(ereem_fit_model(p, tau) - to_contrast(sq_signal(d, tau)))) < 1e-12


def test_fit_model_at_zero():
    p = _params()
    expect = -p.C0 * math.cos(p.x0) * math.cos(p.x_p1) - p.C0 * math.cos(p.Phi) * math.sin(p.x0) * math.sin(p.x_p1) + p.y0
    assert ereem_fit_model(p, np.array([0.0]))[0] == pytest.approx(expect, abs=1e-15)


def test_fit_model_phi_limits():
    tau = np.linspace(0.0, 10.0, 1001)
    p = _params(Phi=math.pi / 2)
    e = p.C0 * np.exp(-(tau / p.T2_star) ** p.p)
    A, B = 0.5 * p.omega0 * tau + p.x0, 0.5 * p.omega_p1 * tau + p.x_p1
    assert np.allclose(ereem_fit_model(p, tau), -e * np.cos(A) * np.cos(B) + p.y0, atol=1e-14)
    q = _params(Phi=0.0)
    assert np.allclose(ereem_fit_model(q, tau), -e * np.cos(A - B) + q.y0, atol=1e-14)


@given(st.integers(0, 2 ** 32 - 1))
def test_fit_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = np.array([rng.uniform(0.3, 2), rng.uniform(2, 20), rng.uniform(0.5, 3), rng.uniform(0.1, 3),
                  rng.uniform(5, 25), rng.uniform(0, math.pi), rng.uniform(-1, 1), rng.uniform(-1, 1),
                  rng.uniform(-0.2, 0.2)])
    tau = np.linspace(0.0, 10.0, 97)
    J = ereem_fit_jacobian(x, tau)
    for k in range(9):
        h = 1e-6 * max(1.0, abs(x[k]))
        up, dn = x.copy(), x.copy()
        up[k] += h
        dn[k] -= h
        fd = (ereem_fit_model(up, tau) - ereem_fit_model(dn, tau)) / (2 * h)
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(J[:, k] - fd)) < 1e-6 * scale


def test_fit_params_validation():
    with pytest.raises(ValueError):
        _params(C0=0.0)
    with pytest.raises(ValueError):
        _params(omega0=20.0)
    with pytest.raises(ValueError):
        _params(p=-1.0)
    assert EreemFitParams.from_array(_params().to_array()) == _params()


def test_four_tone_frequencies_and_limits():
    assert np.allclose(four_tone_frequencies(-5.0, 9.0, 0.0), [5, 5, 9, 9])
    same = four_tone_frequencies(7.0, 7.0, 1.0)
    assert set(np.round(same, 12)) == {6.5, 7.5}
    tau = np.linspace(0.0, 5.0, 501)
    p = FourToneParams(5.0, 9.0, 0.0, amplitudes=(0.1, 0.2, 0.3, 0.4))
    ref = 0.3 * np.cos(5.0 * tau) + 0.7 * np.cos(9.0 * tau)
    assert np.allclose(four_tone_model(p, tau), ref, atol=1e-14)


def test_four_tone_equal_detuning_matches_two_tone_content():
    w0, w1 = 1.1, 19.0
    d = 0.5 * w1
    tau = np.linspace(0.0, 20.0, 4001)
    two = ereem_fit_model(EreemFitParams(omega0=w0, omega_p1=w1, Phi=0.0), tau)  # -cos((w1-w0)/2 τ)
    ft = FourToneParams(d, d, w0, amplitudes=(-0.5, 0.0, -0.5, 0.0))
    with pytest.warns(ResolvabilityWarning):
        four = four_tone_model(ft, tau)
    assert np.allclose(four, two, atol=1e-12)


def test_resolvability_flag():
    assert not four_tone_resolvable(10.0, 10.0 + 1.0, 1.0)
    assert four_tone_resolvable(10.0, 20.0, 1.0)
    with pytest.warns(ResolvabilityWarning):
        four_tone_model(FourToneParams(10.0, 11.0, 1.0), np.linspace(0, 1, 5))


def test_power_spectrum_requires_uniform_grid():
    with pytest.raises(ValueError):
        power_spectrum(np.array([0.0, 1.0, 3.0, 4.0]), np.zeros(4))


def test_trace_validation_and_contrast():
    with pytest.raises(ValueError):
        RamseyTrace(np.array([0.0, 0.0]), np.array([0.1, 0.2]))
    with pytest.raises(ValueError):
        RamseyTrace(np.array([0.0, 1.0]), np.array([0.1]))
    t = analytic_trace(N15, F(100.0, 15.0), "DQ", np.linspace(0, 1, 11))
    assert t.protocol == "DQ" and t.contrast[0] == pytest.approx(1.0)
