"""Bias-field estimation from ODMR splittings and microwave centre calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fitting import FitError, OdmrSpectrum, fit_double_lorentzian, least_squares_fit, lorentzian_doublet
from .nv_model import BiasField, SpeciesConstants, lab_hamiltonian_components
from .pulse_sim import transition_frequencies

__all__ = [
    "ANGLE_FLOOR_DEG",
    "CalibrationFailure",
    "FieldEstimate",
    "CenterCalibration",
    "delta_pm1",
    "delta_pm1_components",
    "estimate_field",
    "approximation_error_scan",
    "magnetometry_curve",
    "synthetic_odmr_spectrum",
    "mw_center_frequency",
]

ANGLE_FLOOR_DEG = 0.047


class CalibrationFailure(RuntimeError):
    pass


def delta_pm1(c: SpeciesConstants, f: BiasField, method: str = "exact") -> float:
    """Splitting between the 0↔+1 and 0↔−1 transitions, MHz."""
    if method == "approx":
        return 2.0 * abs(c.gamma_e) * f.B * math.cos(f.theta)
    if method == "exact":
        return delta_pm1_components(c, f.Bx, f.Bz)
    raise ValueError(f"method must be 'approx' or 'exact', got {method!r}")


def delta_pm1_components(c: SpeciesConstants, bx: float, bz: float) -> float:
    """Exact splitting for explicit (possibly negative) field components."""
    h = lab_hamiltonian_components(c, bx, bz)
    up = transition_frequencies(c, None, 1, hamiltonian=h).mean
    down = transition_frequencies(c, None, -1, hamiltonian=h).mean
    return abs(up - down)


@dataclass(frozen=True)
class FieldEstimate:
    B: float
    B_stderr: float
    theta: float
    theta_stderr: float
    delta_aligned: float
    delta_misaligned: float
    floor_applied: bool

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    @property
    def theta_stderr_deg(self) -> float:
        return math.degrees(self.theta_stderr)

    def as_dict(self) -> dict:
        return {
            "B_G": self.B,
            "B_stderr_G": self.B_stderr,
            "theta_deg": self.theta_deg,
            "theta_stderr_deg": self.theta_stderr_deg,
            "delta_aligned_MHz": self.delta_aligned,
            "delta_misaligned_MHz": self.delta_misaligned,
            "angle_floor_applied": self.floor_applied,
        }

    def field(self) -> BiasField:
        return BiasField(self.B, self.theta)


def estimate_field(delta_aligned: float, delta_misaligned: float, c: SpeciesConstants, *,
                   sigma_aligned: float = 0.0, sigma_misaligned: float = 0.0,
                   floor: bool = True, floor_deg: float = ANGLE_FLOOR_DEG) -> FieldEstimate:
    """Field magnitude from the aligned splitting, angle from the ratio of splittings.

    Errors are propagated to first order.  At ratio 1 the arccos slope
    diverges, so the angle error becomes ``arccos(1 - σ_ratio)`` there.
    """
    if not delta_aligned > 0:
        raise ValueError("aligned splitting must be positive")
    if delta_misaligned < 0:
        raise ValueError("misaligned splitting must be non-negative")
    if delta_misaligned > delta_aligned * (1 + 1e-12):
        raise ValueError(
            f"misaligned splitting {delta_misaligned} MHz exceeds aligned splitting {delta_aligned} MHz"
        )
    g = abs(c.gamma_e)
    B = delta_aligned / (2.0 * g)
    B_se = sigma_aligned / (2.0 * g)
    ratio = min(delta_misaligned / delta_aligned, 1.0)
    theta = math.acos(ratio)
    rel = math.hypot(sigma_aligned / delta_aligned,
                     sigma_misaligned / delta_misaligned if delta_misaligned > 0 else 0.0)
    sigma_ratio = ratio * rel
    if ratio < 1.0 and sigma_ratio < 1.0 - ratio:
        theta_se = sigma_ratio / math.sqrt(1.0 - ratio * ratio)
    else:
        theta_se = math.acos(max(-1.0, 1.0 - sigma_ratio)) if sigma_ratio > 0 else 0.0
    floor_rad = math.radians(floor_deg)
    applied = bool(floor and theta_se < floor_rad)
    if applied:
        theta_se = floor_rad
    return FieldEstimate(B, B_se, theta, theta_se, float(delta_aligned), float(delta_misaligned), applied)


def approximation_error_scan(c: SpeciesConstants, B: float, theta_grid_deg) -> dict:
    """Exact vs linear splitting over misalignment angles at one field magnitude."""
    th = np.asarray(theta_grid_deg, dtype=float)
    approx = np.empty(th.size)
    exact = np.empty(th.size)
    for k, t in enumerate(th):
        f = BiasField.from_degrees(B, t)
        approx[k] = delta_pm1(c, f, "approx")
        exact[k] = delta_pm1(c, f, "exact")
    dev = exact - approx
    return {
        "theta_deg": th,
        "delta_approx_MHz": approx,
        "delta_exact_MHz": exact,
        "abs_dev_MHz": np.abs(dev),
        "pct_dev": 100.0 * np.abs(dev) / exact,
        "max_pct_dev": float(np.max(100.0 * np.abs(dev) / exact)),
    }


# --------------------------------------------------------------------------
# microwave centre frequency
# --------------------------------------------------------------------------

def synthetic_odmr_spectrum(freq, nu1: float, nu2: float, *, width: float = 0.5, depth: float = 0.03,
                            offset: float = 1.0, noise: float = 0.0, seed: int | None = None):
    """Two Lorentzian dips of equal depth and FWHM ``width`` (MHz)."""
    area = 0.5 * math.pi * depth * width
    y = lorentzian_doublet([offset, area, width, nu1, area, width, nu2], freq)
    if noise:
        y = y + np.random.default_rng(seed).normal(0.0, noise, np.shape(freq))
    return y


def magnetometry_curve(freq, nu1: float, nu2: float, tau: float, *, contrast: float = 0.5,
                       offset: float = 0.5, shift: float = 0.0, noise: float = 0.0,
                       seed: int | None = None):
    """Ramsey population vs carrier frequency (MHz) at fixed τ (µs), ideal pulses.

    The two hyperfine lines each contribute a fringe ``cos(2π(ν − ν_i)τ)``;
    ``shift`` displaces the true line centre relative to ``nu1``/``nu2``.
    """
    freq = np.asarray(freq, dtype=float)
    y = offset + 0.5 * contrast * (np.cos(2 * math.pi * (freq - nu1 - shift) * tau)
                                   + np.cos(2 * math.pi * (freq - nu2 - shift) * tau))
    if noise:
        y = y + np.random.default_rng(seed).normal(0.0, noise, freq.shape)
    return y


@dataclass
class CenterCalibration:
    nu_star: float
    nu_calibrated: float
    correction: float
    period: float
    odmr: OdmrSpectrum = dc_field(repr=False)
    fringe: object = dc_field(repr=False, default=None)

    @property
    def detunings(self) -> tuple[float, float]:
        """Distance of the calibrated carrier from each fitted hyperfine line."""
        return (self.nu_calibrated - self.odmr.nu[0], self.odmr.nu[1] - self.nu_calibrated)

    def as_dict(self) -> dict:
        return {
            "nu_star_MHz": self.nu_star,
            "nu_star_stderr_MHz": self.odmr.nu_star_stderr,
            "nu_calibrated_MHz": self.nu_calibrated,
            "correction_MHz": self.correction,
            "fringe_period_MHz": self.period,
            "nu1_MHz": self.odmr.nu[0],
            "nu2_MHz": self.odmr.nu[1],
            "detunings_MHz": list(self.detunings),
        }


def _sinusoid(params, x):
    a, b, period, phase = params
    return a + b * np.cos(2 * math.pi * x / period + phase)


def _sinusoid_jac(params, x):
    a, b, period, phase = params
    arg = 2 * math.pi * x / period + phase
    J = np.empty((np.size(x), 4))
    J[:, 0] = 1.0
    J[:, 1] = np.cos(arg)
    J[:, 2] = b * np.sin(arg) * 2 * math.pi * x / period ** 2
    J[:, 3] = -b * np.sin(arg)
    return J


def _fit_fringe(x, y):
    """Sinusoid in offset frequency ``x``; period seeded from the periodogram."""
    order = np.argsort(x)
    x, y = x[order], y[order]
    grid = np.linspace(x[0], x[-1], x.size)
    yu = np.interp(grid, x, y) - np.mean(y)
    n = 1 << int(math.ceil(math.log2(16 * x.size)))
    spec = np.abs(np.fft.rfft(yu * np.hanning(yu.size), n=n))
    fr = np.fft.rfftfreq(n, grid[1] - grid[0])
    spec[0] = 0.0
    k = int(np.argmax(spec))
    if k == 0 or fr[k] <= 0:
        raise CalibrationFailure("magnetometry curve shows no oscillation")
    best = None
    for period in 1.0 / (fr[k] * np.linspace(0.9, 1.1, 41)):
        arg = 2 * math.pi * x / period
        basis = np.column_stack([np.ones_like(x), np.cos(arg), np.sin(arg)])
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        cost = float(np.sum((basis @ coef - y) ** 2))
        if best is None or cost < best[0]:
            best = (cost, coef, period)
    _, (a, al, be), period = best
    p0 = [a, math.hypot(al, be), period, math.atan2(-be, al)]
    lb = [-np.inf, 0.0, 1e-12, -np.inf]
    return least_squares_fit(_sinusoid, x, y, p0, jac=_sinusoid_jac, bounds=(lb, [np.inf] * 4),
                             names=("offset", "amplitude", "period", "phase"))


def mw_center_frequency(odmr_freq, odmr_signal, curve_freq, curve_signal) -> CenterCalibration:
    """Two-step carrier calibration: doublet centre, then nearest fringe extremum."""
    odmr = fit_double_lorentzian(odmr_freq, odmr_signal)
    nu_star = odmr.nu_star
    x = np.asarray(curve_freq, dtype=float) - nu_star
    y = np.asarray(curve_signal, dtype=float)
    try:
        fringe = _fit_fringe(x, y)
    except FitError as exc:
        raise CalibrationFailure(f"sinusoid fit of the magnetometry curve failed: {exc}") from exc
    _, _, period, phase = fringe.params
    k = round(phase / math.pi)
    offset = (k * math.pi - phase) * period / (2 * math.pi)
    if abs(offset) > 0.5 * period or not (x.min() <= offset <= x.max()):
        raise CalibrationFailure("no fringe extremum within half a fringe of the doublet centre")
    return CenterCalibration(
        nu_star=nu_star,
        nu_calibrated=nu_star + offset,
        correction=offset,
        period=period,
        odmr=odmr,
        fringe=fringe,
    )
