"""Shot-noise-limited Ramsey sensitivity, optimal working points and χ_min maps."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field

import contourpy
import numpy as np
from scipy.optimize import minimize_scalar

from .nv_model import (
    TWO_PI,
    BiasField,
    ModelValidityWarning,
    SpeciesConstants,
    effective_field_decomposition,
)
from .ramsey_analytic import Protocol, envelope, envelope_properties

__all__ = [
    "SensitivityParams",
    "Optimum",
    "SensitivityGrid",
    "shot_noise_sensitivity",
    "optimal_evolution_time",
    "relative_inverse_sensitivity",
    "modulated_optimum",
    "chi_min_map",
    "sensitivity_map",
    "extract_contours",
]


@dataclass(frozen=True)
class SensitivityParams:
    """Readout parameters; times in µs, ``gamma_e`` in MHz/G (sign ignored)."""

    C: float = 1.0
    N: float = 1.0
    T_D: float = 5.0
    T2_star: float = 5.0
    p: float = 1.0
    gamma_e: float = 2.8024

    def __post_init__(self):
        for name in ("C", "N", "T_D", "T2_star", "p"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma_e == 0:
            raise ValueError("gamma_e must be non-zero")

    def decay(self, tau):
        return np.exp(-(np.asarray(tau, dtype=float) / self.T2_star) ** self.p)


def shot_noise_sensitivity(sp: SensitivityParams, tau):
    """η(τ) in G·√µs."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("evolution time must be positive")
    pref = 1.0 / (TWO_PI * abs(sp.gamma_e))
    return pref / (sp.C * sp.decay(tau) * math.sqrt(sp.N)) * np.sqrt(tau + sp.T_D) / tau


def _figure_of_merit(sp, tau, chi):
    """Inverse sensitivity up to constant factors, optionally scaled by χ(τ)."""
    tau = np.asarray(tau, dtype=float)
    val = sp.decay(tau) * tau / np.sqrt(tau + sp.T_D)
    if chi is not None:
        val = val * np.asarray(chi(tau), dtype=float)
    return val


@dataclass(frozen=True)
class Optimum:
    tau: float
    eta: float
    inverse: float
    grid_index: int


def optimal_evolution_time(sp: SensitivityParams, chi=None, *, tau_max: float | None = None,
                           points: int = 4000) -> Optimum:
    """Global maximiser of η⁻¹ (times χ when given) on (0, tau_max].

    A dense grid locates the best sample; a bounded scalar search between its
    neighbours refines it.
    """
    tau_max = 10.0 * sp.T2_star if tau_max is None else float(tau_max)
    grid = np.linspace(tau_max / points, tau_max, points)
    vals = _figure_of_merit(sp, grid, chi)
    k = int(np.argmax(vals))
    lo = grid[max(k - 1, 0)] if k > 0 else grid[0] * 1e-3
    hi = grid[min(k + 1, points - 1)]
    res = minimize_scalar(lambda t: -float(_figure_of_merit(sp, np.array([t]), chi)[0]),
                          bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, hi)})
    tau = float(res.x) if -res.fun >= vals[k] else float(grid[k])
    eta = float(shot_noise_sensitivity(sp, tau))
    if chi is not None:
        eta /= float(np.asarray(chi(np.array([tau])))[0])
    return Optimum(tau=tau, eta=eta, inverse=1.0 / eta, grid_index=k)


def relative_inverse_sensitivity(sp: SensitivityParams, decomposition, protocol, tau,
                                 tau_opt: float | None = None):
    """η_opt / η̃(τ): modulated inverse sensitivity relative to the unmodulated optimum."""
    tau = np.asarray(tau, dtype=float)
    if tau_opt is None:
        tau_opt = optimal_evolution_time(sp).tau
    if decomposition is None:
        chi = np.ones_like(tau)
    else:
        chi = envelope(decomposition, Protocol.parse(protocol), tau)
    T, p = sp.T2_star, sp.p
    return (chi * (tau / tau_opt) * np.sqrt((tau_opt + sp.T_D) / (tau + sp.T_D))
            * np.exp((tau_opt / T) ** p - (tau / T) ** p))


def modulated_optimum(sp: SensitivityParams, decomposition, protocol, **kwargs) -> Optimum:
    chi = None
    if decomposition is not None:
        proto = Protocol.parse(protocol)
        chi = lambda t: envelope(decomposition, proto, t)  # noqa: E731
    return optimal_evolution_time(sp, chi, **kwargs)


# --------------------------------------------------------------------------
# maps
# --------------------------------------------------------------------------

@dataclass
class SensitivityGrid:
    """Values on a rectangular grid: ``values[i, j]`` at ``(x[i], y[j])``."""

    kind: str
    x_name: str
    x: np.ndarray
    y_name: str
    y: np.ndarray
    values: np.ndarray
    annotations: dict = dc_field(default_factory=dict)
    contours: dict = dc_field(default_factory=dict)
    meta: dict = dc_field(default_factory=dict)


def extract_contours(x, y, values, levels) -> dict:
    """Iso-lines of ``values[i, j]`` over ``(x[i], y[j])`` as lists of (k, 2) arrays."""
    gen = contourpy.contour_generator(np.asarray(x), np.asarray(y), np.asarray(values).T,
                                      line_type=contourpy.LineType.Separate)
    return {float(level): [np.asarray(seg) for seg in gen.lines(level)] for level in levels}


def _quiet_decomposition(c, f):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelValidityWarning)
        return effective_field_decomposition(c, f)


def chi_min_map(c: SpeciesConstants, protocol, B_grid=None, theta_grid_deg=None,
                levels=(0.9, 0.5)) -> SensitivityGrid:
    """χ_min over field magnitude (G) × misalignment (deg)."""
    protocol = Protocol.parse(protocol)
    B = np.linspace(1.0, 200.0, 200) if B_grid is None else np.asarray(B_grid, dtype=float)
    th = np.linspace(0.0, 45.0, 90) if theta_grid_deg is None else np.asarray(theta_grid_deg, dtype=float)
    if B.size < 2 or th.size < 2:
        raise ValueError("each axis needs at least two points")
    vals = np.empty((B.size, th.size))
    for i, b in enumerate(B):
        for j, t in enumerate(th):
            d = _quiet_decomposition(c, BiasField.from_degrees(b, t))
            vals[i, j] = envelope_properties(d, protocol).chi_min
    return SensitivityGrid(
        kind="chi_min",
        x_name="B_G", x=B,
        y_name="theta_deg", y=th,
        values=vals,
        contours=extract_contours(B, th, vals, levels) if levels else {},
        meta={"protocol": protocol.value, "species": c.species,
              "beyond_perturbative": bool(B.max() > 200.0)},
    )


def sensitivity_map(sp: SensitivityParams, c: SpeciesConstants, protocol="SQ+", theta_deg: float = 10.0,
                    B_grid=None, tau_grid=None) -> SensitivityGrid:
    """Relative inverse sensitivity over evolution time × field magnitude."""
    protocol = Protocol.parse(protocol)
    B = np.linspace(1.0, 200.0, 200) if B_grid is None else np.asarray(B_grid, dtype=float)
    if tau_grid is None:
        tau_grid = np.linspace(4.0 * sp.T2_star / 2000, 4.0 * sp.T2_star, 2000)
    tau = np.asarray(tau_grid, dtype=float)
    ref = optimal_evolution_time(sp)
    vals = np.empty((tau.size, B.size))
    adjusted = np.empty(B.size)
    ratio_at = np.empty(B.size)
    for j, b in enumerate(B):
        d = _quiet_decomposition(c, BiasField.from_degrees(b, theta_deg))
        vals[:, j] = relative_inverse_sensitivity(sp, d, protocol, tau, ref.tau)
        opt = modulated_optimum(sp, d, protocol)
        adjusted[j] = opt.tau
        ratio_at[j] = float(relative_inverse_sensitivity(sp, d, protocol, np.array([opt.tau]), ref.tau)[0])
    return SensitivityGrid(
        kind="relative_inverse_sensitivity",
        x_name="tau_us", x=tau,
        y_name="B_G", y=B,
        values=vals,
        annotations={"tau_opt": ref.tau, "tau_opt_adjusted": adjusted, "ratio_at_adjusted": ratio_at},
        meta={"protocol": protocol.value, "theta_deg": theta_deg, "T_D_us": sp.T_D,
              "T2_star_us": sp.T2_star, "p": sp.p, "stretch_generalised": sp.p != 1.0},
    )
