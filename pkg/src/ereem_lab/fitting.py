"""Damped least squares plus the fit pipelines built on it.

``least_squares_fit`` is a bounded Levenberg-Marquardt solver with
Marquardt diagonal scaling and Nielsen's damping update.  Standard errors
come from an SVD of the column-scaled Jacobian at the optimum; directions the
data cannot constrain are reported with infinite standard error instead of a
number that looks meaningful.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.signal import find_peaks, peak_widths
from scipy.stats import norm

from .nv_model import TWO_PI, SpeciesConstants, BiasField, kappa, omega0 as model_omega0
from .ramsey_analytic import (
    EREEM_PARAM_NAMES,
    EreemFitParams,
    FourToneParams,
    Protocol,
    RamseyTrace,
    ereem_fit_jacobian,
    ereem_fit_model,
    four_tone_frequencies,
    four_tone_model,
    four_tone_resolvable,
    power_spectrum,
    spectrum_peaks,
)

__all__ = [
    "FitError",
    "UnresolvedTonesError",
    "BootstrapError",
    "FitResult",
    "EreemFitResult",
    "BootstrapResult",
    "OdmrSpectrum",
    "HyperfineRefit",
    "Z95",
    "least_squares_fit",
    "finite_difference_jacobian",
    "lorentzian_doublet",
    "fit_double_lorentzian",
    "fit_ereem_data",
    "fit_ereem_trace",
    "ereem_initial_guess",
    "bootstrap_confidence",
    "fit_four_tone",
    "transverse_hyperfine_from_omega0",
    "refit_transverse_hyperfine",
]

Z95 = float(norm.ppf(0.975))


class FitError(RuntimeError):
    """Fit did not converge or violated a constraint at the solution."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UnresolvedTonesError(ValueError):
    """Four-tone fit refused: the two splittings cannot be separated."""


class BootstrapError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# generic solver
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    params: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    cost: float
    converged: bool
    status: str
    iterations: int
    nfev: int
    condition: float
    singular: bool
    dof: int
    sigma2: float
    names: tuple = ()
    fixed: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=bool))
    residuals: np.ndarray = dc_field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def residual_norm(self) -> float:
        return math.sqrt(2.0 * self.cost)

    def interval(self, z: float = Z95) -> tuple[np.ndarray, np.ndarray]:
        return self.params - z * self.stderr, self.params + z * self.stderr

    def as_dict(self) -> dict:
        names = self.names or tuple(f"p{k}" for k in range(self.params.size))
        lo, hi = self.interval()
        return {
            "parameters": {n: float(v) for n, v in zip(names, self.params)},
            "stderr": {n: float(v) for n, v in zip(names, self.stderr)},
            "ci95_standard": {n: [float(a), float(b)] for n, a, b in zip(names, lo, hi)},
            "fixed": [n for n, f in zip(names, self.fixed) if f],
            "cost": self.cost,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "nfev": self.nfev,
            "condition": self.condition,
            "singular": self.singular,
            "dof": self.dof,
            "sigma2": self.sigma2,
        }


def finite_difference_jacobian(model, p, x, lb=None, ub=None, rel_step: float = 1e-6):
    p = np.asarray(p, dtype=float)
    lb = np.full(p.size, -np.inf) if lb is None else lb
    ub = np.full(p.size, np.inf) if ub is None else ub
    f0 = None
    cols = []
    for k in range(p.size):
        h = rel_step * max(1.0, abs(p[k]))
        up, dn = p.copy(), p.copy()
        if p[k] + h <= ub[k] and p[k] - h >= lb[k]:
            up[k] += h
            dn[k] -= h
            cols.append((model(up, x) - model(dn, x)) / (2 * h))
            continue
        if f0 is None:
            f0 = model(p, x)
        if p[k] + h <= ub[k]:
            up[k] += h
            cols.append((model(up, x) - f0) / h)
        else:
            dn[k] -= h
            cols.append((f0 - model(dn, x)) / h)
    return np.column_stack(cols)


def _covariance(J, cost, n, rcond=1e-9):
    m = J.shape[1]
    dof = n - m
    sigma2 = 2.0 * cost / dof if dof > 0 else math.nan
    if m == 0:
        return np.zeros((0, 0)), np.zeros(0), 1.0, False, dof, sigma2
    scale = np.linalg.norm(J, axis=0)
    scale[scale == 0] = 1.0
    _, s, vt = np.linalg.svd(J / scale, full_matrices=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    rank = int(np.sum(s > rcond * s[0])) if s[0] > 0 else 0
    v = vt.T
    vr = v[:, :rank]
    cov = (vr / s[:rank] ** 2) @ vr.T
    cov = cov / np.outer(scale, scale)
    if dof > 0:
        cov = cov * sigma2
    else:
        cov = np.full_like(cov, math.nan)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if rank < m:
        lost = np.sum(v[:, rank:] ** 2, axis=1) > 1e-6
        se[lost] = math.inf
        cov[lost, :] = math.inf
        cov[:, lost] = math.inf
    return cov, se, cond, rank < m, dof, sigma2


def least_squares_fit(model, x, y, p0, *, jac=None, bounds=None, fixed=None, names=(),
                      max_iter: int = 500, gtol: float = 1e-10, xtol: float = 1e-12) -> FitResult:
    """Minimise ``½ Σ (model(p, x) - y)²`` from ``p0``.

    ``jac(p, x)`` returns the (n, m) derivative matrix; central differences
    are used when it is omitted.  ``bounds`` is ``(lower, upper)``; ``fixed``
    a boolean mask of parameters held at their initial value.

    Stops when the projected gradient falls below ``gtol·(1 + cost)`` or a
    step shrinks below ``xtol`` relative to the parameter vector; raises
    :class:`FitError` when ``max_iter`` is exhausted first.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=float)
    p0 = np.asarray(p0, dtype=float).copy()
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(np.asarray(x, dtype=float)))):
        raise ValueError("data must be finite")
    m = p0.size
    lb = np.full(m, -np.inf) if bounds is None else np.broadcast_to(np.asarray(bounds[0], float), (m,)).copy()
    ub = np.full(m, np.inf) if bounds is None else np.broadcast_to(np.asarray(bounds[1], float), (m,)).copy()
    if np.any(p0 < lb) or np.any(p0 > ub):
        raise ValueError("initial guess lies outside the bounds")
    fixed = np.zeros(m, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    free = ~fixed
    lbf, ubf = lb[free], ub[free]
    nfev = 0

    def full(pf):
        p = p0.copy()
        p[free] = pf
        return p

    def resid(pf):
        nonlocal nfev
        nfev += 1
        return model(full(pf), x) - y

    def jacf(pf):
        p = full(pf)
        J = jac(p, x) if jac is not None else finite_difference_jacobian(model, p, x, lb, ub)
        return np.asarray(J, dtype=float)[:, free]

    p = p0[free].copy()
    r = resid(p)
    if not np.all(np.isfinite(r)):
        raise FitError("model is not finite at the initial guess")
    cost = 0.5 * float(r @ r)
    J = jacf(p)
    A = J.T @ J
    g = J.T @ r
    diag = np.maximum(np.diag(A).copy(), 1e-300)
    mu = 1e-3 * float(diag.max()) if diag.size else 0.0
    nu = 2.0
    status = ""
    it = 0
    converged = p.size == 0
    if converged:
        status = "no free parameters"
    while not converged and it < max_iter:
        it += 1
        pg = g.copy()
        pg[(p <= lbf) & (g > 0)] = 0.0
        pg[(p >= ubf) & (g < 0)] = 0.0
        if np.max(np.abs(pg)) < gtol * (1.0 + cost):
            converged, status = True, "gradient"
            break
        diag = np.maximum(diag, np.diag(A))
        try:
            step = np.linalg.solve(A + mu * np.diag(diag), -g)
        except np.linalg.LinAlgError:
            mu *= nu
            nu *= 2.0
            continue
        pn = np.clip(p + step, lbf, ubf)
        step = pn - p
        if np.linalg.norm(step) <= xtol * (np.linalg.norm(p) + xtol):
            converged, status = True, "step"
            break
        rn = resid(pn)
        cost_n = 0.5 * float(rn @ rn) if np.all(np.isfinite(rn)) else math.inf
        predicted = -(g @ step + 0.5 * step @ A @ step)
        rho = (cost - cost_n) / predicted if predicted > 0 else -1.0
        if rho > 0 and math.isfinite(cost_n):
            p, r, cost = pn, rn, cost_n
            J = jacf(p)
            A = J.T @ J
            g = J.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
            if not math.isfinite(mu) or mu > 1e300:
                converged, status = True, "step"
                break
    pfull = full(p)
    cov_f, se_f, cond, singular, dof, sigma2 = _covariance(jacf(p), cost, y.size)
    cov = np.zeros((m, m))
    se = np.zeros(m)
    idx = np.nonzero(free)[0]
    cov[np.ix_(idx, idx)] = cov_f
    se[idx] = se_f
    result = FitResult(
        params=pfull, stderr=se, covariance=cov, cost=cost, converged=converged,
        status=status or "max_iter", iterations=it, nfev=nfev, condition=cond,
        singular=singular, dof=dof, sigma2=sigma2, names=tuple(names), fixed=fixed.copy(),
        residuals=r,
    )
    if not converged:
        raise FitError(f"no convergence after {max_iter} iterations (cost {cost:.6g})", result)
    return result


# --------------------------------------------------------------------------
# ODMR doublet
# --------------------------------------------------------------------------

ODMR_NAMES = ("A", "C1", "Gamma1", "nu1", "C2", "Gamma2", "nu2")


def lorentzian_doublet(params, freq):
    """Offset ``A`` minus two area-normalised Lorentzians of area ``C_i`` and FWHM ``Gamma_i``."""
    A, C1, G1, n1, C2, G2, n2 = params
    freq = np.asarray(freq, dtype=float)
    h1, h2 = 0.5 * G1, 0.5 * G2
    return (A - C1 / math.pi * h1 / ((freq - n1) ** 2 + h1 ** 2)
            - C2 / math.pi * h2 / ((freq - n2) ** 2 + h2 ** 2))


def _lorentzian_doublet_jac(params, freq):
    A, C1, G1, n1, C2, G2, n2 = params
    freq = np.asarray(freq, dtype=float)
    J = np.empty((freq.size, 7))
    J[:, 0] = 1.0
    for k, (C, G, nu) in enumerate(((C1, G1, n1), (C2, G2, n2))):
        h = 0.5 * G
        dx = freq - nu
        den = dx ** 2 + h ** 2
        J[:, 1 + 3 * k] = -h / (math.pi * den)
        J[:, 2 + 3 * k] = -0.5 * C / math.pi * (dx ** 2 - h ** 2) / den ** 2
        J[:, 3 + 3 * k] = -C / math.pi * 2 * h * dx / den ** 2
    return J


@dataclass
class OdmrSpectrum:
    freq: np.ndarray
    signal: np.ndarray
    A: float
    C: tuple
    Gamma: tuple
    nu: tuple
    nu_stderr: tuple
    fit: FitResult = dc_field(repr=False, default=None)

    @property
    def nu_star(self) -> float:
        return 0.5 * (self.nu[0] + self.nu[1])

    @property
    def nu_star_stderr(self) -> float:
        cov = self.fit.covariance
        i, j = ODMR_NAMES.index("nu1"), ODMR_NAMES.index("nu2")
        var = 0.25 * (cov[i, i] + cov[j, j] + 2 * cov[i, j])
        return math.sqrt(max(var, 0.0))

    @property
    def splitting(self) -> float:
        return self.nu[1] - self.nu[0]


def fit_double_lorentzian(freq, signal) -> OdmrSpectrum:
    """Fit two Lorentzian dips on a constant offset; ν* is their mean centre."""
    freq = np.asarray(freq, dtype=float)
    y = np.asarray(signal, dtype=float)
    if freq.size < 10 or freq.shape != y.shape:
        raise ValueError("need matching frequency/signal arrays with at least 10 points")
    order = np.argsort(freq)
    freq, y = freq[order], y[order]
    base = float(np.median(np.concatenate([y[: max(3, y.size // 10)], y[-max(3, y.size // 10):]])))
    depth = base - y
    idx, props = find_peaks(depth, prominence=0.2 * float(depth.max() - min(0.0, depth.min())))
    if idx.size < 2:
        raise FitError("single-line spectrum: the doublet is not resolved")
    idx = np.sort(idx[np.argsort(props["prominences"])[::-1][:2]])
    widths = peak_widths(depth, idx, rel_height=0.5)[0] * float(np.mean(np.diff(freq)))
    sep = freq[idx[1]] - freq[idx[0]]
    widths = np.clip(widths, 1e-3 * sep, sep)
    areas = 0.5 * math.pi * depth[idx] * widths
    p0 = np.array([base, areas[0], widths[0], freq[idx[0]], areas[1], widths[1], freq[idx[1]]])
    lb = np.array([-np.inf, -np.inf, 1e-9, freq[0], -np.inf, 1e-9, freq[0]])
    ub = np.array([np.inf, np.inf, np.inf, freq[-1], np.inf, np.inf, freq[-1]])
    res = least_squares_fit(lorentzian_doublet, freq, y, p0, jac=_lorentzian_doublet_jac,
                            bounds=(lb, ub), names=ODMR_NAMES)
    p, se = res.params, res.stderr
    lines = sorted([(p[3], p[1], p[2], se[3]), (p[6], p[4], p[5], se[6])])
    if lines[0][0] == lines[1][0]:
        raise FitError("the two fitted lines coincide", res)
    if p[3] > p[6]:
        # keep parameter order consistent with ν1 < ν2
        perm = [0, 4, 5, 6, 1, 2, 3]
        res.params = res.params[perm]
        res.stderr = res.stderr[perm]
        res.covariance = res.covariance[np.ix_(perm, perm)]
    return OdmrSpectrum(
        freq=freq, signal=y, A=float(p[0]),
        C=(float(lines[0][1]), float(lines[1][1])),
        Gamma=(float(lines[0][2]), float(lines[1][2])),
        nu=(float(lines[0][0]), float(lines[1][0])),
        nu_stderr=(float(lines[0][3]), float(lines[1][3])),
        fit=res,
    )


# --------------------------------------------------------------------------
# two-tone EREEM fits
# --------------------------------------------------------------------------

EREEM_LOWER = np.array([1e-12, 1e-9, 1e-3, 0.0, 0.0, 0.0, -np.inf, -np.inf, -np.inf])
EREEM_UPPER = np.array([np.inf, np.inf, 20.0, np.inf, np.inf, math.pi, np.inf, np.inf, np.inf])


@dataclass
class EreemFitResult:
    params: EreemFitParams
    stderr: dict
    fit: FitResult = dc_field(repr=False)
    sign: float = 1.0

    @property
    def chi_min(self) -> float:
        return self.params.chi_min

    @property
    def chi_min_stderr(self) -> float:
        return abs(math.sin(self.params.Phi)) * self.stderr["Phi"]

    @property
    def omega0_MHz(self) -> float:
        return self.params.omega0 / TWO_PI

    @property
    def omega0_stderr_MHz(self) -> float:
        return self.stderr["omega0"] / TWO_PI

    def as_dict(self) -> dict:
        out = self.fit.as_dict()
        out["chi_min"] = self.chi_min
        out["chi_min_stderr"] = self.chi_min_stderr
        out["omega0_MHz"] = self.omega0_MHz
        out["omega0_stderr_MHz"] = self.omega0_stderr_MHz
        out["omega_p1_MHz"] = self.params.omega_p1 / TWO_PI
        out["signal_sign"] = self.sign
        return out


def _canonical_phases(x):
    x = np.array(x, dtype=float)
    x0, x1 = x[6], x[7]
    shift = math.floor((x0 + 0.5 * math.pi) / math.pi)
    x0 -= shift * math.pi
    x1 -= shift * math.pi
    x1 = (x1 + math.pi) % TWO_PI - math.pi
    x[6], x[7] = x0, x1
    return x


def _varpro_cost(tau, y, fm, fp, decay):
    """Linear least squares for fixed tone frequencies (rad/µs)."""
    basis = np.column_stack([
        decay * np.cos(fm * tau), decay * np.sin(fm * tau),
        decay * np.cos(fp * tau), decay * np.sin(fp * tau),
        np.ones_like(tau),
    ])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    r = basis @ coef - y
    return float(r @ r), coef


def _coef_to_params(coef, w0, w1, T2, p):
    am, bm, ap, bp, y0 = coef
    rm, rp = math.hypot(am, bm), math.hypot(ap, bp)
    psi_m, psi_p = math.atan2(bm, -am), math.atan2(bp, -ap)
    C0 = max(rm + rp, 1e-9)
    cphi = float(np.clip((rm - rp) / C0, -1.0, 1.0))
    x1 = 0.5 * (psi_m + psi_p)
    x0 = 0.5 * (psi_p - psi_m)
    return np.array([C0, T2, p, w0, w1, math.acos(cphi), x0, x1, y0])


def _log_envelope_T2(ts, ys, span, blocks: int = 8) -> float:
    """Decay time from a straight-line fit to log block maxima (inf if not decaying)."""
    edges = np.linspace(ts[0], ts[-1], blocks + 1)
    centre = np.median(ys)
    t_mid, amp = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ts >= lo) & (ts <= hi)
        if np.count_nonzero(sel) >= 3:
            t_mid.append(0.5 * (lo + hi))
            amp.append(np.max(np.abs(ys[sel] - centre)))
    amp = np.asarray(amp)
    if amp.size < 3 or np.any(amp <= 0):
        return math.inf
    slope = np.polyfit(t_mid, np.log(amp), 1)[0]
    if slope >= -0.1 / span:
        return math.inf
    return float(-1.0 / slope)


def _tone_gram(ts, ys, decay, grid):
    """Gram matrix and projections of decayed cos/sin columns on ``grid`` (MHz) plus a constant."""
    arg = np.outer(ts, TWO_PI * grid)
    basis = np.concatenate([decay[:, None] * np.cos(arg), decay[:, None] * np.sin(arg),
                            np.ones((ts.size, 1))], axis=1)
    return basis.T @ basis, basis.T @ ys


def _pair_scan(gram, rhs, yy, grid, pairs, amp_cap, keep: int = 1, min_gap: int = 5):
    """Score tone pairs (index rows into ``grid``) by one batched 5×5 solve each.

    Returns up to ``keep`` tuples ``(cost, coef, fm, fp)``, best first, whose
    summed tone amplitude stays below ``amp_cap`` and whose splittings differ
    by at least ``min_gap`` grid steps.
    """
    k = grid.size
    i, j = pairs[:, 0], pairs[:, 1]
    cols = np.stack([i, k + i, j, k + j, np.full_like(i, 2 * k)], axis=1)
    G = gram[cols[:, :, None], cols[:, None, :]]
    r = rhs[cols]
    scale = np.sqrt(np.einsum("nii->ni", G))
    Gs = G / scale[:, :, None] / scale[:, None, :]
    try:
        coef = np.linalg.solve(Gs + 1e-12 * np.eye(5), (r / scale)[..., None])[..., 0] / scale
    except np.linalg.LinAlgError:
        return []
    cost = yy - np.einsum("ni,ni->n", r, coef)
    amps = np.hypot(coef[:, 0], coef[:, 1]) + np.hypot(coef[:, 2], coef[:, 3])
    cost[amps > amp_cap] = np.inf
    out, used = [], []
    for n in np.argsort(cost):
        if not np.isfinite(cost[n]) or len(out) == keep:
            break
        split = j[n] - i[n]
        if any(abs(split - u) < min_gap for u in used):
            continue
        used.append(split)
        out.append((float(cost[n]), coef[n], float(grid[i[n]]), float(grid[j[n]])))
    return out


def ereem_initial_guess(tau, y, *, T2_star=None, p=None, all_starts: bool = False):
    """Periodogram peaks refined by a linear scan over tone pairs and decay shapes.

    For fixed tone frequencies and decay the model is linear in its
    amplitudes, so each candidate is scored by one linear solve.  Pairs either
    straddle the two strongest peaks or use the strongest peak as one tone,
    which catches a partner too weak to show in the periodogram.  With
    ``all_starts`` every distinct candidate is returned, best first.
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    order = np.argsort(tau)
    ts, ys = tau[order], y[order]
    grid_t = np.linspace(ts[0], ts[-1], ts.size)
    yu = np.interp(grid_t, ts, ys)
    freq, power = power_spectrum(grid_t, yu)
    peaks, _ = spectrum_peaks(freq, power, count=2, rel_height=0.02)
    if peaks.size == 0:
        raise FitError("no oscillation found in the trace")
    span = ts[-1] - ts[0]
    df = 1.0 / span
    h = df / 10.0
    top = peaks[np.argmax(np.interp(peaks, freq, power))]
    split_max = 6 * df
    if peaks.size == 2:
        split_max = max(split_max, 2.0 * (peaks[1] - peaks[0]))
    lo = max(h, top - split_max - 2 * df)
    hi = top + split_max + 2 * df
    if peaks.size == 2:
        lo, hi = min(lo, max(h, peaks[0] - split_max)), max(hi, peaks[1] + split_max)
    grid = np.arange(math.ceil(lo / h), math.floor(hi / h) + 1) * h
    at = lambda f: int(np.argmin(np.abs(grid - f)))
    # the beat must complete at least one period inside the trace
    steps = np.arange(10, int(round(split_max / h)) + 1)
    anchors = [at(top + dj * df) for dj in np.linspace(-1.5, 1.5, 31)]
    families = [[(a, a + n) for a in anchors for n in steps],     # dominant peak is the lower tone
                [(a - n, a) for a in anchors for n in steps]]     # dominant peak is the upper tone
    if peaks.size == 2:
        families.append([(c - n, c + n)
                         for c in (at(0.5 * (peaks[0] + peaks[1]) + dc * df) for dc in np.linspace(-1.0, 1.0, 21))
                         for n in steps[::2] // 2])
    families = [np.array(sorted(pr for pr in set(fam) if pr[0] >= 0 and pr[1] < grid.size), dtype=int).reshape(-1, 2)
                for fam in families]

    T2_0 = _log_envelope_T2(ts, ys, span) if T2_star is None else float(T2_star)
    if T2_star is not None:
        T2_cands = [T2_0]
    elif math.isfinite(T2_0):
        T2_cands = list(T2_0 * np.array([0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 3.0]))
    else:
        T2_cands = [math.inf] + list(span * np.array([0.25, 0.5, 1.0, 2.0, 4.0, 8.0]))
    p_cands = [1.0, 1.5, 2.0] if p is None else [float(p)]

    def envelope(T2, pp):
        return np.ones_like(ts) if math.isinf(T2) else np.exp(-(ts / T2) ** pp)

    # decay hypotheses: the envelope estimate, and per shape the T2 that best
    # fits the dominant tone alone (accurate when one tone carries most weight)
    hypotheses = {(T2_0, p_cands[0])}
    tone = TWO_PI * (top + df * np.linspace(-1.5, 1.5, 31))
    for pc in p_cands:
        best_single = (math.inf, T2_0)
        for T2c in T2_cands:
            dec = envelope(T2c, pc)
            for w in tone:
                basis = np.column_stack([dec * np.cos(w * ts), dec * np.sin(w * ts), np.ones_like(ts)])
                _, res, *_ = np.linalg.lstsq(basis, ys, rcond=None)
                if res.size and float(res[0]) < best_single[0]:
                    best_single = (float(res[0]), T2c)
        hypotheses.add((best_single[1], pc))

    # near-coincident tones can cancel into a fake slow beat with huge amplitude;
    # the envelope starts at 1, so C0 cannot exceed the decay-corrected swing by much
    swing = np.abs(ys - np.median(ys))
    yy = float(ys @ ys)
    cands = []
    for T2, pp in sorted(hypotheses):
        decay = envelope(T2, pp)
        live = decay >= 0.3
        amp_cap = 2.0 * max(float(swing.max()), float(np.max(swing[live] / decay[live])))
        gram, rhs = _tone_gram(ts, ys, decay, grid)
        for fam in families:
            if fam.size:
                cands += [c + (T2, pp) for c in _pair_scan(gram, rhs, yy, grid, fam, amp_cap, keep=2)]
    if not cands:
        raise FitError("initial scan found no admissible tone pair")

    refined = {}
    for cost0, cf0, fm, fp, T2, pp in cands:
        best = (cost0, cf0, T2, pp)
        for T2c in T2_cands:
            for pc in p_cands:
                cost, cf = _varpro_cost(ts, ys, TWO_PI * fm, TWO_PI * fp, envelope(T2c, pc))
                if cost < best[0]:
                    best = (cost, cf, T2c, pc)
        key = (round(fm / h), round(fp / h))
        if key not in refined or best[0] < refined[key][0]:
            refined[key] = best + (fm, fp)
    starts = []
    for cost, coef, T2, pp, fm, fp in sorted(refined.values(), key=lambda c: c[0]):
        T2 = 20.0 * span if math.isinf(T2) else T2
        starts.append(_coef_to_params(coef, TWO_PI * (fp - fm), TWO_PI * (fp + fm), T2, pp))
    return starts if all_starts else starts[0]


def fit_ereem_data(tau, y, init=None, fixed=None, *, max_iter: int = 500) -> EreemFitResult:
    """Fit the nine-parameter two-tone model to a symmetric [-1, 1] signal.

    ``fixed`` maps parameter names to values held constant (for example
    ``{"T2_star": math.inf}`` for traces without dephasing).
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(EREEM_PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown fixed parameters {sorted(unknown)}")
    if init is None:
        starts = ereem_initial_guess(tau, y, T2_star=fixed.get("T2_star"), p=fixed.get("p"), all_starts=True)
    else:
        starts = [init.to_array() if isinstance(init, EreemFitParams) else np.asarray(init, dtype=float).copy()]
    masks = []
    for p0 in starts:
        mask = np.zeros(9, dtype=bool)
        for name, value in fixed.items():
            k = EREEM_PARAM_NAMES.index(name)
            p0[k] = value
            mask[k] = True
        if math.isinf(p0[1]):
            mask[1] = True
            mask[2] = True
        p0[:] = np.clip(p0, EREEM_LOWER, EREEM_UPPER)
        masks.append(mask)

    def run(p0, mask, iters):
        return least_squares_fit(ereem_fit_model, tau, y, p0, jac=ereem_fit_jacobian,
                                 bounds=(EREEM_LOWER, EREEM_UPPER), fixed=mask,
                                 names=EREEM_PARAM_NAMES, max_iter=iters)

    if len(starts) > 2:
        # short runs from every start, then finish the two most promising
        scored = []
        for p0, mask in zip(starts, masks):
            try:
                trial = run(p0, mask, 25)
            except FitError as exc:
                trial = exc.result
            if trial is not None and np.isfinite(trial.cost):
                scored.append((trial.cost, trial.params, mask))
        scored.sort(key=lambda t: t[0])
        starts = [t[1] for t in scored[:2]] or starts[:2]
        masks = [t[2] for t in scored[:2]] or masks[:2]
    res, error = None, None
    for p0, mask in zip(starts, masks):
        try:
            trial = run(p0, mask, max_iter)
        except FitError as exc:
            error = error or exc
            continue
        if res is None or trial.cost < res.cost:
            res = trial
    if res is None:
        raise error
    if res.params[3] >= res.params[4]:
        raise FitError("fitted beat frequency is not below the fast tone frequency", res)
    res.params = _canonical_phases(res.params)
    params = EreemFitParams.from_array(res.params)
    stderr = {n: float(s) for n, s in zip(EREEM_PARAM_NAMES, res.stderr)}
    return EreemFitResult(params=params, stderr=stderr, fit=res)


def _trace_signal(trace: RamseyTrace):
    sign = -1.0 if Protocol.parse(trace.protocol).is_dq else 1.0
    return sign, sign * trace.contrast


def fit_ereem_trace(trace, init=None, fixed=None) -> EreemFitResult:
    """Two-tone fit of a Ramsey trace.

    Populations are mapped to ``2P - 1``; DQ traces are negated so that one
    model with ``C0 > 0`` serves both protocols.
    """
    if isinstance(trace, RamseyTrace):
        sign, y = _trace_signal(trace)
        tau = trace.tau
    else:
        tau, y = trace
        sign = 1.0
    out = fit_ereem_data(tau, y, init=init, fixed=fixed)
    out.sign = sign
    return out


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    names: tuple
    estimate: np.ndarray
    stderr: np.ndarray
    samples: np.ndarray
    failures: int
    seed: int
    z: float = Z95

    @property
    def resamples(self) -> int:
        return self.samples.shape[0] + self.failures

    @property
    def percentile_interval(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.percentile(self.samples, 2.5, axis=0),
                np.percentile(self.samples, 97.5, axis=0))

    @property
    def standard_interval(self) -> tuple[np.ndarray, np.ndarray]:
        return self.estimate - self.z * self.stderr, self.estimate + self.z * self.stderr

    @property
    def bootstrap_std(self) -> np.ndarray:
        return np.std(self.samples, axis=0, ddof=1)

    @property
    def normality_fraction(self) -> np.ndarray:
        """Share of resample estimates inside ``estimate ± z·stderr``."""
        lo, hi = self.standard_interval
        return np.mean((self.samples >= lo) & (self.samples <= hi), axis=0)

    def as_dict(self) -> dict:
        plo, phi = self.percentile_interval
        slo, shi = self.standard_interval
        frac = self.normality_fraction
        return {
            "resamples": self.resamples,
            "failures": self.failures,
            "seed": self.seed,
            "z": self.z,
            "parameters": {
                n: {
                    "estimate": float(self.estimate[k]),
                    "stderr": float(self.stderr[k]),
                    "bootstrap_std": float(self.bootstrap_std[k]),
                    "ci95_percentile": [float(plo[k]), float(phi[k])],
                    "ci95_standard": [float(slo[k]), float(shi[k])],
                    "normality_fraction": float(frac[k]),
                }
                for k, n in enumerate(self.names)
            },
        }


def _resample_indices(seed: int, i: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
    return np.sort(rng.integers(0, n, size=n))


def _bootstrap_chunk(args):
    tau, y, init, fixed, seed, start, stop = args
    out = np.full((stop - start, init.size), np.nan)
    for row, i in enumerate(range(start, stop)):
        idx = _resample_indices(seed, i, tau.size)
        try:
            r = fit_ereem_data(tau[idx], y[idx], init=init, fixed=fixed, max_iter=200)
        except (FitError, ValueError, np.linalg.LinAlgError):
            continue
        out[row] = r.fit.params
    return start, out


def bootstrap_confidence(trace, resamples: int = 10_000, seed: int = 0, *, fixed=None,
                         base=None, workers: int | None = None, chunk: int = 250) -> BootstrapResult:
    """Case-resampling bootstrap of the two-tone fit.

    Resample ``i`` draws its indices from ``SeedSequence(seed, spawn_key=(i,))``
    so the result depends only on (data, seed, resamples), never on how the
    work is split across processes.
    """
    if resamples < 1:
        raise ValueError("resamples must be positive")
    if isinstance(trace, RamseyTrace):
        _, y = _trace_signal(trace)
        tau = trace.tau
    else:
        tau, y = (np.asarray(a, dtype=float) for a in trace)
    base = base or fit_ereem_data(tau, y, fixed=fixed)
    if not base.fit.converged:
        raise BootstrapError("base fit did not converge")
    init = base.fit.params.copy()
    fixed_use = {n: init[k] for k, n in enumerate(EREEM_PARAM_NAMES) if base.fit.fixed[k]}
    jobs = [(tau, y, init, fixed_use, int(seed), s, min(s + chunk, resamples))
            for s in range(0, resamples, chunk)]
    workers = workers or int(os.environ.get("EREEM_LAB_THREADS", "1") or 1)
    samples = np.empty((resamples, init.size))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for start, block in pool.map(_bootstrap_chunk, jobs):
                samples[start:start + block.shape[0]] = block
    else:
        for job in jobs:
            start, block = _bootstrap_chunk(job)
            samples[start:start + block.shape[0]] = block
    ok = np.all(np.isfinite(samples), axis=1)
    failures = int(resamples - ok.sum())
    if failures > 0.05 * resamples:
        raise BootstrapError(f"{failures} of {resamples} resample fits failed (> 5%)")
    return BootstrapResult(
        names=EREEM_PARAM_NAMES,
        estimate=init,
        stderr=base.fit.stderr.copy(),
        samples=samples[ok],
        failures=failures,
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# four-tone fit
# --------------------------------------------------------------------------

FOUR_TONE_NAMES = ("delta_a", "delta_b", "omega0", "amp1", "amp2", "amp3", "amp4",
                   "phase1", "phase2", "phase3", "phase4", "T2_star", "p", "y0")


def _four_tone_vec(params, tau):
    return four_tone_model(FourToneParams.from_array(params), tau, check=False)


def _four_tone_jac(params, tau):
    da, db, w0 = params[0], params[1], params[2]
    amps, phs = params[3:7], params[7:11]
    T2, p = params[11], params[12]
    tau = np.asarray(tau, dtype=float)
    if math.isinf(T2):
        e = np.ones_like(tau)
        de_t, de_p = np.zeros_like(tau), np.zeros_like(tau)
    else:
        r = tau / T2
        rp = r ** p
        e = np.exp(-rp)
        logr = np.log(np.where(r > 0, r, 1.0))
        de_t = e * p * rp / T2
        de_p = -e * rp * logr
    freqs = four_tone_frequencies(da, db, w0)
    cos_t = [np.cos(f * tau + ph) for f, ph in zip(freqs, phs)]
    sin_t = [np.sin(f * tau + ph) for f, ph in zip(freqs, phs)]
    tones = sum(a * c for a, c in zip(amps, cos_t))
    J = np.zeros((tau.size, 14))
    dfreq = [(np.sign(da) or 1.0, 0.0, -0.5), (np.sign(da) or 1.0, 0.0, 0.5),
             (0.0, np.sign(db) or 1.0, -0.5), (0.0, np.sign(db) or 1.0, 0.5)]
    for k in range(4):
        common = -e * amps[k] * sin_t[k] * tau
        J[:, 0] += dfreq[k][0] * common
        J[:, 1] += dfreq[k][1] * common
        J[:, 2] += dfreq[k][2] * common
        J[:, 3 + k] = e * cos_t[k]
        J[:, 7 + k] = -e * amps[k] * sin_t[k]
    J[:, 11] = de_t * tones
    J[:, 12] = de_p * tones
    J[:, 13] = 1.0
    return J


def _four_tone_linear(tau, y, freqs, decay):
    cols = []
    for f in freqs:
        cols += [decay * np.cos(f * tau), decay * np.sin(f * tau)]
    basis = np.column_stack(cols + [np.ones_like(tau)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    r = basis @ coef - y
    return float(r @ r), coef


def _estimate_doublets(tau, y, delta_a, delta_b):
    """Doublet centres and mean splitting from the two spectral peaks nearest each seed."""
    freq, power = power_spectrum(tau, y)
    idx, _ = find_peaks(power, height=0.02 * power.max())
    f_rad = TWO_PI * freq
    centres, splits = [], []
    for d in (abs(delta_a), abs(delta_b)):
        near = idx[np.argsort(np.abs(f_rad[idx] - d))][:2]
        if near.size == 2:
            centres.append(0.5 * (f_rad[near[0]] + f_rad[near[1]]))
            splits.append(abs(f_rad[near[1]] - f_rad[near[0]]))
        else:
            centres.append(d)
    if not splits:
        raise FitError("could not locate the four-tone doublets in the spectrum")
    return centres[0], centres[1], float(np.mean(splits))


def fit_four_tone(trace, detunings, omega0: float | None = None, *, T2_star: float | None = None):
    """Four-tone fit with tones at ``|δa| ± ω0/2`` and ``|δb| ± ω0/2``.

    ``detunings`` (rad/µs) locate the two doublets; their centres are refined from
    the spectrum and remain free in the fit.
    Refuses with :class:`UnresolvedTonesError` when the doublets overlap.
    """
    if isinstance(trace, RamseyTrace):
        tau, y = trace.tau, trace.contrast
    else:
        tau, y = (np.asarray(a, dtype=float) for a in trace)
    delta_a, delta_b = (float(v) for v in detunings)
    ca, cb, w_est = _estimate_doublets(tau, y, delta_a, delta_b)
    w0 = w_est if omega0 is None else float(omega0)
    if not four_tone_resolvable(delta_a, delta_b, w0):
        raise UnresolvedTonesError(
            f"doublet gap {abs(abs(delta_a) - abs(delta_b)):.4g} rad/µs is not well above "
            f"ω0 = {w0:.4g} rad/µs; the four tones cannot be separated"
        )
    da, db = ca, cb
    span = tau[-1] - tau[0]
    T2_cands = [math.inf] if T2_star is not None and math.isinf(T2_star) else \
        ([float(T2_star)] if T2_star is not None else [span * k for k in (0.5, 1, 2, 4, 8)])
    best = (math.inf, None, None)
    for w in w0 * np.linspace(0.9, 1.1, 21):
        freqs = four_tone_frequencies(da, db, w)
        for T2 in T2_cands:
            dec = np.ones_like(tau) if math.isinf(T2) else np.exp(-tau / T2)
            cost, coef = _four_tone_linear(tau, y, freqs, dec)
            if cost < best[0]:
                best = (cost, coef, (w, T2))
    _, coef, (w, T2) = best
    amps, phases = [], []
    for k in range(4):
        a, b = coef[2 * k], coef[2 * k + 1]
        amps.append(math.hypot(a, b))
        phases.append(math.atan2(-b, a))
    p0 = np.array([da, db, w, *amps, *phases, T2, 1.0, coef[-1]])
    mask = np.zeros(14, dtype=bool)
    if math.isinf(T2):
        mask[11] = mask[12] = True
    lb = np.array([0, 0, 0, 0, 0, 0, 0, -np.inf, -np.inf, -np.inf, -np.inf, 1e-9, 1e-3, -np.inf], float)
    ub = np.array([np.inf] * 11 + [np.inf, 20.0, np.inf], float)
    res = least_squares_fit(_four_tone_vec, tau, y, p0, jac=_four_tone_jac, bounds=(lb, ub),
                            fixed=mask, names=FOUR_TONE_NAMES)
    return res


# --------------------------------------------------------------------------
# transverse hyperfine refit
# --------------------------------------------------------------------------

def transverse_hyperfine_from_omega0(omega0: float, B: float, theta: float,
                                     c: SpeciesConstants) -> float:
    """Invert the beat-frequency law for A_perp (MHz) from one measurement.

    ``omega0`` in rad/µs, ``theta`` in rad.  With ``q = ((ω0/|γn|B)² − 1)/(4 sin²θ)``
    the physical root is ``κ = (1 + sqrt(1 + 4q))/2``.
    """
    s = math.sin(theta)
    if s == 0 or B <= 0:
        raise ValueError("A_perp is not identifiable from an aligned or zero field")
    ratio = omega0 / (TWO_PI * abs(c.gamma_n) * B)
    q = (ratio * ratio - 1.0) / (4.0 * s * s)
    disc = 1.0 + 4.0 * q
    if disc < 0:
        raise ValueError("beat frequency below the minimum reachable for any A_perp")
    k = 0.5 * (1.0 + math.sqrt(disc))
    return k * c.gamma_n * c.D / c.gamma_e


@dataclass(frozen=True)
class HyperfineRefit:
    A_perp: float
    stderr: float
    kappa: float
    fit: FitResult = dc_field(repr=False, default=None)

    @property
    def interval(self) -> tuple[float, float]:
        return self.A_perp - Z95 * self.stderr, self.A_perp + Z95 * self.stderr


def refit_transverse_hyperfine(B: float, thetas, omega0s, c: SpeciesConstants,
                               sigma=None) -> HyperfineRefit:
    """Least-squares A_perp (MHz) from beat frequencies (rad/µs) at one field magnitude.

    With ``sigma`` (per-point standard errors, rad/µs) the fit is weighted and
    the reported error is propagated from them; otherwise it comes from the
    residual scatter and needs more points than parameters.
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    w = np.atleast_1d(np.asarray(omega0s, dtype=float))
    if thetas.size < 1 or thetas.shape != w.shape:
        raise ValueError("need matching, non-empty (theta, omega0) arrays")
    if np.all(np.abs(np.sin(thetas)) < 1e-12):
        raise ValueError("all points are aligned: A_perp is unidentifiable")
    wt = np.ones_like(w) if sigma is None else 1.0 / np.broadcast_to(np.asarray(sigma, float), w.shape)
    if np.any(~np.isfinite(wt)) or np.any(wt <= 0):
        raise ValueError("sigma must be positive and finite")

    def model(p, th):
        cc = c.with_(A_perp=float(p[0]))
        return wt * np.array([model_omega0(cc, BiasField(B, float(t))) for t in th])

    seeds = []
    for t, wi in zip(thetas, w):
        if abs(math.sin(t)) > 1e-6:
            try:
                seeds.append(transverse_hyperfine_from_omega0(wi, B, t, c))
            except ValueError:
                pass
    a0 = float(np.median(seeds)) if seeds else c.A_perp
    res = least_squares_fit(model, thetas, wt * w, [a0], names=("A_perp",))
    a = float(res.params[0])
    se = float(res.stderr[0])
    if sigma is not None:
        J = finite_difference_jacobian(model, res.params, thetas)
        se = float(1.0 / math.sqrt(float(J[:, 0] @ J[:, 0])))
    return HyperfineRefit(A_perp=a, stderr=se, kappa=kappa(c.with_(A_perp=a)), fit=res)
