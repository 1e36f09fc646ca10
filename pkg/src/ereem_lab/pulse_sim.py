"""Lab-frame simulation of SQ and DQ Ramsey sequences with an explicit drive.

The drive term is ``Ω cos(ω_e t + φ) Sx`` on the electron.  ``rabi_frequency``
is the two-level Rabi frequency of a single resonant 0 ↔ ±1 transition, so
``Ω = √2 · 2π · rabi_frequency`` (the Sx matrix element is 1/√2).

Pulses are integrated with a symmetric split step (static part exact, drive
kick sampled at the step midpoint); free evolution uses the exact propagator
of the static Hamiltonian, vectorised over the whole τ grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment, minimize_scalar

from . import kernels
from .nv_model import (
    MS_VALUES,
    TWO_PI,
    BiasField,
    SpeciesConstants,
    effective_field_decomposition,
    lab_hamiltonian,
    relative_angle,
)
from .ramsey_analytic import Protocol, RamseyTrace, envelope_properties
from .spincore import IntegrationError, hermitian_eigensystem, spin_operators, tensor_product

__all__ = [
    "PulseSpec",
    "RamseyTrace",
    "LabelingError",
    "CalibrationError",
    "LabeledSpectrum",
    "TransitionFrequencies",
    "CrosscheckResult",
    "labeled_spectrum",
    "transition_frequencies",
    "exact_nuclear_frequencies",
    "calibrate_pulse_duration",
    "default_tau_grid",
    "simulate_ramsey_trace",
    "crosscheck_envelope",
    "free_evolution_operator",
    "sequence_propagator",
]

DEFAULT_RABI_MHZ = 20.0
STEPS_PER_PERIOD = 64


class LabelingError(RuntimeError):
    """Eigenstates cannot be matched unambiguously to product-basis labels."""


class CalibrationError(RuntimeError):
    """No pulse duration within the search bracket reaches the target."""


@dataclass(frozen=True)
class PulseSpec:
    """Microwave pulse settings.

    ``carrier`` (MHz) and ``duration`` (µs) may be left as ``None``; the
    simulator then uses the mean hyperfine transition frequency and a
    calibrated π/2 duration.
    """

    rabi_frequency: float = DEFAULT_RABI_MHZ
    carrier: float | None = None
    phase: float = 0.0
    duration: float | None = None
    steps_per_period: int = STEPS_PER_PERIOD

    def __post_init__(self):
        if not self.rabi_frequency > 0:
            raise ValueError("rabi_frequency must be positive")
        if self.duration is not None and not self.duration > 0:
            raise ValueError("pulse duration must be positive")
        if self.steps_per_period < 8:
            raise ValueError("steps_per_period must be at least 8")

    @property
    def amplitude(self) -> float:
        """Drive amplitude Ω on Sx, rad/µs."""
        return math.sqrt(2.0) * TWO_PI * self.rabi_frequency

    def as_dict(self) -> dict:
        return {
            "rabi_frequency_MHz": self.rabi_frequency,
            "carrier_MHz": self.carrier,
            "phase_rad": self.phase,
            "duration_us": self.duration,
            "steps_per_period": self.steps_per_period,
        }


# --------------------------------------------------------------------------
# exact spectrum and labels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSpectrum:
    """Eigenpairs of the lab Hamiltonian with (m_s, m_I) labels."""

    evals: np.ndarray          # rad/µs, ascending
    evecs: np.ndarray          # columns
    ms: np.ndarray             # electron label of each eigenvector
    mi: np.ndarray             # nuclear label of each eigenvector
    overlap: np.ndarray        # |<ms, mI|v>|² of the assigned label
    nuclear_levels: tuple

    def index(self, ms: int, mi: float) -> int:
        hit = np.nonzero((self.ms == ms) & np.isclose(self.mi, mi))[0]
        if hit.size != 1:
            raise LabelingError(f"no unique eigenstate labelled |{ms}, {mi}>")
        return int(hit[0])

    def manifold(self, ms: int) -> np.ndarray:
        return np.nonzero(self.ms == ms)[0]

    def centroid(self, ms: int) -> float:
        return float(np.mean(self.evals[self.manifold(ms)]))


def labeled_spectrum(c: SpeciesConstants, f: BiasField | None, *, strict: bool = True,
                     hamiltonian=None) -> LabeledSpectrum:
    h = lab_hamiltonian(c, f) if hamiltonian is None else hamiltonian
    evals, evecs = hermitian_eigensystem(h)
    nd = c.nuclear_dim
    levels = tuple(np.arange(c.nuclear_spin, -c.nuclear_spin - 1, -1.0))
    weights = np.abs(evecs) ** 2                       # (basis, eigen)
    manifold_w = weights.reshape(3, nd, -1).sum(axis=1)  # (ms, eigen)
    ms_idx = np.argmax(manifold_w, axis=0)
    if strict and np.any(manifold_w[ms_idx, np.arange(evals.size)] <= 0.5):
        raise LabelingError("electron spin manifold weight below 0.5; outside the perturbative regime")
    ms = np.array([MS_VALUES[k] for k in ms_idx])
    mi = np.empty(evals.size)
    ov = np.empty(evals.size)
    for k in range(3):
        cols = np.nonzero(ms_idx == k)[0]
        if cols.size != nd:
            raise LabelingError(f"m_s={MS_VALUES[k]} manifold has {cols.size} states, expected {nd}")
        block = weights[k * nd:(k + 1) * nd][:, cols]       # (basis mI, eigen)
        rows, assign = linear_sum_assignment(-block)
        for r, a in zip(rows, assign):
            mi[cols[a]] = levels[r]
            ov[cols[a]] = block[r, a]
    if strict and np.any(ov < 0.5 - 1e-12):
        raise LabelingError(f"nuclear label overlap {ov.min():.3f} below 0.5")
    return LabeledSpectrum(evals, evecs, ms, mi, ov, levels)


@dataclass(frozen=True)
class TransitionFrequencies:
    """Hyperfine lines (MHz) of one 0 ↔ m_s transition, ordered by m_I descending."""

    target: int
    lines: tuple
    mean: float
    min_overlap: float


def transition_frequencies(c: SpeciesConstants, f: BiasField | None, target: int = 1, *,
                           hamiltonian=None) -> TransitionFrequencies:
    """Exact 0 ↔ ``target`` transition frequencies at fixed nuclear label.

    The mean equals the difference of manifold centroids, which does not
    depend on how the nuclear labels are paired.
    """
    if target not in (1, -1):
        raise ValueError("target must be +1 or -1")
    spec = labeled_spectrum(c, f, hamiltonian=hamiltonian)
    lines = []
    for m in spec.nuclear_levels:
        e1 = spec.evals[spec.index(target, m)]
        e0 = spec.evals[spec.index(0, m)]
        lines.append(abs(e1 - e0) / TWO_PI)
    mean = abs(spec.centroid(target) - spec.centroid(0)) / TWO_PI
    used = np.isin(spec.ms, (0, target))
    return TransitionFrequencies(target, tuple(lines), mean, float(spec.overlap[used].min()))


def exact_nuclear_frequencies(c: SpeciesConstants, f: BiasField) -> dict:
    """Largest nuclear level spacing (rad/µs) inside each m_s manifold."""
    spec = labeled_spectrum(c, f, strict=False)
    out = {}
    for ms in MS_VALUES:
        e = np.sort(spec.evals[spec.manifold(ms)])
        out[ms] = float(e[-1] - e[0]) if c.nuclear_dim == 2 else float(np.diff(e).max())
    return out


# --------------------------------------------------------------------------
# driven and free evolution
# --------------------------------------------------------------------------

@dataclass
class _Drive:
    h0_evals: np.ndarray
    h0_evecs: np.ndarray
    sx_evals: np.ndarray
    sx_evecs: np.ndarray
    amps: np.ndarray
    omegas: np.ndarray
    phases: np.ndarray
    dt_max: float
    nuclear_dim: int

    def half_step(self, dt: float) -> np.ndarray:
        v = self.h0_evecs
        return (v * np.exp(-0.5j * self.h0_evals * dt)) @ v.conj().T

    def pulse(self, psi, t0, duration, backend=None):
        nsteps = max(1, int(math.ceil(duration / self.dt_max - 1e-9)))
        dt = duration / nsteps
        return kernels.drive_steps(
            psi, t0, dt, nsteps, self.half_step(dt), self.sx_evecs, self.sx_evals,
            self.amps, self.omegas, self.phases, backend=backend,
        )

    def free(self, psi, taus):
        """Columns ``exp(-i H0 τ_k) psi`` for every τ_k."""
        v = self.h0_evecs
        coeff = v.conj().T @ psi
        return v @ (np.exp(-1j * np.outer(self.h0_evals, taus)) * coeff[:, None])

    def transfer(self, psi, ms: int = 0) -> np.ndarray:
        """Population in the ``ms`` manifold for each column."""
        nd = self.nuclear_dim
        k = MS_VALUES.index(ms)
        return np.sum(np.abs(psi[k * nd:(k + 1) * nd]) ** 2, axis=0)


def _drive_tones(c, f, protocol: Protocol, spec: PulseSpec):
    if protocol.is_dq:
        targets = (1, -1)
    else:
        targets = (1,) if protocol is Protocol.SQ_PLUS else (-1,)
    if spec.carrier is not None:
        if protocol.is_dq:
            raise ValueError("an explicit carrier is only supported for SQ protocols")
        carriers = (float(spec.carrier),)
    else:
        carriers = tuple(transition_frequencies(c, f, t).mean for t in targets)
    omegas = TWO_PI * np.asarray(carriers)
    amps = np.full(omegas.size, spec.amplitude)
    phases = np.full(omegas.size, float(spec.phase))
    return carriers, amps, omegas, phases


def _build_drive(c, f, protocol, spec) -> tuple[_Drive, tuple]:
    h0 = lab_hamiltonian(c, f)
    w, v = hermitian_eigensystem(h0)
    sx = tensor_product(spin_operators(1).sx, spin_operators(c.nuclear_spin).identity)
    sw, sv = hermitian_eigensystem(sx)
    carriers, amps, omegas, phases = _drive_tones(c, f, protocol, spec)
    dt_max = TWO_PI / float(omegas.max()) / spec.steps_per_period
    return _Drive(w, v, sw, sv, amps, omegas, phases, dt_max, c.nuclear_dim), carriers


def _initial_states(c: SpeciesConstants, label: str):
    """Return (columns, weights) for a basis label or the unpolarised mixture."""
    nd = c.nuclear_dim
    key = label.replace(" ", "").lower()
    if key in ("unpolarized", "unpolarised", "mixed"):
        cols = [nd + k for k in range(nd)]
        weights = np.full(nd, 1.0 / nd)
    else:
        try:
            ms_txt, mi_txt = key.strip("|>⟩").split(",")
            ms = int(ms_txt)
            mi = float(eval_fraction(mi_txt))
        except ValueError as exc:
            raise ValueError(f"bad initial-state label {label!r}; use e.g. '0,-1/2' or 'unpolarized'") from exc
        levels = list(np.arange(c.nuclear_spin, -c.nuclear_spin - 1, -1.0))
        if ms not in MS_VALUES or not any(math.isclose(mi, m) for m in levels):
            raise ValueError(f"initial state {label!r} is not a basis state of {c.species}")
        k = [i for i, m in enumerate(levels) if math.isclose(mi, m)][0]
        cols = [MS_VALUES.index(ms) * nd + k]
        weights = np.ones(1)
    psi = np.zeros((c.dim, len(cols)), dtype=np.complex128)
    for j, idx in enumerate(cols):
        psi[idx, j] = 1.0
    return psi, weights


def eval_fraction(text: str) -> float:
    from fractions import Fraction

    return float(Fraction(text.replace("+", "")))


def default_initial(c: SpeciesConstants) -> str:
    return "0,-1/2" if c.nuclear_dim == 2 else "0,-1"


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def calibrate_pulse_duration(c: SpeciesConstants, f: BiasField, spec: PulseSpec | None = None,
                             protocol="SQ+", *, initial: str | None = None, backend=None) -> float:
    """π/2 pulse duration (µs) for the given drive.

    SQ: the population moved into the target manifold equals 1/2, searched on
    ``[0.5, 1.5] / (4 rabi)``.  DQ: the two-tone pulse that empties m_s=0 into
    the symmetric ±1 superposition, i.e. maximal transfer on
    ``[0.5, 1.5] / (2√2 rabi)``.
    """
    spec = spec or PulseSpec()
    protocol = Protocol.parse(protocol)
    drive, _ = _build_drive(c, f, protocol, spec)
    psi0, _ = _initial_states(c, initial or default_initial(c))
    psi0 = psi0[:, :1]

    def moved(T):
        out = drive.pulse(psi0, 0.0, T, backend)
        if protocol.is_dq:
            return 1.0 - float(drive.transfer(out, 0)[0])
        return float(drive.transfer(out, protocol.states[1])[0])

    if protocol.is_dq:
        nominal = 1.0 / (2.0 * math.sqrt(2.0) * spec.rabi_frequency)
        res = minimize_scalar(lambda T: -moved(T), bounds=(0.5 * nominal, 1.5 * nominal),
                              method="bounded", options={"xatol": 1e-9 * nominal})
        if not res.success or moved(res.x) < 0.9:
            raise CalibrationError("two-tone pulse cannot empty m_s=0; drive too weak for the detunings")
        return float(res.x)
    nominal = 1.0 / (4.0 * spec.rabi_frequency)
    lo, hi = 0.5 * nominal, 1.5 * nominal
    g_lo, g_hi = moved(lo) - 0.5, moved(hi) - 0.5
    if g_lo * g_hi > 0:
        raise CalibrationError(
            f"no π/2 duration in [{lo:.4g}, {hi:.4g}] µs: transfer {g_lo + 0.5:.3f} .. {g_hi + 0.5:.3f}"
        )
    return float(brentq(lambda T: moved(T) - 0.5, lo, hi, xtol=1e-12, rtol=1e-12))


# --------------------------------------------------------------------------
# Ramsey traces
# --------------------------------------------------------------------------

def default_tau_grid(c: SpeciesConstants, f: BiasField, protocol="SQ+", *, points: int = 512,
                     periods: float = 3.0, max_tau: float = 50.0) -> np.ndarray:
    """``points`` samples from 0 up to ``periods`` beat periods (capped at ``max_tau`` µs)."""
    props = envelope_properties(effective_field_decomposition(c, f), Protocol.parse(protocol))
    span = min(max_tau, periods * props.period)
    return np.linspace(0.0, span, points)


def simulate_ramsey_trace(c: SpeciesConstants, f: BiasField, protocol="SQ+", tau=None,
                          spec: PulseSpec | None = None, initial: str | None = None, *,
                          backend=None, norm_tol: float = 1e-8) -> RamseyTrace:
    """m_s=0 population after pulse, free evolution τ, pulse, for each τ."""
    protocol = Protocol.parse(protocol)
    spec = spec or PulseSpec()
    initial = initial or default_initial(c)
    tau = default_tau_grid(c, f, protocol) if tau is None else np.asarray(tau, dtype=float)
    if tau.ndim != 1 or tau.size == 0:
        raise ValueError("tau grid must be a non-empty 1-D array")
    if np.any(tau < 0) or np.any(tau > 50.0 + 1e-9):
        raise ValueError("tau grid must lie within [0, 50] µs")
    if tau.size > 1 and np.any(np.diff(tau) <= 0):
        raise ValueError("tau grid must be strictly increasing")
    if spec.duration is None:
        spec = replace(spec, duration=calibrate_pulse_duration(c, f, spec, protocol, backend=backend))
    drive, carriers = _build_drive(c, f, protocol, spec)
    T = float(spec.duration)
    psi0, weights = _initial_states(c, initial)
    pop = np.zeros(tau.size)
    for col, wgt in zip(psi0.T, weights):
        after1 = drive.pulse(col[:, None], 0.0, T, backend)[:, 0]
        states = drive.free(after1, tau)
        final = drive.pulse(states, T + tau, T, backend)
        drift = np.max(np.abs(np.linalg.norm(final, axis=0) - 1.0))
        if drift > norm_tol:
            raise IntegrationError(f"norm drift {drift:.3g} exceeds {norm_tol:g}")
        pop += wgt * drive.transfer(final)
    drive_meta = spec.as_dict()
    drive_meta["carriers_MHz"] = list(carriers)
    return RamseyTrace(
        tau=tau,
        population=np.clip(pop, 0.0, 1.0),
        protocol=protocol.value,
        constants=c,
        field=f,
        initial=initial,
        drive=drive_meta,
        source="pulse_sim",
    )


def free_evolution_operator(c: SpeciesConstants, f: BiasField, tau: float) -> np.ndarray:
    h0 = lab_hamiltonian(c, f)
    w, v = hermitian_eigensystem(h0)
    return (v * np.exp(-1j * w * tau)) @ v.conj().T


def sequence_propagator(c: SpeciesConstants, f: BiasField, protocol, tau: float,
                        spec: PulseSpec, *, backend=None) -> np.ndarray:
    """Full pulse, free evolution, pulse unitary for one τ (columns = basis inputs)."""
    protocol = Protocol.parse(protocol)
    if spec.duration is None:
        raise ValueError("sequence_propagator needs a pulse duration")
    drive, _ = _build_drive(c, f, protocol, spec)
    T = float(spec.duration)
    eye = np.eye(c.dim, dtype=np.complex128)
    u = drive.pulse(eye, np.zeros(c.dim), T, backend)
    u = free_evolution_operator(c, f, tau) @ u
    return drive.pulse(u, np.full(c.dim, T + tau), T, backend)


# --------------------------------------------------------------------------
# cross-check against the vector model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CrosscheckResult:
    B: float
    theta_deg: float
    protocol: str
    omega0_sim: float
    omega_p1_sim: float
    chi_min_sim: float
    omega0_model: float
    omega_p1_model: float
    chi_min_model: float
    fit: object = dc_field(repr=False, default=None)

    @property
    def omega0_deviation_pct(self) -> float:
        return 100.0 * (self.omega0_sim / self.omega0_model - 1.0)

    @property
    def omega_p1_deviation_pct(self) -> float:
        return 100.0 * (self.omega_p1_sim / self.omega_p1_model - 1.0)

    @property
    def chi_min_deviation(self) -> float:
        return self.chi_min_sim - self.chi_min_model

    def as_row(self) -> dict:
        return {
            "B_G": self.B,
            "theta_deg": self.theta_deg,
            "protocol": self.protocol,
            "omega0_sim_MHz": self.omega0_sim / TWO_PI,
            "omega0_model_MHz": self.omega0_model / TWO_PI,
            "omega0_dev_pct": self.omega0_deviation_pct,
            "omega_p1_sim_MHz": self.omega_p1_sim / TWO_PI,
            "omega_p1_model_MHz": self.omega_p1_model / TWO_PI,
            "omega_p1_dev_pct": self.omega_p1_deviation_pct,
            "chi_min_sim": self.chi_min_sim,
            "chi_min_model": self.chi_min_model,
        }


def crosscheck_envelope(trace: RamseyTrace) -> CrosscheckResult:
    """Fit a trace with the two-tone model and compare to the vector model."""
    from .fitting import fit_ereem_trace

    if trace.constants is None or trace.field is None:
        raise ValueError("crosscheck needs a trace carrying its constants and field")
    protocol = Protocol.parse(trace.protocol)
    d = effective_field_decomposition(trace.constants, trace.field)
    i, j = protocol.states
    slow, fast = sorted((d.omega_ms[i], d.omega_ms[j]))
    fit = fit_ereem_trace(trace, fixed={"T2_star": math.inf, "p": 1.0})
    return CrosscheckResult(
        B=trace.field.B,
        theta_deg=trace.field.theta_deg,
        protocol=protocol.value,
        omega0_sim=fit.params.omega0,
        omega_p1_sim=fit.params.omega_p1,
        chi_min_sim=fit.params.chi_min,
        omega0_model=slow,
        omega_p1_model=fast,
        chi_min_model=abs(math.cos(relative_angle(d, i, j))),
        fit=fit,
    )
