"""Closed-form Ramsey responses, envelopes, fit models and spectra.

Signals are returned as the m_s=0 population in [0, 1].  ``to_contrast`` maps
a population onto the symmetric ``[-1, 1]`` signal used by the fit model.

Both protocols reduce to two nuclear precession phases ``a`` and ``b`` and the
cosine of the angle between the corresponding nuclear fields::

    SQ:  P0 = (1 - cos a cos b - cosΦ sin a sin b) / 2
    DQ:  P0 = (1 + cos a cos b + cosΦ sin a sin b) / 2

which split into two tones at ``(b ± a)/τ`` with weights ``(1 ± cosΦ)/2``.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.signal import find_peaks

from .nv_model import (
    TWO_PI,
    BiasField,
    EffectiveFieldDecomposition,
    SpeciesConstants,
    relative_angle,
)

__all__ = [
    "Protocol",
    "EnvelopeProperties",
    "EreemFitParams",
    "FourToneParams",
    "RamseyTrace",
    "ResolvabilityWarning",
    "EREEM_PARAM_NAMES",
    "sq_population",
    "dq_population",
    "sq_signal",
    "dq_signal",
    "protocol_signal",
    "to_contrast",
    "envelope",
    "envelope_properties",
    "ereem_fit_model",
    "ereem_fit_jacobian",
    "four_tone_model",
    "four_tone_frequencies",
    "four_tone_resolvable",
    "power_spectrum",
    "spectrum_peaks",
    "analytic_trace",
]


class Protocol(str, enum.Enum):
    SQ_PLUS = "SQ+"
    SQ_MINUS = "SQ-"
    DQ = "DQ"

    @classmethod
    def parse(cls, value) -> "Protocol":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("−", "-")
        aliases = {"SQ": cls.SQ_PLUS, "SQ+": cls.SQ_PLUS, "SQ+1": cls.SQ_PLUS,
                   "SQ-": cls.SQ_MINUS, "SQ-1": cls.SQ_MINUS, "DQ": cls.DQ}
        if key not in aliases:
            raise ValueError(f"unknown protocol {value!r}; expected SQ+, SQ- or DQ")
        return aliases[key]

    @property
    def states(self) -> tuple[int, int]:
        """Electronic states whose nuclear fields set the envelope."""
        return {"SQ+": (0, 1), "SQ-": (0, -1), "DQ": (-1, 1)}[self.value]

    @property
    def is_dq(self) -> bool:
        return self is Protocol.DQ


class ResolvabilityWarning(UserWarning):
    """Four-tone detunings too close for the two splittings to separate."""


# --------------------------------------------------------------------------
# phase-level responses
# --------------------------------------------------------------------------

def _k_term(a, b, cphi):
    return -np.cos(a) * np.cos(b) - cphi * np.sin(a) * np.sin(b)


def sq_population(a, b, cphi):
    """SQ population for precession phases ``a``, ``b`` and field overlap ``cphi``."""
    return 0.5 * (1.0 + _k_term(a, b, cphi))


def dq_population(a, b, cphi):
    return 0.5 * (1.0 - _k_term(a, b, cphi))


def _phases(d: EffectiveFieldDecomposition, protocol: Protocol, tau):
    i, j = protocol.states
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("free evolution time must be non-negative")
    a = 0.5 * d.omega_ms[i] * tau
    b = 0.5 * d.omega_ms[j] * tau
    return a, b, math.cos(relative_angle(d, i, j))


def sq_signal(d: EffectiveFieldDecomposition, tau, upper: bool = True):
    """m_s=0 population after an SQ Ramsey sequence on the +1 (or -1) transition."""
    proto = Protocol.SQ_PLUS if upper else Protocol.SQ_MINUS
    a, b, c = _phases(d, proto, tau)
    return np.clip(sq_population(a, b, c), 0.0, 1.0)


def dq_signal(d: EffectiveFieldDecomposition, tau):
    a, b, c = _phases(d, Protocol.DQ, tau)
    return np.clip(dq_population(a, b, c), 0.0, 1.0)


def protocol_signal(d: EffectiveFieldDecomposition, protocol, tau):
    protocol = Protocol.parse(protocol)
    if protocol.is_dq:
        return dq_signal(d, tau)
    return sq_signal(d, tau, upper=protocol is Protocol.SQ_PLUS)


def to_contrast(population):
    """Population in [0,1] to the symmetric [-1,1] Ramsey signal."""
    return 2.0 * np.asarray(population) - 1.0


# --------------------------------------------------------------------------
# envelope
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvelopeProperties:
    beat_omega0: float
    chi_min: float
    chi_max: float
    period: float
    Phi: float
    protocol: str


def _slow_omega(d, protocol):
    i, j = protocol.states
    return min(d.omega_ms[i], d.omega_ms[j])


def envelope(d: EffectiveFieldDecomposition, protocol, tau):
    """Fringe envelope χ(τ): the largest |signal| reachable at each slow phase.

    For fixed slow phase ``a`` the signal is ``−cos a cos b − cosΦ sin a sin b``
    as a sinusoid in the fast phase ``b`` with amplitude
    ``sqrt(cos²a + cos²Φ sin²a)``.
    """
    protocol = Protocol.parse(protocol)
    i, j = protocol.states
    tau = np.asarray(tau, dtype=float)
    c = math.cos(relative_angle(d, i, j))
    a = 0.5 * _slow_omega(d, protocol) * tau
    return np.sqrt(np.cos(a) ** 2 + (c * np.sin(a)) ** 2)


def envelope_properties(d: EffectiveFieldDecomposition, protocol) -> EnvelopeProperties:
    protocol = Protocol.parse(protocol)
    i, j = protocol.states
    phi = relative_angle(d, i, j)
    w = _slow_omega(d, protocol)
    period = TWO_PI / w if w > 0 else math.inf
    return EnvelopeProperties(
        beat_omega0=w,
        chi_min=abs(math.cos(phi)),
        chi_max=1.0,
        period=period,
        Phi=phi,
        protocol=protocol.value,
    )


# --------------------------------------------------------------------------
# two-tone fit model
# --------------------------------------------------------------------------

EREEM_PARAM_NAMES = ("C0", "T2_star", "p", "omega0", "omega_p1", "Phi", "x0", "x_p1", "y0")


@dataclass(frozen=True)
class EreemFitParams:
    C0: float = 1.0
    T2_star: float = math.inf
    p: float = 1.0
    omega0: float = 0.0
    omega_p1: float = 1.0
    Phi: float = 0.0
    x0: float = 0.0
    x_p1: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if not self.C0 > 0:
            raise ValueError("C0 must be positive")
        if not self.T2_star > 0:
            raise ValueError("T2_star must be positive")
        if not self.p > 0:
            raise ValueError("stretch exponent p must be positive")
        if not self.omega0 < self.omega_p1:
            raise ValueError("omega0 must be below omega_p1")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in EREEM_PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, x) -> "EreemFitParams":
        return cls(**{n: float(v) for n, v in zip(EREEM_PARAM_NAMES, x)})

    @property
    def chi_min(self) -> float:
        return abs(math.cos(self.Phi))


def _decay(tau, T2, p):
    if math.isinf(T2):
        return np.ones_like(tau), np.zeros_like(tau), np.zeros_like(tau)
    r = tau / T2
    rp = r ** p
    e = np.exp(-rp)
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = np.where(r > 0, np.log(np.where(r > 0, r, 1.0)), 0.0)
    d_t2 = e * p * rp / T2
    d_p = -e * rp * logr
    return e, d_t2, d_p


def _unpack(params):
    if isinstance(params, EreemFitParams):
        return params.to_array()
    x = np.asarray(params, dtype=float)
    if x.shape != (9,):
        raise ValueError(f"expected 9 parameters, got shape {x.shape}")
    return x


def ereem_fit_model(params, tau):
    """Decaying two-tone Ramsey signal in the symmetric [-1, 1] convention."""
    C0, T2, p, w0, w1, phi, x0, x1, y0 = _unpack(params)
    tau = np.asarray(tau, dtype=float)
    e, _, _ = _decay(tau, T2, p)
    A = 0.5 * w0 * tau + x0
    B = 0.5 * w1 * tau + x1
    return C0 * e * _k_term(A, B, math.cos(phi)) + y0


def ereem_fit_jacobian(params, tau):
    """Analytic derivatives of :func:`ereem_fit_model`, shape (len(tau), 9)."""
    C0, T2, p, w0, w1, phi, x0, x1, y0 = _unpack(params)
    tau = np.asarray(tau, dtype=float)
    e, de_t2, de_p = _decay(tau, T2, p)
    A = 0.5 * w0 * tau + x0
    B = 0.5 * w1 * tau + x1
    ca, sa, cb, sb = np.cos(A), np.sin(A), np.cos(B), np.sin(B)
    c = math.cos(phi)
    k = -ca * cb - c * sa * sb
    dk_a = sa * cb - c * ca * sb
    dk_b = ca * sb - c * sa * cb
    dk_phi = math.sin(phi) * sa * sb
    J = np.empty((tau.size, 9))
    J[:, 0] = e * k
    J[:, 1] = C0 * de_t2 * k
    J[:, 2] = C0 * de_p * k
    J[:, 3] = C0 * e * dk_a * 0.5 * tau
    J[:, 4] = C0 * e * dk_b * 0.5 * tau
    J[:, 5] = C0 * e * dk_phi
    J[:, 6] = C0 * e * dk_a
    J[:, 7] = C0 * e * dk_b
    J[:, 8] = 1.0
    return J


# --------------------------------------------------------------------------
# four-tone model
# --------------------------------------------------------------------------

RESOLVABILITY_FACTOR = 4.0


@dataclass(frozen=True)
class FourToneParams:
    """Tones at ``|δa| ± ω0/2`` and ``|δb| ± ω0/2`` (rad/µs) with free weights."""

    delta_a: float
    delta_b: float
    omega0: float
    amplitudes: tuple = (0.25, 0.25, 0.25, 0.25)
    phases: tuple = (0.0, 0.0, 0.0, 0.0)
    T2_star: float = math.inf
    p: float = 1.0
    y0: float = 0.0

    def __post_init__(self):
        if len(self.amplitudes) != 4 or len(self.phases) != 4:
            raise ValueError("four amplitudes and four phases are required")
        if self.omega0 < 0:
            raise ValueError("omega0 must be non-negative")
        if not self.T2_star > 0 or not self.p > 0:
            raise ValueError("T2_star and p must be positive")

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.delta_a, self.delta_b, self.omega0, *self.amplitudes, *self.phases,
             self.T2_star, self.p, self.y0],
            dtype=float,
        )

    @classmethod
    def from_array(cls, x) -> "FourToneParams":
        x = [float(v) for v in x]
        return cls(x[0], x[1], x[2], tuple(x[3:7]), tuple(x[7:11]), x[11], x[12], x[13])


def four_tone_frequencies(delta_a: float, delta_b: float, omega0: float) -> np.ndarray:
    da, db = abs(delta_a), abs(delta_b)
    h = 0.5 * omega0
    return np.array([da - h, da + h, db - h, db + h])


def four_tone_resolvable(delta_a: float, delta_b: float, omega0: float,
                         factor: float = RESOLVABILITY_FACTOR) -> bool:
    """True when the detuning gap exceeds ``factor`` times the splitting."""
    return abs(abs(delta_a) - abs(delta_b)) >= factor * omega0


def four_tone_model(params: FourToneParams, tau, *, check: bool = True):
    if check and not four_tone_resolvable(params.delta_a, params.delta_b, params.omega0):
        warnings.warn(
            "four-tone detunings are not resolvable: "
            f"||δa|-|δb|| = {abs(abs(params.delta_a) - abs(params.delta_b)):.4g} rad/µs "
            f"vs ω0 = {params.omega0:.4g} rad/µs",
            ResolvabilityWarning,
            stacklevel=2,
        )
    tau = np.asarray(tau, dtype=float)
    e, _, _ = _decay(tau, params.T2_star, params.p)
    freqs = four_tone_frequencies(params.delta_a, params.delta_b, params.omega0)
    tones = np.zeros_like(tau)
    for amp, f, ph in zip(params.amplitudes, freqs, params.phases):
        tones = tones + amp * np.cos(f * tau + ph)
    return e * tones + params.y0


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

def power_spectrum(tau, signal, pad_factor: int = 16):
    """Hann-windowed, zero-padded periodogram on a uniform τ grid.

    Returns ``(frequency_MHz, power)`` with frequency in cycles per µs.
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(signal, dtype=float)
    if tau.size < 4 or tau.shape != y.shape:
        raise ValueError("need matching tau/signal arrays with at least 4 samples")
    steps = np.diff(tau)
    dt = float(np.mean(steps))
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ValueError("power spectrum needs a uniform, increasing tau grid")
    y = (y - y.mean()) * np.hanning(y.size)
    n = int(2 ** math.ceil(math.log2(y.size * max(1, pad_factor))))
    power = np.abs(np.fft.rfft(y, n=n)) ** 2
    return np.fft.rfftfreq(n, dt), power


def spectrum_peaks(freq, power, count: int = 2, rel_height: float = 0.05):
    """Strongest ``count`` peaks, refined by parabolic interpolation.

    Returns ``(frequencies, heights)`` sorted by frequency.
    """
    freq = np.asarray(freq, dtype=float)
    power = np.asarray(power, dtype=float)
    idx, _ = find_peaks(power, height=rel_height * float(power.max()))
    if idx.size == 0:
        return np.array([]), np.array([])
    idx = idx[np.argsort(power[idx])[::-1][:count]]
    df = freq[1] - freq[0]
    fs, hs = [], []
    for i in idx:
        if 0 < i < power.size - 1:
            y0, y1, y2 = power[i - 1], power[i], power[i + 1]
            den = y0 - 2 * y1 + y2
            shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
            fs.append(freq[i] + shift * df)
            hs.append(y1 - 0.25 * (y0 - y2) * shift)
        else:
            fs.append(freq[i])
            hs.append(power[i])
    order = np.argsort(fs)
    return np.asarray(fs)[order], np.asarray(hs)[order]


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

@dataclass
class RamseyTrace:
    """Population vs free-evolution time plus provenance metadata."""

    tau: np.ndarray
    population: np.ndarray
    protocol: str = "SQ+"
    constants: SpeciesConstants | None = None
    field: BiasField | None = None
    initial: str = ""
    drive: dict | None = None
    source: str = "analytic"
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
        self.population = np.asarray(self.population, dtype=float).reshape(-1)
        if self.tau.shape != self.population.shape:
            raise ValueError("tau and population must have equal length")
        if self.tau.size and np.any(np.diff(self.tau) <= 0):
            raise ValueError("tau grid must be strictly increasing")
        self.protocol = Protocol.parse(self.protocol).value

    def __len__(self) -> int:
        return self.tau.size

    @property
    def contrast(self) -> np.ndarray:
        return to_contrast(self.population)


def analytic_trace(c: SpeciesConstants, f: BiasField, protocol, tau) -> RamseyTrace:
    from .nv_model import effective_field_decomposition

    protocol = Protocol.parse(protocol)
    d = effective_field_decomposition(c, f)
    return RamseyTrace(
        tau=np.asarray(tau, dtype=float),
        population=protocol_signal(d, protocol, tau),
        protocol=protocol.value,
        constants=c,
        field=f,
        source="analytic",
    )
