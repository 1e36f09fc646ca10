"""NV ground-state constants, Hamiltonians and the effective nuclear-field model.

Inputs and stored constants use ordinary frequency (MHz, MHz/G) and Gauss.
Hamiltonians and Larmor frequencies come out in angular units (rad/µs); the
``2π`` is applied here and nowhere else.

Frame conventions
-----------------
The field lies in the NV x-z plane, ``Bx = B sin θ``, ``Bz = B cos θ``.  Field
vectors on the nuclear spin are kept as 2-vectors.  ``beta_ms`` is expressed
in the primed frame whose z' axis lies along the spin-independent field, with
x' chosen so that the x' component of a vector ``(vx, vz)`` is
``(vx*ẑ'_z - vz*ẑ'_x)``; the y' component vanishes identically.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .spincore import spin_operators, tensor_product

TWO_PI = 2.0 * math.pi
PERTURBATIVE_LIMIT_G = 200.0
MS_VALUES = (1, 0, -1)

__all__ = [
    "TWO_PI",
    "SpeciesConstants",
    "BiasField",
    "EffectiveFieldDecomposition",
    "ModelValidityWarning",
    "species_constants",
    "kappa",
    "lab_hamiltonian",
    "lab_hamiltonian_components",
    "rotating_hamiltonian",
    "effective_field_decomposition",
    "relative_angle",
    "omega0",
    "constants_table",
    "electron_projector",
]


class ModelValidityWarning(UserWarning):
    """The analytic model is evaluated outside its perturbative regime."""


@dataclass(frozen=True)
class SpeciesConstants:
    """Physical constants for one nitrogen isotope (MHz, MHz/G)."""

    species: str = "N15"
    D: float = 2870.0
    gamma_e: float = -2.8024
    gamma_n: float = -431.6e-6
    A_perp: float = 3.65
    A_par: float = 3.03
    Q: float = 0.0
    nuclear_spin: float = 0.5

    def __post_init__(self):
        tag = self.species.upper()
        object.__setattr__(self, "species", tag)
        if tag not in ("N15", "N14"):
            raise ValueError(f"unknown species {self.species!r}")
        if not self.D > 0:
            raise ValueError("zero-field splitting D must be positive")
        expected = 0.5 if tag == "N15" else 1.0
        if self.nuclear_spin != expected:
            raise ValueError(f"{tag} has nuclear spin {expected}, got {self.nuclear_spin}")

    @classmethod
    def n15(cls, **overrides) -> "SpeciesConstants":
        return cls(**overrides)

    @classmethod
    def n14(cls, **overrides) -> "SpeciesConstants":
        # Literature values; the N14 outputs of this package are configuration-dependent.
        base = dict(
            species="N14",
            D=2870.0,
            gamma_e=-2.8024,
            gamma_n=0.3077e-3,
            A_perp=-2.70,
            A_par=-2.14,
            Q=-4.945,
            nuclear_spin=1.0,
        )
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "SpeciesConstants":
        return replace(self, **changes)

    @property
    def nuclear_dim(self) -> int:
        return int(round(2 * self.nuclear_spin + 1))

    @property
    def dim(self) -> int:
        return 3 * self.nuclear_dim


def species_constants(tag: str, **overrides) -> SpeciesConstants:
    tag = tag.strip().upper()
    if tag == "N15":
        return SpeciesConstants.n15(**overrides)
    if tag == "N14":
        return SpeciesConstants.n14(**overrides)
    raise ValueError(f"unknown species {tag!r}; expected n15 or n14")


@dataclass(frozen=True)
class BiasField:
    """Bias field magnitude (G) and misalignment from the NV axis (rad)."""

    B: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.B) and self.B >= 0):
            raise ValueError(f"field magnitude must be finite and >= 0, got {self.B}")
        if not (0.0 <= self.theta <= math.pi / 2 + 1e-12):
            raise ValueError(f"misalignment angle must lie in [0, pi/2], got {self.theta}")

    @classmethod
    def from_degrees(cls, B: float, theta_deg: float) -> "BiasField":
        return cls(float(B), math.radians(theta_deg))

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    @property
    def Bx(self) -> float:
        return self.B * math.sin(self.theta)

    @property
    def Bz(self) -> float:
        return self.B * math.cos(self.theta)

    @property
    def perturbative(self) -> bool:
        return self.B <= PERTURBATIVE_LIMIT_G


@dataclass(frozen=True)
class EffectiveFieldDecomposition:
    """Effective fields on the nuclear spin for one field configuration.

    ``beta_ms[m]`` is ``(beta_x', beta_z')`` in Gauss, ``phi_ms[m]`` the angle
    (rad) from the spin-independent field, ``omega_ms[m]`` the nuclear Larmor
    frequency in rad/µs.
    """

    beta_ind: float
    beta_ms: dict = dc_field(default_factory=dict)
    phi_ms: dict = dc_field(default_factory=dict)
    omega_ms: dict = dc_field(default_factory=dict)
    kappa: float = 0.0
    field: BiasField | None = None
    constants: SpeciesConstants | None = None

    def total_field(self, ms: int) -> np.ndarray:
        """``beta_ind ẑ' + beta(ms)`` as an (x', z') vector."""
        bx, bz = self.beta_ms[ms]
        return np.array([bx, self.beta_ind + bz])


# --------------------------------------------------------------------------
# scalar model quantities
# --------------------------------------------------------------------------

def kappa(c: SpeciesConstants) -> float:
    """Transverse enhancement factor ``gamma_e A_perp / (gamma_n D)``."""
    denom = c.gamma_n * c.D
    if denom == 0:
        raise ValueError("kappa undefined: gamma_n * D is zero")
    return c.gamma_e * c.A_perp / denom


def _quadrupole_field(c: SpeciesConstants) -> float:
    # quadrupole coupling treated as an extra quantising field along the NV axis
    return -c.Q / c.gamma_n if c.Q else 0.0


def _nv_frame_fields(c: SpeciesConstants, bx: float, bz: float):
    k = kappa(c)
    ind = np.array([(1 - 2 * k) * bx, bz + _quadrupole_field(c)])
    dep = {ms: np.array([3 * k * ms * ms * bx, -ms * c.A_par / c.gamma_n]) for ms in MS_VALUES}
    return k, ind, dep


def _warn_regime(f: BiasField):
    if not f.perturbative:
        warnings.warn(
            f"B = {f.B:g} G exceeds the {PERTURBATIVE_LIMIT_G:g} G perturbative regime",
            ModelValidityWarning,
            stacklevel=3,
        )


def effective_field_decomposition(c: SpeciesConstants, f: BiasField) -> EffectiveFieldDecomposition:
    _warn_regime(f)
    k, ind, dep = _nv_frame_fields(c, f.Bx, f.Bz)
    beta_ind = float(np.hypot(*ind))
    if beta_ind > 0:
        zx, zz = ind / beta_ind
    else:
        zx, zz = 0.0, 1.0
    beta_ms, phi_ms, omega_ms = {}, {}, {}
    for ms in MS_VALUES:
        vx, vz = dep[ms]
        b_perp = vx * zz - vz * zx
        b_par = vx * zx + vz * zz
        if ms == 0:
            b_perp = b_par = 0.0
        beta_ms[ms] = (float(b_perp), float(b_par))
        phi_ms[ms] = float(math.atan2(b_perp, beta_ind + b_par))
        omega_ms[ms] = TWO_PI * abs(c.gamma_n) * float(math.hypot(b_perp, beta_ind + b_par))
    return EffectiveFieldDecomposition(
        beta_ind=beta_ind,
        beta_ms=beta_ms,
        phi_ms=phi_ms,
        omega_ms=omega_ms,
        kappa=k,
        field=f,
        constants=c,
    )


def relative_angle(d: EffectiveFieldDecomposition, i: int, j: int) -> float:
    """Angle in [0, π] between the effective nuclear fields of states i and j."""
    if i == j:
        raise ValueError("relative angle needs two distinct electronic states")
    if i not in MS_VALUES or j not in MS_VALUES:
        raise ValueError(f"m_s must be one of {MS_VALUES}")
    a, b = d.total_field(i), d.total_field(j)
    cross = a[0] * b[1] - a[1] * b[0]
    return float(math.atan2(abs(cross), float(a @ b)))


def omega0(c: SpeciesConstants, f: BiasField) -> float:
    """Envelope beat frequency (rad/µs) from the spin-independent field."""
    k = kappa(c)
    q = _quadrupole_field(c)
    if q:
        return TWO_PI * abs(c.gamma_n) * math.hypot((1 - 2 * k) * f.Bx, f.Bz + q)
    s = math.sin(f.theta)
    return TWO_PI * abs(c.gamma_n) * f.B * math.sqrt(1 + 4 * (k * k - k) * s * s)


# --------------------------------------------------------------------------
# Hamiltonians (rad/µs)
# --------------------------------------------------------------------------

def _operators(c: SpeciesConstants):
    S = spin_operators(1)
    I = spin_operators(c.nuclear_spin)
    eye_s, eye_i = S.identity, I.identity
    ops = {
        "Sx": tensor_product(S.sx, eye_i),
        "Sy": tensor_product(S.sy, eye_i),
        "Sz": tensor_product(S.sz, eye_i),
        "Sz2": tensor_product(S.sz @ S.sz, eye_i),
        "Ix": tensor_product(eye_s, I.sx),
        "Iy": tensor_product(eye_s, I.sy),
        "Iz": tensor_product(eye_s, I.sz),
        "Iz2": tensor_product(eye_s, I.sz @ I.sz),
        "SxIx": tensor_product(S.sx, I.sx),
        "SyIy": tensor_product(S.sy, I.sy),
        "SzIz": tensor_product(S.sz, I.sz),
        "Sz2Ix": tensor_product(S.sz @ S.sz, I.sx),
    }
    return ops


def lab_hamiltonian_components(c: SpeciesConstants, bx: float, bz: float) -> np.ndarray:
    """Lab-frame ground-state Hamiltonian for explicit field components (G)."""
    o = _operators(c)
    h = (
        c.D * o["Sz2"]
        - c.gamma_e * (bz * o["Sz"] + bx * o["Sx"])
        - c.gamma_n * (bz * o["Iz"] + bx * o["Ix"])
        + c.A_par * o["SzIz"]
        + c.A_perp * (o["SxIx"] + o["SyIy"])
    )
    if c.Q:
        h = h + c.Q * o["Iz2"]
    return TWO_PI * h


def lab_hamiltonian(c: SpeciesConstants, f: BiasField) -> np.ndarray:
    return lab_hamiltonian_components(c, f.Bx, f.Bz)


def rotating_hamiltonian(c: SpeciesConstants, f: BiasField) -> np.ndarray:
    """Second-order effective Hamiltonian in the doubly rotating electron frame."""
    o = _operators(c)
    k = kappa(c)
    h = (
        c.A_par * o["SzIz"]
        - c.gamma_n * f.Bz * o["Iz"]
        - (1 - 2 * k) * c.gamma_n * f.Bx * o["Ix"]
        - 3 * k * c.gamma_n * f.Bx * o["Sz2Ix"]
    )
    if c.Q:
        h = h + c.Q * o["Iz2"]
    return TWO_PI * h


def electron_projector(c: SpeciesConstants, ms: int) -> np.ndarray:
    """Projector onto the ``m_s`` electron manifold in the product basis."""
    idx = MS_VALUES.index(ms)
    p = np.zeros((3, 3))
    p[idx, idx] = 1.0
    return np.kron(p, np.eye(c.nuclear_dim))


def constants_table(c: SpeciesConstants) -> list[tuple[str, float | str, str]]:
    """Key/value/unit rows describing ``c`` plus the derived κ."""
    rows = [
        ("species", c.species, ""),
        ("D", c.D, "MHz"),
        ("gamma_e", c.gamma_e, "MHz/G"),
        ("gamma_n", c.gamma_n, "MHz/G"),
        ("A_perp", c.A_perp, "MHz"),
        ("A_par", c.A_par, "MHz"),
        ("Q", c.Q, "MHz"),
        ("nuclear_spin", c.nuclear_spin, ""),
        ("kappa", kappa(c), ""),
    ]
    return rows
