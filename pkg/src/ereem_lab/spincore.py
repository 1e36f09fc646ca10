"""Small dense spin algebra: operators, tensor products, eigensystems, propagation.

All Hamiltonians handed to this module are in angular-frequency units
(rad/µs) and times are in µs.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels

__all__ = [
    "SpinOperators",
    "IntegrationError",
    "spin_operators",
    "tensor_product",
    "hermitian_eigensystem",
    "expm_hermitian",
    "propagate_piecewise",
    "max_hermiticity_error",
    "max_unitarity_error",
]


class IntegrationError(RuntimeError):
    """Raised when time evolution loses unitarity beyond tolerance."""


@dataclass(frozen=True)
class SpinOperators:
    spin: float
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def dim(self) -> int:
        return self.sz.shape[0]

    @property
    def identity(self) -> np.ndarray:
        return np.eye(self.dim, dtype=np.complex128)


def spin_operators(s) -> SpinOperators:
    """Angular momentum matrices for spin 1/2 or 1 in the descending |m> basis."""
    try:
        frac = Fraction(s).limit_denominator(4)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"unsupported spin {s!r}") from exc
    if frac not in (Fraction(1, 2), Fraction(1)) or abs(float(frac) - float(s)) > 1e-12:
        raise ValueError(f"unsupported spin {s!r}: only 1/2 and 1 are implemented")
    spin = float(frac)
    m = np.arange(spin, -spin - 1, -1.0)
    dim = m.size
    # <m+1|S+|m> = sqrt(s(s+1) - m(m+1))
    splus = np.zeros((dim, dim), dtype=np.complex128)
    for k in range(1, dim):
        splus[k - 1, k] = np.sqrt(spin * (spin + 1) - m[k] * (m[k] + 1))
    sminus = splus.conj().T
    sx = (splus + sminus) / 2
    sy = (splus - sminus) / 2j
    sz = np.diag(m).astype(np.complex128)
    for op in (sx, sy, sz):
        op.setflags(write=False)
    return SpinOperators(spin, sx, sy, sz)


def _as_square(a, name):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def tensor_product(a, b) -> np.ndarray:
    """Kronecker product of two square matrices."""
    return np.kron(_as_square(a, "a"), _as_square(b, "b"))


def max_hermiticity_error(h) -> float:
    h = np.asarray(h)
    return float(np.max(np.abs(h - h.conj().T))) if h.size else 0.0


def max_unitarity_error(u) -> float:
    u = np.asarray(u)
    return float(np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))))


def hermitian_eigensystem(h, tol: float = 1e-9):
    """Eigenvalues (ascending) and eigenvector columns of a Hermitian matrix.

    ``tol`` bounds ``max|h - h†|`` relative to ``max(1, max|h|)``.
    """
    h = _as_square(h, "h").astype(np.complex128)
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    err = max_hermiticity_error(h)
    if err > tol * scale:
        raise ValueError(f"matrix is not Hermitian: max|h - h†| = {err:.3g}")
    h = 0.5 * (h + h.conj().T)
    evals, evecs = np.linalg.eigh(h)
    return evals, evecs


def expm_hermitian(h, t: float, eig=None) -> np.ndarray:
    """``exp(-i h t)`` through the eigendecomposition of ``h``."""
    evals, evecs = hermitian_eigensystem(h) if eig is None else eig
    return (evecs * np.exp(-1j * evals * t)) @ evecs.conj().T


def propagate_piecewise(segments, state, *, backend=None, norm_tol: float = 1e-8) -> np.ndarray:
    """Evolve ``state`` through ``[(H_1, t_1), (H_2, t_2), ...]`` in order.

    The result is ``exp(-i H_n t_n) ... exp(-i H_1 t_1) |state>``.
    """
    segments = list(segments)
    psi = np.asarray(state, dtype=np.complex128).reshape(-1)
    if not segments:
        return psi.copy()
    hs = np.stack([_as_square(h, "segment Hamiltonian") for h, _ in segments]).astype(np.complex128)
    ts = np.array([float(t) for _, t in segments])
    if np.any(ts < 0):
        raise ValueError("segment durations must be non-negative")
    if hs.shape[1] != psi.size:
        raise ValueError(f"state has dimension {psi.size}, Hamiltonians {hs.shape[1]}")
    herm = np.max(np.abs(hs - np.conj(np.swapaxes(hs, 1, 2))), axis=(1, 2))
    scale = np.maximum(1.0, np.max(np.abs(hs), axis=(1, 2)))
    bad = np.nonzero(herm > 1e-9 * scale)[0]
    if bad.size:
        raise ValueError(f"segment {int(bad[0])} Hamiltonian is not Hermitian")
    evals, evecs = np.linalg.eigh(0.5 * (hs + np.conj(np.swapaxes(hs, 1, 2))))
    out = kernels.apply_segments(evals, evecs, ts, psi, backend=backend)
    n_in, n_out = np.linalg.norm(psi), np.linalg.norm(out)
    if abs(n_out - n_in) > norm_tol * max(1.0, n_in):
        raise IntegrationError(f"norm drift {abs(n_out - n_in):.3g} exceeds {norm_tol:g}")
    return out
