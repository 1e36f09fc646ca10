"""Hot inner loops, each with a numba and a numpy implementation.

Public entry points dispatch on :data:`ereem_lab._accel.USE_NUMBA` unless a
``backend`` is passed explicitly.  Both implementations take and return the
same array layouts; results agree to round-off (tested).
"""
from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit, prange

__all__ = ["drive_steps", "apply_segments", "BACKENDS"]

BACKENDS = ("numba", "numpy")


# --------------------------------------------------------------------------
# driven evolution: symmetric split step with midpoint-sampled drive
# --------------------------------------------------------------------------

def _drive_steps_numpy(psi, t0, dt, nsteps, half, sxv, sxw, amps, omegas, phases):
    psi = np.array(psi, dtype=np.complex128, copy=True)
    t0 = np.asarray(t0, dtype=np.float64)
    sxvh = sxv.conj().T
    # fold the half steps on either side of the drive kick into the Sx eigenbasis
    left = sxvh @ half
    right = half @ sxv
    mid = sxvh @ half @ half @ sxv
    x = left @ psi
    for s in range(nsteps):
        tm = t0 + (s + 0.5) * dt
        c = np.zeros_like(tm)
        for a, w, ph in zip(amps, omegas, phases):
            c += a * np.cos(w * tm + ph)
        x = np.exp(-1j * dt * np.multiply.outer(sxw, c)) * x
        if s + 1 < nsteps:
            x = mid @ x
    return right @ x


@njit(parallel=True, fastmath=False)
def _drive_steps_numba(psi, t0, dt, nsteps, half, sxv, sxw, amps, omegas, phases):
    d, m = psi.shape
    out = np.empty((d, m), dtype=np.complex128)
    sxvh = np.ascontiguousarray(sxv.conj().T)
    left = sxvh @ half
    right = half @ sxv
    mid = sxvh @ half @ half @ sxv
    ntone = amps.shape[0]
    for j in prange(m):
        x = np.zeros(d, dtype=np.complex128)
        y = np.zeros(d, dtype=np.complex128)
        for r in range(d):
            acc = 0j
            for q in range(d):
                acc += left[r, q] * psi[q, j]
            x[r] = acc
        for s in range(nsteps):
            tm = t0[j] + (s + 0.5) * dt
            c = 0.0
            for q in range(ntone):
                c += amps[q] * np.cos(omegas[q] * tm + phases[q])
            for r in range(d):
                x[r] *= np.exp(-1j * dt * sxw[r] * c)
            if s + 1 < nsteps:
                for r in range(d):
                    acc = 0j
                    for q in range(d):
                        acc += mid[r, q] * x[q]
                    y[r] = acc
                for r in range(d):
                    x[r] = y[r]
        for r in range(d):
            acc = 0j
            for q in range(d):
                acc += right[r, q] * x[q]
            out[r, j] = acc
    return out


def drive_steps(psi, t0, dt, nsteps, half, sxv, sxw, amps, omegas, phases, backend=None):
    """Propagate state columns through a cosine-driven interval.

    Each of the ``nsteps`` steps of length ``dt`` is
    ``half · exp(-i c(t_mid) Sx dt) · half`` where ``half = exp(-i H0 dt/2)``
    and ``c(t) = sum_k amps[k] cos(omegas[k] t + phases[k])``.  Column ``j`` of
    ``psi`` starts at absolute time ``t0[j]`` so the carrier phase stays
    continuous across a pulse sequence.

    ``sxv``/``sxw`` are the eigenvectors/eigenvalues of the drive operator.
    """
    psi = np.ascontiguousarray(psi, dtype=np.complex128)
    t0 = np.ascontiguousarray(np.broadcast_to(np.asarray(t0, dtype=np.float64), (psi.shape[1],)))
    args = (
        psi,
        t0,
        float(dt),
        int(nsteps),
        np.ascontiguousarray(half, dtype=np.complex128),
        np.ascontiguousarray(sxv, dtype=np.complex128),
        np.ascontiguousarray(sxw, dtype=np.float64),
        np.ascontiguousarray(amps, dtype=np.float64),
        np.ascontiguousarray(omegas, dtype=np.float64),
        np.ascontiguousarray(phases, dtype=np.float64),
    )
    if int(nsteps) <= 0:
        return psi.copy()
    if _pick(backend) == "numba":
        return _drive_steps_numba(*args)
    return _drive_steps_numpy(*args)


# --------------------------------------------------------------------------
# piecewise-constant propagation from precomputed eigensystems
# --------------------------------------------------------------------------

def _apply_segments_numpy(evals, evecs, durations, psi):
    out = np.array(psi, dtype=np.complex128, copy=True)
    for k in range(durations.shape[0]):
        v = evecs[k]
        out = v @ (np.exp(-1j * evals[k] * durations[k]) * (v.conj().T @ out))
    return out


@njit(fastmath=False)
def _apply_segments_numba(evals, evecs, durations, psi):
    d = psi.shape[0]
    out = psi.copy()
    tmp = np.empty(d, dtype=np.complex128)
    for k in range(durations.shape[0]):
        for r in range(d):
            acc = 0j
            for q in range(d):
                acc += np.conj(evecs[k, q, r]) * out[q]
            tmp[r] = acc * np.exp(-1j * evals[k, r] * durations[k])
        for r in range(d):
            acc = 0j
            for q in range(d):
                acc += evecs[k, r, q] * tmp[q]
            out[r] = acc
    return out


def apply_segments(evals, evecs, durations, psi, backend=None):
    """Apply ``prod_k V_k exp(-i E_k t_k) V_k^†`` to ``psi`` (first segment first)."""
    args = (
        np.ascontiguousarray(evals, dtype=np.float64),
        np.ascontiguousarray(evecs, dtype=np.complex128),
        np.ascontiguousarray(durations, dtype=np.float64),
        np.ascontiguousarray(psi, dtype=np.complex128),
    )
    if _pick(backend) == "numba":
        return _apply_segments_numba(*args)
    return _apply_segments_numpy(*args)


def _pick(backend):
    if backend is None:
        return "numba" if _accel.USE_NUMBA else "numpy"
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if backend == "numba" and not _accel.HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend
