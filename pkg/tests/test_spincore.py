from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm as scipy_expm

from ereem_lab.spincore import (
    IntegrationError,
    expm_hermitian,
    hermitian_eigensystem,
    max_hermiticity_error,
    max_unitarity_error,
    propagate_piecewise,
    spin_operators,
    tensor_product,
)


def _random_hermitian(rng, n, scale=1.0):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * (a + a.conj().T) / 2


@pytest.mark.parametrize("s", [0.5, 1])
def test_commutation_relations(s):
    op = spin_operators(s)
    comm = lambda a, b: a @ b - b @ a  # noqa: E731
    assert np.max(np.abs(comm(op.sx, op.sy) - 1j * op.sz)) < 1e-12
    assert np.max(np.abs(comm(op.sy, op.sz) - 1j * op.sx)) < 1e-12
    assert np.max(np.abs(comm(op.sz, op.sx) - 1j * op.sy)) < 1e-12


def test_spin_one_sz_descending():
    assert np.array_equal(spin_operators(1).sz, np.diag([1.0, 0.0, -1.0]))


def test_spin_half_sx():
    sx = spin_operators(0.5).sx
    assert np.allclose(np.diag(sx), 0.0)
    assert sx[0, 1] == pytest.approx(0.5) and sx[1, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("s", [0, 1.5, 2, -1])
def test_unsupported_spin_rejected(s):
    with pytest.raises(ValueError, match="spin"):
        spin_operators(s)


def test_tensor_dimensions_and_identity():
    assert tensor_product(np.eye(3), np.eye(2)).shape == (6, 6)
    assert np.array_equal(tensor_product(np.eye(3), np.eye(2)), np.eye(6))


def test_tensor_of_diagonals():
    t = tensor_product(spin_operators(1).sz, spin_operators(0.5).sz)
    assert np.allclose(np.diag(t), [0.5, -0.5, 0, 0, -0.5, 0.5])
    assert np.count_nonzero(t - np.diag(np.diag(t))) == 0


def test_tensor_rejects_non_square():
    with pytest.raises(ValueError):
        tensor_product(np.ones((2, 3)), np.eye(2))


def test_tensor_associative(rng):
    # dyadic entries keep every product exact, so equality is bitwise
    a, b, c = (rng.integers(-8, 8, size=(k, k)) / 4 + 1j * rng.integers(-8, 8, size=(k, k)) / 8
               for k in (2, 3, 2))
    assert np.array_equal(tensor_product(tensor_product(a, b), c), tensor_product(a, tensor_product(b, c)))


def test_eigensystem_examples():
    w, _ = hermitian_eigensystem(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(w, [1, 2, 3])
    w, _ = hermitian_eigensystem(spin_operators(0.5).sx)
    assert np.allclose(w, [-0.5, 0.5])


@given(st.integers(0, 2 ** 32 - 1))
def test_eigensystem_reconstruction(seed):
    h = _random_hermitian(np.random.default_rng(seed), 6)
    w, v = hermitian_eigensystem(h)
    assert np.all(np.diff(w) >= 0)
    assert np.max(np.abs(v @ np.diag(w) @ v.conj().T - h)) < 1e-10 * np.max(np.abs(h))


def test_eigensystem_rejects_non_hermitian():
    h = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="Hermitian"):
        hermitian_eigensystem(h)
    hermitian_eigensystem(h, tol=10.0)


def test_zero_hamiltonian_identity(rng):
    psi = rng.normal(size=6) + 1j * rng.normal(size=6)
    psi /= np.linalg.norm(psi)
    out = propagate_piecewise([(np.zeros((6, 6)), 3.7)], psi)
    assert np.allclose(out, psi, atol=1e-15)


def test_single_segment_matches_expm(rng):
    h = _random_hermitian(rng, 6)
    psi = np.zeros(6, complex)
    psi[0] = 1
    w, v = np.linalg.eigh(h)
    ref = v @ (np.exp(-1j * w * 0.8) * (v.conj().T @ psi))
    assert np.max(np.abs(propagate_piecewise([(h, 0.8)], psi) - ref)) < 1e-12
    assert np.max(np.abs(expm_hermitian(h, 0.8) @ psi - ref)) < 1e-12
    assert np.max(np.abs(expm_hermitian(h, 0.8) - scipy_expm(-0.8j * h))) < 1e-12


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_norm_preserved_over_many_segments(rng, backend):
    segs = [(_random_hermitian(rng, 6), float(t)) for t in rng.uniform(0, 0.1, 10_000)]
    psi = np.zeros(6, complex)
    psi[2] = 1
    out = propagate_piecewise(segs, psi, backend=backend)
    assert abs(np.linalg.norm(out) - 1) < 1e-10


def test_right_to_left_order(rng):
    h1, h2 = _random_hermitian(rng, 3), _random_hermitian(rng, 3)
    psi = np.array([1, 0, 0], complex)
    out = propagate_piecewise([(h1, 0.3), (h2, 0.5)], psi)
    ref = expm_hermitian(h2, 0.5) @ expm_hermitian(h1, 0.3) @ psi
    assert np.allclose(out, ref, atol=1e-12)


def test_negative_duration_rejected():
    with pytest.raises(ValueError):
        propagate_piecewise([(np.eye(2), -1.0)], np.array([1, 0], complex))


def test_norm_drift_reported(monkeypatch):
    from ereem_lab import kernels

    monkeypatch.setattr(kernels, "apply_segments", lambda *a, **k: 1.001 * a[3])
    with pytest.raises(IntegrationError, match="norm drift"):
        propagate_piecewise([(np.eye(2), 1.0)], np.array([1.0, 0.0], complex))


def test_diagnostics(rng):
    h = _random_hermitian(rng, 4)
    assert max_hermiticity_error(h) < 1e-15
    assert max_unitarity_error(expm_hermitian(h, 2.0)) < 1e-12
