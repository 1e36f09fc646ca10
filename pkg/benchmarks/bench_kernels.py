"""Time the numba and numpy implementations of the hot kernels.

Run:  python3 benchmarks/bench_kernels.py [--repeat 5] [--columns 512]

The driven-pulse kernel is timed on the real second-pulse workload of an SQ
trace (one state column per free-evolution time); the segment kernel on a
long chain of random Hermitian pieces.  Both backends see identical inputs and
the script checks that their outputs agree before reporting timings.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from ereem_lab import kernels
from ereem_lab._accel import HAS_NUMBA
from ereem_lab.nv_model import BiasField, SpeciesConstants
from ereem_lab.pulse_sim import PulseSpec, _build_drive, calibrate_pulse_duration
from ereem_lab.ramsey_analytic import Protocol


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def drive_case(columns: int):
    c = SpeciesConstants.n15()
    f = BiasField.from_degrees(90.0, 10.0)
    spec = PulseSpec()
    T = calibrate_pulse_duration(c, f, spec, "SQ+", backend="numpy")
    drive, _ = _build_drive(c, f, Protocol.SQ_PLUS, spec)
    rng = np.random.default_rng(1)
    psi = rng.normal(size=(c.dim, columns)) + 1j * rng.normal(size=(c.dim, columns))
    psi /= np.linalg.norm(psi, axis=0)
    t0 = T + np.linspace(0.0, 20.0, columns)
    nsteps = int(np.ceil(T / drive.dt_max))
    dt = T / nsteps
    half = drive.half_step(dt)

    def run(backend):
        return kernels.drive_steps(psi, t0, dt, nsteps, half, drive.sx_evecs, drive.sx_evals,
                                   drive.amps, drive.omegas, drive.phases, backend=backend)
    return run, f"drive_steps ({c.dim}x{columns}, {nsteps} steps)"


def segment_case(segments: int, dim: int = 6):
    rng = np.random.default_rng(2)
    evals = np.empty((segments, dim))
    evecs = np.empty((segments, dim, dim), dtype=np.complex128)
    for k in range(segments):
        a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        evals[k], evecs[k] = np.linalg.eigh(a + a.conj().T)
    durations = rng.uniform(0.0, 0.01, segments)
    psi = np.zeros(dim, dtype=np.complex128)
    psi[0] = 1.0

    def run(backend):
        return kernels.apply_segments(evals, evecs, durations, psi, backend=backend)
    return run, f"apply_segments ({segments} segments, dim {dim})"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--columns", type=int, default=512)
    p.add_argument("--segments", type=int, default=20000)
    args = p.parse_args(argv)
    if not HAS_NUMBA:
        print("numba is not installed; only the numpy path can be timed")
    print(f"{'kernel':<44}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for run, label in (drive_case(args.columns), segment_case(args.segments)):
        ref = run("numpy")
        t_np = _best(lambda: run("numpy"), args.repeat)
        if HAS_NUMBA:
            out = run("numba")  # first call compiles
            err = float(np.max(np.abs(out - ref)))
            if err > 1e-10:
                raise SystemExit(f"{label}: backends disagree by {err:.3g}")
            t_nb = _best(lambda: run("numba"), args.repeat)
            print(f"{label:<44}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{label:<44}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
