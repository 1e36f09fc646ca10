"""Plot-ready dataset bundles, one directory per figure id.

Every bundle is written to ``<out>/<id>/`` and contains one or more CSV
tables, a ``summary.json`` with the headline numbers and a ``manifest.json``
hashing every file.  Nothing here depends on wall-clock time, so two runs with
the same inputs produce byte-identical files.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import approximation_error_scan
from .fitting import refit_transverse_hyperfine
from .io import write_csv, write_json, write_manifest
from .nv_model import (
    TWO_PI,
    BiasField,
    ModelValidityWarning,
    SpeciesConstants,
    effective_field_decomposition,
    omega0,
)
from .pulse_sim import PulseSpec, crosscheck_envelope, simulate_ramsey_trace
from .ramsey_analytic import Protocol, envelope, envelope_properties, power_spectrum, protocol_signal, spectrum_peaks
from .sensitivity import (
    SensitivityParams,
    chi_min_map,
    modulated_optimum,
    optimal_evolution_time,
    relative_inverse_sensitivity,
    sensitivity_map,
    shot_noise_sensitivity,
)

__all__ = ["FIGURE_IDS", "FigureBundle", "UnknownFigureError", "reproduce_figure"]

FIGURE_IDS = ("2c", "2d", "3b", "3c", "4a", "4b", "4c", "5a", "5b", "5c", "S1", "S3", "S5", "S6")

# Beat-frequency measurement used for the transverse-hyperfine refit curves.
REFIT_POINT = {"B_G": 90.08, "theta_deg": 25.72, "omega0_MHz": 0.2736, "omega0_stderr_MHz": 0.0008}
FIELD_SERIES_G = (40.0, 65.0, 90.0, 115.0, 140.0)
CROSSCHECK_THETAS_DEG = (5.0, 10.0, 20.0, 30.0, 40.0)


class UnknownFigureError(ValueError):
    pass


@dataclass
class FigureBundle:
    figure_id: str
    directory: Path
    files: list = dc_field(default_factory=list)
    summary: dict = dc_field(default_factory=dict)

    @property
    def manifest(self) -> Path:
        return self.directory / "manifest.json"


class _Writer:
    def __init__(self, root: Path, fig_id: str, c: SpeciesConstants):
        self.dir = Path(root) / fig_id
        self.fig_id = fig_id
        self.c = c
        self.files: list[Path] = []

    def csv(self, name, columns, *, units, meta=None):
        m = {"figure": self.fig_id, "species": self.c.species}
        m.update(meta or {})
        self.files.append(write_csv(self.dir / name, columns, meta=m, units=units))

    def finish(self, summary: dict) -> FigureBundle:
        summary = {"figure": self.fig_id, "species": self.c.species, **summary}
        self.files.append(write_json(self.dir / "summary.json", summary))
        write_manifest(self.dir, self.files, extra={"figure": self.fig_id, "code_version": __version__})
        return FigureBundle(self.fig_id, self.dir, list(self.files), summary)


def _decomposition(c, B, theta_deg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ModelValidityWarning)
        return effective_field_decomposition(c, BiasField.from_degrees(B, theta_deg))


def _time_trace(c, B, theta_deg, protocol, tau):
    d = _decomposition(c, B, theta_deg)
    pop = protocol_signal(d, protocol, tau)
    chi = envelope(d, protocol, tau)
    return d, pop, chi


def _refit_A_perp(c) -> float:
    p = REFIT_POINT
    r = refit_transverse_hyperfine(p["B_G"], [math.radians(p["theta_deg"])], [TWO_PI * p["omega0_MHz"]], c,
                                   sigma=TWO_PI * p["omega0_stderr_MHz"])
    return r.A_perp


# --------------------------------------------------------------------------
# individual bundles
# --------------------------------------------------------------------------

def _fig_2c(w: _Writer, c, **_):
    B, th = 100.0, 15.0
    tau = np.linspace(0.0, 20.0, 2001)
    d, pop, chi = _time_trace(c, B, th, Protocol.SQ_PLUS, tau)
    w.csv("trace.csv", {"tau_us": tau, "population": pop, "envelope": chi,
                        "envelope_upper": 0.5 + 0.5 * chi, "envelope_lower": 0.5 - 0.5 * chi},
          units={"tau_us": "us", "population": "probability", "envelope": "1",
                 "envelope_upper": "probability", "envelope_lower": "probability"},
          meta={"B_G": B, "theta_deg": th, "protocol": "SQ+"})
    props = envelope_properties(d, Protocol.SQ_PLUS)
    return {"B_G": B, "theta_deg": th, "chi_min": props.chi_min,
            "omega0_MHz": props.beat_omega0 / TWO_PI, "beat_period_us": props.period}


def _fig_2d(w: _Writer, c, **_):
    B, th = 100.0, 15.0
    tau = np.linspace(0.0, 50.0, 5001)
    d, pop, _ = _time_trace(c, B, th, Protocol.SQ_PLUS, tau)
    freq, power = power_spectrum(tau, pop)
    keep = freq <= 5.0
    power = power / power.max()
    w.csv("spectrum.csv", {"frequency_MHz": freq[keep], "power": power[keep]},
          units={"frequency_MHz": "MHz", "power": "normalised"},
          meta={"B_G": B, "theta_deg": th, "protocol": "SQ+", "window": "hann"})
    peaks, heights = spectrum_peaks(freq, power, count=2)
    w0 = d.omega_ms[0] / TWO_PI
    w1 = d.omega_ms[1] / TWO_PI
    predicted = np.array([(w1 - w0) / 2, (w1 + w0) / 2])
    w.csv("peaks.csv", {"peak_MHz": peaks, "predicted_MHz": predicted, "height": heights},
          units={"peak_MHz": "MHz", "predicted_MHz": "MHz", "height": "normalised"})
    return {"peaks_MHz": peaks, "peak_splitting_MHz": float(peaks[1] - peaks[0]) if peaks.size == 2 else math.nan,
            "omega0_MHz": w0}


def _fig_3b(w: _Writer, c, **_):
    theta = np.linspace(0.0, 45.0, 91)
    a_refit = _refit_A_perp(c)
    cr = c.with_(A_perp=a_refit)
    cols = {"theta_deg": theta}
    units = {"theta_deg": "deg"}
    for B in FIELD_SERIES_G:
        tag = f"{B:g}G"
        cols[f"omega0_MHz_{tag}"] = np.array([omega0(c, BiasField.from_degrees(B, t)) for t in theta]) / TWO_PI
        cols[f"omega0_refit_MHz_{tag}"] = np.array([omega0(cr, BiasField.from_degrees(B, t)) for t in theta]) / TWO_PI
        units[f"omega0_MHz_{tag}"] = units[f"omega0_refit_MHz_{tag}"] = "MHz"
    w.csv("omega0_vs_theta.csv", cols, units=units,
          meta={"A_perp_MHz": c.A_perp, "A_perp_refit_MHz": a_refit})
    p = REFIT_POINT
    pred = omega0(c, BiasField.from_degrees(p["B_G"], p["theta_deg"])) / TWO_PI
    return {"A_perp_MHz": c.A_perp, "A_perp_refit_MHz": a_refit, "reference_point": p,
            "predicted_omega0_MHz": pred,
            "relative_discrepancy_pct": 100.0 * (p["omega0_MHz"] - pred) / p["omega0_MHz"]}


def _fig_3c(w: _Writer, c, **_):
    theta = np.linspace(0.0, 45.0, 91)
    cols = {"theta_deg": theta}
    units = {"theta_deg": "deg"}
    for B in FIELD_SERIES_G:
        cols[f"chi_min_{B:g}G"] = np.array([envelope_properties(_decomposition(c, B, t), Protocol.SQ_PLUS).chi_min
                                            for t in theta])
        units[f"chi_min_{B:g}G"] = "1"
    w.csv("chi_min_vs_theta.csv", cols, units=units, meta={"protocol": "SQ+"})
    return {"chi_min_90G_10deg": envelope_properties(_decomposition(c, 90.0, 10.0), Protocol.SQ_PLUS).chi_min}


def _fig_4a(w: _Writer, c, **_):
    sp = SensitivityParams(gamma_e=abs(c.gamma_e))
    tau = np.linspace(0.01, 20.0, 2000)
    eta = shot_noise_sensitivity(sp, tau)
    w.csv("inverse_sensitivity.csv", {"tau_us": tau, "inverse_eta": 1.0 / eta},
          units={"tau_us": "us", "inverse_eta": "1/(G*sqrt(us))"},
          meta={"T_D_us": sp.T_D, "T2_star_us": sp.T2_star, "p": sp.p, "C": sp.C, "N": sp.N})
    opt = optimal_evolution_time(sp)
    return {"tau_opt_us": opt.tau, "inverse_eta_opt": opt.inverse, "eta_opt": opt.eta}


def _fig_4b(w: _Writer, c, **_):
    sp = SensitivityParams(gamma_e=abs(c.gamma_e))
    ref = optimal_evolution_time(sp)
    tau = np.linspace(0.01, 20.0, 2000)
    cols = {"tau_us": tau}
    units = {"tau_us": "us"}
    markers = {"theta_deg": [], "tau_adjusted_us": [], "ratio": []}
    for th in (10.0, 20.0):
        d = _decomposition(c, 100.0, th)
        cols[f"ratio_{th:g}deg"] = relative_inverse_sensitivity(sp, d, "SQ+", tau, ref.tau)
        units[f"ratio_{th:g}deg"] = "1"
        opt = modulated_optimum(sp, d, "SQ+")
        markers["theta_deg"].append(th)
        markers["tau_adjusted_us"].append(opt.tau)
        markers["ratio"].append(float(relative_inverse_sensitivity(sp, d, "SQ+", np.array([opt.tau]), ref.tau)[0]))
    w.csv("relative_inverse_sensitivity.csv", cols, units=units, meta={"B_G": 100.0, "tau_opt_us": ref.tau})
    w.csv("adjusted_optima.csv", markers, units={"theta_deg": "deg", "tau_adjusted_us": "us", "ratio": "1"})
    return {"tau_opt_us": ref.tau, "adjusted": markers}


def _map_bundle(w: _Writer, c, theta_deg, name):
    sp = SensitivityParams(gamma_e=abs(c.gamma_e))
    tau = np.linspace(0.1, 20.0, 200)
    B = np.linspace(2.0, 200.0, 100)
    g = sensitivity_map(sp, c, "SQ+", theta_deg, B_grid=B, tau_grid=tau)
    tt, bb = np.meshgrid(g.x, g.y, indexing="ij")
    w.csv(name, {"tau_us": tt.ravel(), "B_G": bb.ravel(), "ratio": g.values.ravel()},
          units={"tau_us": "us", "B_G": "G", "ratio": "1"}, meta={"theta_deg": theta_deg})
    w.csv(name.replace(".csv", "_adjusted.csv"),
          {"B_G": g.y, "tau_adjusted_us": g.annotations["tau_opt_adjusted"],
           "ratio": g.annotations["ratio_at_adjusted"]},
          units={"B_G": "G", "tau_adjusted_us": "us", "ratio": "1"}, meta={"theta_deg": theta_deg})
    return {"theta_deg": theta_deg, "tau_opt_us": g.annotations["tau_opt"],
            "min_ratio_at_adjusted": float(np.min(g.annotations["ratio_at_adjusted"]))}


def _fig_4c(w: _Writer, c, **_):
    return _map_bundle(w, c, 10.0, "map_theta10.csv")


def _fig_5a(w: _Writer, c, **_):
    B, th = 50.0, 35.0
    tau = np.linspace(0.0, 10.0, 2001)
    cols = {"tau_us": tau}
    summary = {"B_G": B, "theta_deg": th}
    for proto in (Protocol.SQ_PLUS, Protocol.DQ):
        d, pop, chi = _time_trace(c, B, th, proto, tau)
        key = "sq" if proto is Protocol.SQ_PLUS else "dq"
        cols[f"population_{key}"] = pop
        cols[f"envelope_{key}"] = chi
        summary[f"chi_min_{key}"] = envelope_properties(d, proto).chi_min
    w.csv("traces.csv", cols, units={k: ("us" if k == "tau_us" else "1") for k in cols},
          meta={"B_G": B, "theta_deg": th})
    return summary


def _fig_5b(w: _Writer, c, **_):
    B, th = 50.0, 35.0
    tau = np.linspace(0.0, 50.0, 5001)
    cols = {}
    summary = {"B_G": B, "theta_deg": th}
    for proto in (Protocol.SQ_PLUS, Protocol.DQ):
        d, pop, _ = _time_trace(c, B, th, proto, tau)
        freq, power = power_spectrum(tau, pop)
        keep = freq <= 5.0
        key = "sq" if proto is Protocol.SQ_PLUS else "dq"
        cols["frequency_MHz"] = freq[keep]
        cols[f"power_{key}"] = power[keep] / power.max()
        summary[f"peaks_{key}_MHz"] = spectrum_peaks(freq, power, count=2)[0]
        summary[f"Phi_{key}_rad"] = envelope_properties(d, proto).Phi
    w.csv("spectra.csv", cols, units={"frequency_MHz": "MHz", "power_sq": "normalised", "power_dq": "normalised"},
          meta={"B_G": B, "theta_deg": th})
    d = _decomposition(c, B, th)
    ms = [-1, 0, 1]
    vec = np.array([d.total_field(m) for m in ms])
    w.csv("effective_fields.csv", {"ms": np.array(ms), "beta_perp_G": vec[:, 0], "beta_par_G": vec[:, 1],
                                   "angle_rad": np.array([d.phi_ms[m] for m in ms])},
          units={"ms": "1", "beta_perp_G": "G", "beta_par_G": "G", "angle_rad": "rad"},
          meta={"frame": "spin-independent field along +par"})
    return summary


def _fig_5c(w: _Writer, c, **_):
    summary = {}
    for proto, key in ((Protocol.SQ_PLUS, "sq"), (Protocol.DQ, "dq")):
        g = chi_min_map(c, proto, B_grid=np.linspace(1.0, 200.0, 200), theta_grid_deg=np.linspace(0.0, 45.0, 91),
                        levels=())
        bb, tt = np.meshgrid(g.x, g.y, indexing="ij")
        w.csv(f"chi_min_{key}.csv", {"B_G": bb.ravel(), "theta_deg": tt.ravel(), "chi_min": g.values.ravel()},
              units={"B_G": "G", "theta_deg": "deg", "chi_min": "1"}, meta={"protocol": proto.value})
        summary[f"{key}_min"] = float(g.values.min())
    return summary


def _fig_S1(w: _Writer, c, **_):
    scan = approximation_error_scan(c, 90.0, np.linspace(0.0, 45.0, 91))
    cols = {k: v for k, v in scan.items() if k != "max_pct_dev"}
    w.csv("deviation.csv", cols,
          units={"theta_deg": "deg", "delta_approx_MHz": "MHz", "delta_exact_MHz": "MHz",
                 "abs_dev_MHz": "MHz", "pct_dev": "%"},
          meta={"B_G": 90.0})
    return {"B_G": 90.0, "max_pct_dev": scan["max_pct_dev"]}


def _fig_S3(w: _Writer, c, *, backend=None, **_):
    rows: dict[str, list] = {}
    spec = PulseSpec()
    for B in FIELD_SERIES_G:
        for th in CROSSCHECK_THETAS_DEG:
            f = BiasField.from_degrees(B, th)
            trace = simulate_ramsey_trace(c, f, "SQ+", spec=spec, backend=backend)
            row = crosscheck_envelope(trace).as_row()
            row.pop("protocol")
            for k, v in row.items():
                rows.setdefault(k, []).append(v)
    units = {k: ("G" if k == "B_G" else "deg" if k == "theta_deg" else "%" if k.endswith("pct")
                 else "MHz" if k.endswith("MHz") else "1") for k in rows}
    w.csv("crosscheck.csv", {k: np.asarray(v, dtype=float) for k, v in rows.items()}, units=units,
          meta={"protocol": "SQ+", "rabi_MHz": spec.rabi_frequency})
    dev = np.abs(np.asarray(rows["omega0_dev_pct"]))
    return {"max_abs_omega0_dev_pct": float(dev.max()), "count_over_1pct": int(np.sum(dev > 1.0))}


def _fig_S5(w: _Writer, c, **_):
    return {"maps": [_map_bundle(w, c, 20.0, "map_theta20.csv"),
                     _map_bundle(w, c, 54.7, "map_theta54.7.csv")]}


def _fig_S6(w: _Writer, c, **_):
    g = chi_min_map(c, Protocol.DQ, B_grid=np.linspace(4.0, 800.0, 200), theta_grid_deg=np.linspace(0.0, 90.0, 91),
                    levels=(0.9, 0.5))
    bb, tt = np.meshgrid(g.x, g.y, indexing="ij")
    w.csv("chi_min_dq.csv", {"B_G": bb.ravel(), "theta_deg": tt.ravel(), "chi_min": g.values.ravel()},
          units={"B_G": "G", "theta_deg": "deg", "chi_min": "1"},
          meta={"protocol": "DQ", "beyond_perturbative": True})
    for level, segments in g.contours.items():
        ids, xs, ys = [], [], []
        for k, seg in enumerate(segments):
            ids.extend([k] * len(seg))
            xs.extend(seg[:, 0])
            ys.extend(seg[:, 1])
        w.csv(f"contour_{level:g}.csv", {"segment": np.asarray(ids, dtype=int), "B_G": np.asarray(xs),
                                         "theta_deg": np.asarray(ys)},
              units={"segment": "1", "B_G": "G", "theta_deg": "deg"}, meta={"level": level})
    return {"min": float(g.values.min()), "levels": list(g.contours)}


_BUILDERS = {
    "2c": _fig_2c, "2d": _fig_2d, "3b": _fig_3b, "3c": _fig_3c, "4a": _fig_4a, "4b": _fig_4b,
    "4c": _fig_4c, "5a": _fig_5a, "5b": _fig_5b, "5c": _fig_5c, "S1": _fig_S1, "S3": _fig_S3,
    "S5": _fig_S5, "S6": _fig_S6,
}


def reproduce_figure(fig_id: str, out, c: SpeciesConstants | None = None, *, backend=None) -> FigureBundle:
    """Compute and write the dataset bundle for ``fig_id``."""
    key = str(fig_id)
    match = {k.lower(): k for k in FIGURE_IDS}.get(key.lower())
    if match is None:
        raise UnknownFigureError(f"unsupported figure id {fig_id!r}; choose from {', '.join(FIGURE_IDS)}")
    c = c or SpeciesConstants.n15()
    w = _Writer(Path(out), match, c)
    summary = _BUILDERS[match](w, c, backend=backend)
    return w.finish(summary)
