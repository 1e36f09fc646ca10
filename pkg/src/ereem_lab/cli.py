"""Batch command-line front end.

Each subcommand reads an optional JSON config (validated against a versioned
schema), writes its datasets into ``--out`` and finishes with a
``manifest.json`` listing every emitted file with its sha256.

Exit status: 0 success, 2 bad config or arguments, 3 numerical failure,
4 file-system or input-file error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__

log = logging.getLogger("ereem_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CONFIG_VERSION = 1
COMMANDS = ("simulate", "fit", "map", "calibrate", "constants", "crosscheck", "reproduce-figure")


class ConfigError(ValueError):
    pass


class InputFileError(OSError):
    pass


# --------------------------------------------------------------------------
# schema
# --------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_GRID = _obj({"start": _NUM, "stop": _NUM, "points": {"type": "integer", "minimum": 2, "maximum": 100000}},
             ["start", "stop", "points"])
_FIELD = _obj({"B": _POS, "theta_deg": {"type": "number", "minimum": 0, "maximum": 180}}, ["B", "theta_deg"])
_PROTOCOL = {"type": "string", "enum": ["SQ", "SQ+", "SQ-", "DQ", "sq", "sq+", "sq-", "dq"]}
_CONSTANTS = _obj({k: _NUM for k in ("D", "gamma_e", "gamma_n", "A_perp", "A_par", "Q")})

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ereem-lab run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "command": {"type": "string", "enum": list(COMMANDS)},
        "species": {"type": "string", "enum": ["n15", "n14", "N15", "N14"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "constants": _CONSTANTS,
        "field": _FIELD,
        "protocol": _PROTOCOL,
        "simulate": _obj({
            "source": {"enum": ["pulse_sim", "analytic"]},
            "tau_us": _GRID,
            "pulse": _obj({"rabi_MHz": _POS, "duration_us": _POS, "phase_rad": _NUM,
                           "steps_per_period": {"type": "integer", "minimum": 8}}),
            "initial_state": {"type": "string"},
            "noise_sigma": {"type": "number", "minimum": 0},
        }),
        "fit": _obj({
            "input": {"type": "string"},
            "model": {"enum": ["two_tone", "four_tone"]},
            "bootstrap": {"type": "integer", "minimum": 0},
            "fixed": _obj({"T2_star": {"type": ["number", "string"]}, "p": _POS}),
            "detunings_MHz": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        }),
        "map": _obj({
            "kind": {"enum": ["chi_min", "sensitivity"]},
            "B_G": _GRID,
            "theta_deg": {"oneOf": [_GRID, _NUM]},
            "tau_us": _GRID,
            "levels": {"type": "array", "items": _NUM},
            "T_D_us": _POS, "T2_star_us": _POS, "stretch_p": _POS,
        }),
        "calibrate": _obj({
            "mode": {"enum": ["field", "center", "scan"]},
            "delta_aligned_MHz": _POS,
            "delta_misaligned_MHz": {"type": "number", "minimum": 0},
            "sigma_aligned_MHz": {"type": "number", "minimum": 0},
            "sigma_misaligned_MHz": {"type": "number", "minimum": 0},
            "odmr": {"type": "string"},
            "curve": {"type": "string"},
            "B": _POS,
            "theta_deg": _GRID,
        }),
        "crosscheck": _obj({
            "B_G": {"type": "array", "items": _POS, "minItems": 1},
            "theta_deg": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 90}, "minItems": 1},
            "rabi_MHz": _POS,
        }),
        "figures": {"type": "array", "items": {"type": "string"}, "minItems": 1},
    },
}


def _pointer(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            path = ".".join([*(str(p) for p in err.absolute_path), extra[0]])
    return path or "<root>"


def validate_config(cfg) -> dict:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field '{_pointer(e)}': {e.message}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(cfg)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _grid(spec, default):
    if spec is None:
        return default
    return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["points"]))


def _constants(cfg):
    from .nv_model import species_constants

    try:
        return species_constants(cfg.get("species", "n15"), **cfg.get("constants", {}))
    except ValueError as exc:
        raise ConfigError(f"config field 'constants': {exc}") from exc


def _field(cfg, default=(100.0, 15.0)):
    from .nv_model import BiasField

    f = cfg.get("field", {"B": default[0], "theta_deg": default[1]})
    return BiasField.from_degrees(float(f["B"]), float(f["theta_deg"]))


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def _finish(out: Path, files, extra=None) -> int:
    from .io import write_manifest

    write_manifest(out, files, extra={"code_version": __version__, **(extra or {})})
    return EXIT_OK


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(cfg, args) -> int:
    from .io import write_json, write_trace
    from .pulse_sim import PulseSpec, simulate_ramsey_trace
    from .ramsey_analytic import Protocol, RamseyTrace, analytic_trace, envelope_properties
    from .nv_model import TWO_PI, effective_field_decomposition

    c = _constants(cfg)
    f = _field(cfg)
    protocol = Protocol.parse(cfg.get("protocol", "SQ+"))
    sim = cfg.get("simulate", {})
    tau = _grid(sim.get("tau_us"), np.linspace(0.0, 20.0, 512))
    if sim.get("source", "pulse_sim") == "analytic":
        trace = analytic_trace(c, f, protocol, tau)
    else:
        p = sim.get("pulse", {})
        spec = PulseSpec(rabi_frequency=p.get("rabi_MHz", 20.0), phase=p.get("phase_rad", 0.0),
                         duration=p.get("duration_us"), steps_per_period=p.get("steps_per_period", 64))
        trace = simulate_ramsey_trace(c, f, protocol, tau, spec, sim.get("initial_state"))
    sigma = float(sim.get("noise_sigma", 0.0))
    if sigma > 0:
        rng = np.random.default_rng(args.seed)
        noisy = trace.population + rng.normal(0.0, sigma, trace.population.shape)
        trace = RamseyTrace(trace.tau, noisy, trace.protocol, trace.constants, trace.field, trace.initial,
                            trace.drive, trace.source, {"noise_sigma": sigma, "seed": args.seed})
    out = args.out
    files = write_trace(out / "trace.csv", trace, version=__version__)
    props = envelope_properties(effective_field_decomposition(c, f), protocol)
    files.append(write_json(out / "prediction.json", {
        "protocol": protocol.value, "B_G": f.B, "theta_deg": f.theta_deg,
        "chi_min": props.chi_min, "omega0_MHz": props.beat_omega0 / TWO_PI,
        "Phi_rad": props.Phi, "beat_period_us": props.period,
    }))
    log.info("wrote %d-point %s trace to %s", trace.tau.size, trace.source, out)
    return _finish(out, files, {"command": "simulate", "seed": args.seed})


def cmd_fit(cfg, args) -> int:
    from .fitting import bootstrap_confidence, fit_ereem_trace, fit_four_tone
    from .io import read_trace, write_csv, write_json
    from .nv_model import TWO_PI
    from .ramsey_analytic import ereem_fit_model

    opts = cfg.get("fit", {})
    src = args.input or opts.get("input")
    if not src:
        raise ConfigError("config field 'fit.input': a trace file is required (or pass it as an argument)")
    path = _resolve(args.config_dir, src) if not args.input else Path(src)
    try:
        trace = read_trace(path)
    except FileNotFoundError:
        raise
    except (ValueError, KeyError) as exc:
        raise InputFileError(f"{path}: {exc}") from exc
    fixed = dict(opts.get("fixed", {}))
    if "T2_star" in fixed:
        fixed["T2_star"] = float(fixed["T2_star"])
    out = args.out
    files = []
    if opts.get("model", "two_tone") == "four_tone":
        det = opts.get("detunings_MHz")
        if not det:
            raise ConfigError("config field 'fit.detunings_MHz': required for the four-tone model")
        res = fit_four_tone(trace, [TWO_PI * d for d in det])
        summary = res.as_dict()
        summary["omega0_MHz"] = float(res.params[2]) / TWO_PI
        summary["omega0_stderr_MHz"] = float(res.stderr[2]) / TWO_PI
        files.append(write_json(out / "fit.json", {"model": "four_tone", **summary}))
        return _finish(out, files, {"command": "fit", "seed": args.seed})
    res = fit_ereem_trace(trace, fixed=fixed or None)
    summary = {"model": "two_tone", **res.as_dict()}
    model = ereem_fit_model(res.fit.params, trace.tau)
    data = res.sign * trace.contrast
    files.append(write_csv(out / "fit_curve.csv",
                           {"tau_us": trace.tau, "signal": data, "model": model, "residual": data - model},
                           meta={"protocol": trace.protocol, "signal_sign": res.sign},
                           units={"tau_us": "us", "signal": "contrast", "model": "contrast", "residual": "contrast"}))
    n_boot = int(opts.get("bootstrap", 0))
    if n_boot:
        boot = bootstrap_confidence(trace, n_boot, seed=args.seed, base=res, workers=args.threads)
        summary["bootstrap"] = boot.as_dict()
        files.append(write_csv(out / "bootstrap_samples.csv",
                               {n: boot.samples[:, k] for k, n in enumerate(boot.names)},
                               meta={"seed": args.seed, "resamples": n_boot},
                               units={n: "" for n in boot.names}))
    files.append(write_json(out / "fit.json", summary))
    log.info("omega0 = %.6g ± %.2g MHz, chi_min = %.4g", res.omega0_MHz, res.omega0_stderr_MHz, res.chi_min)
    return _finish(out, files, {"command": "fit", "seed": args.seed})


def cmd_map(cfg, args) -> int:
    from .io import write_csv, write_json
    from .sensitivity import SensitivityParams, chi_min_map, sensitivity_map

    c = _constants(cfg)
    opts = cfg.get("map", {})
    kind = opts.get("kind", "chi_min")
    protocol = cfg.get("protocol", "SQ+")
    out = args.out
    files = []
    B = _grid(opts.get("B_G"), np.linspace(1.0, 200.0, 200))
    if kind == "chi_min":
        th = opts.get("theta_deg")
        if isinstance(th, (int, float)):
            raise ConfigError("config field 'map.theta_deg': the chi_min map needs a grid")
        g = chi_min_map(c, protocol, B, _grid(th, np.linspace(0.0, 45.0, 90)),
                        levels=tuple(opts.get("levels", (0.9, 0.5))))
        xs, ys = np.meshgrid(g.x, g.y, indexing="ij")
        files.append(write_csv(out / "map.csv", {"B_G": xs.ravel(), "theta_deg": ys.ravel(), "chi_min": g.values.ravel()},
                               meta=g.meta, units={"B_G": "G", "theta_deg": "deg", "chi_min": "1"}))
    else:
        th = opts.get("theta_deg", 10.0)
        if isinstance(th, dict):
            raise ConfigError("config field 'map.theta_deg': the sensitivity map needs a single angle")
        sp = SensitivityParams(T_D=opts.get("T_D_us", 5.0), T2_star=opts.get("T2_star_us", 5.0),
                               p=opts.get("stretch_p", 1.0), gamma_e=abs(c.gamma_e))
        g = sensitivity_map(sp, c, protocol, float(th), B, _grid(opts.get("tau_us"), None))
        xs, ys = np.meshgrid(g.x, g.y, indexing="ij")
        files.append(write_csv(out / "map.csv", {"tau_us": xs.ravel(), "B_G": ys.ravel(), "ratio": g.values.ravel()},
                               meta=g.meta, units={"tau_us": "us", "B_G": "G", "ratio": "1"}))
        files.append(write_csv(out / "adjusted_optima.csv",
                               {"B_G": g.y, "tau_adjusted_us": g.annotations["tau_opt_adjusted"],
                                "ratio": g.annotations["ratio_at_adjusted"]},
                               meta={"tau_opt_us": g.annotations["tau_opt"]},
                               units={"B_G": "G", "tau_adjusted_us": "us", "ratio": "1"}))
    for level, segs in g.contours.items():
        ids = np.concatenate([np.full(len(s), k) for k, s in enumerate(segs)]) if segs else np.zeros(0, int)
        pts = np.concatenate(segs) if segs else np.zeros((0, 2))
        files.append(write_csv(out / f"contour_{level:g}.csv",
                               {"segment": ids.astype(int), g.x_name: pts[:, 0], g.y_name: pts[:, 1]},
                               meta={"level": level}, units={"segment": "1", g.x_name: "", g.y_name: ""}))
    files.append(write_json(out / "summary.json", {"kind": g.kind, "min": float(np.min(g.values)),
                                                   "max": float(np.max(g.values)), **g.meta}))
    return _finish(out, files, {"command": "map"})


def cmd_calibrate(cfg, args) -> int:
    from .calibration import approximation_error_scan, estimate_field, mw_center_frequency
    from .io import read_csv, write_csv, write_json

    c = _constants(cfg)
    opts = cfg.get("calibrate", {})
    mode = opts.get("mode", "scan")
    out = args.out
    files = []
    if mode == "field":
        for key in ("delta_aligned_MHz", "delta_misaligned_MHz"):
            if key not in opts:
                raise ConfigError(f"config field 'calibrate.{key}': required for mode 'field'")
        try:
            est = estimate_field(opts["delta_aligned_MHz"], opts["delta_misaligned_MHz"], c,
                                 sigma_aligned=opts.get("sigma_aligned_MHz", 0.0),
                                 sigma_misaligned=opts.get("sigma_misaligned_MHz", 0.0))
        except ValueError as exc:
            raise ConfigError(f"config field 'calibrate.delta_misaligned_MHz': {exc}") from exc
        files.append(write_json(out / "field_estimate.json", est.as_dict()))
    elif mode == "scan":
        scan = approximation_error_scan(c, opts.get("B", 90.0), _grid(opts.get("theta_deg"), np.linspace(0, 45, 91)))
        cols = {k: v for k, v in scan.items() if k != "max_pct_dev"}
        files.append(write_csv(out / "deviation.csv", cols, meta={"B_G": opts.get("B", 90.0)},
                               units={"theta_deg": "deg", "delta_approx_MHz": "MHz", "delta_exact_MHz": "MHz",
                                      "abs_dev_MHz": "MHz", "pct_dev": "%"}))
        files.append(write_json(out / "summary.json", {"max_pct_dev": scan["max_pct_dev"]}))
    else:
        series = []
        for key in ("odmr", "curve"):
            if key not in opts:
                raise ConfigError(f"config field 'calibrate.{key}': required for mode 'center'")
            path = _resolve(args.config_dir, opts[key])
            try:
                _, _, cols = read_csv(path)
                series.append((np.asarray(cols["frequency_MHz"], float), np.asarray(cols["signal"], float)))
            except FileNotFoundError:
                raise
            except (KeyError, ValueError) as exc:
                raise InputFileError(f"{path}: needs numeric frequency_MHz and signal columns ({exc})") from exc
        cal = mw_center_frequency(*series[0], *series[1])
        files.append(write_json(out / "center_calibration.json", cal.as_dict()))
    return _finish(out, files, {"command": "calibrate", "mode": mode})


def cmd_constants(cfg, args) -> int:
    from .io import write_csv
    from .nv_model import constants_table

    c = _constants(cfg)
    rows = constants_table(c)
    width = max(len(k) for k, _, _ in rows)
    for key, value, unit in rows:
        text = f"{value:.6g}" if isinstance(value, float) else str(value)
        print(f"{key:<{width}}  {text} {unit}".rstrip())
    files = []
    if args.out_given:
        numeric = [r for r in rows if not isinstance(r[1], str)]  # species goes in the meta block
        files.append(write_csv(args.out / "constants.csv",
                               {"key": [r[0] for r in numeric], "value": [float(r[1]) for r in numeric],
                                "unit": [r[2] for r in numeric]},
                               meta={"species": c.species},
                               units={"key": "text", "value": "see unit column", "unit": "text"}))
        return _finish(args.out, files, {"command": "constants"})
    return EXIT_OK


def cmd_crosscheck(cfg, args) -> int:
    from .io import write_csv, write_json
    from .nv_model import BiasField
    from .pulse_sim import PulseSpec, crosscheck_envelope, simulate_ramsey_trace

    c = _constants(cfg)
    opts = cfg.get("crosscheck", {})
    Bs = opts.get("B_G", [40.0, 65.0, 90.0, 115.0, 140.0])
    ths = opts.get("theta_deg", [5.0, 10.0, 20.0, 30.0, 40.0])
    spec = PulseSpec(rabi_frequency=opts.get("rabi_MHz", 20.0))
    protocol = cfg.get("protocol", "SQ+")
    rows: dict[str, list] = {}
    for B in Bs:
        for th in ths:
            trace = simulate_ramsey_trace(c, BiasField.from_degrees(B, th), protocol, spec=spec)
            row = crosscheck_envelope(trace).as_row()
            row.pop("protocol")
            for k, v in row.items():
                rows.setdefault(k, []).append(v)
            log.info("B=%g G theta=%g deg: omega0 deviation %.3f%%", B, th, row["omega0_dev_pct"])
    out = args.out
    files = [write_csv(out / "crosscheck.csv", {k: np.asarray(v, float) for k, v in rows.items()},
                       meta={"protocol": protocol}, units={k: "" for k in rows})]
    dev = np.abs(np.asarray(rows["omega0_dev_pct"]))
    files.append(write_json(out / "summary.json", {"max_abs_omega0_dev_pct": float(dev.max()),
                                                   "count_over_1pct": int(np.sum(dev > 1.0)),
                                                   "configurations": int(dev.size)}))
    return _finish(out, files, {"command": "crosscheck"})


def cmd_reproduce(cfg, args) -> int:
    from .figures import FIGURE_IDS, UnknownFigureError, reproduce_figure

    ids = list(args.figures) or list(cfg.get("figures", []))
    if not ids:
        raise ConfigError("no figure id given")
    if any(i.lower() == "all" for i in ids):
        ids = list(FIGURE_IDS)
    c = _constants(cfg)
    for fig in ids:
        try:
            bundle = reproduce_figure(fig, args.out, c)
        except UnknownFigureError as exc:
            raise ConfigError(str(exc)) from exc
        log.info("figure %s: %d files in %s", bundle.figure_id, len(bundle.files), bundle.directory)
    return EXIT_OK


_HANDLERS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "map": cmd_map, "calibrate": cmd_calibrate,
    "constants": cmd_constants, "crosscheck": cmd_crosscheck, "reproduce-figure": cmd_reproduce,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=_seed, default=None, help="RNG seed (u64, default 0)")
    common.add_argument("--out", type=Path, default=None, help="output directory (default ./ereem_out)")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads/processes (default $EREEM_LAB_THREADS or 1)")
    common.add_argument("--species", choices=["n15", "n14"], default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ereem-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("simulate", parents=[common], help="simulate a Ramsey trace")
    f = sub.add_parser("fit", parents=[common], help="fit the two-tone (or four-tone) model to a trace CSV")
    f.add_argument("input", nargs="?", help="trace CSV (overrides fit.input)")
    sub.add_parser("map", parents=[common], help="chi_min or sensitivity map")
    sub.add_parser("calibrate", parents=[common], help="field estimate, approximation scan or carrier centring")
    sub.add_parser("constants", parents=[common], help="print the constants table")
    sub.add_parser("crosscheck", parents=[common], help="pulse simulation vs vector model grid")
    r = sub.add_parser("reproduce-figure", parents=[common], help="write figure dataset bundles")
    r.add_argument("figures", nargs="*", metavar="id", help="figure ids, or 'all'")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.config is not None:
            cfg = load_config(args.config)
            args.config_dir = args.config.resolve().parent
        else:
            cfg = {"version": CONFIG_VERSION}
            args.config_dir = Path.cwd()
        cfg = copy.deepcopy(cfg)
        if cfg.get("command") not in (None, args.command):
            raise ConfigError(f"config field 'command': '{cfg['command']}' does not match '{args.command}'")
        if args.species:
            cfg["species"] = args.species
        args.seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        args.out_given = args.out is not None
        args.out = args.out if args.out is not None else Path("ereem_out")
        if args.threads is None:
            args.threads = int(os.environ.get("EREEM_LAB_THREADS", "1") or 1)
        from ._accel import set_threads

        set_threads(args.threads)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return _HANDLERS[args.command](cfg, args)
    except (ConfigError, jsonschema.SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputFileError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _numerical_errors() as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _numerical_errors() -> tuple:
    from .calibration import CalibrationFailure
    from .fitting import BootstrapError, FitError, UnresolvedTonesError
    from .pulse_sim import CalibrationError, LabelingError
    from .spincore import IntegrationError

    return (FitError, BootstrapError, UnresolvedTonesError, CalibrationFailure, CalibrationError,
            LabelingError, IntegrationError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError)


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
