"""Deterministic CSV/JSON emission, trace round-trips and output manifests.

CSV layout::

    # meta: key=value          (zero or more)
    # units: column=unit       (one per column with a unit)
    col_a,col_b
    0.0,0.25

Floats use the shortest round-trip representation, lines end in LF and every
file is written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .nv_model import BiasField, SpeciesConstants, species_constants
from .ramsey_analytic import RamseyTrace

__all__ = [
    "format_value",
    "write_text_atomic",
    "write_csv",
    "read_csv",
    "write_json",
    "read_json",
    "to_jsonable",
    "write_trace",
    "read_trace",
    "sha256_file",
    "write_manifest",
]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(v)


def write_text_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _meta_line(key, value) -> str:
    text = format_value(value) if not isinstance(value, (list, tuple, dict)) else json.dumps(
        to_jsonable(value), sort_keys=True, separators=(",", ":"))
    if "\n" in text or "\n" in str(key):
        raise ValueError("metadata must be single-line")
    return f"# meta: {key}={text}\n"


def write_csv(path, columns: dict, *, meta: dict | None = None, units: dict | None = None) -> Path:
    """Write equal-length columns (name -> sequence) with a metadata block."""
    names = list(columns)
    if not names:
        raise ValueError("no columns to write")
    cols = [np.asarray(columns[n]).reshape(-1) for n in names]
    length = cols[0].size
    if any(c.size != length for c in cols):
        raise ValueError("columns must have equal length")
    lines = [_meta_line(k, v) for k, v in (meta or {}).items()]
    for n in names:
        if units and n in units:
            lines.append(f"# units: {n}={units[n]}\n")
    lines.append(",".join(names) + "\n")
    for i in range(length):
        lines.append(",".join(format_value(c[i].item() if hasattr(c[i], "item") else c[i]) for c in cols) + "\n")
    return write_text_atomic(path, "".join(lines))


def _parse_cell(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return float(t)
    except ValueError:
        return t


def read_csv(path):
    """Return ``(meta, units, columns)``; numeric columns come back as float arrays."""
    meta, units, header, rows = {}, {}, None, []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                for prefix, target in (("meta:", meta), ("units:", units)):
                    if body.startswith(prefix):
                        key, _, value = body[len(prefix):].strip().partition("=")
                        target[key.strip()] = value.strip()
                continue
            if header is None:
                header = [h.strip() for h in line.split(",")]
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValueError(f"{path}: row has {len(cells)} cells, header has {len(header)}")
            rows.append([_parse_cell(c) for c in cells])
    if header is None:
        raise ValueError(f"{path}: no header row")
    columns = {}
    for k, name in enumerate(header):
        vals = [r[k] for r in rows]
        if all(isinstance(v, float) for v in vals):
            columns[name] = np.array(vals, dtype=float)
        else:
            columns[name] = vals
    return meta, units, columns


def to_jsonable(obj):
    """Numpy-aware conversion; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else format_value(x)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "as_dict"):
        return to_jsonable(obj.as_dict())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj) -> Path:
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    return write_text_atomic(path, text)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------

def _constants_meta(c: SpeciesConstants | None) -> dict:
    if c is None:
        return {}
    return {"species": c.species, "D_MHz": c.D, "gamma_e_MHz_per_G": c.gamma_e,
            "gamma_n_MHz_per_G": c.gamma_n, "A_perp_MHz": c.A_perp, "A_par_MHz": c.A_par,
            "Q_MHz": c.Q}


def trace_metadata(trace: RamseyTrace) -> dict:
    meta = {"protocol": trace.protocol, "source": trace.source}
    if trace.field is not None:
        meta["B_G"] = trace.field.B
        meta["theta_deg"] = trace.field.theta_deg
    meta.update(_constants_meta(trace.constants))
    if trace.initial:
        meta["initial_state"] = trace.initial
    meta.update({k: v for k, v in trace.meta.items()})
    return meta


def write_trace(path, trace: RamseyTrace, *, sidecar: bool | None = None, version: str = "") -> list[Path]:
    """CSV with ``tau_us,population``; a JSON sidecar for simulated traces."""
    path = Path(path)
    meta = trace_metadata(trace)
    out = [write_csv(path, {"tau_us": trace.tau, "population": trace.population}, meta=meta,
                     units={"tau_us": "us", "population": "probability"})]
    if sidecar or (sidecar is None and trace.drive is not None):
        side = {"metadata": meta, "drive": trace.drive or {}, "code_version": version}
        out.append(write_json(path.with_suffix(".json"), side))
    return out


def read_trace(path) -> RamseyTrace:
    """Load a trace written by :func:`write_trace` or any CSV with ``tau_us`` and a signal column."""
    meta, _, cols = read_csv(path)
    if "tau_us" not in cols:
        raise ValueError(f"{path}: missing tau_us column")
    for name in ("population", "signal"):
        if name in cols:
            pop = cols[name]
            break
    else:
        raise ValueError(f"{path}: needs a population or signal column")
    field = None
    if "B_G" in meta:
        field = BiasField.from_degrees(float(meta["B_G"]), float(meta.get("theta_deg", 0.0)))
    constants = None
    if "species" in meta:
        overrides = {}
        for key, attr in (("D_MHz", "D"), ("gamma_e_MHz_per_G", "gamma_e"), ("gamma_n_MHz_per_G", "gamma_n"),
                          ("A_perp_MHz", "A_perp"), ("A_par_MHz", "A_par"), ("Q_MHz", "Q")):
            if key in meta:
                overrides[attr] = float(meta[key])
        constants = species_constants(meta["species"], **overrides)
    return RamseyTrace(
        tau=np.asarray(cols["tau_us"], dtype=float),
        population=np.asarray(pop, dtype=float),
        protocol=meta.get("protocol", "SQ+"),
        constants=constants,
        field=field,
        initial=meta.get("initial_state", ""),
        source=meta.get("source", "file"),
    )


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, files, *, extra: dict | None = None, name: str = "manifest.json") -> Path:
    """List every emitted file (relative path, size, sha256) in sorted order."""
    out_dir = Path(out_dir)
    entries = []
    for f in sorted({Path(p).resolve() for p in files}):
        entries.append({
            "path": f.relative_to(out_dir.resolve()).as_posix(),
            "bytes": f.stat().st_size,
            "sha256": sha256_file(f),
        })
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    return write_json(out_dir / name, doc)
