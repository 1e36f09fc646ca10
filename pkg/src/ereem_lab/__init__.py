"""Ramsey envelope modulation in NV centres: model, simulation, fitting and calibration."""
from __future__ import annotations

__version__ = "0.1.0"

from .nv_model import BiasField, SpeciesConstants, effective_field_decomposition, omega0, species_constants
from .ramsey_analytic import Protocol, RamseyTrace, analytic_trace, envelope, envelope_properties

__all__ = [
    "__version__",
    "BiasField",
    "SpeciesConstants",
    "Protocol",
    "RamseyTrace",
    "analytic_trace",
    "effective_field_decomposition",
    "envelope",
    "envelope_properties",
    "omega0",
    "species_constants",
]
