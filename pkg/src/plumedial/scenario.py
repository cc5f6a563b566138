"""Scenario files: a JSON document describing plume, optics, instrument and solver budgets.

Only ``schema_version`` and the ``dispersion`` block (``source``,
``release_rate``, ``wind``) are required; everything else falls back to the
reference values in :data:`DEFAULTS`.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from .dispersion import DispersionParams
from .measurement import AcquisitionConfig
from .optics import PhaseFunction
from .rte import ANNULUS, NARROW, Aperture, Detector, TimeBinning, direction_vector

REQUIRED = ("schema_version", "dispersion", "dispersion.source", "dispersion.release_rate", "dispersion.wind")

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "dispersion": {
        "source": [100.0, -60.0, 0.0],
        "release_rate": 1.25,
        "wind": [[0.0, 3.0, 0.0]],
        "wind_breaks": [],
        "width_knots": [3.0, 5.5, 8.0, 9.5, 12.0],
        "drift_knots": [2.0, 4.0, 7.0, 9.0, 10.0],
        "scatter_scale": 40.0,
        "plume_length": 120.0,
        "ambient_level": 0.0,
    },
    "optics": {
        "sigma_s_ambient": 0.002,
        "sigma_a_ambient": 0.0,
        "C_DIAL": 0.8,
        "C_ambient": 0.0,
        "phase": {"kind": "hg", "g": 0.3},
    },
    "detector": {
        "position": [0.0, 0.0, 1.5],
        "lens_diameter": 0.03,
        "efficiency": 0.04,
        "narrow_half_angle": 5e-4,
        "wide_half_angle": 0.1,
        "r_min": 2.0,
    },
    "scan": {"azimuth": [-0.55, 0.55, 30], "elevation": [0.01, 0.16, 10]},
    "binning": {"n_bins": 50, "dt": 3.2, "t_start": 120.0, "mode": "normalized"},
    "acquisition": {
        "pulse_energy": 250e-6,
        "wavelength_on": 1645.55e-9,
        "wavelength_off": 1650e-9,
        "ambient_power": 0.025,
        "pulses_per_direction": 1,
    },
    "solver": {"n_puffs": 16, "truth_paths": 20000, "truth_k_max": 8, "fit_paths": 2000, "fit_k_max": 6},
    "fit": {
        "max_iter": 25,
        "tol": 1e-9,
        "smooth_weight": 10.0,
        "scatter_prior_rel": 0.5,
        "start_x": [70.0, 95.0, 120.0],
        "start_y": [-90.0, -65.0, -40.0],
        "start_rates": [0.5, 1.0, 2.0],
        "start_widths": [5.0, 7.0, 9.0, 11.0, 13.0],
        "start_drift": [0.0, 2.0, 4.0, 6.0, 8.0],
    },
    "turbulence": False,
    "runs": 10,
    "detect_power": {
        "sigma0": [0.1, 0.5, 1.0, 2.0, 3.0, 4.0],
        "sigma_s": [0.1, 0.5, 1.0, 2.0, 4.0, 8.0],
        "g": [0.0, 0.35, 0.7],
        "sigma0_bound": 2.0,
        "n_paths": 20000,
        "k_max": 8,
        "max_seconds": None,
    },
    "turbulence_demo": {"draws": 20, "cross_section_distance": 60.0},
}


class ScenarioError(ValueError):
    pass


def _lookup(doc: dict, dotted: str):
    node = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ScenarioError(f"unknown field '{where}'")
        if isinstance(base[key], dict) and base[key] and key != "phase":
            if not isinstance(val, dict):
                raise ScenarioError(f"field '{where}' must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def validate(doc: dict) -> dict:
    """Check required fields and the schema version; return the document merged with defaults."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    for name in REQUIRED:
        try:
            _lookup(doc, name)
        except KeyError:
            raise ScenarioError(f"missing required field '{name}'") from None
    major = str(doc["schema_version"]).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ScenarioError(f"unsupported schema_version {doc['schema_version']!r}")
    merged = _merge(DEFAULTS, doc)
    if len(merged["dispersion"]["source"]) != 3:
        raise ScenarioError("field 'dispersion.source' must have 3 components")
    return merged


@dataclass
class Scenario:
    params: DispersionParams
    optics: dict
    detector: Detector
    angles: np.ndarray  # (n_dir, 2): azimuth, polar
    binning: TimeBinning
    acquisition: AcquisitionConfig
    solver: dict
    fit: dict
    turbulence: bool
    runs: int
    detect_power: dict
    turbulence_demo: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def directions(self) -> np.ndarray:
        return np.array([direction_vector(a, p) for a, p in self.angles])

    @property
    def apertures(self) -> dict[str, Aperture]:
        narrow, annulus = self.detector.apertures
        return {"narrow": narrow, "annulus": annulus, "wide": Aperture("wide", annulus.outer)}

    def fov_apertures(self, mode: str) -> tuple[Aperture, ...]:
        names = {"narrow": ("narrow",), "wide": ("wide",), "multiple": ("narrow", "annulus")}
        if mode not in names:
            raise ScenarioError(f"unknown FOV mode {mode!r} (narrow, wide or multiple)")
        return tuple(self.apertures[n] for n in names[mode])

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _phase(spec: dict) -> PhaseFunction:
    return PhaseFunction(spec.get("kind", "hg"), float(spec.get("g", 0.0)), float(spec.get("delta_fraction", 0.0)))


def _axis(spec) -> np.ndarray:
    lo, hi, n = spec
    return np.linspace(float(lo), float(hi), int(n))


def build(doc: dict) -> Scenario:
    d = validate(doc)
    disp = d["dispersion"]
    params = DispersionParams(
        source=tuple(float(v) for v in disp["source"]),
        release_rate=float(disp["release_rate"]),
        wind=tuple(tuple(float(c) for c in w) for w in disp["wind"]),
        wind_breaks=tuple(float(b) for b in disp["wind_breaks"]),
        width_knots=tuple(float(v) for v in disp["width_knots"]),
        drift_knots=tuple(float(v) for v in disp["drift_knots"]),
        scatter_scale=float(disp["scatter_scale"]),
        plume_length=float(disp["plume_length"]),
        ambient_level=float(disp["ambient_level"]),
    )
    opt = d["optics"]
    optics = {
        "sigma_s_ambient": float(opt["sigma_s_ambient"]),
        "sigma_a_ambient": float(opt["sigma_a_ambient"]),
        "C_DIAL": float(opt["C_DIAL"]),
        "C_ambient": float(opt["C_ambient"]),
        "phase": _phase(opt["phase"]),
    }
    det = d["detector"]
    area = math.pi * (float(det["lens_diameter"]) / 2.0) ** 2
    narrow = Aperture(NARROW.name, float(det["narrow_half_angle"]))
    annulus = Aperture(ANNULUS.name, float(det["wide_half_angle"]), float(det["narrow_half_angle"]))
    detector = Detector(
        position=tuple(float(v) for v in det["position"]),
        area=area,
        efficiency=float(det["efficiency"]),
        apertures=(narrow, annulus),
        r_min=float(det["r_min"]),
    )
    az = _axis(d["scan"]["azimuth"])
    el = _axis(d["scan"]["elevation"])
    angles = np.array([(a, math.pi / 2 - e) for a in az for e in el])
    binning = TimeBinning(**d["binning"])
    acq = AcquisitionConfig(area=area, efficiency=float(det["efficiency"]), **d["acquisition"])
    return Scenario(
        params, optics, detector, angles, binning, acq, d["solver"], d["fit"], bool(d["turbulence"]), int(d["runs"]),
        d["detect_power"], d["turbulence_demo"], raw=d,
    )


def load(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from None
    return build(doc)


def reference() -> dict:
    """The reference scenario document (a deep copy of the defaults)."""
    return copy.deepcopy(DEFAULTS)


