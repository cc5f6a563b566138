"""Photon budgets and Poisson count synthesis.

A bin ``j`` of direction ``i`` in aperture ``f`` records on average

    pulses * (dt * H_D * eta * A_D * m[f, i, j] * psi + ambient[f])

photons, where ``dt`` is the bin width in metres of light travel (``m`` is
per unit area per metre), ``eta`` the detection efficiency and ``ambient``
the expected number of background photons per bin.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from .rng import generator
from .rte import SPEED_OF_LIGHT, Aperture, ResponseCurve, TimeBinning

PLANCK = 6.62607015e-34
CSV_HEADER = ("fov", "dir_az", "dir_pol", "bin", "t_mid", "count_on", "count_off")


def photons_per_pulse(pulse_energy: float, wavelength: float) -> float:
    """Number of photons ``E * lambda / (h c)`` in a pulse (J, m)."""
    if pulse_energy < 0 or not wavelength > 0:
        raise ValueError("pulse energy must be >= 0 and wavelength > 0")
    return pulse_energy * wavelength / (PLANCK * SPEED_OF_LIGHT)


def ambient_rate(power: float, wavelength: float, fov_solid_angle: float, area: float) -> float:
    """Background photons per second reaching the detector through one aperture.

    ``power`` (W/m^2) is spread uniformly over the hemisphere (2 pi sr).
    """
    if power < 0 or fov_solid_angle < 0 or area < 0:
        raise ValueError("inputs must be nonnegative")
    photon_flux = power * wavelength / (PLANCK * SPEED_OF_LIGHT)
    return photon_flux * fov_solid_angle / (2.0 * math.pi) * area


@dataclass(frozen=True)
class AcquisitionConfig:
    pulse_energy: float = 250e-6
    wavelength_on: float = 1645.55e-9
    wavelength_off: float = 1650.0e-9
    area: float = math.pi * 0.015**2
    efficiency: float = 0.04
    ambient_power: float = 0.025
    pulses_per_direction: int = 1
    ambient_efficiency: bool = True  # apply the detection efficiency to background photons too

    def __post_init__(self):
        if self.wavelength_on == self.wavelength_off:
            raise ValueError("on and off wavelengths must differ")
        if min(self.pulse_energy, self.area, self.efficiency, self.ambient_power) < 0 or self.pulses_per_direction < 1:
            raise ValueError("acquisition parameters must be nonnegative")

    @property
    def H_D(self) -> float:
        return photons_per_pulse(self.pulse_energy, self.wavelength_on)

    @property
    def effective_photons(self) -> float:
        """Detected photons per unit of kernel: H_D times the efficiency (applied once, here)."""
        return self.H_D * self.efficiency

    def signal_scale(self, binning: TimeBinning) -> float:
        """Factor turning a bin-averaged kernel into expected counts per pulse."""
        return binning.dt_m * self.effective_photons * self.area

    def ambient_per_bin(self, aperture: Aperture, binning: TimeBinning) -> float:
        rate = ambient_rate(self.ambient_power, self.wavelength_on, aperture.solid_angle, self.area)
        eta = self.efficiency if self.ambient_efficiency else 1.0
        return rate * eta * binning.dt_m / SPEED_OF_LIGHT


@dataclass
class MeasurementSet:
    """Counts ``on``/``off`` with shape (n_fov, n_dir, n_bins)."""

    fovs: tuple[str, ...]
    directions: np.ndarray
    binning: TimeBinning
    config: AcquisitionConfig
    on: np.ndarray
    off: np.ndarray
    ambient: np.ndarray = field(default=None)  # expected background per bin, per aperture

    def __post_init__(self):
        self.on = np.asarray(self.on, dtype=np.int64)
        self.off = np.asarray(self.off, dtype=np.int64)
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 2)
        shape = (len(self.fovs), len(self.directions), self.binning.n_bins)
        if self.on.shape != shape or self.off.shape != shape:
            raise ValueError(f"count arrays must have shape {shape}")
        if np.any(self.on < 0) or np.any(self.off < 0):
            raise ValueError("counts must be nonnegative")
        if self.ambient is None:
            self.ambient = np.zeros(len(self.fovs))
        self.ambient = np.asarray(self.ambient, dtype=float)

    def select(self, fovs) -> "MeasurementSet":
        idx = [self.fovs.index(f) for f in fovs]
        return MeasurementSet(
            tuple(fovs), self.directions, self.binning, self.config, self.on[idx], self.off[idx], self.ambient[idx]
        )

    @property
    def signal_scale(self) -> float:
        return self.config.signal_scale(self.binning) * self.config.pulses_per_direction

    # -- serialisation ---------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        t = self.binning.midpoints
        for f, name in enumerate(self.fovs):
            for i, (az, pol) in enumerate(self.directions):
                for j in range(self.binning.n_bins):
                    w.writerow([name, repr(float(az)), repr(float(pol)), j, repr(float(t[j])), int(self.on[f, i, j]), int(self.off[f, i, j])])
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "fovs": list(self.fovs),
            "directions": self.directions.tolist(),
            "binning": asdict(self.binning),
            "acquisition": asdict(self.config),
            "ambient_per_bin": self.ambient.tolist(),
        }

    def write(self, csv_path, json_path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(json_path).write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, csv_path, json_path) -> "MeasurementSet":
        meta = json.loads(Path(json_path).read_text())
        check_schema(meta)
        fovs = tuple(meta["fovs"])
        binning = TimeBinning(**meta["binning"])
        dirs = np.asarray(meta["directions"], dtype=float)
        on = np.zeros((len(fovs), len(dirs), binning.n_bins), dtype=np.int64)
        off = np.zeros_like(on)
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != CSV_HEADER:
                raise ValueError("unexpected counts CSV header")
            dir_index = {(float(a), float(p)): i for i, (a, p) in enumerate(dirs)}
            for row in reader:
                f = fovs.index(row[0])
                i = dir_index[(float(row[1]), float(row[2]))]
                j = int(row[3])
                on[f, i, j] = int(row[5])
                off[f, i, j] = int(row[6])
        return cls(fovs, dirs, binning, AcquisitionConfig(**meta["acquisition"]), on, off, meta["ambient_per_bin"])


def check_schema(meta: dict) -> None:
    version = str(meta.get("schema_version", ""))
    major = version.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise ValueError(f"unsupported schema version {version!r} (reader supports {SCHEMA_VERSION})")


def expected_counts(response: ResponseCurve, config: AcquisitionConfig, apertures, psi=1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(on mean, off mean, ambient per bin) for every aperture/direction/bin."""
    amb = np.array([config.ambient_per_bin(a, response.binning) for a in apertures])
    scale = config.signal_scale(response.binning)
    k = config.pulses_per_direction
    psi = np.asarray(psi, dtype=float)
    mean_on = k * (scale * response.on * psi + amb[:, None, None])
    mean_off = k * (scale * response.off * psi + amb[:, None, None])
    return mean_on, mean_off, amb


def synthesize(
    response: ResponseCurve,
    config: AcquisitionConfig,
    apertures,
    seed: int,
    psi=1.0,
    stream: tuple[int, ...] = (),
) -> MeasurementSet:
    """Independent Poisson counts; direction ``i`` draws from stream ``(seed, *stream, i)``."""
    apertures = tuple(apertures)
    if tuple(a.name for a in apertures) != tuple(response.fovs):
        raise ValueError("apertures do not match the response curve")
    mean_on, mean_off, amb = expected_counts(response, config, apertures, psi)
    if not (np.all(np.isfinite(mean_on)) and np.all(np.isfinite(mean_off))):
        raise ValueError("non-finite expected counts")
    on = np.empty(mean_on.shape, dtype=np.int64)
    off = np.empty_like(on)
    for i in range(mean_on.shape[1]):
        rng = generator(seed, *stream, i)
        on[:, i] = rng.poisson(mean_on[:, i])
        off[:, i] = rng.poisson(mean_off[:, i])
    return MeasurementSet(response.fovs, response.directions, response.binning, config, on, off, amb * config.pulses_per_direction)
