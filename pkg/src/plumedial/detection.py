"""Low-concentration detection: log-ratio statistics, the optimal linear test and
worst-case power comparisons between narrow and wide apertures.

For small absorption ``theta0 * alpha0`` the log ratio ``y = log(n / m)`` is
approximately ``Normal(theta0 * q, 1 / L)`` where ``L = dt H_D A_D m_off / 2``
and ``q`` is the detection-weighted mean path integral of ``alpha0``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .dispersion import KernelField
from ._parallel import run_tasks
from .measurement import MeasurementSet
from .optics import OpticalScene, PhaseFunction
from .rte import Detector, TimeBinning, single_scatter_moment, trace_paths


@dataclass
class LogRatioData:
    y: np.ndarray
    z: np.ndarray
    mask: np.ndarray


def log_ratio_transform(data: MeasurementSet) -> LogRatioData:
    m = data.on.astype(float)
    n = data.off.astype(float)
    mask = (m > 0) & (n > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(mask, np.log(np.where(mask, n, 1.0) / np.where(mask, m, 1.0)), 0.0)
    return LogRatioData(y, 0.5 * (m + n), mask)


def information_weights(m_off, scale: float) -> np.ndarray:
    """``L = scale * m_off / 2`` with ``scale = dt H_D A_D`` (efficiency included)."""
    return 0.5 * scale * np.asarray(m_off, dtype=float)


def path_absorption_moment(
    scene: OpticalScene,
    alpha0: KernelField,
    detector: Detector,
    direction,
    binning: TimeBinning,
    n_paths: int = 0,
    k_max: int = 8,
    seed: int = 0,
    stream: Sequence[int] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """(q, m_off) per aperture and bin for one scan direction.

    Order one is exact for apertures containing the boresight; higher orders
    come from ``n_paths`` traced paths (skipped when ``n_paths == 0``).
    Bins without detected light get ``q = nan``.
    """
    n_ap = len(detector.apertures)
    weight = np.zeros((n_ap, binning.n_bins))
    moment = np.zeros_like(weight)
    m1, q1 = single_scatter_moment(scene, detector.position, direction, binning, alpha0)
    for a, ap in enumerate(detector.apertures):
        if ap.sees_backscatter:
            weight[a] += m1
            moment[a] += q1
    if n_paths > 0 and k_max >= 2:
        res = trace_paths(scene, detector, direction, binning, n_paths, k_max, seed, stream, probe=alpha0)
        weight += res.mean[0, :, 1:].sum(axis=1)
        moment += res.probe[:, 1:].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(weight > 0, moment / weight, np.nan)
    if np.all(weight == 0):
        warnings.warn("no detected light: q is undefined", RuntimeWarning)
    return q, weight


def critical_value(significance: float = 0.05) -> float:
    return float(norm.isf(significance))


def ump_test(y, L, q_hat, significance: float = 0.05, mask=None) -> tuple[float, bool, float]:
    """(statistic, reject, p-value) of ``sum q L y / sqrt(sum q^2 L) >= R``."""
    y, L, q_hat = (np.asarray(a, dtype=float) for a in (y, L, q_hat))
    ok = np.isfinite(y) & np.isfinite(q_hat) & (L > 0)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    if not np.any(ok):
        raise ValueError("no valid bins for the test")
    den = math.sqrt(float(np.sum(q_hat[ok] ** 2 * L[ok])))
    if den == 0:
        raise ValueError("test direction q_hat is zero")
    stat = float(np.sum(q_hat[ok] * L[ok] * y[ok])) / den
    return stat, stat >= critical_value(significance), float(norm.sf(stat))


def projection(q_bar, q_hat, L) -> float:
    """``Pi_L(q_bar -> q_hat) = sum q_hat q_bar L / sqrt(sum q_hat^2 L)``."""
    q_bar, q_hat, L = (np.nan_to_num(np.asarray(a, dtype=float)) for a in (q_bar, q_hat, L))
    den = math.sqrt(float(np.sum(q_hat**2 * L)))
    if den == 0:
        raise ValueError("degenerate q_hat")
    return float(np.sum(q_hat * q_bar * L)) / den


def test_power(theta0: float, Pi: float, significance: float = 0.05) -> float:
    return float(norm.sf(critical_value(significance) - theta0 * Pi))


def worst_case_power(q_true, L_true, q_candidates, q_narrow, L_narrow) -> tuple[float, float, float]:
    """(Pi_hat, Pi_0, Phi): worst alignment over candidates versus the narrow-aperture norm."""
    values = []
    for qc in q_candidates:
        qc = np.nan_to_num(np.asarray(qc, dtype=float))
        if not np.any(qc):
            continue
        values.append(projection(q_true, qc, L_true))
    if not values:
        raise ValueError("candidate set is empty after removing degenerate entries")
    pi_hat = min(values)
    qn = np.nan_to_num(np.asarray(q_narrow, dtype=float))
    pi0 = math.sqrt(float(np.sum(qn**2 * np.asarray(L_narrow, dtype=float))))
    return pi_hat, pi0, pi_hat / pi0 - 1.0


def fisher_information_fixed_psi(values, grads, scale: float, ambient=0.0) -> np.ndarray:
    """``sum scale^2 dm dm^T / (scale m + ambient)`` over wavelengths, directions and bins.

    ``values``: (..., ) kernels; ``grads``: (..., p).  With no ambient light
    this is ``scale * dm dm^T / m``.
    """
    values = np.asarray(values, dtype=float)
    grads = np.asarray(grads, dtype=float)
    mean = scale * values + np.broadcast_to(ambient, values.shape)
    ok = mean > 0
    w = np.where(ok, scale**2 / np.where(ok, mean, 1.0), 0.0).ravel()
    G = grads.reshape(-1, grads.shape[-1])
    J = G.T @ (w[:, None] * G)
    return 0.5 * (J + J.T)


# ---------------------------------------------------------------------------
# Phi maps


@dataclass
class PhiMap:
    sigma0: np.ndarray
    sigma_s: np.ndarray
    g: float
    phi: np.ndarray  # (len(sigma0), len(sigma_s))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma0", "sigma_s", "g", "phi"])
        for i, s0 in enumerate(self.sigma0):
            for j, ss in enumerate(self.sigma_s):
                w.writerow([repr(float(s0)), repr(float(ss)), repr(float(self.g)), repr(float(self.phi[i, j]))])
        return buf.getvalue()


@dataclass(frozen=True)
class ReferenceKernel:
    """Single absorbing/scattering kernel on the boresight."""

    distance: float = 100.0
    radius: float = 20.0  # treated as 2 standard deviations
    detector_height: float = 1.5

    @property
    def width(self) -> float:
        return self.radius / 2.0

    def field(self) -> KernelField:
        return KernelField(0.0, [[self.distance, 0.0, self.detector_height]], [self.width], [1.0])

    def scene(self, sigma0: float, sigma_s: float, g: float) -> OpticalScene:
        """Scene with ambient optical depth ``sigma0`` to the kernel centre and kernel thickness ``sigma_s``."""
        thickness_per_unit = self.width * math.sqrt(2.0 * math.pi)  # diameter line integral of a unit kernel
        return OpticalScene(
            self.field(),
            sigma_s_ambient=sigma0 / self.distance,
            scatter_scale=sigma_s / thickness_per_unit,
            phase=PhaseFunction.henyey_greenstein(g),
        )


def alignment_point(ref: ReferenceKernel, detector: Detector, binning: TimeBinning, nuisance, index, n_paths: int, k_max: int = 8, seed: int = 0):
    """(q, m_off) at one lattice point ``nuisance = (sigma0, sigma_s, g)`` using stream ``(seed, *index)``."""
    scene = ref.scene(*nuisance)
    return path_absorption_moment(scene, ref.field(), detector, np.array([1.0, 0.0, 0.0]), binning, n_paths, k_max, seed, tuple(index))


def tabulate_alignment(
    ref: ReferenceKernel,
    detector: Detector,
    binning: TimeBinning,
    sigma0s: Sequence[float],
    sigma_ss: Sequence[float],
    gs: Sequence[float],
    n_paths: int,
    k_max: int = 8,
    seed: int = 0,
    threads: int | None = None,
) -> dict:
    """q and m_off for narrow (aperture 0) and wide (aperture 1) over a lattice of nuisance values.

    Each lattice point uses its own frozen stream ``(seed, i, j, k)``.
    """
    table = empty_table(detector, binning, sigma0s, sigma_ss, gs)
    points = lattice_points(table)

    def work(idx):
        i, j, k = idx
        return alignment_point(ref, detector, binning, (sigma0s[i], sigma_ss[j], gs[k]), idx, n_paths, k_max, seed)

    for idx, (qq, mm) in zip(points, run_tasks(work, points, threads)):
        table["q"][idx] = qq
        table["m_off"][idx] = mm
    return table


def empty_table(detector: Detector, binning: TimeBinning, sigma0s, sigma_ss, gs) -> dict:
    shape = (len(sigma0s), len(sigma_ss), len(gs), len(detector.apertures), binning.n_bins)
    return {
        "sigma0": np.asarray(sigma0s, float),
        "sigma_s": np.asarray(sigma_ss, float),
        "g": np.asarray(gs, float),
        "q": np.zeros(shape),
        "m_off": np.zeros(shape),
    }


def lattice_points(table: dict) -> list[tuple[int, int, int]]:
    return [(i, j, k) for i in range(len(table["sigma0"])) for j in range(len(table["sigma_s"])) for k in range(len(table["g"]))]


def phi_map(table: dict, scale: float, g_index: int = 0, sigma0_max: float | None = None, known: bool = False) -> PhiMap:
    """Phi over the (sigma0, sigma_s) truth lattice at ``g = table['g'][g_index]``.

    Candidates are all lattice points (optionally with ``sigma0 <= sigma0_max``);
    ``known=True`` uses the truth alone.
    """
    s0, ss, gs = table["sigma0"], table["sigma_s"], table["g"]
    q, m = table["q"], table["m_off"]
    allowed = [
        (i, j, k)
        for i in range(len(s0))
        for j in range(len(ss))
        for k in range(len(gs))
        if sigma0_max is None or s0[i] <= sigma0_max + 1e-12
    ]
    phi = np.full((len(s0), len(ss)), np.nan)
    for i in range(len(s0)):
        for j in range(len(ss)):
            qt = q[i, j, g_index, 1]
            Lt = information_weights(m[i, j, g_index, 1], scale)
            cands = [qt] if known else [q[c][1] for c in allowed]
            Ln = information_weights(m[i, j, g_index, 0], scale)
            phi[i, j] = worst_case_power(qt, Lt, cands, q[i, j, g_index, 0], Ln)[2]
    return PhiMap(s0, ss, float(gs[g_index]), phi)
