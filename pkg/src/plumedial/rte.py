"""Time-resolved lidar response: closed-form single scattering and Monte Carlo orders.

Conventions
-----------
Times are path lengths (c = 1).  A pulse leaves the detector at ``x_D``
along the scan direction ``v`` at t = 0.  The measurement kernel ``m(v, t)``
is the expected number of detected photons per source photon, per unit
detector area and per unit time, so a bin collects on average
``dt * H_D * A_D * m`` photons.  Response arrays store bin averages of
``m``.  Single scattering then reads

    m_1(t) = 2 sigma_s(x_D + t v / 2) f_p(-1) t^-2 exp(-2 tau(t / 2)),

with ``tau`` the extinction optical depth from the detector.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels
from ._parallel import run_tasks
from .dispersion import (
    IDX_SCATTER,
    N_PARAMS,
    DispersionParams,
    KernelField,
    evaluate_field,
    kernel_jacobian,
    kernel_partials,
    line_integral,
    segment_partials,
)
from .optics import OpticalScene, PhaseFunction, delta_peak_reduce, hg_pdf
from .rng import stream_key

SPEED_OF_LIGHT = 299_792_458.0
WAVELENGTHS = ("off", "on")


@dataclass(frozen=True)
class Aperture:
    """Angular acceptance around the boresight: ``inner <= angle <= outer`` (radians)."""

    name: str
    outer: float
    inner: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.outer <= math.pi / 2:
            raise ValueError("aperture half-angle must lie in (0, pi/2]")
        if not 0.0 <= self.inner < self.outer:
            raise ValueError("annulus inner angle must lie in [0, outer)")

    @property
    def solid_angle(self) -> float:
        return 2.0 * math.pi * (math.cos(self.inner) - math.cos(self.outer))

    @property
    def sees_backscatter(self) -> bool:
        return self.inner == 0.0


NARROW = Aperture("narrow", 5e-4)
WIDE = Aperture("wide", 0.1)
ANNULUS = Aperture("annulus", 0.1, 5e-4)


@dataclass(frozen=True)
class Detector:
    position: tuple[float, float, float] = (0.0, 0.0, 1.5)
    boresight: tuple[float, float, float] = (1.0, 0.0, 0.0)
    area: float = math.pi * 0.015**2
    efficiency: float = 0.04
    apertures: tuple[Aperture, ...] = (NARROW, WIDE)
    r_min: float = 2.0  # no next-event connections closer than this (m)

    def __post_init__(self):
        if self.position[2] <= 0:
            raise ValueError("detector must sit above the ground plane")
        if self.area <= 0 or not 0 < self.efficiency <= 1:
            raise ValueError("area must be positive and efficiency in (0, 1]")
        if not self.apertures:
            raise ValueError("detector needs at least one aperture")

    @property
    def aperture_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.apertures)

    def cosine_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([math.cos(a.outer) for a in self.apertures])
        hi = np.array([math.cos(a.inner) if a.inner > 0 else 2.0 for a in self.apertures])
        return lo, hi


@dataclass(frozen=True)
class TimeBinning:
    """Uniform bins; with ``mode='si'`` the inputs are seconds and are converted with c."""

    n_bins: int = 50
    dt: float = 3.2
    t_start: float = 120.0
    mode: str = "normalized"

    def __post_init__(self):
        if self.n_bins < 1 or not self.dt > 0:
            raise ValueError("need n_bins >= 1 and dt > 0")
        if self.mode not in ("normalized", "si"):
            raise ValueError("mode must be 'normalized' or 'si'")

    @property
    def _c(self) -> float:
        return SPEED_OF_LIGHT if self.mode == "si" else 1.0

    @property
    def dt_m(self) -> float:
        return self.dt * self._c

    @property
    def t0_m(self) -> float:
        return self.t_start * self._c

    @property
    def edges(self) -> np.ndarray:
        """Bin edges in metres."""
        return self.t0_m + self.dt_m * np.arange(self.n_bins + 1)

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])


def direction_vector(azimuth: float, polar: float) -> np.ndarray:
    """Unit vector from azimuth (from +x towards +y) and polar angle (from +z)."""
    s = math.sin(polar)
    return np.array([s * math.cos(azimuth), s * math.sin(azimuth), math.cos(polar)])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("direction must be nonzero")
    return v / n


# ---------------------------------------------------------------------------
# single scattering


def _transport_phase(scene: OpticalScene) -> tuple[OpticalScene, float]:
    """Scene whose phase is plain HG (delta peaks folded into sigma_s) and its asymmetry."""
    ph = scene.phase
    if ph.kind != "delta":
        return scene, ph.g
    lam = ph.mean_cosine
    reduced = replace(
        scene,
        sigma_s_ambient=delta_peak_reduce(scene.sigma_s_ambient, ph)[0],
        scatter_scale=(1.0 - lam) * scene.scatter_scale,
        phase=PhaseFunction(),
    )
    return reduced, 0.0


def _gauss_nodes(binning: TimeBinning, n_gauss: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes in s = t/2 and weights including the 1/dt bin average, shape (n_bins, n_gauss)."""
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    e = binning.edges / 2.0
    a, b = e[:-1, None], e[1:, None]
    s = 0.5 * (b - a) * x + 0.5 * (a + b)
    wt = 0.5 * (b - a) * w / binning.dt_m
    return s, wt


def single_scatter(
    scene: OpticalScene,
    position,
    direction,
    binning: TimeBinning,
    n_gauss: int = 12,
    gradient: bool = False,
):
    """Bin-averaged single-scattering kernels ``(off, on)``.

    With ``gradient=True`` also returns d/d(w, m, h) per kernel, shape
    (2, n_bins, N, 5), and d/d c_s, shape (2, n_bins).
    """
    scene, g = _transport_phase(scene)
    xd = np.asarray(position, dtype=float)
    v = _unit(direction)
    s, wt = _gauss_nodes(binning, n_gauss)
    valid = s > 0
    s_safe = np.where(valid, s, 1.0)
    x = xd + s_safe[..., None] * v
    sig_s = evaluate_field(scene.scatter_field, x)
    u_int = line_integral(scene.concentration, xd, v, 0.0, s_safe)
    tau_off = (scene.sigma_s_ambient + scene.sigma_a_ambient) * s_safe + scene.scatter_scale * u_int
    tau_on = tau_off + scene.C_ambient * s_safe + scene.C_DIAL * u_int
    fp = float(hg_pdf(-1.0, g))
    base = np.where(valid, wt * fp / s_safe**2, 0.0)
    integrand = np.stack([base * sig_s * np.exp(-2 * tau_off), base * sig_s * np.exp(-2 * tau_on)])
    values = integrand.sum(axis=-1)
    if not gradient:
        return values
    u = scene.concentration
    c_s, C = scene.scatter_scale, scene.C_DIAL
    dsig = c_s * kernel_partials(u, x)  # (nb, ng, N, 5)
    dU = segment_partials(u, xd, v, s_safe)  # (nb, ng, N, 5)
    fac = integrand[..., None, None]
    g_off = fac[0] * (dsig / sig_s[..., None, None] - 2 * c_s * dU)
    g_on = fac[1] * (dsig / sig_s[..., None, None] - 2 * (c_s + C) * dU)
    dk = np.stack([g_off.sum(axis=1), g_on.sum(axis=1)])
    u_x = evaluate_field(u, x)
    dcs = (integrand * (u_x / sig_s - 2 * u_int)).sum(axis=-1)
    return values, dk, dcs


def single_scatter_response(
    scene: OpticalScene, detector: Detector, direction, binning: TimeBinning, wavelength: str = "off", n_gauss: int = 12
) -> np.ndarray:
    """Per-bin single-scattering kernel along ``direction`` (narrow-FOV reading)."""
    if wavelength not in WAVELENGTHS:
        raise ValueError("wavelength must be 'on' or 'off'")
    values = single_scatter(scene, detector.position, direction, binning, n_gauss)
    return values[WAVELENGTHS.index(wavelength)]


def theta_gradient(dk: np.ndarray, dcs: np.ndarray, params: DispersionParams, n_puffs: int) -> np.ndarray:
    """Map kernel-parameter gradients (..., N, 5) and d/d c_s (...) to d/d theta (..., 14)."""
    jac = kernel_jacobian(params, n_puffs)
    out = np.einsum("...np,npq->...q", dk, jac)
    out[..., IDX_SCATTER] += dcs
    return out


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class TraceResult:
    """Monte Carlo tallies for one or more scan directions.

    ``mean``/``stderr``: (..., 2, n_aperture, k_max, n_bins) with wavelength
    axis (off, on).  ``grad``: (..., 2, n_aperture, n_bins, N, 5) and
    ``grad_cs``: (..., 2, n_aperture, n_bins), both summed over orders
    ``>= grad_kmin``.  ``probe``: (..., n_aperture, k_max, n_bins) mean of
    off-weight times path integral of the probe field.
    """

    mean: np.ndarray
    stderr: np.ndarray
    n_paths: int
    grad: np.ndarray | None = None
    grad_cs: np.ndarray | None = None
    probe: np.ndarray | None = None

    def total(self, k_min: int = 1) -> np.ndarray:
        return self.mean[..., k_min - 1 :, :].sum(axis=-2)

    def total_stderr(self, k_min: int = 1) -> np.ndarray:
        # orders share paths; sum of per-order errors is a conservative bound
        return self.stderr[..., k_min - 1 :, :].sum(axis=-2)


def _batch_bounds(n_paths: int, n_batches: int) -> list[tuple[int, int]]:
    nb = max(1, min(n_batches, n_paths))
    cuts = [i * n_paths // nb for i in range(nb + 1)]
    return [(cuts[i], cuts[i + 1] - cuts[i]) for i in range(nb)]


def _empty_field() -> KernelField:
    return KernelField(0.0)


def trace_directions(
    scene: OpticalScene,
    detector: Detector,
    directions,
    binning: TimeBinning,
    n_paths: int,
    k_max: int = 8,
    seed: int = 0,
    stream: Sequence[int] = (),
    gradient: bool = False,
    grad_kmin: int = 1,
    probe: KernelField | None = None,
    threads: int | None = None,
    n_batches: int = 64,
    roulette: float = 1e-6,
) -> TraceResult:
    """Trace ``n_paths`` per direction; direction ``i`` uses stream ``(seed, *stream, i)``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    scene, g = _transport_phase(scene)
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    xd = np.asarray(detector.position, dtype=float)
    cos_lo, cos_hi = detector.cosine_bounds()
    n_ap = len(detector.apertures)
    nb = binning.n_bins
    u = scene.concentration
    centers = np.ascontiguousarray(u.centers)
    widths = np.ascontiguousarray(u.widths)
    weights = np.ascontiguousarray(u.weights)
    n_par = 5 * len(u) + 1
    pf = probe if probe is not None else _empty_field()
    batches = _batch_bounds(n_paths, n_batches)
    keys = [np.uint64(stream_key(seed, *stream, i)) for i in range(len(dirs))]
    n_b = len(batches)
    tally = np.zeros((len(dirs), n_b, 2, n_ap, k_max, nb))
    probe_t = np.zeros((len(dirs), n_b, n_ap, k_max, nb))
    grad = np.zeros((len(dirs), n_b, 2, n_ap, nb, n_par)) if gradient else np.zeros((1, 1, 2, n_ap, nb, n_par))

    def work(task):
        i, b = task
        first, count = batches[b]
        _kernels.trace_batch(
            keys[i], first, count, xd, dirs[i], cos_lo, cos_hi, binning.t0_m, binning.dt_m, nb, k_max,
            scene.sigma_s_ambient, scene.sigma_a_ambient, scene.scatter_scale, scene.C_DIAL, scene.C_ambient, g,
            u.constant, centers, widths, weights,
            pf.constant, np.ascontiguousarray(pf.centers), np.ascontiguousarray(pf.widths), np.ascontiguousarray(pf.weights),
            detector.r_min, roulette, gradient, grad_kmin,
            tally[i, b], grad[i, b] if gradient else grad[0, 0], probe_t[i, b],
        )

    run_tasks(work, [(i, b) for i in range(len(dirs)) for b in range(n_b)], threads)

    sizes = np.array([c for _, c in batches], dtype=float)
    mean = tally.sum(axis=1) / n_paths
    if n_b > 1:
        bmeans = tally / sizes[None, :, None, None, None, None]
        stderr = bmeans.std(axis=1, ddof=1) / math.sqrt(n_b)
    else:
        stderr = np.full_like(mean, np.inf)
    out = TraceResult(mean, stderr, n_paths, probe=probe_t.sum(axis=1) / n_paths if probe is not None else None)
    if gradient:
        gsum = grad.sum(axis=1) / n_paths
        out.grad = gsum[..., :-1].reshape(gsum.shape[:-1] + (len(u), 5))
        out.grad_cs = gsum[..., -1]
    return out


def trace_paths(
    scene: OpticalScene,
    detector: Detector,
    direction,
    binning: TimeBinning,
    n_paths: int,
    k_max: int = 8,
    seed: int = 0,
    stream: Sequence[int] = (),
    **kwargs,
) -> TraceResult:
    """Single-direction :func:`trace_directions` (leading direction axis removed)."""
    res = trace_directions(scene, detector, [direction], binning, n_paths, k_max, seed, stream, **kwargs)
    return TraceResult(
        res.mean[0],
        res.stderr[0],
        n_paths,
        None if res.grad is None else res.grad[0],
        None if res.grad_cs is None else res.grad_cs[0],
        None if res.probe is None else res.probe[0],
    )


def response_with_gradient(
    params: DispersionParams,
    optics: dict,
    detector: Detector,
    directions,
    binning: TimeBinning,
    n_paths: int = 0,
    k_max: int = 8,
    seed: int = 0,
    stream: Sequence[int] = (),
    n_puffs: int = 16,
    hybrid: bool = True,
    threads: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Expected kernels and their theta gradients for every aperture and direction.

    Returns ``values`` (2, n_aperture, n_dir, n_bins) and ``grad`` with a
    trailing theta axis of length 14.  With ``hybrid`` the first order is
    computed in closed form (apertures that contain the boresight) and Monte
    Carlo covers orders 2..k_max; ``n_paths = 0`` skips Monte Carlo entirely.
    """
    scene = OpticalScene.from_params(params, n_puffs, **optics)
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    n_ap = len(detector.apertures)
    nb = binning.n_bins
    values = np.zeros((2, n_ap, len(dirs), nb))
    grad = np.zeros((2, n_ap, len(dirs), nb, N_PARAMS))
    jac = kernel_jacobian(params, n_puffs)
    backscatter = np.array([a.sees_backscatter for a in detector.apertures])
    if hybrid:
        for i, v in enumerate(dirs):
            val, dk, dcs = single_scatter(scene, detector.position, v, binning, gradient=True)
            gth = np.einsum("wbnp,npq->wbq", dk, jac)
            gth[..., IDX_SCATTER] += dcs
            values[:, backscatter, i] += val[:, None]
            grad[:, backscatter, i] += gth[:, None]
    if n_paths > 0:
        k_lo = 2 if hybrid else 1
        if k_max >= k_lo:
            res = trace_directions(
                scene, detector, dirs, binning, n_paths, k_max, seed, stream, gradient=True, grad_kmin=k_lo, threads=threads
            )
            values += np.moveaxis(res.total(k_lo), 0, 2)
            gth = np.einsum("dwabnp,npq->dwabq", res.grad, jac)
            gth[..., IDX_SCATTER] += res.grad_cs
            grad += np.moveaxis(gth, 0, 2)
    return values, grad


def hybrid_response(
    scene: OpticalScene,
    detector: Detector,
    directions,
    binning: TimeBinning,
    n_paths: int = 0,
    k_max: int = 8,
    seed: int = 0,
    stream: Sequence[int] = (),
    threads: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(values, stderr), each (2, n_aperture, n_dir, n_bins), for an arbitrary scene.

    Closed-form order one plus traced orders 2..k_max, as in
    :func:`response_with_gradient` but without gradients.
    """
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    n_ap = len(detector.apertures)
    values = np.zeros((2, n_ap, len(dirs), binning.n_bins))
    stderr = np.zeros_like(values)
    backscatter = np.array([a.sees_backscatter for a in detector.apertures])
    for i, v in enumerate(dirs):
        values[:, backscatter, i] += single_scatter(scene, detector.position, v, binning)[:, None]
    if n_paths > 0 and k_max >= 2:
        res = trace_directions(scene, detector, dirs, binning, n_paths, k_max, seed, stream, threads=threads)
        values += np.moveaxis(res.total(2), 0, 2)
        stderr += np.moveaxis(res.total_stderr(2), 0, 2)
    return values, stderr


def cost_model(n_paths: int, n_bins: int, k_max: int, n_kernels: int, constant: float = 2.0e-9) -> float:
    """Predicted tracing time in seconds, ``constant * N_p * N_t * k_max^2 * N`` (N >= 1)."""
    return constant * n_paths * n_bins * k_max**2 * max(n_kernels, 1)


# ---------------------------------------------------------------------------
# response curves


@dataclass
class ResponseCurve:
    """Bin-averaged kernels per aperture, direction and bin; wavelength axis is (off, on)."""

    fovs: tuple[str, ...]
    directions: np.ndarray  # (n_dir, 2): azimuth, polar
    binning: TimeBinning
    values: np.ndarray  # (2, n_fov, n_dir, n_bins)
    stderr: np.ndarray = field(default=None)
    gradient: np.ndarray | None = None  # (2, n_fov, n_dir, n_bins, 14)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.stderr is None:
            self.stderr = np.zeros_like(self.values)
        if self.values.shape != (2, len(self.fovs), len(self.directions), self.binning.n_bins):
            raise ValueError("response values have inconsistent shape")

    @property
    def off(self) -> np.ndarray:
        return self.values[0]

    @property
    def on(self) -> np.ndarray:
        return self.values[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fov", "dir_az", "dir_pol", "bin", "t_mid", "m_on", "m_off", "se_on", "se_off"])
        t = self.binning.midpoints
        for f, name in enumerate(self.fovs):
            for i, (az, pol) in enumerate(self.directions):
                for j in range(self.binning.n_bins):
                    w.writerow(
                        [
                            name, repr(float(az)), repr(float(pol)), j, repr(float(t[j])),
                            repr(float(self.values[1, f, i, j])), repr(float(self.values[0, f, i, j])),
                            repr(float(self.stderr[1, f, i, j])), repr(float(self.stderr[0, f, i, j])),
                        ]
                    )
        return buf.getvalue()


def single_scatter_moment(
    scene: OpticalScene, position, direction, binning: TimeBinning, probe: KernelField, n_gauss: int = 12
) -> tuple[np.ndarray, np.ndarray]:
    """Off-wavelength single-scattering kernel and its probe moment per bin.

    The moment is the bin integral of ``m_1 * 2 int_0^{t/2} probe``, so the
    ratio of the two is the detection-weighted mean path integral of ``probe``.
    """
    scene, g = _transport_phase(scene)
    xd = np.asarray(position, dtype=float)
    v = _unit(direction)
    s, wt = _gauss_nodes(binning, n_gauss)
    valid = s > 0
    s_safe = np.where(valid, s, 1.0)
    x = xd + s_safe[..., None] * v
    sig_s = evaluate_field(scene.scatter_field, x)
    tau = (scene.sigma_s_ambient + scene.sigma_a_ambient) * s_safe + scene.scatter_scale * line_integral(
        scene.concentration, xd, v, 0.0, s_safe
    )
    integrand = np.where(valid, wt * float(hg_pdf(-1.0, g)) / s_safe**2, 0.0) * sig_s * np.exp(-2 * tau)
    q = 2.0 * line_integral(probe, xd, v, 0.0, s_safe)
    return integrand.sum(axis=-1), (integrand * q).sum(axis=-1)
