"""Gaussian puff/plume dispersion and its kernel-superposition form.

A continuous release is approximated by a chain of isotropic Gaussian puffs
placed along the wind-advected centreline.  Puff widths and the upward drift
of the centreline are linear splines over downwind distance on ``[0, L]``.

Bandwidths are stored as standard deviations (metres).  The diffusion
function ``h(t)`` of a single puff is a variance and is converted on use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import erf, erfc

N_KNOTS = 5
PARAM_NAMES = (
    ["release_rate", "source_x", "source_y"]
    + [f"width_{k}" for k in range(N_KNOTS)]
    + [f"drift_{k}" for k in range(N_KNOTS)]
    + ["scatter_scale"]
)
N_PARAMS = len(PARAM_NAMES)  # 14

IDX_RATE = 0
IDX_SOURCE = slice(1, 3)
IDX_WIDTH = slice(3, 3 + N_KNOTS)
IDX_DRIFT = slice(3 + N_KNOTS, 3 + 2 * N_KNOTS)
IDX_SCATTER = N_PARAMS - 1


class DegeneratePuffError(ValueError):
    """Raised when a puff is evaluated at zero age or zero spread."""


@dataclass(frozen=True)
class GaussianPuff:
    center: tuple[float, float, float]
    bandwidth: float  # standard deviation, m
    weight: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("puff bandwidth must be positive")


@dataclass(frozen=True, eq=False)
class KernelField:
    """``w0 + sum_j w_j exp(-|x - m_j|^2 / (2 h_j^2))``."""

    constant: float = 0.0
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        h = np.asarray(self.widths, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(c) == len(h) == len(w)):
            raise ValueError("centers, widths and weights must have equal length")
        if np.any(h <= 0):
            raise ValueError("kernel widths must be positive")
        for name, arr in (("centers", c), ("widths", h), ("weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "constant", float(self.constant))

    @classmethod
    def from_puffs(cls, puffs: Sequence[GaussianPuff], constant: float = 0.0) -> "KernelField":
        if not puffs:
            return cls(constant)
        return cls(
            constant,
            np.array([p.center for p in puffs], dtype=float),
            np.array([p.bandwidth for p in puffs], dtype=float),
            np.array([p.weight for p in puffs], dtype=float),
        )

    @property
    def kernels(self) -> list[GaussianPuff]:
        return [GaussianPuff(tuple(m), float(h), float(w)) for m, h, w in zip(self.centers, self.widths, self.weights)]

    def __len__(self) -> int:
        return len(self.widths)

    def affine(self, offset: float, scale: float) -> "KernelField":
        """The field ``offset + scale * self``."""
        return KernelField(offset + scale * self.constant, self.centers, self.widths, scale * self.weights)

    def merged(self) -> "KernelField":
        """Combine kernels sharing identical centre and width."""
        if len(self) == 0:
            return self
        keys = np.column_stack([self.centers, self.widths])
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        weights = np.zeros(len(uniq))
        np.add.at(weights, inverse.reshape(-1), self.weights)
        return KernelField(self.constant, uniq[:, :3], uniq[:, 3], weights)

    def concat(self, other: "KernelField") -> "KernelField":
        return KernelField(
            self.constant + other.constant,
            np.vstack([self.centers, other.centers]),
            np.concatenate([self.widths, other.widths]),
            np.concatenate([self.weights, other.weights]),
        )

    def mass(self) -> float:
        """Integral of the kernel part over R^3."""
        return float(np.sum(self.weights * (2.0 * np.pi) ** 1.5 * self.widths**3))

    def __call__(self, x) -> np.ndarray:
        return evaluate_field(self, x)


def kernel_profile(r):
    """Squared-exponential profile ``phi(r) = exp(-r^2 / 2)``."""
    return np.exp(-0.5 * np.asarray(r, dtype=float) ** 2)


# ---------------------------------------------------------------------------
# parameters


def _spline_basis(d, length: float) -> np.ndarray:
    """Hat-function weights of the 5-knot linear spline at distances ``d`` (clamped)."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    knots = np.linspace(0.0, length, N_KNOTS)
    eye = np.eye(N_KNOTS)
    return np.stack([np.interp(d, knots, eye[k]) for k in range(N_KNOTS)], axis=-1)


@dataclass(frozen=True)
class DispersionParams:
    """Plume description; 14 of the fields form the fit vector ``theta``.

    ``wind`` holds one vector per constant-wind interval; ``wind_breaks`` the
    switching times (len(wind) - 1 of them).  ``diffusion`` optionally gives
    the variance ``h(t)`` as piecewise-linear ``(time, value)`` knots, in which
    case it overrides ``width_knots`` for puff bandwidths.
    """

    source: tuple[float, float, float] = (0.0, 0.0, 0.0)
    release_rate: float = 1.0
    wind: tuple[tuple[float, float, float], ...] = ((0.0, 1.0, 0.0),)
    wind_breaks: tuple[float, ...] = ()
    diffusion: tuple[tuple[float, float], ...] | None = None
    ambient_level: float = 0.0
    width_knots: tuple[float, ...] = (4.0, 7.0, 10.0, 13.0, 16.0)
    drift_knots: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)
    scatter_scale: float = 0.0
    plume_length: float = 120.0
    release_duration: float | None = None
    width_floor: float = 0.25

    def __post_init__(self):
        if len(self.width_knots) != N_KNOTS or len(self.drift_knots) != N_KNOTS:
            raise ValueError(f"splines need exactly {N_KNOTS} knots")
        if len(self.wind_breaks) != len(self.wind) - 1:
            raise ValueError("need one wind break between consecutive wind vectors")
        if self.release_rate < 0 or self.ambient_level < 0 or self.scatter_scale < 0:
            raise ValueError("release_rate, ambient_level and scatter_scale must be >= 0")
        if self.diffusion is not None:
            vals = np.array([v for _, v in self.diffusion])
            if np.any(vals < 0) or np.any(np.diff(vals) < 0):
                raise ValueError("diffusion h(t) must be nonnegative and nondecreasing")

    # -- theta vector ------------------------------------------------------
    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.release_rate, self.source[0], self.source[1], *self.width_knots, *self.drift_knots, self.scatter_scale],
            dtype=float,
        )

    def with_vector(self, theta) -> "DispersionParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_PARAMS,):
            raise ValueError(f"theta must have shape ({N_PARAMS},)")
        return replace(
            self,
            release_rate=float(theta[IDX_RATE]),
            source=(float(theta[1]), float(theta[2]), self.source[2]),
            width_knots=tuple(float(v) for v in theta[IDX_WIDTH]),
            drift_knots=tuple(float(v) for v in theta[IDX_DRIFT]),
            scatter_scale=float(theta[IDX_SCATTER]),
        )

    # -- kinematics --------------------------------------------------------
    def _wind_segments(self):
        starts = np.concatenate([[0.0], np.asarray(self.wind_breaks, dtype=float)])
        return starts, np.asarray(self.wind, dtype=float).reshape(-1, 3)

    def _wind_integral(self, t0: float, t1: float) -> tuple[np.ndarray, float]:
        """(displacement, path length) of the wind over [t0, t1]."""
        starts, vecs = self._wind_segments()
        ends = np.concatenate([starts[1:], [np.inf]])
        disp = np.zeros(3)
        dist = 0.0
        for a, b, w in zip(starts, ends, vecs):
            lo, hi = max(a, t0), min(b, t1)
            if hi > lo:
                disp += (hi - lo) * w
                dist += (hi - lo) * float(np.linalg.norm(w))
        return disp, dist

    def duration(self) -> float:
        """Release duration T: time for the plume to extend ``plume_length`` downwind."""
        if self.release_duration is not None:
            return float(self.release_duration)
        starts, vecs = self._wind_segments()
        speeds = np.linalg.norm(vecs, axis=1)
        covered = 0.0
        for i, (a, u) in enumerate(zip(starts, speeds)):
            b = starts[i + 1] if i + 1 < len(starts) else np.inf
            if u > 0 and covered + u * (b - a) >= self.plume_length:
                return float(a + (self.plume_length - covered) / u)
            covered += u * (b - a) if np.isfinite(b) else 0.0
        raise ValueError("zero wind: release_duration must be given")

    def variance_at(self, age: float) -> float:
        if self.diffusion is None:
            raise ValueError("no diffusion function configured")
        ts, vs = zip(*self.diffusion)
        return float(np.interp(age, ts, vs))

    def centerline(self, release_time: float, obs_time: float) -> tuple[np.ndarray, float]:
        """(centre, downwind distance) of the puff released at ``release_time`` seen at ``obs_time``."""
        disp, dist = self._wind_integral(release_time, obs_time)
        center = np.asarray(self.source, dtype=float) + disp
        center[2] += float(_spline_basis(dist, self.plume_length)[0] @ np.asarray(self.drift_knots))
        return center, dist

    def bandwidth(self, age: float, dist: float) -> float:
        if self.diffusion is not None:
            return float(np.sqrt(self.variance_at(age)))
        return float(_spline_basis(dist, self.plume_length)[0] @ np.asarray(self.width_knots))


def evaluate_puff(params: DispersionParams, x, t: float) -> np.ndarray:
    """Concentration of a single instantaneous release of ``release_rate`` mol at time 0, seen at time t."""
    if t <= 0:
        raise DegeneratePuffError("puff evaluated at non-positive time")
    center, dist = params.centerline(0.0, t)
    h_std = params.bandwidth(t, dist)
    if not h_std > 0:
        raise DegeneratePuffError("puff has zero spread")
    x = np.asarray(x, dtype=float)
    r2 = np.sum((x - center) ** 2, axis=-1)
    var = h_std**2
    return params.release_rate * (2.0 * np.pi * var) ** -1.5 * np.exp(-r2 / (2.0 * var))


def _release_layout(params: DispersionParams, n_puffs: int):
    """Release times, quadrature masses (per unit rate) and observation time."""
    if n_puffs < 1:
        raise ValueError("n_puffs must be >= 1")
    T = params.duration()
    if n_puffs == 1:
        return np.array([0.0]), np.array([1.0]), T
    release = np.linspace(0.0, T, n_puffs)
    tau = np.full(n_puffs, T / (n_puffs - 1))
    tau[[0, -1]] *= 0.5
    return release, tau, T


def _puff_geometry(params: DispersionParams, n_puffs: int):
    release, tau, T = _release_layout(params, n_puffs)
    centers = np.empty((n_puffs, 3))
    dists = np.empty(n_puffs)
    raw_h = np.empty(n_puffs)
    for j, r in enumerate(release):
        centers[j], dists[j] = params.centerline(r, T)
        raw_h[j] = params.bandwidth(T - r, dists[j])
    h = np.maximum(raw_h, params.width_floor)
    return centers, dists, raw_h, h, tau


def discretize_release(params: DispersionParams, n_puffs: int = 16) -> KernelField:
    """Kernel field approximating the release by ``n_puffs`` puffs (trapezoidal in release time).

    With ``n_puffs == 1`` the release is a single instantaneous puff of
    ``release_rate`` mol; otherwise ``release_rate`` is in mol/s.
    """
    centers, _, _, h, tau = _puff_geometry(params, n_puffs)
    weights = params.release_rate * tau * (2.0 * np.pi * h**2) ** -1.5
    return KernelField(params.ambient_level, centers, h, weights)


def kernel_jacobian(params: DispersionParams, n_puffs: int = 16) -> np.ndarray:
    """d(w_j, m_jx, m_jy, m_jz, h_j)/d theta, shape (n_puffs, 5, 14)."""
    centers, dists, raw_h, h, tau = _puff_geometry(params, n_puffs)
    basis = _spline_basis(dists, params.plume_length)  # (n, 5)
    jac = np.zeros((n_puffs, 5, N_PARAMS))
    unit_w = tau * (2.0 * np.pi * h**2) ** -1.5
    w = params.release_rate * unit_w
    jac[:, 0, IDX_RATE] = unit_w
    jac[:, 1, 1] = 1.0
    jac[:, 2, 2] = 1.0
    jac[:, 3, IDX_DRIFT] = basis
    live = (raw_h > params.width_floor) & (params.diffusion is None)
    dh = np.where(live[:, None], basis, 0.0)
    jac[:, 4, IDX_WIDTH] = dh
    jac[:, 0, IDX_WIDTH] = (-3.0 * w / h)[:, None] * dh
    return jac


def kernel_partials(field: KernelField, x) -> np.ndarray:
    """d u(x) / d(w_j, m_j, h_j), shape (..., N, 5)."""
    x = np.asarray(x, dtype=float)
    diff = x[..., None, :] - field.centers  # (..., N, 3)
    r2 = np.sum(diff**2, axis=-1)
    h2 = field.widths**2
    e = np.exp(-r2 / (2.0 * h2))
    out = np.empty(diff.shape[:-1] + (5,))
    out[..., 0] = e
    out[..., 1:4] = (field.weights * e / h2)[..., None] * diff
    out[..., 4] = field.weights * e * r2 / (h2 * field.widths)
    return out


def field_gradient(params: DispersionParams, x, n_puffs: int = 16) -> np.ndarray:
    """d u(x) / d theta for the discretised release (14-vector; scatter_scale entry is 0)."""
    fld = discretize_release(params, n_puffs)
    parts = kernel_partials(fld, x)
    jac = kernel_jacobian(params, n_puffs)
    return np.einsum("...np,npq->...q", parts, jac)


# ---------------------------------------------------------------------------
# field evaluation and line integrals


def evaluate_field(field: KernelField, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if len(field) == 0:
        return np.full(x.shape[:-1], field.constant)
    pts = x.reshape(-1, 3)
    out = np.empty(len(pts))
    inv = 1.0 / (2.0 * field.widths**2)
    step = max(1, 2_000_000 // len(field))  # bound the temporary (points x kernels) array
    for lo in range(0, len(pts), step):
        r2 = np.sum((pts[lo : lo + step, None, :] - field.centers) ** 2, axis=-1)
        out[lo : lo + step] = np.exp(-r2 * inv) @ field.weights
    return field.constant + out.reshape(x.shape[:-1])


def erf_diff(a, b):
    """``erf(b) - erf(a)`` without cancellation in the tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    both_pos = (a >= 0) & (b >= 0)
    both_neg = (a <= 0) & (b <= 0)
    out = erf(b) - erf(a)
    out = np.where(both_pos, erfc(a) - erfc(b), out)
    out = np.where(both_neg, erfc(-b) - erfc(-a), out)
    return out


def line_integral(field: KernelField, origin, direction, s0, s1) -> np.ndarray:
    """Exact ``int_{s0}^{s1} field(origin + s * direction) ds`` (direction must be unit).

    ``s0``/``s1`` broadcast and may be infinite.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    s1 = np.asarray(s1, dtype=float)
    if np.any(s1 < s0):
        raise ValueError("line_integral needs s0 <= s1")
    length = s1 - s0
    const_part = field.constant * length if field.constant != 0 else np.zeros_like(length)
    if len(field) == 0:
        return const_part
    rel = field.centers - o  # (N, 3)
    s_star = rel @ d  # closest approach parameter
    perp = rel - s_star[:, None] * d
    dist2 = np.sum(perp**2, axis=1)
    h = field.widths
    scale = field.weights * np.exp(-dist2 / (2.0 * h**2)) * h * np.sqrt(np.pi / 2.0)
    a = (s0[..., None] - s_star) / (np.sqrt(2.0) * h)
    b = (s1[..., None] - s_star) / (np.sqrt(2.0) * h)
    return const_part + np.sum(scale * erf_diff(a, b), axis=-1)


def segment_partials(field: KernelField, origin, direction, length) -> np.ndarray:
    """``d/d(w_j, m_j, h_j) int_0^length u(origin + s d) ds``, shape (..., N, 5).

    ``origin`` and ``length`` broadcast against each other; ``direction`` is a
    single unit vector.
    """
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    L = np.asarray(length, dtype=float)[..., None]
    rel = field.centers - o[..., None, :]  # (..., N, 3)
    s_star = rel @ d
    perp = rel - s_star[..., None] * d
    D2 = np.sum(perp**2, axis=-1)
    h = field.widths
    E = np.exp(-D2 / (2.0 * h**2))
    a = -s_star
    b = L - s_star
    sq = np.sqrt(2.0) * h
    I0 = E * h * np.sqrt(np.pi / 2.0) * erf_diff(a / sq, b / sq)
    ga = np.exp(-(a**2) / (2.0 * h**2))
    gb = np.exp(-(b**2) / (2.0 * h**2))
    I1 = E * h**2 * (ga - gb)
    I2 = h**2 * I0 - h**2 * E * (b * gb - a * ga)
    w = field.weights
    out = np.empty(I0.shape + (5,))
    out[..., 0] = I0
    out[..., 1:4] = (w / h**2)[..., None] * (I1[..., None] * d - I0[..., None] * perp)
    out[..., 4] = w / h**3 * (D2 * I0 + I2)
    return out
