"""Optical coefficients of a gas plume and scattering phase functions.

The scene couples one concentration-like field ``u`` to both wavelengths:

    sigma_s(x)       = sigma_s_ambient + c_s * u(x)             (on and off)
    sigma_a_off(x)   = sigma_a_ambient
    sigma_a_on(x)    = sigma_a_ambient + C_ambient + C_DIAL * u(x)

Scattering and the phase function are shared by construction: both
wavelengths read the very same ``scatter_field`` object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from .dispersion import DispersionParams, KernelField, discretize_release, evaluate_field

Wavelength = Literal["on", "off"]


@dataclass(frozen=True)
class PhaseFunction:
    """Homogeneous phase function.

    ``kind`` is ``"isotropic"``, ``"hg"`` (Henyey-Greenstein with asymmetry
    ``g``) or ``"delta"``: a forward delta peak of mass ``delta_fraction``
    mixed with an HG(``g``) base.
    """

    kind: Literal["isotropic", "hg", "delta"] = "isotropic"
    g: float = 0.0
    delta_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "hg", "delta"):
            raise ValueError(f"unknown phase function kind {self.kind!r}")
        if not -1.0 < self.g < 1.0:
            raise ValueError("asymmetry g must lie in (-1, 1)")
        if not 0.0 <= self.delta_fraction <= 1.0:
            raise ValueError("delta_fraction must lie in [0, 1]")
        if self.kind == "isotropic" and self.g != 0.0:
            raise ValueError("isotropic phase has g = 0")

    @classmethod
    def henyey_greenstein(cls, g: float) -> "PhaseFunction":
        return cls("isotropic") if g == 0.0 else cls("hg", g)

    @property
    def mean_cosine(self) -> float:
        lam = self.delta_fraction if self.kind == "delta" else 0.0
        return lam + (1.0 - lam) * self.g

    def pdf(self, cos_theta) -> np.ndarray:
        """Density per steradian; the delta part (if any) is not included."""
        scale = 1.0 - self.delta_fraction if self.kind == "delta" else 1.0
        return scale * hg_pdf(cos_theta, self.g)


def hg_pdf(cos_theta, g: float) -> np.ndarray:
    """Henyey-Greenstein density per steradian."""
    mu = np.asarray(cos_theta, dtype=float)
    return (1.0 - g * g) / (4.0 * np.pi * (1.0 + g * g - 2.0 * g * mu) ** 1.5)


def hg_cosine(g: float, u) -> np.ndarray:
    """Inverse CDF of the HG scattering cosine at uniform variates ``u``."""
    u = np.asarray(u, dtype=float)
    if abs(g) < 1e-6:
        return 2.0 * u - 1.0
    frac = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    return np.clip((1.0 + g * g - frac * frac) / (2.0 * g), -1.0, 1.0)


def hg_sample(g: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Unit scattering directions in the frame where the incoming direction is +z."""
    n = 1 if size is None else int(size)
    u = rng.random((n, 2))
    mu = hg_cosine(g, u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    st = np.sqrt(np.maximum(0.0, 1.0 - mu * mu))
    out = np.column_stack([st * np.cos(phi), st * np.sin(phi), mu])
    return out[0] if size is None else out


def delta_peak_reduce(sigma_s, phase: PhaseFunction) -> tuple[np.ndarray | float, PhaseFunction]:
    """Fold the forward-peaked part of ``phase`` into a reduced scattering coefficient.

    Returns ``((1 - lam) * sigma_s, isotropic)`` with ``lam`` the mean cosine.
    """
    lam = phase.mean_cosine
    reduced = (1.0 - lam) * np.asarray(sigma_s, dtype=float)
    return (reduced if reduced.ndim else float(reduced)), PhaseFunction()


@dataclass(frozen=True, eq=False)
class OpticalScene:
    concentration: KernelField = field(default_factory=KernelField)
    sigma_s_ambient: float = 0.0
    sigma_a_ambient: float = 0.0
    scatter_scale: float = 0.0
    C_DIAL: float = 0.0
    C_ambient: float = 0.0
    phase: PhaseFunction = field(default_factory=PhaseFunction)

    def __post_init__(self):
        for name in ("sigma_s_ambient", "sigma_a_ambient", "scatter_scale", "C_DIAL", "C_ambient"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        u = self.concentration
        if u.constant < 0 or np.any(u.weights < 0):
            raise ValueError("concentration field must be nonnegative")

    @classmethod
    def from_params(cls, params: DispersionParams, n_puffs: int = 16, **kwargs) -> "OpticalScene":
        kwargs.setdefault("scatter_scale", params.scatter_scale)
        return cls(discretize_release(params, n_puffs), **kwargs)

    @cached_property
    def scatter_field(self) -> KernelField:
        return self.concentration.affine(self.sigma_s_ambient, self.scatter_scale)

    @cached_property
    def alpha_field(self) -> KernelField:
        return self.concentration.affine(self.C_ambient, self.C_DIAL)

    def scattering(self, wavelength: Wavelength) -> KernelField:
        _check(wavelength)
        return self.scatter_field

    def absorption(self, wavelength: Wavelength) -> KernelField:
        """Absorption field at ``wavelength``."""
        _check(wavelength)
        if wavelength == "off":
            return KernelField(self.sigma_a_ambient)
        return self.alpha_field.affine(self.sigma_a_ambient, 1.0)

    def extinction(self, wavelength: Wavelength) -> KernelField:
        return self.absorption(wavelength).concat(self.scatter_field)


def _check(wavelength: str) -> None:
    if wavelength not in ("on", "off"):
        raise ValueError(f"wavelength must be 'on' or 'off', got {wavelength!r}")


def coefficients_at(scene: OpticalScene, x, wavelength: Wavelength) -> tuple[np.ndarray, np.ndarray]:
    """(sigma_a, sigma_s) at points ``x``."""
    _check(wavelength)
    sig_s = evaluate_field(scene.scatter_field, x)
    sig_a = np.full_like(sig_s, scene.sigma_a_ambient)
    if wavelength == "on":
        sig_a = sig_a + evaluate_field(scene.alpha_field, x)
    return sig_a, sig_s
