"""Random, mean-preserving perturbations of a smooth plume.

Every replicate chain follows the puff centreline with an AR(1) offset whose
marginal standard deviation is ``sqrt(phi_V)`` times the local width, while
kernel widths shrink by ``sqrt(1 - phi_V)``; the Gaussian convolution identity
makes each chain an unbiased draw of the smooth field.  Jumps add a further
offset of relative size ``sqrt(phi_J)`` and split the chain in two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dispersion import DispersionParams, KernelField, _puff_geometry
from .rng import generator


@dataclass(frozen=True)
class TurbulenceConfig:
    levels: int = 5
    replicates: tuple[int, ...] = (1, 1, 3, 2, 1)
    phi_v: tuple[float, ...] = (0.0, 8 / 9, 2 / 3, 2 / 3, 4 / 9)
    jumps: tuple[int, ...] = (0, 0, 0, 2, 4)
    phi_j: tuple[float, ...] = (0.0, 0.0, 0.0, 0.55, 0.4)
    ar_coeff: float = 0.9

    def __post_init__(self):
        for name in ("replicates", "phi_v", "jumps", "phi_j"):
            if len(getattr(self, name)) != self.levels:
                raise ValueError(f"{name} must have one entry per level ({self.levels})")
        if any(not 0.0 <= p < 1.0 for p in (*self.phi_v, *self.phi_j)):
            raise ValueError("variance fractions must lie in [0, 1)")
        if any(m < 0 for m in self.replicates) or sum(self.replicates) == 0:
            raise ValueError("need at least one replicate")
        if any(j < 0 for j in self.jumps):
            raise ValueError("jump counts must be >= 0")
        if not -1.0 < self.ar_coeff < 1.0:
            raise ValueError("ar_coeff must lie in (-1, 1)")


def _chain(rng, dists, phi_v, n_jumps, phi_j, a):
    """Offsets (in units of the local width), width factors and weight factors of one chain.

    Returns a list of ``(index, offset[3], width_factor, weight_factor)``
    over all branches.  Puffs are visited in order of increasing downwind
    distance; a jump at distance ``d`` splits every branch reaching it.
    """
    order = np.argsort(dists, kind="stable")
    jump_at = np.sort(rng.uniform(0.0, dists.max(), size=n_jumps)) if n_jumps else np.zeros(0)
    sv, sw = np.sqrt(phi_v), np.sqrt(1.0 - phi_v)
    innov = np.sqrt(1.0 - a * a)
    out = []
    # branch state: (position in order, AR state, jump offset, width factor, weight, next jump)
    stack = [(0, rng.standard_normal(3), np.zeros(3), sw, 1.0, 0)]
    while stack:
        pos, e, jump_off, wf, wt, nj = stack.pop()
        while pos < len(order):
            i = order[pos]
            if nj < n_jumps and dists[i] > jump_at[nj]:
                u = rng.uniform()
                for share in (u, 1.0 - u):
                    z = rng.standard_normal(3)
                    child_off = jump_off + np.sqrt(phi_j) * wf * z
                    stack.append((pos, e.copy(), child_off, wf * np.sqrt(1.0 - phi_j), wt * share, nj + 1))
                break
            out.append((i, sv * e + jump_off, wf, wt))
            e = a * e + innov * rng.standard_normal(3)
            pos += 1
    return out


def perturb(params: DispersionParams, cfg: TurbulenceConfig | None = None, rng=None, n_puffs: int = 16) -> KernelField:
    """One turbulent realisation of ``discretize_release(params, n_puffs)``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    cfg = cfg or TurbulenceConfig()
    if not isinstance(rng, np.random.Generator):
        rng = generator(0 if rng is None else int(rng), 0x7B)
    centers, dists, _, h, tau = _puff_geometry(params, n_puffs)
    total = sum(cfg.replicates)
    cs, hs, ws = [], [], []
    for k in range(cfg.levels):
        for _ in range(cfg.replicates[k]):
            for i, off, wf, wt in _chain(rng, dists, cfg.phi_v[k], cfg.jumps[k], cfg.phi_j[k], cfg.ar_coeff):
                width = h[i] * wf
                cs.append(centers[i] + h[i] * off)
                hs.append(width)
                ws.append(params.release_rate * tau[i] * wt / total * (2.0 * np.pi * width**2) ** -1.5)
    return KernelField(params.ambient_level, np.array(cs), np.array(hs), np.array(ws))


def regular_grid(lower, upper, shape) -> np.ndarray:
    """Cell centres of a regular box grid, shape (prod(shape), 3)."""
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi, n in zip(lower, upper, shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def l1_divergence(field_a, field_b, grid) -> float:
    """``sum |a - b| / sum a`` on a regular grid of points (equal cell volumes cancel)."""
    grid = np.asarray(grid, dtype=float)
    a = np.asarray(field_a(grid), dtype=float)
    b = np.asarray(field_b(grid), dtype=float)
    mass = float(np.sum(a))
    if mass <= 0.0:
        raise ValueError("reference field has zero mass on the grid")
    return float(np.sum(np.abs(a - b))) / mass
