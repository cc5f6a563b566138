"""Semi-parametric reconstruction by profiled Poisson likelihood and Fisher scoring.

Every bin carries a free positive multiplier ``psi`` shared by both
wavelengths.  Maximising over it in closed form leaves a binomial likelihood
for the on/off split with success probability ``P = m_on / (m_on + m_off)``,
which depends on theta only through the differential absorption.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import SCHEMA_VERSION
from .dispersion import IDX_DRIFT, IDX_RATE, IDX_SCATTER, IDX_WIDTH, N_PARAMS, PARAM_NAMES, DispersionParams, KernelField, evaluate_field
from .measurement import MeasurementSet
from .rte import Detector, TimeBinning, response_with_gradient

log = logging.getLogger(__name__)


class NumericalGuardError(FloatingPointError):
    """Binomial probabilities left the open unit interval."""


class StepFailure(RuntimeError):
    """No positive definite damped Fisher matrix could be formed."""


def _second_difference(n: int) -> np.ndarray:
    D = np.zeros((n - 2, n))
    for i in range(n - 2):
        D[i, i : i + 3] = (1.0, -2.0, 1.0)
    return D


@dataclass(frozen=True)
class Regularizer:
    """Second-difference penalty on both splines plus a quadratic pull on c_s."""

    smooth_weight: float = 10.0
    scatter_center: float = 0.0
    scatter_weight: float = 0.0
    lower: tuple[float, ...] = field(
        default_factory=lambda: tuple([0.0, -np.inf, -np.inf] + [0.25] * 5 + [-np.inf] * 5 + [0.0])
    )

    @classmethod
    def for_scatter_prior(cls, center: float, rel_scale: float = 1.0, **kw) -> "Regularizer":
        """Pull c_s towards ``center``; a deviation of ``rel_scale * center`` costs 1/2."""
        return cls(scatter_center=center, scatter_weight=0.5 / (rel_scale * center) ** 2 if center > 0 else 0.0, **kw)

    @property
    def hessian(self) -> np.ndarray:
        H = np.zeros((N_PARAMS, N_PARAMS))
        D = _second_difference(5)
        block = 2.0 * self.smooth_weight * D.T @ D
        H[IDX_WIDTH, IDX_WIDTH] = block
        H[IDX_DRIFT, IDX_DRIFT] = block
        H[IDX_SCATTER, IDX_SCATTER] = 2.0 * self.scatter_weight
        return H

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        D = _second_difference(5)
        v = self.smooth_weight * (np.sum((D @ theta[IDX_WIDTH]) ** 2) + np.sum((D @ theta[IDX_DRIFT]) ** 2))
        return float(v + self.scatter_weight * (theta[IDX_SCATTER] - self.scatter_center) ** 2)

    def gradient(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        g = self.hessian @ theta
        g[IDX_SCATTER] -= 2.0 * self.scatter_weight * self.scatter_center
        return g

    def project(self, theta) -> np.ndarray:
        return np.maximum(np.asarray(theta, dtype=float), np.asarray(self.lower))


# ---------------------------------------------------------------------------
# losses


def _counts(data: MeasurementSet, subtract_ambient: bool) -> tuple[np.ndarray, np.ndarray]:
    m = data.on.astype(float)
    n = data.off.astype(float)
    if subtract_ambient:
        amb = data.ambient[:, None, None]
        m = np.maximum(m - amb, 0.0)
        n = np.maximum(n - amb, 0.0)
    return m, n


def profile_nuisance(m_on, m_off, data: MeasurementSet, subtract_ambient: bool = False) -> np.ndarray:
    """Closed-form maximiser ``psi* = (m + n) / (scale * (m_on + m_off))`` per bin.

    Bins with zero response but nonzero counts get ``psi* = nan`` and a warning.
    """
    m, n = _counts(data, subtract_ambient)
    denom = data.signal_scale * (np.asarray(m_on) + np.asarray(m_off))
    total = m + n
    bad = (denom <= 0) & (total > 0)
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} bins have counts but zero modelled response; excluded", RuntimeWarning)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(total > 0, total / denom, 0.0)
    return np.where(bad, np.nan, psi)


def binomial_probability(m_on, m_off) -> np.ndarray:
    m_on = np.asarray(m_on, dtype=float)
    m_off = np.asarray(m_off, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return m_on / (m_on + m_off)


def _data_mask(m_on, m_off, m, n) -> np.ndarray:
    return ((m + n) > 0) & ((np.asarray(m_on) + np.asarray(m_off)) > 0)


def profiled_loss(
    m_on, m_off, data: MeasurementSet, theta=None, reg: Regularizer | None = None, subtract_ambient: bool = False
) -> float:
    """``-sum m log P - sum n log(1 - P) + R(theta)``."""
    m, n = _counts(data, subtract_ambient)
    mask = _data_mask(m_on, m_off, m, n)
    P = binomial_probability(m_on, m_off)[mask]
    if np.any(~((P > 0) & (P < 1))):
        raise NumericalGuardError("binomial probability outside (0, 1)")
    val = -np.sum(m[mask] * np.log(P)) - np.sum(n[mask] * np.log1p(-P))
    if reg is not None and theta is not None:
        val += reg.value(theta)
    return float(val)


def loss_functional(
    m_on, m_off, psi, data: MeasurementSet, theta=None, reg: Regularizer | None = None, subtract_ambient: bool = False
) -> float:
    """Unprofiled negative log-likelihood (up to constants) at nuisance ``psi``."""
    m, n = _counts(data, subtract_ambient)
    m_on = np.asarray(m_on, dtype=float)
    m_off = np.asarray(m_off, dtype=float)
    psi = np.broadcast_to(np.asarray(psi, dtype=float), m.shape)
    mask = _data_mask(m_on, m_off, m, n)
    lin = data.signal_scale * (m_on + m_off) * psi
    with np.errstate(divide="ignore"):
        logs = m * np.log(np.where(mask, m_on, 1.0)) + n * np.log(np.where(mask, m_off, 1.0)) + (m + n) * np.log(np.where(mask, psi, 1.0))
    val = float(np.sum(np.where(mask, lin - logs, lin)))
    if reg is not None and theta is not None:
        val += reg.value(theta)
    return val


def loss_gradient_and_fisher(values, grad, data: MeasurementSet, theta, reg: Regularizer, subtract_ambient: bool = False):
    """Profiled loss, its theta gradient and the binomial Fisher matrix.

    ``values``: (2, n_fov, n_dir, n_bins) with wavelength axis (off, on);
    ``grad``: same plus a trailing theta axis.
    """
    m, n = _counts(data, subtract_ambient)
    off, on = values[0], values[1]
    mask = _data_mask(on, off, m, n)
    tot = np.where(mask, on + off, 1.0)
    P = np.where(mask, on / tot, 0.5)
    if np.any(~((P[mask] > 0) & (P[mask] < 1))):
        raise NumericalGuardError("binomial probability outside (0, 1)")
    dP = (off[..., None] * grad[1] - on[..., None] * grad[0]) / tot[..., None] ** 2
    dP = np.where(mask[..., None], dP, 0.0)
    loss = profiled_loss(on, off, data, theta, reg, subtract_ambient)
    resid = np.where(mask, (m - (m + n) * P) / (P * (1 - P)), 0.0)
    dP = dP.reshape(-1, dP.shape[-1])
    g = -resid.ravel() @ dP + reg.gradient(theta)
    wts = np.where(mask, (m + n) / (P * (1 - P)), 0.0).ravel()
    H = dP.T @ (wts[:, None] * dP) + reg.hessian
    return loss, g, 0.5 * (H + H.T)


def fisher_scoring_step(
    theta, gradient, fisher, step: float = 1.0, damping: float = 0.0, reg: Regularizer | None = None, max_damping: float = 1e12
) -> np.ndarray:
    """``theta - step * (H + lambda D)^-1 grad`` with Levenberg-Marquardt damping.

    ``D`` is the diagonal of ``H`` (floored); damping grows tenfold until the
    matrix is positive definite.  ``reg`` supplies box constraints.
    """
    theta = np.asarray(theta, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if step == 0.0 or not np.any(gradient):
        return theta.copy()
    H = np.asarray(fisher, dtype=float)
    diag = np.maximum(np.diag(H), 1e-12 * max(np.max(np.abs(np.diag(H))), 1e-300))
    lam = damping
    while True:
        try:
            L = np.linalg.cholesky(H + lam * np.diag(diag))
            break
        except np.linalg.LinAlgError:
            lam = 1e-6 if lam == 0 else lam * 10.0
            if lam > max_damping:
                raise StepFailure("Fisher matrix not positive definite after maximal damping")
    delta = np.linalg.solve(L.T, np.linalg.solve(L, gradient))
    out = theta - step * delta
    return reg.project(out) if reg is not None else out


# ---------------------------------------------------------------------------
# forward model and fitting


@dataclass
class ForwardModel:
    """theta -> (responses, gradients) for a fixed detector/scan/optics setup."""

    base: DispersionParams
    optics: dict
    detector: Detector
    directions: np.ndarray  # (n_dir, 3) unit vectors
    binning: TimeBinning
    n_puffs: int = 16
    n_paths: int = 0
    k_max: int = 8
    threads: int | None = None

    def params(self, theta) -> DispersionParams:
        return self.base.with_vector(theta)

    def __call__(self, theta, seed: int = 0, stream: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray]:
        return response_with_gradient(
            self.params(theta), self.optics, self.detector, self.directions, self.binning,
            self.n_paths, self.k_max, seed, stream, self.n_puffs, True, self.threads,
        )


@dataclass
class FitConfig:
    max_iter: int = 30
    tol: float = 1e-6
    max_halvings: int = 8
    damping: float = 1e-3
    subtract_ambient: bool = True
    seed: int = 0


@dataclass
class FitResult:
    params: DispersionParams
    theta: np.ndarray
    loss_trace: list[float]
    psi: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    seeds: list[int]

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "theta": {name: float(v) for name, v in zip(PARAM_NAMES, self.theta)},
            "covariance": [float(x) for x in self.covariance.ravel()],
            "loss_trace": [float(x) for x in self.loss_trace],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "seeds": [int(s) for s in self.seeds],
        }
        return json.dumps(doc, indent=2) + "\n"


def fit(
    data: MeasurementSet,
    theta0,
    model: Callable,
    reg: Regularizer | None = None,
    config: FitConfig | None = None,
) -> FitResult:
    """Fisher scoring with backtracking on the profiled loss.

    ``model(theta, seed, stream)`` returns (values, gradients) aligned with
    ``data``.  Iteration ``k`` uses stream ``(k,)`` for the whole line search.
    """
    reg = reg or Regularizer()
    cfg = config or FitConfig()
    theta = reg.project(np.asarray(theta0, dtype=float))
    sub = cfg.subtract_ambient
    trace: list[float] = []
    seeds: list[int] = []
    converged = False
    H = np.eye(N_PARAMS)
    values = None
    it = 0
    for it in range(cfg.max_iter):
        seeds.append(it)
        values, grad = model(theta, cfg.seed, (it,))
        loss, g, H = loss_gradient_and_fisher(values, grad, data, theta, reg, sub)
        trace.append(loss)
        step, accepted = 1.0, False
        lam = cfg.damping
        for _ in range(cfg.max_halvings + 1):
            try:
                cand = fisher_scoring_step(theta, g, H, step, lam, reg)
            except StepFailure:
                break
            v_new, _ = model(cand, cfg.seed, (it,))
            try:
                new_loss = profiled_loss(v_new[1], v_new[0], data, cand, reg, sub)
            except NumericalGuardError:
                new_loss = np.inf
            if new_loss <= loss:
                accepted = True
                break
            step *= 0.5
        log.info("iter %d loss %.6g step %.3g accepted %s", it, loss, step, accepted)
        if not accepted:
            converged = abs(g @ np.linalg.lstsq(H, g, rcond=None)[0]) < max(cfg.tol * abs(loss), 1e-8)
            break
        rel = abs(loss - new_loss) / max(abs(loss), 1e-300)
        theta = cand
        if rel < cfg.tol:
            converged = True
            trace.append(new_loss)
            values, grad = model(theta, cfg.seed, (it + 1,))
            _, _, H = loss_gradient_and_fisher(values, grad, data, theta, reg, sub)
            break
    psi = profile_nuisance(values[1], values[0], data, sub)
    cov = np.linalg.pinv(H, hermitian=True)
    return FitResult(model_params(model, theta), theta, trace, psi, 0.5 * (cov + cov.T), converged, it + 1, seeds)


def model_params(model, theta) -> DispersionParams | None:
    return model.params(theta) if hasattr(model, "params") else None


# ---------------------------------------------------------------------------
# error metrics


def evaluation_grid(field: KernelField, spacing: float = 1.0, pad: float = 4.0, z_floor: float | None = 0.0):
    """Regular grid (points, cell volume) covering ``field``'s kernels to ``pad`` widths."""
    lo = np.min(field.centers - pad * field.widths[:, None], axis=0)
    hi = np.max(field.centers + pad * field.widths[:, None], axis=0)
    if z_floor is not None:
        lo[2] = max(lo[2], z_floor)
    axes = [np.arange(a + spacing / 2, b, spacing) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts, spacing**3


def l1_relative(estimate: KernelField, truth: KernelField, grid) -> float:
    """``int |a - b| / int b`` on a quadrature grid (kernel parts only)."""
    pts, vol = grid
    a = KernelField(0.0, estimate.centers, estimate.widths, estimate.weights)
    b = KernelField(0.0, truth.centers, truth.widths, truth.weights)
    total = 0.0
    diff = 0.0
    for chunk in np.array_split(pts, max(1, len(pts) // 20000)):
        va = evaluate_field(a, chunk)
        vb = evaluate_field(b, chunk)
        total += vb.sum()
        diff += np.abs(va - vb).sum()
    if total <= 0:
        raise ValueError("truth field has zero mass on the grid")
    return float(diff / total)


def error_metrics(estimate: KernelField, truth: KernelField, grid=None, rate_estimate=None, rate_truth=None) -> tuple[float, float]:
    """(relative L1 error of the field, relative release-rate error)."""
    grid = grid if grid is not None else evaluation_grid(truth)
    l1 = l1_relative(estimate, truth, grid)
    if rate_estimate is None or rate_truth is None:
        # integrated mass stands in for the release
        rate_estimate, rate_truth = estimate.mass(), truth.mass()
    if rate_truth == 0:
        raise ValueError("true release is zero")
    return float(l1), float(abs(rate_estimate - rate_truth) / abs(rate_truth))


def grid_search_start(
    data: MeasurementSet,
    model: Callable,
    base_theta,
    candidates_xy: Sequence[tuple[float, float]],
    rates: Sequence[float],
    reg: Regularizer | None = None,
    subtract_ambient: bool = True,
) -> np.ndarray:
    """Best starting theta over a coarse lattice of source positions and release rates."""
    best, best_theta = math.inf, None
    for x, y in candidates_xy:
        for q in rates:
            th = np.array(base_theta, dtype=float)
            th[IDX_RATE] = q
            th[1], th[2] = x, y
            values, _ = model(th, 0, (10_000,))
            try:
                val = profiled_loss(values[1], values[0], data, th, reg, subtract_ambient)
            except NumericalGuardError:
                continue
            if val < best:
                best, best_theta = val, th
    if best_theta is None:
        raise ValueError("no feasible starting point on the lattice")
    return best_theta
