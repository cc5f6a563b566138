"""Command-line harness.

    plumedial simulate|reconstruct|detect-power|turbulence-demo --scenario FILE --seed N --out DIR
              [--threads N] [--fov narrow|wide|multiple] [--data DIR] [--resume]

Every output is a deterministic function of (scenario, seed).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import SCHEMA_VERSION
from ._parallel import run_tasks
from .detection import ReferenceKernel, alignment_point, empty_table, lattice_points, phi_map
from .dispersion import IDX_DRIFT, IDX_WIDTH, PARAM_NAMES, KernelField, discretize_release
from .inverse import FitConfig, FitResult, ForwardModel, Regularizer, error_metrics, evaluation_grid, fit, grid_search_start
from .measurement import MeasurementSet, synthesize
from .optics import OpticalScene
from .report import heatmap_svg, labels
from .rng import generator
from .rte import Detector, ResponseCurve, hybrid_response
from .scenario import Scenario, ScenarioError, load
from .turbulence import l1_divergence, perturb, regular_grid

log = logging.getLogger("plumedial")

TURBULENCE_STREAM = 0x7B  # rng stream tag for truth perturbations
TRUTH_STREAM = 0x75  # Monte Carlo stream for truth responses
ERROR_HEADER = ("fov", "turbulence", "run", "l1_error", "release_error", "converged", "iterations")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# simulate


@dataclass
class Simulation:
    truth: KernelField
    response: ResponseCurve
    data: MeasurementSet


def truth_field(sc: Scenario, seed: int, run: int = 0) -> KernelField:
    n_puffs = int(sc.solver["n_puffs"])
    if sc.turbulence:
        return perturb(sc.params, rng=generator(seed, TURBULENCE_STREAM, run), n_puffs=n_puffs)
    return discretize_release(sc.params, n_puffs)


def simulate(sc: Scenario, seed: int, run: int = 0, threads: int | None = None, field: KernelField | None = None) -> Simulation:
    """Truth response (narrow, annulus, wide) and Poisson counts.

    Wide counts are narrow plus annulus counts, so the three apertures are
    consistent realisations of one photon stream.
    """
    field = field if field is not None else truth_field(sc, seed, run)
    scene = OpticalScene(field, scatter_scale=sc.params.scatter_scale, **sc.optics)
    stream = (TRUTH_STREAM, run) if sc.turbulence else (TRUTH_STREAM,)
    values, stderr = hybrid_response(
        scene, sc.detector, sc.directions, sc.binning,
        int(sc.solver["truth_paths"]), int(sc.solver["truth_k_max"]), seed, stream, threads,
    )
    return _assemble(sc, field, values, stderr, seed, run)


def _assemble(sc: Scenario, field, values, stderr, seed: int, run: int) -> Simulation:
    values = np.concatenate([values, values[:, :1] + values[:, 1:2]], axis=1)
    stderr = np.concatenate([stderr, stderr[:, :1] + stderr[:, 1:2]], axis=1)
    fovs = ("narrow", "annulus", "wide")
    response = ResponseCurve(fovs, sc.angles, sc.binning, values, stderr)
    measured = ResponseCurve(fovs[:2], sc.angles, sc.binning, values[:, :2])
    counts = synthesize(measured, sc.acquisition, sc.detector.apertures, seed, stream=(run,))
    data = MeasurementSet(
        fovs, sc.angles, sc.binning, sc.acquisition,
        np.concatenate([counts.on, counts.on[:1] + counts.on[1:2]]),
        np.concatenate([counts.off, counts.off[:1] + counts.off[1:2]]),
        np.append(counts.ambient, counts.ambient.sum()),
    )
    return Simulation(field, response, data)


def run_simulate(sc: Scenario, seed: int, out: Path, threads: int | None = None) -> Simulation:
    sim = simulate(sc, seed, 0, threads)
    sim.data.write(out / "counts.csv", out / "metadata.json")
    _write(out / "response.csv", sim.response.to_csv())
    truth = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "turbulence": sc.turbulence,
        "theta": {n: float(v) for n, v in zip(PARAM_NAMES, sc.params.to_vector())},
    }
    _write(out / "truth.json", _json(truth))
    _write(out / "scenario.json", sc.to_json())
    return sim


# ---------------------------------------------------------------------------
# reconstruct


def initial_theta(sc: Scenario) -> np.ndarray:
    th = sc.params.to_vector()
    th[IDX_WIDTH] = sc.fit["start_widths"]
    th[IDX_DRIFT] = sc.fit["start_drift"]
    return th


def reconstruct(sc: Scenario, data: MeasurementSet, mode: str, seed: int, threads: int | None = None) -> FitResult:
    """Fit theta to the apertures of ``mode``; the start comes from a lattice search with order one only."""
    aps = sc.fov_apertures(mode)
    sel = data.select([a.name for a in aps])
    det = replace(sc.detector, apertures=aps)
    traced = any(a.name != "narrow" for a in aps)
    n_puffs = int(sc.solver["n_puffs"])
    reg = Regularizer.for_scatter_prior(
        sc.params.scatter_scale, float(sc.fit["scatter_prior_rel"]), smooth_weight=float(sc.fit["smooth_weight"])
    )
    back = [a for a in aps if a.sees_backscatter]
    coarse = ForwardModel(sc.params, sc.optics, replace(det, apertures=tuple(back)), sc.directions, sc.binning, n_puffs)
    starts = [(x, y) for x in sc.fit["start_x"] for y in sc.fit["start_y"]]
    theta0 = grid_search_start(sel.select([a.name for a in back]), coarse, initial_theta(sc), starts, sc.fit["start_rates"], reg)
    model = ForwardModel(
        sc.params, sc.optics, det, sc.directions, sc.binning, n_puffs,
        int(sc.solver["fit_paths"]) if traced else 0, int(sc.solver["fit_k_max"]), threads,
    )
    cfg = FitConfig(max_iter=int(sc.fit["max_iter"]), tol=float(sc.fit["tol"]), seed=seed)
    return fit(sel, theta0, model, reg, cfg)


def fit_errors(sc: Scenario, result: FitResult, truth: KernelField) -> tuple[float, float]:
    est = discretize_release(result.params, int(sc.solver["n_puffs"]))
    grid = evaluation_grid(discretize_release(sc.params, int(sc.solver["n_puffs"])))
    return error_metrics(est, truth, grid, result.theta[0], sc.params.release_rate)


def _error_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ERROR_HEADER)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def run_reconstruct(
    sc: Scenario, seed: int, out: Path, mode: str, threads: int | None = None, data_dir: Path | None = None
) -> list[tuple]:
    """Fit one data set (``data_dir``) or a batch of ``sc.runs`` simulated runs; write fits and the error table."""
    turb = "yes" if sc.turbulence else "no"
    rows = []
    if data_dir is not None:
        data = MeasurementSet.read(data_dir / "counts.csv", data_dir / "metadata.json")
        truth = truth_field(sc, seed, 0)
        res = reconstruct(sc, data, mode, seed, threads)
        l1, rel = fit_errors(sc, res, truth)
        _write(out / f"fit_{mode}.json", res.to_json())
        rows.append((mode, turb, "0", repr(l1), repr(rel), str(res.converged).lower(), res.iterations))
    else:
        smooth_values = None
        for run in range(sc.runs):
            field = truth_field(sc, seed, run)
            if sc.turbulence or smooth_values is None:
                scene = OpticalScene(field, scatter_scale=sc.params.scatter_scale, **sc.optics)
                stream = (TRUTH_STREAM, run) if sc.turbulence else (TRUTH_STREAM,)
                smooth_values = hybrid_response(
                    scene, sc.detector, sc.directions, sc.binning,
                    int(sc.solver["truth_paths"]), int(sc.solver["truth_k_max"]), seed, stream, threads,
                )
            sim = _assemble(sc, field, *smooth_values, seed, run)
            res = reconstruct(sc, sim.data, mode, seed, threads)
            l1, rel = fit_errors(sc, res, field)
            _write(out / f"fit_{mode}_run{run}.json", res.to_json())
            rows.append((mode, turb, str(run), repr(l1), repr(rel), str(res.converged).lower(), res.iterations))
            log.info("run %d: L1 %.3f release %.3f", run, l1, rel)
    l1s = [float(r[3]) for r in rows]
    rels = [float(r[4]) for r in rows]
    conv = sum(r[5] == "true" for r in rows)
    rows.append((mode, turb, "mean", repr(float(np.mean(l1s))), repr(float(np.mean(rels))), f"{conv}/{len(l1s)}", ""))
    _write(out / f"errors_{mode}.csv", _error_csv(rows))
    return rows


# ---------------------------------------------------------------------------
# detect-power


def _token(sc: Scenario, seed: int) -> str:
    return hashlib.sha256((sc.to_json() + str(seed)).encode()).hexdigest()[:16]


def run_detect_power(sc: Scenario, seed: int, out: Path, threads: int | None = None, resume: bool = False) -> int:
    """Tabulate the alignment lattice and write Phi maps; returns 0, or 3 when the time budget ran out."""
    dp = sc.detect_power
    narrow, annulus = sc.detector.apertures
    det = Detector(position=sc.detector.position, area=sc.detector.area, efficiency=sc.detector.efficiency,
                   apertures=(narrow, sc.apertures["wide"]), r_min=sc.detector.r_min)
    ref = ReferenceKernel(detector_height=sc.detector.position[2])
    table = empty_table(det, sc.binning, dp["sigma0"], dp["sigma_s"], dp["g"])
    points = lattice_points(table)
    done = 0
    partial = out / "phi_table.partial.npz"
    token = _token(sc, seed)
    if resume and partial.exists():
        saved = np.load(partial)
        if str(saved["token"]) != token:
            raise ScenarioError("resume token does not match this scenario and seed")
        done = int(saved["done"])
        table["q"][...] = saved["q"]
        table["m_off"][...] = saved["m_off"]
    budget = dp.get("max_seconds")
    t_start = time.monotonic()
    chunk = max(1, int(threads or 1))
    while done < len(points):
        batch = points[done : done + chunk]

        def work(idx):
            i, j, k = idx
            nuis = (table["sigma0"][i], table["sigma_s"][j], table["g"][k])
            return alignment_point(ref, det, sc.binning, nuis, idx, int(dp["n_paths"]), int(dp["k_max"]), seed)

        for idx, (q, m) in zip(batch, run_tasks(work, batch, threads)):
            table["q"][idx] = q
            table["m_off"][idx] = m
        done += len(batch)
        if budget is not None and done < len(points) and time.monotonic() - t_start > float(budget):
            out.mkdir(parents=True, exist_ok=True)
            np.savez(partial, q=table["q"], m_off=table["m_off"], done=done, token=token)
            _write(out / "resume.json", _json({"resume_token": token, "completed": done, "total": len(points)}))
            log.warning("budget exhausted after %d of %d lattice points; rerun with --resume", done, len(points))
            return 3
    scale = sc.acquisition.signal_scale(sc.binning) * sc.acquisition.pulses_per_direction
    modes = {"free": {}, "bounded": {"sigma0_max": float(dp["sigma0_bound"])}, "known": {"known": True}}
    for name, kw in modes.items():
        maps = [phi_map(table, scale, g_index=k, **kw) for k in range(len(table["g"]))]
        text = maps[0].to_csv() + "".join(m.to_csv().split("\n", 1)[1] for m in maps[1:])
        _write(out / f"phi_{name}.csv", text)
        g0 = maps[0]
        svg = heatmap_svg(
            [(g0.phi, labels(g0.sigma_s), labels(g0.sigma0), f"Phi ({name}), g = {g0.g:g}; x: sigma_s, y: sigma0")],
            diverging=True, contour=True,
        )
        _write(out / f"phi_{name}_g0.svg", svg)
    for f in (partial, out / "resume.json"):
        if f.exists():
            f.unlink()
    return 0


# ---------------------------------------------------------------------------
# turbulence-demo


def run_turbulence_demo(sc: Scenario, seed: int, out: Path, threads: int | None = None) -> list[float]:
    demo = sc.turbulence_demo
    n_puffs = int(sc.solver["n_puffs"])
    smooth = discretize_release(sc.params, n_puffs)
    lo = np.min(smooth.centers - 3 * smooth.widths[:, None], axis=0)
    hi = np.max(smooth.centers + 3 * smooth.widths[:, None], axis=0)
    grid = regular_grid(lo, hi, (32, 32, 32))

    def work(d):
        return perturb(sc.params, rng=generator(seed, TURBULENCE_STREAM, d), n_puffs=n_puffs)

    fields = run_tasks(work, range(int(demo["draws"])), threads)
    l1 = [l1_divergence(smooth, f, grid) for f in fields]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["draw", "l1_divergence"])
    for d, v in enumerate(l1):
        w.writerow([d, repr(v)])
    _write(out / "turbulence.csv", buf.getvalue())

    # cross section perpendicular to the first wind vector
    wind = np.asarray(sc.params.wind[0], dtype=float)
    along = wind / np.linalg.norm(wind)
    across = np.array([-along[1], along[0], 0.0])
    centre = np.asarray(sc.params.source, dtype=float) + float(demo["cross_section_distance"]) * along
    half = 3.0 * float(np.max(smooth.widths))
    s = np.linspace(-half, half, 24)
    z = np.linspace(0.0, 2 * half, 24)
    pts = centre + s[None, :, None] * across + z[:, None, None] * np.array([0.0, 0.0, 1.0])
    panels = [
        (smooth(pts), labels(s.round(1)), labels(z.round(1)), "smooth"),
        (fields[0](pts), labels(s.round(1)), labels(z.round(1)), f"perturbed (L1 {l1[0]:.0%})"),
    ]
    _write(out / "cross_section.svg", heatmap_svg(panels))
    return l1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plumedial", description="DIAL plume simulation, reconstruction and detection.")
    ap.add_argument("command", choices=["simulate", "reconstruct", "detect-power", "turbulence-demo"])
    ap.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
    ap.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    ap.add_argument("--out", type=Path, required=True, help="output directory")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: $PLUMEDIAL_THREADS or 1)")
    ap.add_argument("--fov", choices=["narrow", "wide", "multiple"], default="wide")
    ap.add_argument("--data", type=Path, default=None, help="reconstruct: directory holding counts.csv and metadata.json")
    ap.add_argument("--resume", action="store_true", help="detect-power: continue from a partial table")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        sc = load(args.scenario)
    except (OSError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate":
        run_simulate(sc, args.seed, out, args.threads)
    elif args.command == "reconstruct":
        run_reconstruct(sc, args.seed, out, args.fov, args.threads, args.data)
    elif args.command == "detect-power":
        return run_detect_power(sc, args.seed, out, args.threads, args.resume)
    else:
        run_turbulence_demo(sc, args.seed, out, args.threads)
    return 0


if __name__ == "__main__":
    sys.exit(main())
