"""File-based experiment stages and run manifests.

Stages run in the order synth, forward, scatter, restrict, reconstruct.
Each one reads only the previous stage's files from the output directory
(plus the configuration) and writes its own, so any later stage can be
re-run alone and reproduces its outputs bit for bit.
"""

import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..errors import BandTooNarrow, ConoscatterError
from ..potential import FOURIER_SYMBOL, PotentialField, synthesize, zero_field
from ..reconstruct import (OrderCalibration, _slice_geometry, classify_by_geometry,
                           classify_points, detect_singular_support, distance_to_submanifold,
                           estimate_orders, hausdorff, recover_points, specular_directions,
                           sphere_truth, tangential_wedges)
from ..scatter import (DataSet, ScatteringKernel, default_s_grid, required_pairs, restrict,
                       scattering_kernel)
from ..sphere import SphereGrid, normalize
from ..wavefield import born_u1, eta_range

logger = logging.getLogger(__name__)

STAGES = ("synth", "forward", "scatter", "restrict", "reconstruct")
TRACE_SAMPLES = 96


class StageError(ConoscatterError):
    """A stage failed; ``stage`` names it and ``cause`` holds the original error."""

    code = "STAGE_FAILED"

    def __init__(self, stage, cause):
        code = getattr(cause, "code", type(cause).__name__)
        super().__init__(f"[{stage}] {code}: {cause}", stage=stage, cause_code=code)
        self.stage = stage
        self.cause = cause
        self.cause_code = code


@dataclass
class Check:
    name: str
    passed: bool
    value: object = None
    threshold: object = None

    def as_record(self):
        return {"name": self.name, "passed": bool(self.passed), "value": _plain(self.value),
                "threshold": _plain(self.threshold)}


@dataclass
class RunManifest:
    """Summary of one run: configuration hash, versions, seed, timings and checks."""

    config_hash: str
    seed: int
    versions: dict
    status: str = "PASS"
    stages: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    error: dict = None
    scenario: str = ""

    @property
    def passed(self):
        return self.status in ("PASS", "NOOP")

    def add_checks(self, checks):
        self.checks.extend(checks)
        if any(not c.passed for c in checks) and self.status == "PASS":
            self.status = "FAIL"

    def as_record(self):
        d = asdict(self)
        d["checks"] = [c.as_record() if isinstance(c, Check) else c for c in self.checks]
        return _plain(d)

    def write(self, path):
        Path(path).write_text(json.dumps(self.as_record(), indent=2, sort_keys=True) + "\n")
        return path


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


def versions():
    return {"conoscatter": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def new_manifest(cfg):
    return RunManifest(config_hash=cfg.digest(), seed=cfg.scenario.seed, versions=versions(),
                       scenario=cfg.scenario.name)


# ---------------------------------------------------------------------------
# stages


def _load_potential(out):
    stem = out / "potential"
    if not Path(f"{stem}.json").exists():
        raise FileNotFoundError(f"{stem}.json missing; run the synth stage first")
    return PotentialField.load(stem)


def stage_synth(cfg, out):
    grid = cfg.grid()
    if cfg.pair() is None:
        q = zero_field(cfg.potential.support_radius, grid)
    else:
        q = synthesize(cfg.potential_spec(), grid)
    vals = q.values
    q.dump(out / "potential")
    finite = bool(np.all(np.isfinite(vals)))
    checks = [Check("potential_finite", finite)]
    if cfg.pair() is None:
        checks.append(Check("zero_potential", not np.any(vals), float(np.max(np.abs(vals))), 0.0))
    return ["potential.bin", "potential.json"], checks


def _probe_geometry(cfg, count):
    rng = np.random.default_rng(cfg.scenario.seed)
    omegas = normalize(rng.normal(size=(count, 3)))
    receivers = cfg.wavefield.receiver_radius * normalize(rng.normal(size=(count, 3)))
    return omegas, receivers


def _probe_times(q, omega, receiver, pulse):
    lo, hi = eta_range(q, omega, receiver)
    a = pulse.half_support
    return receiver @ omega + np.linspace(lo - a, hi + a, TRACE_SAMPLES)


def stage_forward(cfg, out):
    q = _load_potential(out)
    pulse = cfg.pulse()
    omegas, receivers = _probe_geometry(cfg, cfg.wavefield.probes)
    rows = []
    for k, (om, x) in enumerate(zip(omegas, receivers)):
        times = _probe_times(q, om, x, pulse)
        tr = born_u1(q, om, x, times, pulse)
        rows.extend((k, t, v) for t, v in zip(tr.times, tr.values))
    vals = np.array([r[2] for r in rows]) if rows else np.zeros(0)
    with open(out / "forward_traces.csv", "w") as fh:
        fh.write("probe,t,value\n")
        for k, t, v in rows:
            fh.write(f"{k},{t:.17g},{v:.17g}\n")
    (out / "forward_probes.json").write_text(json.dumps(
        {"omega": omegas.tolist(), "receiver": receivers.tolist()}, indent=1))
    checks = [Check("traces_finite", bool(np.all(np.isfinite(vals))))]
    if q.is_zero():
        checks.append(Check("zero_traces", not np.any(vals), float(np.max(np.abs(vals), initial=0.0)),
                            0.0))
    return ["forward_traces.csv", "forward_probes.json"], checks


def _grids(cfg, slice_):
    omega_grid = SphereGrid(cfg.scatter.level)
    rot = slice_.rotation
    if rot is None or np.allclose(rot, np.eye(3)):
        theta_grid = omega_grid
    else:
        # the antipodal grid rotated by Q holds every Q(-omega) exactly
        theta_grid = SphereGrid(cfg.scatter.level, rotation=rot)
    return omega_grid, theta_grid


def stage_scatter(cfg, out):
    q = _load_potential(out)
    pulse = cfg.pulse()
    slice_ = cfg.data_slice()
    omega_grid, theta_grid = _grids(cfg, slice_)
    # fail before the expensive part if the slice is unusable
    slice_.validate(omega_grid, tangency_tol=cfg.scatter.tangency_tol)
    s_grid = default_s_grid(q.support_radius, pulse, ds=cfg.ds)
    pairs = required_pairs(slice_, theta_grid, omega_grid)
    kernel = scattering_kernel(q, pulse, omega_grid, theta_grid, s_grid,
                               route=cfg.scatter.route, pairs=pairs)
    kernel.dump(out / "kernel")
    checks = [Check("kernel_finite", bool(np.all(np.isfinite(kernel.values))))]
    if q.is_zero():
        checks.append(Check("zero_kernel", not np.any(kernel.values)))
    return ["kernel.bin", "kernel.json"], checks


def stage_restrict(cfg, out):
    if not (out / "kernel.json").exists():
        raise FileNotFoundError("kernel.json missing; run the scatter stage first")
    kernel = ScatteringKernel.load(out / "kernel")
    slice_ = cfg.data_slice()
    data = restrict(kernel, slice_, tangency_tol=cfg.scatter.tangency_tol)
    data.dump(out / "dataset")
    (out / "slice_validity.json").write_text(
        json.dumps(_plain(slice_.report.as_record()), indent=2))
    checks = [Check("slice_valid", slice_.report.passed)]
    return ["dataset.csv", "dataset.json", "slice_validity.json"], checks


def reconstruction_checks(cfg, cloud, curve, excluded, slice_, orders=None):
    """Truth comparisons for the named primitives (validation mode)."""
    r = cfg.reconstruct
    cell = cfg.grid_spacing
    pair = cfg.pair()
    prim = cfg.geometry.primitive
    checks = []
    if pair is None:
        checks.append(Check("no_points_from_zero_data", len(cloud) == 0, len(cloud), 0))
        return checks, {}
    metrics = {"points": len(cloud), "echoes": len(curve.echoes),
               "no_peaks": len(curve.no_peaks), "grid_cell": cell}
    if len(cloud) == 0:
        checks.append(Check("points_recovered", False, 0, ">0"))
        return checks, metrics
    if prim in ("sphere", "sphere+equator"):
        khat, _ = _slice_geometry(None if slice_.kind == "BACKSCATTER" else slice_,
                                  curve.omega_grid.points)
        truth = sphere_truth(cfg.geometry.center, cfg.geometry.radius, khat)
        h = hausdorff(cloud.points, truth) / cell
        metrics["hausdorff_cells"] = h
        checks.append(Check("hausdorff_cells", h <= r.tolerance_cells, h, r.tolerance_cells))
    else:
        d1 = distance_to_submanifold(cloud.points, pair, "S1") / cell
        metrics["S1_distance_cells"] = float(d1.max())
        metrics["S1_distance_median_cells"] = float(np.median(d1))
        checks.append(Check("S1_distance_cells", d1.max() <= r.tolerance_cells, float(d1.max()),
                            r.tolerance_cells))
        if pair.d2:
            s2 = cloud.subset(cloud.cls == "S2")
            if len(s2):
                d2 = distance_to_submanifold(s2.points, pair, "S2") / cell
                metrics["S2_distance_cells"] = float(d2.max())
                metrics["S2_distance_median_cells"] = float(np.median(d2))
                checks.append(Check("S2_distance_cells", d2.max() <= r.tolerance_cells,
                                    float(d2.max()), r.tolerance_cells))
            else:
                checks.append(Check("S2_points_recovered", False, 0, ">0"))
            p = cfg.potential
            m2 = (orders or {}).get("M2_rel_est")
            if p.profile == FOURIER_SYMBOL and abs(p.M2) >= 0.5:
                err = None if m2 is None else abs(m2 - p.M2)
                checks.append(Check("M2_from_decay_classes", err is not None and err <= 0.2,
                                    m2, [p.M2 - 0.2, p.M2 + 0.2]))
    if excluded is not None:
        leaked = int(np.sum(excluded[cloud.omega_index])) if len(cloud) else 0
        metrics["excluded_directions"] = int(excluded.sum())
        checks.append(Check("excluded_wedges_contribute_nothing", leaked == 0, leaked, 0))
    return checks, metrics


def stage_reconstruct(cfg, out):
    if not (out / "dataset.json").exists():
        raise FileNotFoundError("dataset.json missing; run the restrict stage first")
    data = DataSet.load(out / "dataset")
    r = cfg.reconstruct
    pulse = cfg.pulse()
    curve = detect_singular_support(data, pulse, noise_floor_k=r.noise_floor_k,
                                    rel_floor=r.rel_floor)
    pair = cfg.pair()
    slice_ = data.slice
    graph = None if slice_.kind == "BACKSCATTER" else slice_
    grid = data.omega_grid
    wedges = None
    # wedges are defined around the flat line; the equator has no single direction
    if r.exclude_tangential and cfg.geometry.primitive == "line-in-plane":
        wedges = tangential_wedges(pair, grid, r.tangency_tol)
    specular = None
    if pair is not None and (r.exclude_nonspecular or r.classify == "geometry"):
        specular = specular_directions(pair, grid, slice_=graph,
                                       support_radius=cfg.potential.support_radius,
                                       tol=r.specular_tol or None)
    excluded = np.zeros(len(grid), dtype=bool)
    if wedges is not None:
        excluded |= wedges
    nonspecular = None
    if specular is not None and r.exclude_nonspecular:
        nonspecular = ~np.logical_or.reduce(list(specular.values()))
        excluded |= nonspecular
    cloud = recover_points(curve, r.calibration_c, slice_=graph, excluded=excluded)
    cloud = cloud.subset(cloud.confidence >= r.min_confidence)
    if r.classify == "geometry" and specular is not None and pair.d2:
        classify_by_geometry(cloud, specular)
    else:
        classify_points(cloud, cfg.grid_spacing, separation=r.separation,
                        m2_sign=-1 if cfg.potential.M2 <= 0 else 1)
    curve.to_csv(out / "peak_map.csv")
    cloud.to_csv(out / "cloud.csv")
    orders = cloud_orders(cloud)
    checks, metrics = reconstruction_checks(cfg, cloud, curve, wedges, slice_, orders)
    if nonspecular is not None:
        metrics["nonspecular_directions"] = int(nonspecular.sum())
    metrics["excluded_echoes"] = cloud.meta.get("excluded_echoes", 0)
    report = {"calibration_c": r.calibration_c,
              "excluded_wedges": [] if wedges is None else np.nonzero(wedges)[0].tolist(),
              "classes": cloud.meta.get("classes"), "metrics": metrics}
    report.update(orders)
    (out / "reconstruction.json").write_text(json.dumps(_plain(report), indent=2,
                                                        sort_keys=True) + "\n")
    return ["peak_map.csv", "cloud.csv", "reconstruction.json"], checks


def cloud_orders(cloud):
    """Calibrated ``M1_est`` and ``M2_rel_est`` of the classified cloud (None if undefined)."""
    try:
        est = estimate_orders(cloud, OrderCalibration.load())
    except BandTooNarrow:
        return {"M1_est": None, "M2_rel_est": None}
    return {k: (float(v) if np.isfinite(v) else None)
            for k, v in (("M1_est", est.M1_est), ("M2_rel_est", est.M2_rel_est))}


STAGE_FUNCS = {"synth": stage_synth, "forward": stage_forward, "scatter": stage_scatter,
               "restrict": stage_restrict, "reconstruct": stage_reconstruct}


def run_stage(cfg, name, manifest=None):
    """Run one stage into ``cfg.scenario.out``; errors are re-raised as :class:`StageError`."""
    out = Path(cfg.scenario.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or new_manifest(cfg)
    t0 = time.perf_counter()
    try:
        files, checks = STAGE_FUNCS[name](cfg, out)
    except (ConoscatterError, FileNotFoundError, ValueError) as exc:
        manifest.stages[name] = {"seconds": time.perf_counter() - t0, "error": str(exc)}
        manifest.status = "ERROR"
        manifest.error = {"stage": name, "code": getattr(exc, "code", type(exc).__name__),
                          "message": str(exc)}
        raise StageError(name, exc) from exc
    manifest.stages[name] = {"seconds": time.perf_counter() - t0,
                             "outputs": {f: sha256_file(out / f) for f in files}}
    manifest.add_checks(checks)
    logger.info("stage %s done in %.1f s", name, manifest.stages[name]["seconds"])
    return manifest


def run_pipeline(cfg, stages=STAGES, write=True):
    """Run ``stages`` in order and return the manifest (also written as ``manifest.json``).

    An empty configuration produces a ``NOOP`` manifest. A failing stage
    stops the run; the manifest then carries ``status="ERROR"`` and the
    :class:`StageError` is re-raised after the manifest is written.
    """
    manifest = new_manifest(cfg)
    out = Path(cfg.scenario.out)
    if cfg.is_empty:
        manifest.status = "NOOP"
    else:
        try:
            for name in stages:
                run_stage(cfg, name, manifest)
        finally:
            if write:
                out.mkdir(parents=True, exist_ok=True)
                manifest.write(out / "manifest.json")
        return manifest
    if write:
        out.mkdir(parents=True, exist_ok=True)
        manifest.write(out / "manifest.json")
    return manifest
