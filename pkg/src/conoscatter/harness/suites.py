"""Geometry certificates and fast-versus-oracle comparisons."""

import json
import logging
import time
from pathlib import Path

import numpy as np

from ..errors import ConoscatterError
from ..geom import (clean_intersection_certificate, hj_residual, multiphase_solve,
                    prop71_intersection, random_intersection_charts)
from ..potential import synthesize, zero_field
from ..scatter import default_s_grid, kernel_discrepancy, scattering_kernel
from ..sphere import SphereGrid, normalize
from ..wavefield import born_u1, born_u1_oracle, eta_range
from .pipeline import Check, _plain, new_manifest

logger = logging.getLogger(__name__)

RANK_TARGET_FAMILY = "FLOWOUT"
MULTIPHASE_TOL = 1e-8
HJ_TOL = 1e-6


def certificate_records(pair, count, rng, family=RANK_TARGET_FAMILY):
    """Clean-intersection certificates at ``count`` random points of S2."""
    return [clean_intersection_certificate(a, c)
            for a, c in random_intersection_charts(pair, family, count, rng)]


def multiphase_grid(pair, which, count, omega=(0.3, 0.2, 1.0), theta=1.3, sigma=0.8):
    """ODE vs closed form and Hamilton-Jacobi residual on a ``count**3`` grid.

    The grid spans ``x_3`` (through the surface), ``t`` and the flow
    parameter ``s``.
    """
    g = np.linspace(-1.0, 1.0, count)
    X, T, S = np.meshgrid(g, g, 0.1 * g, indexing="ij")
    x = np.stack([0.7 + 0 * X, 0.2 + 0 * X, X], axis=-1)
    om = normalize(np.asarray(omega, dtype=float))
    cmp = multiphase_solve(pair, which, x, T, om, theta, sigma, S)
    res = hj_residual(pair, which, x, T, om, theta, sigma, S)
    return cmp.rel_discrepancy, float(np.max(res))


def run_geometry_suite(cfg):
    """Certificates, multiphase residuals and transversality samples.

    Writes ``certificates.json`` next to ``manifest.json``. With nothing to
    do (no geometry or all counts zero) the manifest status is ``NOOP``.
    """
    manifest = new_manifest(cfg)
    out = Path(cfg.scenario.out)
    gs = cfg.geometry_suite
    pair = cfg.pair()
    if pair is None or not (gs.certificates or gs.multiphase_grid or gs.prop71_samples):
        manifest.status = "NOOP"
        out.mkdir(parents=True, exist_ok=True)
        manifest.write(out / "manifest.json")
        return manifest
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.scenario.seed)
    record = {"pair": pair.name, "seed": cfg.scenario.seed}
    checks = []

    if gs.certificates:
        t0 = time.perf_counter()
        if pair.d2:
            certs = certificate_records(pair, gs.certificates, rng)
            target = 2 * pair.n + pair.d2
            ranks = [c.rank for c in certs]
            codims = {tuple(c.codim) for c in certs}
            record["certificates"] = [c.as_record() for c in certs]
            checks.append(Check("certificate_rank", min(ranks) >= target, min(ranks), target))
            checks.append(Check("certificate_codim", codims == {(pair.d2, pair.d2)},
                                sorted(codims), [pair.d2, pair.d2]))
            checks.append(Check("certificate_clean", all(c.clean for c in certs),
                                sum(c.clean for c in certs), len(certs)))
        else:
            record["certificates"] = []
        manifest.stages["certificates"] = {"seconds": time.perf_counter() - t0}

    if gs.multiphase_grid:
        t0 = time.perf_counter()
        disc, res = multiphase_grid(pair, "S1", gs.multiphase_grid)
        record["multiphase"] = {"grid": gs.multiphase_grid, "rel_discrepancy": disc,
                                "hj_residual": res}
        checks.append(Check("multiphase_ode_vs_closed", disc <= MULTIPHASE_TOL, disc,
                            MULTIPHASE_TOL))
        checks.append(Check("hamilton_jacobi_residual", res <= HJ_TOL, res, HJ_TOL))
        manifest.stages["multiphase"] = {"seconds": time.perf_counter() - t0}

    if gs.prop71_samples:
        t0 = time.perf_counter()
        try:
            samples = prop71_intersection(pair, count=gs.prop71_samples, rng=rng, strict=False)
        except ValueError as exc:
            record["prop71"] = {"error": str(exc)}
            checks.append(Check("prop71_model_geometry", False, str(exc)))
        else:
            record["prop71"] = {"samples": len(samples),
                                "transversal": int(sum(s.transversal for s in samples)),
                                "min_singular_value": min((s.sv_min for s in samples),
                                                          default=None)}
            checks.append(Check("prop71_transversal", all(s.transversal for s in samples),
                                record["prop71"]["transversal"], len(samples)))
        manifest.stages["prop71"] = {"seconds": time.perf_counter() - t0}

    (out / "certificates.json").write_text(json.dumps(_plain(record), indent=1) + "\n")
    manifest.add_checks(checks)
    manifest.write(out / "manifest.json")
    return manifest


def _rel(a, b):
    scale = float(np.max(np.abs(b)))
    diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


def compare_oracle(cfg, probes=20, kernel_columns=2, samples=64):
    """Fast-versus-reference errors for the Born trace and the two kernel routes.

    Returns a report dict. Failures of the fast solvers (for example an
    under-resolved quadrature shell) are reported under ``errors`` with
    their code rather than raised.
    """
    grid = cfg.grid()
    q = zero_field(cfg.potential.support_radius, grid) if cfg.pair() is None else \
        synthesize(cfg.potential_spec(), grid)
    pulse = cfg.pulse()
    rng = np.random.default_rng(cfg.scenario.seed)
    report = {"probes": [], "kernel": None, "errors": []}
    for _ in range(probes):
        om = normalize(rng.normal(size=3))
        x = cfg.wavefield.receiver_radius * normalize(rng.normal(size=3))
        lo, hi = eta_range(q, om, x)
        a = pulse.half_support
        times = x @ om + np.linspace(lo - a, hi + a, samples)
        try:
            fast = born_u1(q, om, x, times, pulse)
        except ConoscatterError as exc:
            report["errors"].append({"code": exc.code, "message": str(exc)})
            break
        ref = born_u1_oracle(q, om, x, times, pulse)
        report["probes"].append({"omega": om.tolist(), "receiver": x.tolist(),
                                 "rel_error": _rel(fast.values, ref.values)})
    if kernel_columns and not report["errors"]:
        sg = SphereGrid(1)
        pick = rng.choice(len(sg), size=kernel_columns, replace=False)
        pairs = np.column_stack([sg.antipode_index()[pick], pick])
        s_grid = default_s_grid(q.support_radius, pulse)
        try:
            kf = scattering_kernel(q, pulse, sg, sg, s_grid, pairs=pairs)
            kl = scattering_kernel(q, pulse, sg, sg, s_grid, pairs=pairs, route="lax_phillips")
            report["kernel"] = {"pairs": pairs.tolist(), "rel_discrepancy": kernel_discrepancy(kf, kl)}
        except ConoscatterError as exc:
            report["errors"].append({"code": exc.code, "message": str(exc)})
    errs = [p["rel_error"] for p in report["probes"]]
    report["max_rel_error"] = max(errs) if errs else None
    return _plain(report)
