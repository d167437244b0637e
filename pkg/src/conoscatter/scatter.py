"""Scattering kernel of the Born field and its restriction to data slices.

Kernel convention: ``alpha(s, theta, omega)`` is indexed by ``s = -s_ret``
where ``s_ret = t - r`` is the retarded time at a far receiver ``r theta``.
A point scatterer at ``y`` then echoes at ``s = y . (theta - omega)``, so the
backscatter echo (``theta = -omega``) sits at ``s = -2 y . omega``.

Two constructions are provided:

- ``friedlander``: ``alpha(s) = R d_t u1(R - s, R theta)`` at a large radius
  ``R`` (direct far-field traces);
- ``lax_phillips``: plane integrals of the time slice ``(u1, d_t u1)`` at
  ``t0``, pulled back by ``s' = t0 + s`` and transformed by
  ``C3 d_s (d_s R v0 - R v1)``.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage
from scipy.signal.windows import tukey

from .errors import FarfieldUnconverged, SGridTooCoarse, SliceInvalid, T0TooSmall
from .sphere import SphereGrid, normalize, rotation_about, tangent_frame
from .wavefield import SourcePulse, born_u1

logger = logging.getLogger(__name__)

# Radiation constant in n = 3: with it both routes produce the same kernel.
C3 = 1.0 / (4.0 * np.pi)

# s-axis multipliers for n = 3 (exponent (n - 1)/2 = 1), applied with FFT
# frequency sigma and d_s <-> i sigma: R v0 gets (i sigma)^2, R v1 gets
# -(i sigma). Odd dimension makes the half-integer power a whole derivative,
# so the plain derivative replaces |sigma| (which would add a Hilbert
# transform and break agreement with the radiation-field route).
MULTIPLIER_N3 = {"v0": lambda sig: (1j * sig) ** 2, "v1": lambda sig: -(1j * sig)}

TUKEY_ALPHA = 0.1
FARFIELD_TOL = 1e-2


# ---------------------------------------------------------------------------
# plane integrals


def _grid_of(f):
    grid = getattr(f, "grid", None)
    if grid is None:
        raise ValueError("radon needs a gridded field")
    return grid, f.values


def radon(f, s, theta, spacing=None, return_flag=False):
    """Plane integrals ``int_{x . theta = s} f`` of a gridded field.

    Midpoint quadrature on a square patch of the plane with trilinear
    interpolation of the grid samples.

    Parameters
    ----------
    f : object with ``grid`` and ``values``
    s : float or array
    theta : (3,) array
    spacing : float, optional
        In-plane node spacing (default: grid spacing).
    return_flag : bool
        Also return a boolean array, True where the plane misses the grid
        (the value there is exactly zero).
    """
    grid, vals = _grid_of(f)
    theta = normalize(theta)
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    h = spacing or grid.spacing
    dims = np.asarray(grid.dims)
    center = grid.origin + 0.5 * (dims - 1) * grid.spacing
    radius = 0.5 * np.linalg.norm(dims * grid.spacing)
    e1, e2 = tangent_frame(theta)
    n = int(np.ceil(radius / h))
    u = h * (np.arange(-n, n) + 0.5)
    A, B = np.meshgrid(u, u, indexing="ij")
    A, B = A.ravel(), B.ravel()
    out = np.zeros(s_arr.shape)
    missed = np.zeros(s_arr.shape, dtype=bool)
    for i, si in enumerate(s_arr):
        d = si - center @ theta
        if abs(d) >= radius:
            missed[i] = True
            continue
        keep = A * A + B * B <= radius * radius - d * d
        pts = center + d * theta + A[keep, None] * e1 + B[keep, None] * e2
        idx = grid.to_index(pts).T
        out[i] = ndimage.map_coordinates(vals, idx, order=1, mode="constant",
                                         cval=0.0).sum() * h * h
    if np.ndim(s) == 0:
        out, missed = out[0], missed[0]
    return (out, missed) if return_flag else out


class GriddedSlice:
    """A gridded time-slice field with plane integrals by ``radon``."""

    def __init__(self, field_):
        self.field = field_

    def plane_integrals(self, s, theta):
        return radon(self.field, s, theta)


@dataclass
class BornTimeSlice:
    """Exact plane integrals of ``u1(., t0)`` (``component=0``) or ``d_t u1(., t0)``.

    Integrating the retarded kernel over the plane ``x . theta = s`` gives

        R u1(s)     = -1/2 int q(y) Psi(t0 - y.omega - |s - y.theta|) dy,
        R d_t u1(s) = -1/2 int q(y) psi(t0 - y.omega - |s - y.theta|) dy,

    with ``Psi`` the antiderivative of the pulse; the remaining volume
    integral is a midpoint sum over the potential's grid.
    """

    q: object
    omega: np.ndarray
    pulse: SourcePulse
    t0: float
    component: int = 0
    chunk: int = 2 ** 21

    def __post_init__(self):
        pts = self.q.grid.points().reshape(-1, 3)
        vals = self.q.values.reshape(-1)
        nz = vals != 0.0
        self._y = pts[nz]
        self._w = vals[nz] * self.q.grid.cell_volume
        self._kernel = self.pulse.derivative(-1) if self.component == 0 else self.pulse

    def plane_integrals(self, s, theta):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        a = self._y @ np.asarray(self.omega, dtype=float)
        b = self._y @ np.asarray(theta, dtype=float)
        out = np.zeros(s.shape)
        rows = max(1, self.chunk // max(len(a), 1))
        for i in range(0, len(s), rows):
            arg = self.t0 - a[None, :] - np.abs(s[i:i + rows, None] - b[None, :])
            out[i:i + rows] = self._kernel(arg) @ self._w
        return -0.5 * out


def _smooth_step(s, center, half_width):
    """Wide smooth step (and its first two derivatives) built from the bump pulse."""
    p = SourcePulse(half_width / 3.0)
    z = s - center
    return p.derivative(-1)(z), p(z), p.derivative(1)(z)


def _fd_derivative(y, h, order):
    """Fourth-order central differences, second order at the two end points."""
    y = np.asarray(y, dtype=float)
    if order == 1:
        d = np.gradient(y, h, edge_order=2)
        d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / (12 * h)
        return d
    d = np.gradient(np.gradient(y, h, edge_order=2), h, edge_order=2)
    d[2:-2] = (-y[:-4] + 16 * y[1:-3] - 30 * y[2:-2] + 16 * y[3:-1] - y[4:]) / (12 * h * h)
    return d


def lp_transform(Rv0, Rv1, ds, route="fft", window=TUKEY_ALPHA, constant=C3):
    """Apply ``C d_s (d_s R v0 - R v1)`` to plane-integral columns (axis 0 = s).

    The ``fft`` route removes the step in ``R v0`` with an analytic smooth
    step (its derivatives are added back exactly), tapers with a Tukey
    window and applies the ``MULTIPLIER_N3`` multipliers. The ``fd`` route
    uses fourth-order finite differences on the raw columns.
    """
    Rv0 = np.asarray(Rv0, dtype=float)
    Rv1 = np.asarray(Rv1, dtype=float)
    squeeze = Rv0.ndim == 1
    if squeeze:
        Rv0, Rv1 = Rv0[:, None], Rv1[:, None]
    ns = Rv0.shape[0]
    if route == "fd":
        out = np.column_stack([_fd_derivative(Rv0[:, j], ds, 2) - _fd_derivative(Rv1[:, j], ds, 1)
                               for j in range(Rv0.shape[1])])
    elif route == "fft":
        s = ds * np.arange(ns)
        H, dH, d2H = _smooth_step(s, s[ns // 2], 0.4 * s[-1])
        jump = Rv0[-1] - Rv0[0]
        resid = Rv0 - Rv0[0] - jump[None, :] * H[:, None]
        win = tukey(ns, window)[:, None]
        nfft = int(2 ** np.ceil(np.log2(2 * ns)))
        sig = 2 * np.pi * np.fft.rfftfreq(nfft, ds)
        F0 = np.fft.rfft(resid * win, nfft, axis=0) * MULTIPLIER_N3["v0"](sig)[:, None]
        F1 = np.fft.rfft(Rv1 * win, nfft, axis=0) * MULTIPLIER_N3["v1"](sig)[:, None]
        out = np.fft.irfft(F0 + F1, nfft, axis=0)[:ns] + jump[None, :] * d2H[:, None]
    else:
        raise ValueError(f"unknown route {route!r}")
    out = constant * out
    return out[:, 0] if squeeze else out


def lax_phillips(v0, v1, s_grid, thetas, shift=0.0, route="fft", pulse=None,
                 window=TUKEY_ALPHA, constant=C3):
    """Lax-Phillips transform of a time slice ``(v0, v1)``.

    Parameters
    ----------
    v0, v1 : slice objects
        Anything with ``plane_integrals(s, theta)``; gridded fields are
        wrapped in ``GriddedSlice``.
    s_grid : (Ns,) array
        Uniform output grid; plane integrals are taken at ``shift + s``.
    thetas : (Nt, 3) array
    route : {"fft", "fd"}

    Returns
    -------
    (Ns, Nt) array

    Raises
    ------
    SGridTooCoarse
        If ``pulse`` is given and its width is below four s-steps.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    ds = s_grid[1] - s_grid[0]
    if pulse is not None and pulse.epsilon < 4 * ds - 1e-12:
        raise SGridTooCoarse(f"pulse width {pulse.epsilon} < 4 ds = {4 * ds}")
    v0 = v0 if hasattr(v0, "plane_integrals") else GriddedSlice(v0)
    v1 = v1 if hasattr(v1, "plane_integrals") else GriddedSlice(v1)
    thetas = np.atleast_2d(thetas)
    sp = shift + s_grid
    Rv0 = np.column_stack([v0.plane_integrals(sp, th) for th in thetas])
    Rv1 = np.column_stack([v1.plane_integrals(sp, th) for th in thetas])
    return lp_transform(Rv0, Rv1, ds, route=route, window=window, constant=constant)


# ---------------------------------------------------------------------------
# kernel


@dataclass
class ScatteringKernel:
    """Sparse kernel: one s-column per computed ``(theta, omega)`` vertex pair.

    ``values[k]`` holds ``alpha(s_grid, theta_grid[pairs[k, 0]], omega_grid[pairs[k, 1]])``.
    """

    s_grid: np.ndarray
    theta_grid: SphereGrid
    omega_grid: SphereGrid
    pairs: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        self._index = {(int(a), int(b)): k for k, (a, b) in enumerate(self.pairs)}

    def has(self, ti, oi):
        return (int(ti), int(oi)) in self._index

    def column(self, ti, oi):
        try:
            return self.values[self._index[(int(ti), int(oi))]]
        except KeyError:
            raise KeyError(f"kernel pair (theta={ti}, omega={oi}) was not computed") from None

    @property
    def ds(self):
        return float(self.s_grid[1] - self.s_grid[0])

    def dump(self, stem):
        """Write ``stem.bin`` (float64 [pair x s]) and ``stem.json``."""
        stem = Path(stem)
        np.ascontiguousarray(self.values, dtype="<f8").tofile(Path(f"{stem}.bin"))
        meta = dict(self.meta)
        meta.update({"s_grid": {"start": float(self.s_grid[0]), "step": self.ds,
                                "count": int(len(self.s_grid))},
                     "theta_grid": self.theta_grid.describe(),
                     "omega_grid": self.omega_grid.describe(),
                     "pairs": self.pairs.tolist(), "layout": "pair-major [pair x s]",
                     "dtype": "float64"})
        Path(f"{stem}.json").write_text(json.dumps(meta, indent=1))
        return stem

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        meta = json.loads(Path(f"{stem}.json").read_text())
        sg = meta["s_grid"]
        s_grid = sg["start"] + sg["step"] * np.arange(sg["count"])
        pairs = np.asarray(meta["pairs"], dtype=int).reshape(-1, 2)
        vals = np.fromfile(Path(f"{stem}.bin"), dtype="<f8").reshape(len(pairs), -1)

        def grid(d):
            return SphereGrid(d["level"], None if d["rotation"] is None else np.asarray(d["rotation"]))

        return cls(s_grid, grid(meta["theta_grid"]), grid(meta["omega_grid"]), pairs, vals, meta)


def default_s_grid(rho, pulse, ds=None, margin=None):
    """Uniform s-grid covering ``|s| <= 2 rho + margin`` (default margin ``8 eps``)."""
    ds = ds or pulse.epsilon / 4.0
    margin = 8 * pulse.epsilon if margin is None else margin
    n = int(np.ceil((2 * rho + margin) / ds))
    return ds * np.arange(-n, n + 1)


def default_far_radius(rho, pulse):
    """Receiver radius with curvature delay ``rho^2 / 2R`` below ``eps / 500``."""
    return max(4.0 * rho, 250.0 * rho * rho / pulse.epsilon)


def friedlander_column(q, pulse, theta, omega, s_grid, R_far, spacing=None):
    """``R d_t u1(R - s, R theta)`` for one direction pair."""
    times = R_far - s_grid[::-1]
    tr = born_u1(q, omega, R_far * np.asarray(theta, float), times, pulse.derivative(1),
                 spacing=spacing)
    return R_far * tr.values[::-1]


def _check_kernel_inputs(q, pulse, s_grid, t0):
    ds = s_grid[1] - s_grid[0]
    if not np.allclose(np.diff(s_grid), ds, rtol=1e-9, atol=1e-12):
        raise ValueError("s_grid must be uniform")
    if pulse.epsilon < 4 * ds - 1e-12:
        raise SGridTooCoarse(f"pulse width {pulse.epsilon} < 4 ds = {4 * ds}")
    rho = q.support_radius
    if t0 is not None and t0 <= 3 * rho + 6 * pulse.epsilon:
        raise T0TooSmall(f"t0 = {t0} <= 3 rho + 6 eps = {3 * rho + 6 * pulse.epsilon}")


def scattering_kernel(q, pulse, omega_grid, theta_grid, s_grid, t0=None, R_far=None,
                      route="friedlander", pairs=None, farfield_check=0, rng=None,
                      spacing=None, progress=None):
    """Compute kernel columns for the requested ``(theta, omega)`` vertex pairs.

    Parameters
    ----------
    q : PotentialField
    pulse : SourcePulse
        Base pulse (order 0); the kernel uses its derivative.
    omega_grid, theta_grid : SphereGrid
    s_grid : (Ns,) array
    t0 : float, optional
        Slice time of the Lax-Phillips route (default ``8 rho``).
    R_far : float, optional
        Receiver radius of the Friedlander route.
    route : {"friedlander", "lax_phillips"}
    pairs : (P, 2) int array, optional
        ``[theta_index, omega_index]`` rows. Defaults to all pairs for small
        grids.
    farfield_check : int
        Number of random columns recomputed at ``2 R_far``.

    Raises
    ------
    SGridTooCoarse, T0TooSmall, FarfieldUnconverged
    """
    s_grid = np.asarray(s_grid, dtype=float)
    rho = q.support_radius
    t0 = 8.0 * rho if t0 is None else float(t0)
    R_far = default_far_radius(rho, pulse) if R_far is None else float(R_far)
    _check_kernel_inputs(q, pulse, s_grid, t0 if route == "lax_phillips" else None)
    if pairs is None:
        if len(theta_grid) * len(omega_grid) > 20000:
            raise ValueError("full kernel too large; pass the needed pairs")
        ti, oi = np.meshgrid(np.arange(len(theta_grid)), np.arange(len(omega_grid)),
                             indexing="ij")
        pairs = np.column_stack([ti.ravel(), oi.ravel()])
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    values = np.zeros((len(pairs), len(s_grid)))
    meta = {"route": route, "pulse": pulse.describe(), "t0": t0, "R_far": R_far, "C_n": C3,
            "s_convention": "s = -(t - r); point scatterer echoes at y.(theta - omega)"}
    zero = getattr(q, "is_zero", lambda: False)()
    if not zero:
        if route == "friedlander":
            for k, (a, b) in enumerate(pairs):
                values[k] = friedlander_column(q, pulse, theta_grid.points[a],
                                               omega_grid.points[b], s_grid, R_far, spacing)
                if progress:
                    progress(k + 1, len(pairs))
        elif route == "lax_phillips":
            for b in np.unique(pairs[:, 1]):
                rows = np.nonzero(pairs[:, 1] == b)[0]
                om = omega_grid.points[b]
                v0 = BornTimeSlice(q, om, pulse, t0, 0)
                v1 = BornTimeSlice(q, om, pulse, t0, 1)
                out = lax_phillips(v0, v1, s_grid, theta_grid.points[pairs[rows, 0]], shift=t0)
                values[rows] = out.T
        else:
            raise ValueError(f"unknown route {route!r}")
    kernel = ScatteringKernel(s_grid, theta_grid, omega_grid, pairs, values, meta)
    if farfield_check and route == "friedlander" and not zero:
        rng = np.random.default_rng(rng)
        pick = rng.choice(len(pairs), size=min(farfield_check, len(pairs)), replace=False)
        worst = 0.0
        for k in pick:
            a, b = pairs[k]
            far = friedlander_column(q, pulse, theta_grid.points[a], omega_grid.points[b],
                                     s_grid, 2 * R_far, spacing)
            scale = np.max(np.abs(far))
            if scale > 0:
                worst = max(worst, np.max(np.abs(far - values[k])) / scale)
        meta["farfield_change"] = worst
        if worst > FARFIELD_TOL:
            raise FarfieldUnconverged(f"doubling R_far changed the kernel by {worst:.3g}",
                                      change=worst)
    return kernel


def kernel_discrepancy(a, b):
    """Max relative difference of two kernels over their common pairs."""
    num = 0.0
    den = 0.0
    for k, (ti, oi) in enumerate(a.pairs):
        if b.has(ti, oi):
            num = max(num, np.max(np.abs(a.values[k] - b.column(ti, oi))))
            den = max(den, np.max(np.abs(b.column(ti, oi))))
    return num / den if den > 0 else num


# ---------------------------------------------------------------------------
# data slices

BACKSCATTER = "BACKSCATTER"
GRAPH = "GRAPH"


@dataclass
class ValidityReport:
    passed: bool
    conditions: dict
    details: dict

    def as_record(self):
        return {"passed": self.passed, "conditions": {str(k): v for k, v in self.conditions.items()},
                "details": self.details}


@dataclass
class DataSliceSpec:
    """Outgoing direction ``phi(s, omega)`` defining a two-dimensional data set.

    ``phi`` maps ``s`` of shape ``(Ns,)`` and ``omega`` of shape ``(No, 3)``
    to unit vectors of shape ``(Ns, No, 3)``.
    """

    kind: str
    phi: Callable
    name: str = ""
    s_dependent: bool = False
    params: dict = field(default_factory=dict)
    report: Optional[ValidityReport] = None

    @classmethod
    def backscatter(cls):
        return cls(BACKSCATTER, lambda s, om: np.broadcast_to(-np.asarray(om), (len(s),) + np.shape(om)),
                   name="backscatter")

    @classmethod
    def rotated_backscatter(cls, axis=(0.0, 1.0, 0.0), angle_deg=10.0):
        """``phi = Q(-omega)`` for a fixed rotation ``Q``."""
        Q = rotation_about(axis, angle_deg)
        return cls(GRAPH, lambda s, om: np.broadcast_to(-np.asarray(om) @ Q.T,
                                                        (len(s),) + np.shape(om)),
                   name="rotated_backscatter",
                   params={"axis": list(map(float, axis)), "angle_deg": float(angle_deg),
                           "rotation": Q.tolist()})

    @classmethod
    def identity(cls):
        """``phi = omega`` (forward direction); always invalid."""
        return cls(GRAPH, lambda s, om: np.broadcast_to(np.asarray(om), (len(s),) + np.shape(om)),
                   name="identity")

    @property
    def rotation(self):
        """Rotation ``Q`` with ``phi = Q(-omega)`` when the slice is of that form."""
        if self.kind == BACKSCATTER:
            return np.eye(3)
        if "rotation" in self.params:
            return np.asarray(self.params["rotation"])
        return None

    def directions(self, s, omega):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return normalize(np.asarray(self.phi(s, np.asarray(omega, dtype=float)), dtype=float))

    def difference_map(self, s, omega):
        """Normalized ``k = omega - phi``: the specular normal seen by the slice."""
        phi = self.directions(s, omega)
        k = np.asarray(omega)[None] - phi
        return normalize(k), np.linalg.norm(k, axis=-1)

    def validate(self, omega_grid, s_grid=None, tangency_tol=0.1, pair=None, strict=True,
                 coverage=2.0):
        """Check the three slice conditions on the sampled grid.

        1. ``phi(s, omega) != omega`` everywhere;
        2. ``omega -> (omega - phi)/|omega - phi|`` is a sampled bijection of
           the sphere: every mapped triangle keeps its orientation and every
           grid vertex has an image within ``coverage`` grid spacings;
        3. the incident direction is not tangential to the surfaces whose
           normal the slice selects: ``|k . omega| > tangency_tol`` wherever
           ``k`` lies in the Gauss image of ``pair`` (all of the sphere when
           no pair is given).

        Raises
        ------
        SliceInvalid
            With the first failed condition when ``strict``.
        """
        s = np.zeros(1) if (s_grid is None or not self.s_dependent) else np.asarray(s_grid)
        om = omega_grid.points
        phi = self.directions(s, om)
        gap = np.linalg.norm(phi - om[None], axis=-1)
        cond = {}
        details = {"min_gap": float(gap.min())}
        cond[1] = bool(gap.min() > 1e-8)
        if cond[1]:
            k, _ = self.difference_map(s, om)
            f = omega_grid.faces
            ok_orient = True
            cover = 0.0
            for ks in k:
                det0 = np.einsum("ij,ij->i", om[f[:, 0]], np.cross(om[f[:, 1]], om[f[:, 2]]))
                det1 = np.einsum("ij,ij->i", ks[f[:, 0]], np.cross(ks[f[:, 1]], ks[f[:, 2]]))
                ok_orient &= bool(np.all(np.sign(det0) == np.sign(det1)) and
                                  np.all(np.abs(det1) > 1e-14))
                from scipy.spatial import cKDTree
                dist, _ = cKDTree(ks).query(om)
                cover = max(cover, float(np.max(dist)))
            details["orientation_preserved"] = ok_orient
            details["coverage_max_gap"] = cover
            cond[2] = bool(ok_orient and cover <= coverage * omega_grid.spacing)
            dots = np.abs(np.sum(k * om[None], axis=-1))
            if pair is not None:
                normals = _gauss_image(pair)
                near = np.max(np.abs(k @ normals.T), axis=-1) >= np.cos(omega_grid.spacing)
                dots = np.where(near, dots, np.inf)
            details["min_tangency"] = float(np.min(dots)) if np.isfinite(np.min(dots)) else None
            cond[3] = bool(np.min(dots) > tangency_tol)
        else:
            cond[2] = cond[3] = False
        report = ValidityReport(all(cond.values()), cond, details)
        self.report = report
        if strict and not report.passed:
            failed = min(c for c, ok in cond.items() if not ok)
            raise SliceInvalid(failed, f"slice {self.name or self.kind} fails condition "
                                       f"{failed}: {details}")
        return report


def _gauss_image(pair, count=400, rng=0):
    """Unit normals of S1 and conormal directions of S2 sampled on the pair."""
    from .geom import conormal_fiber

    normals = []
    for which in ("S1", "S2") if pair.d2 else ("S1",):
        pts = pair.sample(which, count // 2, rng=rng)
        for y in pts:
            G = conormal_fiber(pair, y, which)
            if G.shape[0] == 1:
                normals.append(G[0])
            else:
                ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
                normals.extend(np.cos(ang)[:, None] * G[0] + np.sin(ang)[:, None] * G[1])
    n = normalize(np.asarray(normals))
    return np.vstack([n, -n])


def slice_weights(slice_, theta_grid, omega_grid, s_grid=None, omega_indices=None):
    """Interpolation stencil of the slice on the theta grid.

    Returns ``(tri, w)`` of shapes ``(Ns', No, 3)`` where ``Ns'`` is 1 for
    s-independent slices.
    """
    oi = np.arange(len(omega_grid)) if omega_indices is None else np.asarray(omega_indices)
    s = np.zeros(1) if (s_grid is None or not slice_.s_dependent) else np.asarray(s_grid)
    phi = slice_.directions(s, omega_grid.points[oi])
    tri = np.zeros(phi.shape[:2] + (3,), dtype=int)
    w = np.zeros(phi.shape[:2] + (3,))
    for i in range(phi.shape[0]):
        for j in range(phi.shape[1]):
            tri[i, j], w[i, j] = theta_grid.locate(phi[i, j])
    return tri, w, oi


def required_pairs(slice_, theta_grid, omega_grid, s_grid=None, omega_indices=None,
                   min_weight=1e-12):
    """``(theta_index, omega_index)`` pairs needed to restrict a kernel to ``slice_``."""
    tri, w, oi = slice_weights(slice_, theta_grid, omega_grid, s_grid, omega_indices)
    pairs = set()
    for i in range(tri.shape[0]):
        for j in range(tri.shape[1]):
            for v, wt in zip(tri[i, j], w[i, j]):
                if wt > min_weight:
                    pairs.add((int(v), int(oi[j])))
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


@dataclass
class DataSet:
    """Restricted data ``beta(s, omega)``; ``values[j]`` is the column for ``omega_indices[j]``."""

    s_grid: np.ndarray
    omega_grid: SphereGrid
    omega_indices: np.ndarray
    values: np.ndarray
    slice: DataSliceSpec
    meta: dict = field(default_factory=dict)

    @property
    def omegas(self):
        return self.omega_grid.points[self.omega_indices]

    def to_csv(self, path):
        rows = [(int(o), float(s), float(v)) for o, col in zip(self.omega_indices, self.values)
                for s, v in zip(self.s_grid, col)]
        with open(path, "w") as fh:
            fh.write("omega_index,s,value\n")
            for o, s, v in rows:
                fh.write(f"{o},{s:.17g},{v:.17g}\n")

    def dump(self, stem):
        """Write ``stem.csv`` (17 significant digits, exact round trip) and ``stem.json``."""
        self.to_csv(Path(f"{stem}.csv"))
        sl = self.slice
        meta = {"omega_grid": self.omega_grid.describe(),
                "omega_indices": [int(o) for o in self.omega_indices],
                "s_grid": {"start": float(self.s_grid[0]),
                           "step": float(self.s_grid[1] - self.s_grid[0]),
                           "count": int(len(self.s_grid))},
                "slice": {"kind": sl.kind, "name": sl.name, "params": sl.params},
                "meta": self.meta}
        Path(f"{stem}.json").write_text(json.dumps(meta, indent=1, default=str))
        return stem

    @classmethod
    def load(cls, stem):
        meta = json.loads(Path(f"{stem}.json").read_text())
        rows = np.loadtxt(Path(f"{stem}.csv"), delimiter=",", skiprows=1, ndmin=2)
        sg = meta["s_grid"]
        s_grid = sg["start"] + sg["step"] * np.arange(sg["count"])
        oi = np.asarray(meta["omega_indices"], dtype=int)
        values = rows[:, 2].reshape(len(oi), len(s_grid))
        g = meta["omega_grid"]
        grid = SphereGrid(g["level"], None if g["rotation"] is None else np.asarray(g["rotation"]))
        return cls(s_grid, grid, oi, values, slice_from_record(meta["slice"]), meta["meta"])

    def scaled(self, c):
        return DataSet(self.s_grid, self.omega_grid, self.omega_indices, c * self.values,
                       self.slice, dict(self.meta))


def slice_from_record(record):
    """Rebuild a named slice from its ``{kind, name, params}`` record."""
    name = record.get("name")
    if name == "backscatter":
        return DataSliceSpec.backscatter()
    if name == "rotated_backscatter":
        p = record["params"]
        return DataSliceSpec.rotated_backscatter(p["axis"], p["angle_deg"])
    if name == "identity":
        return DataSliceSpec.identity()
    raise ValueError(f"slice {name!r} cannot be rebuilt from a record")


def restrict(kernel, slice_, omega_indices=None, validate=True, tangency_tol=0.1, pair=None):
    """``beta(s, omega) = alpha(s, phi(s, omega), omega)`` by spherical-linear interpolation.

    Raises
    ------
    SliceInvalid
        When ``validate`` and the slice fails a condition.
    KeyError
        When the kernel lacks a pair of the interpolation stencil.
    """
    if validate:
        slice_.validate(kernel.omega_grid, kernel.s_grid, tangency_tol=tangency_tol, pair=pair)
    if omega_indices is None:
        omega_indices = np.unique(kernel.pairs[:, 1])
    tri, w, oi = slice_weights(slice_, kernel.theta_grid, kernel.omega_grid, kernel.s_grid,
                               omega_indices)
    ns = len(kernel.s_grid)
    out = np.zeros((len(oi), ns))
    for j, o in enumerate(oi):
        if tri.shape[0] == 1:
            for v, wt in zip(tri[0, j], w[0, j]):
                if wt > 1e-12:
                    out[j] += wt * kernel.column(v, o)
        else:
            for i in range(ns):
                for v, wt in zip(tri[i, j], w[i, j]):
                    if wt > 1e-12:
                        out[j, i] += wt * kernel.column(v, o)[i]
    return DataSet(kernel.s_grid, kernel.omega_grid, np.asarray(oi), out, slice_,
                   {"kernel": kernel.meta, "slice": slice_.name or slice_.kind})
