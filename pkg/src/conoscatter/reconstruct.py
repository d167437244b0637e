"""Echo detection on restricted data and recovery of the scattering surfaces.

Recovery uses the support-function identity. For a slice with outgoing
direction ``phi(omega)`` put ``k = omega - phi``, ``kappa = |k|`` and
``k_hat = k / kappa``. A surface point ``y`` with unit normal ``k_hat``
echoes at ``s = -kappa y . k_hat``, so ``f = s / kappa`` is minus the
support function and

    y = -f k_hat - 2 c grad_{k_hat} f,      c = 1/2,

where the gradient is taken on the sphere of normals. For backscattering
(``phi = -omega``) this reads ``y = -c grad s - (s / 2) omega``.
"""

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import signal
from scipy.spatial import cKDTree

from .errors import (BandTooNarrow, CalibrationAmbiguous, ClassOverlap, GradientUndefined,
                     ReferenceMismatch)
from .potential import loglog_fit
from .sphere import SphereGrid, log_map, normalize, tangent_frame

logger = logging.getLogger(__name__)

DEFAULT_C = 0.5
REL_FLOOR = 2e-2
# Backscatter samples R q at p = -s/2, so this band and window, given in s,
# are [0.8, 2.4]/eps and +-8 eps of the plane-integral profile in p.
DEFAULT_BAND = (0.4, 1.2)  # in units of 1/eps
DEFAULT_HALF_WINDOW = 16.0  # in units of eps


# ---------------------------------------------------------------------------
# detection


@dataclass
class Echo:
    omega_index: int
    s: float
    amplitude: float
    width: float
    blurred: bool
    decay: float = float("nan")
    neighbors: list = field(default_factory=list)  # [(omega_index, s)]

    def as_record(self):
        return {"omega_index": self.omega_index, "s": self.s, "amplitude": self.amplitude,
                "width": self.width, "blurred": self.blurred, "decay": self.decay,
                "n_neighbors": len(self.neighbors)}


@dataclass
class SingularSupportCurve:
    """Detected echoes ``s*_1 < s*_2 < ...`` per incident direction."""

    s_grid: np.ndarray
    omega_grid: SphereGrid
    omega_indices: np.ndarray
    echoes: list
    no_peaks: list
    epsilon: float
    envelopes: Optional[np.ndarray] = None
    floor: float = 0.0
    meta: dict = field(default_factory=dict)

    def at(self, oi):
        return [e for e in self.echoes if e.omega_index == oi]

    def column(self, oi):
        return int(np.nonzero(self.omega_indices == oi)[0][0])

    def envelope_at(self, oi, s):
        """Envelope of column ``oi`` linearly interpolated at ``s``."""
        return float(np.interp(s, self.s_grid, self.envelopes[self.column(oi)]))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("omega_index,omega_x,omega_y,omega_z,s,amplitude,width,decay\n")
            for e in self.echoes:
                w = self.omega_grid.points[e.omega_index]
                fh.write(f"{e.omega_index},{w[0]:.12g},{w[1]:.12g},{w[2]:.12g},{e.s:.12g},"
                         f"{e.amplitude:.12g},{e.width:.12g},{e.decay:.6g}\n")

    @classmethod
    def from_analytic(cls, omega_grid, s_func, epsilon=0.1, omega_indices=None,
                      ring_depth=1):
        """Curve from an analytic echo map ``s_func(omega) -> list of s``.

        Neighbour associations pair each echo with the nearest-valued echo
        of adjacent directions, as detection does.
        """
        oi = np.arange(len(omega_grid)) if omega_indices is None else np.asarray(omega_indices)
        echoes = []
        for i in oi:
            for s in np.atleast_1d(s_func(omega_grid.points[i])):
                echoes.append(Echo(int(i), float(s), 1.0, epsilon, False))
        curve = cls(np.zeros(1), omega_grid, oi, echoes, [], epsilon)
        associate_echoes(curve, tol=np.inf, ring_depth=ring_depth)
        return curve


def _matched_envelope(column, filt, ds):
    """Matched-filter output and its analytic-signal envelope."""
    m = signal.correlate(column, filt, mode="same") * ds
    return m, np.abs(signal.hilbert(m))


def _quadratic_peak(y, i):
    if 0 < i < len(y) - 1:
        a, b, c = y[i - 1], y[i], y[i + 1]
        den = a - 2 * b + c
        if den < 0:
            off = 0.5 * (a - c) / den
            return float(np.clip(off, -0.5, 0.5)), float(b - 0.25 * (a - c) * off)
    return 0.0, float(y[i])


def spectral_slope(column, s_grid, center, epsilon, band=DEFAULT_BAND,
                   half_window=DEFAULT_HALF_WINDOW, pad=8):
    """Log-log slope of the windowed column spectrum over ``band / epsilon``.

    Raises
    ------
    BandTooNarrow
        If the band holds fewer than two independent frequency samples or
        exceeds the Nyquist frequency.
    """
    ds = s_grid[1] - s_grid[0]
    lo, hi = band[0] / epsilon, band[1] / epsilon
    if hi >= np.pi / ds:
        raise BandTooNarrow(f"band top {hi:.3g} above Nyquist {np.pi / ds:.3g}")
    sel = np.abs(s_grid - center) <= half_window * epsilon
    seg = column[sel]
    if len(seg) < 8:
        raise BandTooNarrow("echo window holds too few samples")
    length = len(seg) * ds
    if (hi - lo) < 2 * np.pi / length:
        raise BandTooNarrow(f"band [{lo:.3g}, {hi:.3g}] narrower than one spectral cell")
    seg = seg * signal.windows.tukey(len(seg), 0.5)
    n = int(2 ** np.ceil(np.log2(pad * len(seg))))
    F = np.abs(np.fft.rfft(seg, n)) * ds
    k = 2 * np.pi * np.fft.rfftfreq(n, ds)
    pick = (k >= lo) & (k <= hi)
    return loglog_fit(k[pick], np.maximum(F[pick], 1e-300)).slope


def detect_singular_support(data, pulse, noise_floor_k=3.0, rel_floor=REL_FLOOR,
                            global_max=None, band=DEFAULT_BAND, assoc_tol=None,
                            ring_depth=1, prewhiten=1, half_window=DEFAULT_HALF_WINDOW):
    """Matched-filter echo picking on every column of a restricted data set.

    Parameters
    ----------
    data : DataSet
    pulse : SourcePulse
    noise_floor_k : float
        Peaks must exceed ``k`` times the median absolute deviation of the
        column envelope.
    rel_floor : float
        Peaks must also exceed this fraction of ``global_max`` (default: the
        largest envelope value in the data set).
    prewhiten : int
        Number of ``s``-derivatives applied before matching, i.e. the filter
        is ``eps^k psi^(k)``. One derivative suppresses the slowly varying
        response of the smooth part of ``q`` without moving echo centres.
    band, half_window
        Passed to :func:`spectral_slope` for the per-echo decay estimate.

    Columns without peaks are listed in ``no_peaks`` (not an error).
    """
    s = np.asarray(data.s_grid, dtype=float)
    ds = s[1] - s[0]
    eps = pulse.epsilon
    if ds > eps / 2 + 1e-12:
        raise ValueError(f"data step {ds} exceeds eps/2 = {eps / 2}")
    nz = int(np.floor(pulse.half_support / ds))
    z = ds * np.arange(-nz, nz + 1)
    kern = pulse.derivative(prewhiten)(z) * eps ** prewhiten
    envs = []
    for col in data.values:
        _, env = _matched_envelope(col, kern, ds)
        envs.append(env)
    envs = np.array(envs) if envs else np.zeros((0, len(s)))
    gmax = float(envs.max()) if global_max is None and envs.size else (global_max or 0.0)
    echoes, missing = [], []
    floor_rel = rel_floor * gmax
    for j, oi in enumerate(data.omega_indices):
        env = envs[j]
        mad = float(np.median(np.abs(env - np.median(env))))
        floor = max(noise_floor_k * mad, floor_rel, 1e-300)
        if gmax == 0.0:
            missing.append(int(oi))
            continue
        peaks, _ = signal.find_peaks(env, height=floor, distance=max(1, int(1.5 * eps / ds)))
        if len(peaks) == 0:
            missing.append(int(oi))
            continue
        widths = signal.peak_widths(env, peaks, rel_height=0.5)[0] * ds
        for p, w in zip(peaks, widths):
            off, amp = _quadratic_peak(env, p)
            sp = float(s[p] + off * ds)
            try:
                decay = spectral_slope(data.values[j], s, sp, eps, band, half_window)
            except BandTooNarrow:
                decay = float("nan")
            echoes.append(Echo(int(oi), sp, amp, float(w), bool(w < eps or w > 10 * eps),
                               decay))
    curve = SingularSupportCurve(s, data.omega_grid, np.asarray(data.omega_indices), echoes,
                                 missing, eps, envs, floor_rel,
                                 {"rel_floor": rel_floor, "noise_floor_k": noise_floor_k,
                                  "global_max": gmax, "band": list(band), "half_window": half_window,
                                  "prewhiten": prewhiten})
    associate_echoes(curve, tol=assoc_tol if assoc_tol is not None else 3 * eps,
                     ring_depth=ring_depth)
    logger.info("detected %d echoes on %d columns (%d without peaks)", len(echoes),
                len(data.omega_indices), len(missing))
    return curve


def _lsq_gradient(base, points, values, base_value):
    """Minimum-norm tangent gradient at ``base`` from neighbour samples."""
    e1, e2 = tangent_frame(base)
    v = log_map(base, points)
    A = np.column_stack([np.ones(len(values) + 1),
                         np.concatenate([[0.0], v @ e1]), np.concatenate([[0.0], v @ e2])])
    b = np.concatenate([[base_value], values])
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=1e-6)
    return sol[1] * e1 + sol[2] * e2, int(rank) - 1


def associate_echoes(curve, tol, ring_depth=1):
    """Link every echo to the nearest-valued echo of each adjacent direction.

    A first pass matches raw ``s`` values within ``tol``; a second pass
    re-matches against the value predicted by the fitted gradient.
    """
    by_omega = {}
    for e in curve.echoes:
        by_omega.setdefault(e.omega_index, []).append(e)
    grid = curve.omega_grid
    for e in curve.echoes:
        ring = grid.ring(e.omega_index, ring_depth) if ring_depth > 1 else grid.neighbors[e.omega_index]
        base = grid.points[e.omega_index]
        cand = []
        for j in ring:
            if j in by_omega:
                best = min(by_omega[j], key=lambda o: abs(o.s - e.s))
                if abs(best.s - e.s) <= tol:
                    cand.append((int(j), best.s))
        if len(cand) >= 3 and np.isfinite(tol):
            pts = grid.points[[c[0] for c in cand]]
            g, _ = _lsq_gradient(base, pts, np.array([c[1] for c in cand]), e.s)
            refined = []
            for j in ring:
                if j in by_omega:
                    pred = e.s + g @ log_map(base, grid.points[[j]])[0]
                    best = min(by_omega[j], key=lambda o: abs(o.s - pred))
                    if abs(best.s - pred) <= 0.5 * tol:
                        refined.append((int(j), best.s))
            cand = refined
        e.neighbors = cand


# ---------------------------------------------------------------------------
# recovery


@dataclass
class PointCloud:
    points: np.ndarray
    omega_index: np.ndarray
    s: np.ndarray
    confidence: np.ndarray
    decay: np.ndarray
    gradient_rank: np.ndarray
    cls: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cls is None:
            self.cls = np.array(["S1"] * len(self.points), dtype=object)

    def __len__(self):
        return len(self.points)

    def subset(self, mask):
        mask = np.asarray(mask)
        return PointCloud(self.points[mask], self.omega_index[mask], self.s[mask],
                          self.confidence[mask], self.decay[mask], self.gradient_rank[mask],
                          self.cls[mask], dict(self.meta))

    def of_class(self, name):
        return self.subset(self.cls == name)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("x,y,z,class,confidence\n")
            for p, c, w in zip(self.points, self.cls, self.confidence):
                fh.write(f"{p[0]:.12g},{p[1]:.12g},{p[2]:.12g},{c},{w:.6g}\n")


def _slice_geometry(slice_, omegas):
    """``(k_hat, kappa)`` for each direction; backscatter when ``slice_`` is None."""
    if slice_ is None:
        return np.asarray(omegas, dtype=float), np.full(len(omegas), 2.0)
    k, kappa = slice_.difference_map(np.zeros(1), omegas)
    return k[0], kappa[0]


def recover_points(curve, calibration_c=DEFAULT_C, slice_=None, excluded=None, strict=False,
                   search_box=None):
    """One candidate surface point per detected echo.

    Parameters
    ----------
    curve : SingularSupportCurve
    calibration_c : float
        Gradient constant (``1/2`` for the data-side conormal).
    slice_ : DataSliceSpec, optional
        Slice the data came from (default: backscatter).
    excluded : bool array over the omega grid, optional
        Directions inside tangential wedges; they contribute no points.
    strict : bool
        Raise ``GradientUndefined`` for echoes without associated
        neighbours instead of using a zero gradient.
    search_box : (3, 2) array, optional
        Points outside are dropped.
    """
    grid = curve.omega_grid
    khat, kappa = _slice_geometry(slice_, grid.points)
    pts, oi, ss, conf, dec, ranks = [], [], [], [], [], []
    dropped = 0
    skipped = 0
    for e in curve.echoes:
        i = e.omega_index
        if excluded is not None and excluded[i]:
            skipped += 1
            continue
        f0 = e.s / kappa[i]
        if e.neighbors:
            js = np.array([n[0] for n in e.neighbors])
            vals = np.array([n[1] for n in e.neighbors]) / kappa[js]
            g, rank = _lsq_gradient(khat[i], khat[js], vals, f0)
        else:
            if strict:
                raise GradientUndefined(f"echo at omega {i}, s = {e.s:.4g} has no neighbours",
                                        omega_index=i)
            g, rank = np.zeros(3), 0
        y = -f0 * khat[i] - 2.0 * calibration_c * g
        if search_box is not None and np.any((y < search_box[:, 0]) | (y > search_box[:, 1])):
            dropped += 1
            continue
        snr = e.amplitude / max(3.0 * curve.floor, 1e-300) if curve.floor > 0 else 1.0
        c = min(1.0, snr) * (1.0, 0.5, 0.25)[2 - min(rank, 2)] * (0.5 if e.blurred else 1.0)
        pts.append(y)
        oi.append(i)
        ss.append(e.s)
        conf.append(c)
        dec.append(e.decay)
        ranks.append(rank)
    cloud = PointCloud(np.array(pts).reshape(-1, 3), np.array(oi, dtype=int), np.array(ss),
                       np.array(conf), np.array(dec), np.array(ranks, dtype=int),
                       meta={"calibration_c": calibration_c, "dropped_outside_box": dropped,
                             "excluded_echoes": skipped})
    return cloud


def recover_from_chart_data(s, omega, tau, Omega, calibration_c=DEFAULT_C):
    """Invert exact backscatter wavefront data ``(s, omega; tau, Omega)``.

    The graph ``s = s*(omega)`` has gradient ``-2 Omega / tau``, so
    ``y = -c grad s* - (s / 2) omega``.
    """
    grad = -2.0 * np.asarray(Omega, dtype=float) / tau
    return -calibration_c * grad - 0.5 * s * np.asarray(omega, dtype=float)


def tangential_wedges(pair, omega_grid, tol=0.1, which=None):
    """Directions nearly orthogonal to every conormal of the selected submanifold.

    For ``which="S2"`` of the plane/line model this is the cone around the
    line direction where ``|nu_hat . omega| <= tol`` for all unit conormals.
    """
    from .geom import conormal_fiber

    which = which or ("S2" if pair.d2 else "S1")
    y = pair.project(np.zeros(pair.n), which)
    G = conormal_fiber(pair, y, which)
    best = np.linalg.norm(omega_grid.points @ G.T, axis=1)
    return best <= tol


def specular_directions(pair, omega_grid, slice_=None, support_center=(0.0, 0.0, 0.0),
                        support_radius=0.75, tol=None, count=4000, rng=0):
    """Grid directions at which S1 or S2 returns a specular echo.

    The slice selects the normal ``k_hat`` (``omega`` itself for
    backscatter). A direction is specular for a submanifold when one of its
    points ``y`` with ``|y - center| <= radius`` has a unit conormal within
    ``tol`` radians of ``+-k_hat``. Away from those directions a flat piece
    of the pair returns no specular echo, and whatever the detector finds
    there comes from the amplitude cutoff.

    Parameters
    ----------
    tol : float, optional
        Angular tolerance. The default, half the grid spacing, keeps the grid
        vertices nearest to exact specular directions.
    count : int
        Sample points per submanifold.

    Returns
    -------
    dict
        ``{"S1": bool array, "S2": bool array}`` over the grid (``"S2"`` only
        for nested pairs).
    """
    from .geom import conormal_fiber

    tol = 0.5 * omega_grid.spacing if tol is None else float(tol)
    khat, _ = _slice_geometry(slice_, omega_grid.points)
    c = np.asarray(support_center, dtype=float)
    out = {}
    for which in ("S1", "S2") if pair.d2 else ("S1",):
        ys = pair.sample(which, count, rng=rng)
        ys = ys[np.linalg.norm(ys - c, axis=1) <= support_radius]
        if not len(ys):
            out[which] = np.zeros(len(khat), dtype=bool)
            continue
        if pair.codim(which) == 1:
            normals = np.array([conormal_fiber(pair, y, which)[0] for y in ys])
            normals = np.unique(np.round(normals, 12), axis=0)
            cos = np.max(np.abs(khat @ normals.T), axis=1)
            angle = np.arccos(np.clip(cos, 0.0, 1.0))
        else:
            tangents = np.array([pair.tangent_basis(y, which) for y in ys])
            tangents = np.unique(np.round(tangents, 12), axis=0)
            # angle between k_hat and the fiber is asin of its tangential part
            sin = np.min(np.linalg.norm(np.einsum("ki,tij->ktj", khat, tangents), axis=2), axis=1)
            angle = np.arcsin(np.clip(sin, 0.0, 1.0))
        out[which] = angle <= tol
    return out


def nonspecular_directions(pair, omega_grid, **kw):
    """``True`` where no submanifold of the pair is specular (see :func:`specular_directions`)."""
    spec = specular_directions(pair, omega_grid, **kw)
    return ~np.logical_or.reduce(list(spec.values()))


def classify_by_geometry(cloud, specular):
    """Label each point by the submanifold specular at its direction.

    Directions specular for S1 are labelled ``S1`` (a codimension-one echo
    dominates the weaker S2 echo there), the others ``S2``.
    """
    s1 = specular["S1"][cloud.omega_index]
    cloud.cls = np.where(s1, "S1", "S2").astype(object)
    cloud.meta["classes"] = {"method": "geometry", "S1": int(s1.sum()),
                             "S2": int((~s1).sum())}
    return cloud


# ---------------------------------------------------------------------------
# distances


def hausdorff(a, b):
    a = np.asarray(a).reshape(-1, 3)
    b = np.asarray(b).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(max(da.max(), db.max()))


def one_sided(a, b):
    """``max_{p in a} dist(p, b)``."""
    a = np.asarray(a).reshape(-1, 3)
    if len(a) == 0:
        return float("inf")
    d, _ = cKDTree(np.asarray(b).reshape(-1, 3)).query(a)
    return float(d.max())


def sphere_truth(center, radius, normals):
    """Sphere points whose outward normals are ``normals`` (both sides)."""
    c = np.asarray(center, dtype=float)
    n = normalize(normals)
    return np.vstack([c + radius * n, c - radius * n])


def distance_to_submanifold(points, pair, which):
    """Euclidean distance from each point to S1 or S2 (Newton projection)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    proj = np.array([pair.project(p, which) for p in pts]).reshape(-1, 3)
    return np.linalg.norm(pts - proj, axis=1)


# ---------------------------------------------------------------------------
# calibration, classes and orders


def calibrate_gradient_constant(curve, truth, candidates=(0.5, 1.0), slice_=None, rel_tol=0.1,
                                excluded=None):
    """Pick the gradient constant reconstructing a known object best.

    Parameters
    ----------
    truth : (N, 3) array or callable
        Ground-truth points, or ``f(cloud_points, omegas) -> truth points``.

    Returns
    -------
    (c, errors) with ``errors`` the Hausdorff distance per candidate.

    Raises
    ------
    CalibrationAmbiguous
        If the two best candidates are within ``rel_tol`` of each other.
    """
    errors = {}
    for c in candidates:
        cloud = recover_points(curve, c, slice_=slice_, excluded=excluded)
        ref = truth(cloud) if callable(truth) else truth
        errors[c] = hausdorff(cloud.points, ref)
    order = sorted(errors, key=errors.get)
    best, second = order[0], order[1]
    if errors[second] - errors[best] <= rel_tol * max(errors[second], 1e-300):
        raise CalibrationAmbiguous(f"gradient constants {best} and {second} give errors "
                                   f"{errors[best]:.3g} and {errors[second]:.3g}",
                                   errors=errors)
    return best, errors


def classify_points(cloud, spacing, separation=0.4, m2_sign=-1, expect_two=False):
    """Label points ``S1``/``S2`` by decay exponent, then spatial continuity.

    Decay exponents are split at the largest gap of the sorted values. If
    the two groups differ by less than ``separation`` everything is one
    class (``S1``). The faster-decaying group is ``S2`` when ``m2_sign`` is
    negative. Points whose decay is undefined take the class of the nearest
    labelled point within three grid cells; remaining ones are ties.

    Raises
    ------
    ClassOverlap
        If ``expect_two`` and the groups cannot be separated.
    """
    d = cloud.decay
    ok = np.isfinite(d)
    cls = np.array(["S1"] * len(d), dtype=object)
    info = {"separable": False}
    if ok.sum() >= 2:
        vals = np.sort(d[ok])
        gaps = np.diff(vals)
        k = int(np.argmax(gaps))
        cut = 0.5 * (vals[k] + vals[k + 1])
        lo_mean = vals[:k + 1].mean()
        hi_mean = vals[k + 1:].mean()
        info.update(cut=float(cut), low_mean=float(lo_mean), high_mean=float(hi_mean))
        if hi_mean - lo_mean >= separation:
            info["separable"] = True
            low = d < cut
            s2 = low if m2_sign < 0 else ~low
            cls[ok & s2] = "S2"
    if expect_two and not info["separable"]:
        raise ClassOverlap("decay exponents do not separate into two classes", **info)
    ties = 0
    if (~ok).any() and ok.any():
        tree = cKDTree(cloud.points[ok])
        dist, idx = tree.query(cloud.points[~ok])
        lab = cls[ok][idx]
        near = dist <= 3 * spacing
        fill = np.where(near, lab, "TIE")
        ties = int((~near).sum())
        cls[~ok] = fill
    cloud.cls = cls
    cloud.meta["classes"] = dict(info, ties=ties)
    return cloud


@dataclass
class OrderCalibration:
    gain: float
    offset: float
    epsilon: float
    mollify_scale: float
    band: tuple
    entries: list

    def to_order(self, slope):
        return (slope - self.offset) / self.gain

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("conoscatter.data").joinpath("order_calibration.json").read_text()
        else:
            text = Path(path).read_text()
        d = json.loads(text)
        return cls(d["fit"]["gain"], d["fit"]["offset"], d["epsilon"], d["mollify_scale"],
                   tuple(d["band"]), d["entries"])


@dataclass
class OrderEstimate:
    M1_est: float
    M2_rel_est: float
    slope_S1: float
    slope_S2: float
    counts: dict


def estimate_orders(cloud_or_curve, calibration=None, classes=None):
    """Order estimates from the median echo spectral slope of each class.

    ``M1_est`` maps the S1 slope through the calibration table.
    ``M2_rel_est`` is the S2 slope minus the S1 slope, divided by the
    calibration gain when a calibration is given.
    """
    if isinstance(cloud_or_curve, SingularSupportCurve):
        decay = np.array([e.decay for e in cloud_or_curve.echoes])
        cls = np.array(["S1"] * len(decay), dtype=object) if classes is None else np.asarray(classes)
    else:
        decay = cloud_or_curve.decay
        cls = cloud_or_curve.cls if classes is None else np.asarray(classes)
    ok = np.isfinite(decay)
    s1 = decay[ok & (cls == "S1")]
    s2 = decay[ok & (cls == "S2")]
    if len(s1) == 0 and len(s2) == 0:
        raise BandTooNarrow("no echo has a usable spectral slope")
    slope1 = float(np.median(s1)) if len(s1) else float("nan")
    slope2 = float(np.median(s2)) if len(s2) else float("nan")
    cal = calibration
    m1 = cal.to_order(slope1) if (cal is not None and np.isfinite(slope1)) else float("nan")
    m2 = slope2 - slope1 if (np.isfinite(slope1) and np.isfinite(slope2)) else float("nan")
    if cal is not None:
        m2 = m2 / cal.gain
    return OrderEstimate(m1, m2, slope1, slope2, {"S1": int(len(s1)), "S2": int(len(s2))})


@dataclass
class SymbolSamples:
    omega_index: np.ndarray
    s: np.ndarray
    ratio: np.ndarray


def recover_symbol_magnitude(target, reference, s_tol=None, min_match=0.8):
    """Envelope ratios target/reference at the reference echo locations.

    Raises
    ------
    ReferenceMismatch
        If the two curves use different grids, or if fewer than
        ``min_match`` of the target echoes sit on a reference echo.
    """
    if (len(target.s_grid) != len(reference.s_grid)
            or not np.allclose(target.s_grid, reference.s_grid)
            or not np.array_equal(target.omega_indices, reference.omega_indices)):
        raise ReferenceMismatch("target and reference use different grids")
    tol = s_tol or 2 * (reference.s_grid[1] - reference.s_grid[0])
    if target.echoes:
        matched = 0
        for e in target.echoes:
            if any(abs(r.s - e.s) <= tol for r in reference.at(e.omega_index)):
                matched += 1
        frac = matched / len(target.echoes)
        if frac < min_match:
            raise ReferenceMismatch(f"only {frac:.0%} of target echoes match the reference",
                                    fraction=frac)
    oi, ss, rat = [], [], []
    for r in reference.echoes:
        oi.append(r.omega_index)
        ss.append(r.s)
        rat.append(target.envelope_at(r.omega_index, r.s) / reference.envelope_at(r.omega_index, r.s))
    return SymbolSamples(np.array(oi, dtype=int), np.array(ss), np.array(rat))


@dataclass
class ReconstructionResult:
    S1_cloud: PointCloud
    S2_cloud: PointCloud
    M1_est: float
    M2_est: float
    excluded_wedges: list
    calibration: float
    curve: SingularSupportCurve = None

    def report(self):
        return {"M1_est": self.M1_est, "M2_rel_est": self.M2_est,
                "calibration_c": self.calibration, "excluded_wedges": self.excluded_wedges,
                "S1_points": len(self.S1_cloud), "S2_points": len(self.S2_cloud),
                "no_peaks": len(self.curve.no_peaks) if self.curve is not None else None}


def reconstruct(data, pulse, calibration_c=DEFAULT_C, excluded=None, order_calibration=None,
                spacing=None, m2_sign=-1, separation=0.4, search_box=None, **detect_kw):
    """Detection, recovery, classification and order estimation in one call."""
    curve = detect_singular_support(data, pulse, **detect_kw)
    slice_ = None if data.slice.kind == "BACKSCATTER" else data.slice
    cloud = recover_points(curve, calibration_c, slice_=slice_, excluded=excluded,
                           search_box=search_box)
    classify_points(cloud, spacing or pulse.epsilon / 4, separation=separation, m2_sign=m2_sign)
    try:
        est = estimate_orders(cloud, order_calibration)
        m1, m2 = est.M1_est, est.M2_rel_est
    except BandTooNarrow:
        m1 = m2 = float("nan")
    wedges = [] if excluded is None else np.nonzero(excluded)[0].tolist()
    return ReconstructionResult(cloud.of_class("S1"), cloud.of_class("S2"), m1, m2, wedges,
                                calibration_c, curve)
