"""Potentials conormal to a single surface or to a nested pair ``S2 c S1``.

Fields are built in the normal coordinates ``u = h(x)`` of the pair (the
defining-function values) and multiplied by a smooth radial cutoff, so the
result is supported in a ball. Two constructions are offered:

- ``FOURIER_SYMBOL``: inverse FFT of the symbol
  ``<theta', theta''>^M1 <theta''>^M2`` times a Gaussian band limit;
- ``MODEL_PROFILE``: closed-form layers (mollified delta, smoothed step and a
  regularized power ``(u^2 + m^2)^{-(1 + mu)/2}``).

Orders are symbol orders: a layer of symbol order ``mu`` across a surface of
codimension ``k`` blows up like ``dist^{-(k + mu)}``.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage, special

from .errors import BandLimited, FitUnstable, OrderInadmissible, Unresolved
from .geom import NestedPair

logger = logging.getLogger(__name__)

FOURIER_SYMBOL = "FOURIER_SYMBOL"
MODEL_PROFILE = "MODEL_PROFILE"

# exact symbol orders of the closed-form layers
MODEL_ORDERS = {"delta": 0.0, "heaviside": -1.0}


def japanese(x):
    return np.sqrt(1.0 + np.square(x))


def admissible_orders(M1, M2, d1, d2, n=3):
    """Whether ``(M1, M2)`` lies in the order window for which recovery holds.

    Either ``M2 > -d2`` and ``M1 < -d1 - d2/2 + 1``, or ``M2 <= -d2`` and
    ``M1 < -d1 + 1``; in addition ``M1 + M2/2`` must lie below
    ``min(-(d1 + d2)/2, -d1 - d2 + 1)`` for ``n`` in {3, 4} and below
    ``min(-(n - 2)(d1 + d2)/n, -d1 - d2 + 1)`` for ``n >= 5``.
    """
    if M2 > -d2:
        first = M1 < -d1 - d2 / 2.0 + 1.0
    else:
        first = M1 < -d1 + 1.0
    if n >= 5:
        bound = min(-(n - 2) * (d1 + d2) / n, -d1 - d2 + 1.0)
    else:
        bound = min(-(d1 + d2) / 2.0, -d1 - d2 + 1.0)
    return bool(first and (M1 + M2 / 2.0 < bound))


def _smooth_step(z):
    """C-infinity step: 0 for z <= 0, 1 for z >= 1."""
    z = np.asarray(z, dtype=float)
    a = np.where(z > 0, np.exp(-1.0 / np.maximum(z, 1e-300)), 0.0)
    b = np.where(z < 1, np.exp(-1.0 / np.maximum(1.0 - z, 1e-300)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class Amplitude:
    """Smooth radial cutoff, equal to one inside ``taper * radius`` and zero
    outside ``radius``, optionally times a modulation ``a(x)``."""

    radius: float = 0.75
    center: tuple = (0.0, 0.0, 0.0)
    taper: float = 0.6
    modulation: Optional[Callable] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x - np.asarray(self.center), axis=-1) / self.radius
        out = 1.0 - _smooth_step((r - self.taper) / (1.0 - self.taper))
        if self.modulation is not None:
            out = out * self.modulation(x)
        return out


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid: ``origin`` is the centre of cell 0."""

    origin: np.ndarray
    spacing: float
    dims: tuple

    @classmethod
    def cube(cls, half_width, n=64, center=(0.0, 0.0, 0.0)):
        h = 2.0 * half_width / n
        origin = np.asarray(center, dtype=float) - half_width + 0.5 * h
        return cls(origin=origin, spacing=h, dims=(n, n, n))

    def axes(self):
        return [self.origin[i] + self.spacing * np.arange(self.dims[i]) for i in range(3)]

    def points(self):
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    @property
    def cell_volume(self):
        return self.spacing ** 3

    def to_index(self, x):
        return (np.asarray(x, dtype=float) - self.origin) / self.spacing


@dataclass
class PotentialSpec:
    """Orders, construction and support of a potential.

    Parameters
    ----------
    pair : NestedPair
    M1, M2 : float
        Symbol orders. For single-surface pairs (``d2 == 0``) ``M2`` is unused.
    profile : {"FOURIER_SYMBOL", "MODEL_PROFILE"}
    model : {"delta", "heaviside", "power"}
        Closed-form layer for ``MODEL_PROFILE``; ``"power"`` uses ``M1`` as
        its order.
    amplitude : Amplitude
    mollify_scale : float
        Band-limit scale ``m``.
    scale : float
        Overall constant factor.
    low_cut : float
        Low-frequency suppression scale of the ``FOURIER_SYMBOL`` symbol
        (0 disables it).
    enforce_admissibility : bool
        Reject orders outside the recovery window. Closed-form test layers
        such as the delta layer sit outside it and need ``False``.
    """

    pair: NestedPair
    M1: float = -1.0
    M2: float = 0.0
    profile: str = MODEL_PROFILE
    model: str = "delta"
    amplitude: Amplitude = field(default_factory=Amplitude)
    mollify_scale: float = 0.05
    scale: float = 1.0
    enforce_admissibility: bool = True
    box_half_width: float = 8.0
    low_cut: float = 0.0

    def __post_init__(self):
        if self.profile == MODEL_PROFILE:
            if self.model not in ("delta", "heaviside", "power"):
                raise ValueError(f"unknown model profile {self.model!r}")
            if self.model in MODEL_ORDERS:
                self.M1 = MODEL_ORDERS[self.model]
            if self.pair.d2 != 0:
                raise ValueError("closed-form profiles are single-surface layers")
        elif self.profile != FOURIER_SYMBOL:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.mollify_scale <= 0:
            raise ValueError("mollify_scale must be positive")

    @property
    def rho(self):
        return self.amplitude.radius

    def admissible(self):
        return admissible_orders(self.M1, self.M2 if self.pair.d2 else 0.0,
                                 self.pair.d1, self.pair.d2, self.pair.n)

    def describe(self):
        return {"pair": self.pair.name, "pair_params": self.pair.params, "M1": self.M1,
                "M2": self.M2, "profile": self.profile, "model": self.model,
                "rho": self.rho, "center": list(self.amplitude.center),
                "mollify_scale": self.mollify_scale, "scale": self.scale,
                "low_cut": self.low_cut}


class PotentialField:
    """An evaluable potential with an optional grid cache.

    Parameters
    ----------
    evaluator : callable
        ``(..., 3) -> (...)`` real values.
    support_center, support_radius :
        Ball outside which the field vanishes.
    grid : Grid, optional
    values : ndarray, optional
        Samples on ``grid``; computed from ``evaluator`` when omitted.
    """

    def __init__(self, evaluator, support_center, support_radius, grid=None, values=None,
                 spec=None, normal_field=None):
        self.evaluator = evaluator
        self.support_center = np.asarray(support_center, dtype=float)
        self.support_radius = float(support_radius)
        self.spec = spec
        self.grid = grid
        self.normal_field = normal_field
        self._values = values
        self._coeffs = None

    def __call__(self, x):
        return self.evaluator(np.asarray(x, dtype=float))

    @property
    def values(self):
        if self._values is None and self.grid is not None:
            self._values = self.evaluator(self.grid.points())
        return self._values

    @property
    def spline_coefficients(self):
        """Cubic B-spline coefficients of the grid cache (zero padded)."""
        if self._coeffs is None:
            self._coeffs = ndimage.spline_filter(self.values, order=3, mode="constant")
        return self._coeffs

    def interpolate(self, x, order=1):
        """Evaluate from the grid cache by trilinear (1) or cubic spline (3) interpolation."""
        x = np.asarray(x, dtype=float)
        idx = self.grid.to_index(x.reshape(-1, 3)).T
        if order == 3:
            out = ndimage.map_coordinates(self.spline_coefficients, idx, order=3,
                                          mode="constant", cval=0.0, prefilter=False)
        else:
            out = ndimage.map_coordinates(self.values, idx, order=order, mode="constant",
                                          cval=0.0)
        return out.reshape(x.shape[:-1])

    def is_zero(self):
        return self.values is not None and not np.any(self.values)

    def scaled(self, c):
        ev = self.evaluator
        vals = None if self._values is None else c * self._values
        return PotentialField(lambda x: c * ev(x), self.support_center, self.support_radius,
                              self.grid, vals, self.spec, self.normal_field)

    def __add__(self, other):
        e1, e2 = self.evaluator, other.evaluator
        c = self.support_center
        r = max(np.linalg.norm(c - other.support_center) + other.support_radius,
                self.support_radius)
        vals = None
        if self.grid is not None and other.grid is not None and self.grid == other.grid:
            vals = self.values + other.values
        return PotentialField(lambda x: e1(x) + e2(x), c, r, self.grid, vals)

    def __rmul__(self, c):
        return self.scaled(float(c))

    def translated(self, shift):
        shift = np.asarray(shift, dtype=float)
        ev = self.evaluator
        grid = None
        if self.grid is not None:
            grid = Grid(self.grid.origin + shift, self.grid.spacing, self.grid.dims)
        return PotentialField(lambda x: ev(x - shift), self.support_center + shift,
                              self.support_radius, grid, self._values, self.spec)

    def dump(self, stem):
        """Write ``stem.bin`` (float64, C order) and ``stem.json``."""
        stem = Path(stem)
        vals = np.ascontiguousarray(self.values, dtype="<f8")
        vals.tofile(Path(f"{stem}.bin"))
        meta = {"dims": list(self.grid.dims), "spacing": self.grid.spacing,
                "origin": self.grid.origin.tolist(), "dtype": "float64", "order": "C",
                "spec": self.spec.describe() if self.spec is not None else None,
                "support_center": self.support_center.tolist(),
                "support_radius": self.support_radius}
        Path(f"{stem}.json").write_text(json.dumps(meta, indent=2))
        return stem

    @classmethod
    def load(cls, stem):
        """Rebuild a field from a grid dump; evaluation uses trilinear interpolation."""
        stem = Path(stem)
        meta = json.loads(Path(f"{stem}.json").read_text())
        vals = np.fromfile(Path(f"{stem}.bin"), dtype="<f8").reshape(meta["dims"])
        grid = Grid(np.asarray(meta["origin"]), meta["spacing"], tuple(meta["dims"]))
        field_ = cls(None, meta["support_center"], meta["support_radius"], grid, vals)
        field_.evaluator = lambda x: field_.interpolate(x, order=1)
        field_.meta = meta
        return field_


def zero_field(radius=0.75, grid=None):
    return PotentialField(lambda x: np.zeros(np.shape(x)[:-1]), np.zeros(3), radius, grid)


def bump_field(center=(0.0, 0.0, 0.0), width=0.15, radius=0.6, grid=None, height=1.0):
    """Smooth Gaussian bump times the standard cutoff; a benign test potential."""
    amp = Amplitude(radius=radius, center=tuple(center))
    c = np.asarray(center, dtype=float)

    def ev(x):
        r2 = np.sum((x - c) ** 2, axis=-1)
        return height * np.exp(-0.5 * r2 / width ** 2) * amp(x)

    return PotentialField(ev, c, radius, grid)


class _NormalPlaneField:
    """Field sampled on a regular grid in the normal coordinates, with cubic
    spline evaluation. Coordinates outside the window evaluate to zero."""

    def __init__(self, values, du, half_width):
        self.values = values
        self.du = du
        self.half_width = half_width
        self.coeffs = ndimage.spline_filter(values, order=3, mode="nearest")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        k = self.values.ndim
        idx = ((u.reshape(-1, k) + self.half_width) / self.du).T
        out = ndimage.map_coordinates(self.coeffs, idx, order=3, mode="nearest",
                                      prefilter=False)
        return out.reshape(u.shape[:-1])


def symbol(theta, M1, M2, d1, mollify_scale, low_cut=0.0):
    """``<theta>^M1 <theta''>^M2 exp(-(m |theta|)^2 / 2)`` on stacked frequency vectors.

    A positive ``low_cut`` multiplies by ``1 - exp(-(|theta| / low_cut)^2)``.
    That factor differs from one by a Schwartz function, so the symbol class
    is unchanged; it removes the broad smooth body of the field.
    """
    theta = np.asarray(theta, dtype=float)
    mag = np.sqrt(np.sum(theta ** 2, axis=-1))
    out = japanese(mag) ** M1 * np.exp(-0.5 * (mollify_scale * mag) ** 2)
    if low_cut > 0:
        out = out * -np.expm1(-(mag / low_cut) ** 2)
    if theta.shape[-1] > d1:
        out = out * japanese(np.sqrt(np.sum(theta[..., d1:] ** 2, axis=-1))) ** M2
    return out


def fourier_normal_field(M1, M2, d1, k, mollify_scale, box_half_width=8.0, window=1.5,
                         low_cut=0.0):
    """Inverse FFT of the symbol on a periodic box in ``k`` normal coordinates.

    Returns the field cropped to ``[-window, window]^k`` together with the
    full-box samples (for checks against the symbol).
    """
    du = mollify_scale / 2.0
    N = int(2 ** np.ceil(np.log2(2 * box_half_width / du)))
    du = 2 * box_half_width / N
    th1 = 2 * np.pi * np.fft.fftfreq(N, du)
    mesh = np.stack(np.meshgrid(*([th1] * k), indexing="ij"), axis=-1)
    a = symbol(mesh, M1, M2, d1, mollify_scale, low_cut)
    full = np.fft.fftshift(np.fft.ifftn(a).real) / du ** k
    c = N // 2
    w = int(np.ceil(window / du))
    sl = tuple(slice(c - w, c + w + 1) for _ in range(k))
    return _NormalPlaneField(full[sl], du, w * du), (full, du)


def _model_profile(model, M1, m):
    if model == "delta":
        return lambda u: np.exp(-0.5 * (u / m) ** 2) / (np.sqrt(2 * np.pi) * m)
    if model == "heaviside":
        return lambda u: 0.5 * (1.0 + special.erf(u / (np.sqrt(2.0) * m)))
    return lambda u: (u * u + m * m) ** (-(1.0 + M1) / 2.0)


def synthesize(spec, grid=None):
    """Build the potential described by ``spec``.

    Parameters
    ----------
    spec : PotentialSpec
    grid : Grid, optional
        If given, the grid cache is filled and the band limit is checked
        against it.

    Raises
    ------
    OrderInadmissible
        If the orders leave the recovery window and enforcement is on.
    Unresolved
        If the mollification scale is below two grid cells.
    """
    pair = spec.pair
    if spec.enforce_admissibility and not spec.admissible():
        raise OrderInadmissible(f"(M1, M2) = ({spec.M1}, {spec.M2}) with d1={pair.d1}, "
                                f"d2={pair.d2}, n={pair.n}")
    if grid is not None and spec.mollify_scale < 2.0 * grid.spacing - 1e-12:
        raise Unresolved(f"mollify_scale {spec.mollify_scale} < 2 dx = {2 * grid.spacing}")
    amp = spec.amplitude
    k = pair.d1 + pair.d2
    normal = None
    if spec.profile == FOURIER_SYMBOL:
        # window covers every normal-coordinate value reached inside the support
        probe = amp.radius * np.random.default_rng(0).uniform(-1, 1, (4000, pair.n))
        probe = probe + np.asarray(amp.center)
        reach = float(np.max(np.abs(pair.values(probe, "S2")))) + 0.1
        normal, _ = fourier_normal_field(spec.M1, spec.M2, pair.d1, k, spec.mollify_scale,
                                         spec.box_half_width, window=reach,
                                         low_cut=spec.low_cut)
        prof = normal
        which = "S2"
    else:
        f = _model_profile(spec.model, spec.M1, spec.mollify_scale)
        prof = lambda u: f(u[..., 0])  # noqa: E731
        which = "S1"
    scale = spec.scale

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        a = amp(x)
        out = np.zeros(x.shape[:-1])
        live = a != 0.0
        if np.any(live):
            xl = x[live]
            out[live] = scale * prof(pair.values(xl, which)) * a[live]
        return out

    return PotentialField(evaluate, amp.center, amp.radius, grid, spec=spec,
                          normal_field=normal)


# ---------------------------------------------------------------------------
# order diagnostics


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float


def loglog_fit(x, y, max_residual=None):
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    A = np.column_stack([lx, np.ones_like(lx)])
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = float(np.sqrt(np.mean((A @ [slope, icpt] - ly) ** 2)))
    if max_residual is not None and res > max_residual:
        raise FitUnstable(f"log-log residual {res:.3f} > {max_residual}", slope=slope,
                          residual=res)
    return SlopeFit(float(slope), float(icpt), res)


def blowup_rate_estimate(field_, pair, which, transect_direction, scales, base_point=None,
                         max_residual=0.2):
    """Log-log slope of ``|q|`` against distance along a transect through the submanifold.

    Samples are taken on both sides at each distance and averaged, so a
    one-sided layer (a step) counts as bounded.
    """
    d = np.asarray(transect_direction, dtype=float)
    d = d / np.linalg.norm(d)
    if base_point is None:
        base_point = pair.project(np.zeros(pair.n), which)
    scales = np.asarray(scales, dtype=float)
    dist = []
    mag = []
    for s in scales:
        pts = np.array([base_point + s * d, base_point - s * d])
        vals = np.abs(field_(pts))
        dist.append(s)
        mag.append(np.mean(vals))
    mag = np.maximum(np.asarray(mag), 1e-300)
    return loglog_fit(dist, mag, max_residual)


@dataclass
class OrderEstimate:
    M1_est: float
    M2_est: float
    residual: float
    band: tuple


def normal_plane_slice(field_, pair, half_width, spacing, tangent_point=None):
    """Sample ``field_`` on a square grid in the normal coordinates of the pair.

    Only flat pairs are supported: normal coordinates are affine, taken from
    the gradients at the base point. The grid is centred on the base point.
    """
    base = pair.project(np.zeros(pair.n) if tangent_point is None else tangent_point, "S2")
    G = pair.gradients(base, "S2")
    k = G.shape[0]
    count = int(np.round(half_width / spacing))
    u = spacing * np.arange(-count, count + 1)
    mesh = np.stack(np.meshgrid(*([u] * k), indexing="ij"), axis=-1)
    pts = base + mesh @ np.linalg.pinv(G).T
    return field_(pts)


class _WindowedSpectrum:
    """Spectra of Gaussian-windowed normal-plane samples on a padded FFT grid."""

    def __init__(self, count, spacing, k, window_sigma, pad_to):
        self.k = k
        self.h = spacing
        self.count = count
        u = spacing * np.arange(-count, count + 1)
        mesh = np.stack(np.meshgrid(*([u] * k), indexing="ij"), axis=-1)
        self.window = np.exp(-0.5 * np.sum(mesh ** 2, axis=-1) / window_sigma ** 2)
        self.N = pad_to
        self.theta = 2 * np.pi * np.fft.fftfreq(pad_to, spacing)
        self.mesh = np.stack(np.meshgrid(*([self.theta] * k), indexing="ij"), axis=-1)
        # periodic indices of the slice points relative to the origin
        self.index = np.ix_(*([np.arange(-count, count + 1) % pad_to] * k))

    def of_samples(self, vals):
        return np.abs(np.fft.fftn(vals * self.window, s=(self.N,) * self.k,
                                   axes=tuple(range(self.k)))) * self.h ** self.k

    def of_symbol(self, a):
        # samples of the band-limited field with symbol ``a``, then windowed
        field_ = np.fft.ifftn(a).real / self.h ** self.k
        return self.of_samples(field_[self.index])

    def lines(self, F, sel):
        if self.k == 1:
            return [F[sel]]
        return [F[sel, 0], F[0, sel]]


def order_check_fourier(field_, pair, band=None, window_sigma=0.3, spacing=None,
                        max_residual=0.2, mollify_scale=None, low_cut=None):
    """Estimate ``(M1, M2)`` from the decay of the normal-plane Fourier transform.

    The field is sampled on a normal-plane slice through a point of S2 and
    multiplied by a Gaussian window. The decay model ``<theta>^M1
    <theta''>^M2`` (with the known Gaussian band limit) is pushed through the
    same window and sampling, and its exponents are fitted in log magnitude
    along the ``theta'`` axis (fixes ``M1``) and the ``theta''`` axis (fixes
    ``M1 + M2``). Modelling the window removes the blur bias a plain log-log
    slope would carry at moderate frequencies.

    Parameters
    ----------
    band : (float, float), optional
        Frequency range of the fit. Defaults to ``[4 / window_sigma, 1 / m]``.

    Raises
    ------
    BandLimited
        If the band reaches beyond ``1 / mollify_scale``.
    FitUnstable
        If the RMS log residual exceeds ``max_residual``.
    """
    from scipy.optimize import minimize

    m = mollify_scale if mollify_scale is not None else field_.spec.mollify_scale
    if low_cut is None:
        low_cut = getattr(getattr(field_, "spec", None), "low_cut", 0.0)
    if band is None:
        band = (4.0 / window_sigma, 1.0 / m)
    if band[1] > 1.0 / m + 1e-9:
        raise BandLimited(f"band {band} exceeds 1/m = {1.0 / m}")
    if band[1] <= band[0]:
        raise BandLimited(f"empty band {band}")
    h = spacing or min(m / 2.0, np.pi / (3.0 * band[1]))
    half = 4.0 * window_sigma
    count = int(np.round(half / h))
    k = pair.d1 + pair.d2
    pad_to = int(2 ** np.ceil(np.log2(4 * (2 * count + 1))))
    ws = _WindowedSpectrum(count, h, k, window_sigma, pad_to)
    vals = normal_plane_slice(field_, pair, count * h, h)
    F = ws.of_samples(vals)
    th = ws.theta
    sel = (th >= band[0]) & (th <= band[1])
    if np.count_nonzero(sel) < 4:
        raise BandLimited(f"band {band} holds fewer than 4 frequency samples")
    data = np.concatenate([np.log(np.maximum(line, 1e-300)) for line in ws.lines(F, sel)])

    def model(params):
        M1, M2 = params[0], (params[1] if k > 1 else 0.0)
        a = symbol(ws.mesh, M1, M2, pair.d1, m, low_cut)
        P = ws.of_symbol(a)
        return np.concatenate([np.log(np.maximum(line, 1e-300)) for line in ws.lines(P, sel)])

    def cost(params):
        r = data - model(params)
        r = r - r.mean()
        return float(np.mean(r * r))

    x0 = [-1.0, 0.0] if k > 1 else [-1.0]
    res = minimize(cost, x0, method="Nelder-Mead",
                   options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 400})
    resid = float(np.sqrt(res.fun))
    M1 = float(res.x[0])
    M2 = float(res.x[1]) if k > 1 else 0.0
    if resid > max_residual:
        raise FitUnstable(f"order fit residual {resid:.3f} > {max_residual}", M1=M1, M2=M2,
                          residual=resid)
    logger.debug("order fit M1=%.3f M2=%.3f residual=%.2e", M1, M2, resid)
    return OrderEstimate(M1, M2, resid, tuple(band))
