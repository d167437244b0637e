"""First (and experimental second) Born terms for a plane-wave pulse in R^3.

The incident field is a unit pulse ``psi_eps(t - x.omega)`` and

    u1(x, t) = -(1/4 pi) int q(y) psi_eps(t - y.omega - |x - y|) / |x - y| dy.

The fast path uses paraboloidal coordinates about the receiver. With
``z = x - y`` put ``eta = |z| - z.omega`` (arrival variable) and
``xi = |z| + z.omega``; then ``dy / |z| = (1/2) d xi d eta d phi`` and

    u1(x, t) = -(1/8 pi) int psi(T - eta) G(eta) d eta,   T = t - x.omega,

where ``G(eta)`` integrates ``q`` over the paraboloid of constant ``eta``
(parametrized by the transverse radius ``p = sqrt(xi eta)``, weight
``2 p / eta``). ``G`` is computed once per trace and reused for all times.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import Polynomial

from .errors import QuadratureUnderresolved, ReceiverInsideSupport, VolumeGridMissing
from .sphere import tangent_frame

logger = logging.getLogger(__name__)

# pulse support is [-SUPPORT_WIDTHS * eps, SUPPORT_WIDTHS * eps]
SUPPORT_WIDTHS = 3.0
BUMP_POWER = 4
CHUNK = 400_000


@dataclass(frozen=True)
class SourcePulse:
    """Unit-mass polynomial bump ``c (1 - (z / 3 eps)^2)^4`` on ``[-3 eps, 3 eps]``.

    ``derivative_order`` derivatives are applied (``-1`` gives the smoothed
    step, the antiderivative vanishing on the left).
    """

    epsilon: float
    derivative_order: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.derivative_order < -1:
            raise ValueError("derivative_order must be >= -1")

    @property
    def half_support(self):
        return SUPPORT_WIDTHS * self.epsilon

    @cached_property
    def _base(self):
        a = self.half_support
        core = Polynomial([1.0, 0.0, -1.0 / a ** 2]) ** BUMP_POWER
        integ = core.integ()
        mass = integ(a) - integ(-a)
        return core / mass

    @cached_property
    def polynomial(self):
        p = self._base
        if self.derivative_order > 0:
            return p.deriv(self.derivative_order)
        if self.derivative_order == -1:
            return p.integ(lbnd=-self.half_support)
        return p

    def derivative(self, k=1):
        return SourcePulse(self.epsilon, self.derivative_order + k)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        a = self.half_support
        out = self.polynomial(np.clip(z, -a, a))
        inside = np.abs(z) <= a
        if self.derivative_order == -1:
            return np.where(inside, out, np.where(z > a, 1.0, 0.0))
        return np.where(inside, out, 0.0)

    def spectrum(self, k):
        """Fourier transform ``int psi(z) exp(-i k z) dz`` of the base bump (by quadrature)."""
        z, w = np.polynomial.legendre.leggauss(64)
        z = z * self.half_support
        w = w * self.half_support
        vals = self._base(z)
        k = np.atleast_1d(np.asarray(k, dtype=float))
        return (np.exp(-1j * np.outer(k, z)) @ (w * vals)).reshape(k.shape)

    def describe(self):
        return {"shape": "polynomial_bump", "power": BUMP_POWER, "epsilon": self.epsilon,
                "half_support": self.half_support, "derivative_order": self.derivative_order}


@dataclass
class WaveTrace:
    receiver: np.ndarray
    direction: np.ndarray
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def arrival_bound(self, support_center, support_radius):
        """Earliest possible arrival: ``min over the support of y.omega + |x - y|``."""
        c = np.asarray(support_center, dtype=float)
        return float(c @ self.direction + np.linalg.norm(self.receiver - c)
                     - 2.0 * support_radius)

    def to_csv(self, path):
        np.savetxt(path, np.column_stack([self.times, self.values]), delimiter=",",
                   header="t,value", comments="", fmt="%.17g")


def _check_inputs(q, omega, receiver, times, pulse, allow_inside=False):
    omega = np.asarray(omega, dtype=float)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-9:
        raise ValueError("omega must be a unit vector")
    x = np.asarray(receiver, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    gap = np.linalg.norm(x - q.support_center) - q.support_radius
    if not allow_inside and gap < 2.0 * pulse.epsilon:
        raise ReceiverInsideSupport(f"receiver is {gap:.3g} from the support, "
                                    f"need >= {2 * pulse.epsilon:.3g}", gap=gap)
    return omega, x, times


def _resolution(q):
    if q.grid is not None:
        return q.grid.spacing
    spec = getattr(q, "spec", None)
    if spec is not None:
        return spec.mollify_scale / 2.0
    return q.support_radius / 32.0


def _p_interval(eta, a, b, rho, count=1024):
    """Enclosing ``p`` interval of the paraboloid ``eta`` inside the ball.

    ``a``, ``b`` are the axial and transverse coordinates of the ball centre
    relative to the receiver. Returns ``(lo, hi)`` arrays (``hi < lo`` if
    the paraboloid misses the ball).
    """
    # loose bounds first, then refine on a sample grid
    lo = np.maximum(b - rho, 0.0)
    hi = b + rho
    # the axial coordinate w = (p^2/eta - eta)/2 must lie in [a - rho, a + rho]
    lo = np.maximum(lo, np.sqrt(np.maximum(eta * (eta + 2 * (a - rho)), 0.0)))
    hi = np.minimum(hi, np.sqrt(np.maximum(eta * (eta + 2 * (a + rho)), 0.0)))
    t = np.linspace(0.0, 1.0, count)
    p = lo[:, None] + (hi - lo)[:, None] * t[None, :]
    w = 0.5 * (p * p / eta[:, None] - eta[:, None])
    f = (a - w) ** 2 + (b - p) ** 2 <= rho ** 2
    has = f.any(axis=1) & (hi > lo)
    i0 = np.where(has, np.argmax(f, axis=1), 0)
    i1 = np.where(has, count - 1 - np.argmax(f[:, ::-1], axis=1), 0)
    step = (hi - lo) / (count - 1)
    new_lo = np.maximum(lo + (i0 - 1) * step, lo)
    new_hi = np.minimum(lo + (i1 + 1) * step, hi)
    return np.where(has, new_lo, 1.0), np.where(has, new_hi, 0.0)


def shell_profile(q, omega, receiver, eta, spacing=None, evaluate=None):
    """Paraboloid integrals ``G(eta)`` of ``q`` about ``receiver``.

    Parameters
    ----------
    eta : ndarray
        Arrival-variable samples (positive).
    spacing : float, optional
        Target physical node spacing on each paraboloid (defaults to the
        potential's grid spacing).
    evaluate : callable, optional
        Point evaluator; defaults to ``q``.
    """
    ev = evaluate or q
    h = spacing or _resolution(q)
    x = np.asarray(receiver, dtype=float)
    omega = np.asarray(omega, dtype=float)
    rho = q.support_radius
    d = x - q.support_center
    a = d @ omega  # axial coordinate of the ball centre, z = x - y
    perp = d - a * omega
    b = np.linalg.norm(perp)
    e1 = perp / b if b > 1e-12 else tangent_frame(omega)[0]
    e2 = np.cross(omega, e1)
    eta = np.asarray(eta, dtype=float)
    out = np.zeros_like(eta)
    ok = eta > 0
    if not np.any(ok):
        return out
    et = eta[ok]
    lo, hi = _p_interval(et, a, b, rho)
    live = hi > lo
    if not np.any(live):
        return out
    et, lo, hi = et[live], lo[live], hi[live]
    # meridian arclength sets the p count, arc length at the rim sets the phi count
    pm = 0.5 * (lo + hi)
    arclen = (hi - lo) * np.sqrt(1.0 + (np.maximum(hi, pm) / et) ** 2)
    n_p = int(np.clip(np.ceil(arclen.max() / h), 8, 4096))
    tp = (np.arange(n_p) + 0.5) / n_p
    P = lo[:, None] + (hi - lo)[:, None] * tp[None, :]
    dP = ((hi - lo) / n_p)[:, None]
    W = 0.5 * (P * P / et[:, None] - et[:, None])
    if b > 1e-12:
        c = ((a - W) ** 2 + b * b + P * P - rho * rho) / (2 * b * P)
        half = np.arccos(np.clip(c, -1.0, 1.0))
    else:
        half = np.where((a - W) ** 2 + P * P <= rho * rho, np.pi, 0.0)
    n_phi = int(np.clip(np.ceil(np.max(2 * half * P) / h), 8, 4096))
    tf = (np.arange(n_phi) + 0.5) / n_phi * 2.0 - 1.0
    weight = (2.0 * P / et[:, None]) * dP * (2.0 * half / n_phi)
    G = np.zeros(et.size)
    rows_per_chunk = max(1, CHUNK // (n_p * n_phi))
    for s in range(0, et.size, rows_per_chunk):
        sl = slice(s, s + rows_per_chunk)
        phi = half[sl, :, None] * tf[None, None, :]
        Pz = P[sl, :, None]
        z = (W[sl, :, None, None] * omega
             + Pz[..., None] * (np.cos(phi)[..., None] * e1 + np.sin(phi)[..., None] * e2))
        vals = ev(x - z)
        G[sl] = np.sum(vals.sum(axis=-1) * weight[sl], axis=-1)
    full = np.zeros(np.count_nonzero(ok))
    full[live] = G
    out[ok] = full
    logger.debug("shell profile: %d eta x %d p x %d phi", et.size, n_p, n_phi)
    return out


def _fibonacci_sphere(count):
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - z * z)
    ang = np.pi * (1.0 + 5 ** 0.5) * i
    return np.column_stack([r * np.cos(ang), r * np.sin(ang), z])


def eta_range(q, omega, receiver, count=4000):
    """Range of the arrival variable ``|x - y| - (x - y).omega`` over the support ball.

    The function is convex in ``y`` with its minimum (zero) on the ray
    ``x - s omega``; otherwise extremes lie on the boundary sphere, which is
    sampled densely and padded.
    """
    x = np.asarray(receiver, dtype=float)
    c, rho = q.support_center, q.support_radius
    y = c + rho * _fibonacci_sphere(count)
    z = x - y
    eta = np.linalg.norm(z, axis=1) - z @ omega
    lo, hi = eta.min(), eta.max()
    d = x - c
    if np.linalg.norm(d - (d @ omega) * omega) <= rho and d @ omega > -rho:
        lo = 0.0
    pad = 0.02 * (hi - lo) + 1e-12
    return max(lo - pad, 0.0), hi + pad


def born_u1(q, omega, receiver, times, pulse, quadrature="shell", spacing=None,
            allow_inside=False):
    """Born term ``u1`` at one receiver by shell quadrature.

    Parameters
    ----------
    q : PotentialField
    omega : array_like
        Unit incident direction.
    receiver : array_like
    times : array_like
        Strictly increasing sample times.
    pulse : SourcePulse
    quadrature : {"shell", "oracle"}
    spacing : float, optional
        Physical node spacing on the paraboloids (default: grid spacing).

    Notes
    -----
    The arrival variable is sampled uniformly in ``v = sqrt(eta)``: near the
    forward axis the transverse radius of the paraboloids grows like
    ``sqrt(eta)``, far from it ``eta`` is nearly affine in ``v``.

    Raises
    ------
    ReceiverInsideSupport
        If the receiver is within ``2 eps`` of the support ball.
    QuadratureUnderresolved
        If the active shell is thinner than two grid cells.
    """
    if quadrature == "oracle":
        return born_u1_oracle(q, omega, receiver, times, pulse)
    omega, x, times = _check_inputs(q, omega, receiver, times, pulse, allow_inside)
    h = spacing or _resolution(q)
    # the shell {|t - y.omega - |x-y|| <= 3 eps} is at least 3 eps thick
    if q.grid is not None and pulse.half_support < 2.0 * q.grid.spacing:
        raise QuadratureUnderresolved(
            f"shell thickness {pulse.half_support:.3g} < 2 dx = {2 * q.grid.spacing:.3g}")
    T = times - x @ omega
    lo, hi = eta_range(q, omega, x)
    a = pulse.half_support
    lo = max(lo, T[0] - a)
    hi = min(hi, T[-1] + a)
    values = np.zeros_like(times)
    meta = {"pulse": pulse.describe(), "quadrature": "shell"}
    if hi > lo:
        v_lo, v_hi = np.sqrt(lo), np.sqrt(hi)
        reach = np.linalg.norm(x - q.support_center) + q.support_radius
        dv = min(pulse.epsilon / (8.0 * v_hi), h / (2.0 * np.sqrt(2.0 * reach)))
        n = int(np.ceil((v_hi - v_lo) / dv))
        dv = (v_hi - v_lo) / n
        v = v_lo + (np.arange(n) + 0.5) * dv
        eta = v * v
        G = shell_profile(q, omega, x, eta, spacing=h)
        values = -(1.0 / (8 * np.pi)) * (pulse(T[:, None] - eta[None, :]) @ (G * 2 * v)) * dv
        meta.update(n_eta=n)
    return WaveTrace(x, omega, times, values, meta)


def born_u1_oracle(q, omega, receiver, times, pulse, chunk=2 ** 18):
    """Dense midpoint sum over every grid node of ``q`` (reference solution)."""
    omega, x, times = _check_inputs(q, omega, receiver, times, pulse)
    if q.grid is None:
        raise VolumeGridMissing("oracle needs the potential's grid cache")
    pts = q.grid.points().reshape(-1, 3)
    vals = q.values.reshape(-1)
    nz = vals != 0.0
    pts, vals = pts[nz], vals[nz]
    out = np.zeros_like(times)
    for s in range(0, pts.size, chunk):
        y = pts[s:s + chunk]
        r = np.linalg.norm(x - y, axis=1)
        path = y @ omega + r
        w = vals[s:s + chunk] / r
        for i, t in enumerate(times):
            out[i] += np.sum(w * pulse(t - path))
    out *= -q.grid.cell_volume / (4 * np.pi)
    return WaveTrace(x, omega, times, out, {"pulse": pulse.describe(), "quadrature": "oracle"})


# ---------------------------------------------------------------------------
# second Born term (experimental)


@dataclass
class VolumeField:
    """Samples of ``u1`` at ``points`` (N, 3) and ``times`` (T,), values (N, T)."""

    points: np.ndarray
    times: np.ndarray
    values: np.ndarray
    cell_volume: float
    omega: np.ndarray


def u1_volume(q, omega, pulse, stride=2, times=None, spacing=None):
    """``u1`` on every ``stride``-th node of ``q``'s grid where ``q`` is non-zero."""
    if q.grid is None:
        raise VolumeGridMissing("volume sampling needs the potential's grid cache")
    omega = np.asarray(omega, dtype=float)
    sl = (slice(None, None, stride),) * 3
    pts = q.grid.points()[sl].reshape(-1, 3)
    qv = q.values[sl].reshape(-1)
    pts = pts[qv != 0.0]
    rho = q.support_radius
    c = q.support_center @ omega
    if times is None:
        dt = pulse.epsilon / 4.0
        times = np.arange(c - rho - pulse.half_support, c + 3 * rho + 2 * pulse.half_support, dt)
    vals = np.array([born_u1(q, omega, y, times, pulse, allow_inside=True,
                             spacing=spacing).values for y in pts])
    return VolumeField(pts, times, vals.reshape(len(pts), len(times)),
                       (q.grid.spacing * stride) ** 3, omega)


def born_u2(q, omega, receivers, times, pulse, volume=None):
    """Second Born term ``u2 = -box^{-1}(q u1)`` by nested retarded quadrature.

    Experimental: ``u1`` is taken from a coarse ``volume`` and linearly
    interpolated in time.

    Raises
    ------
    VolumeGridMissing
        If ``volume`` is not supplied.
    """
    if volume is None:
        raise VolumeGridMissing("born_u2 needs u1 sampled on a volume grid (see u1_volume)")
    receivers = np.atleast_2d(np.asarray(receivers, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    qy = q(volume.points)
    out = np.zeros((len(receivers), len(times)))
    for k, x in enumerate(receivers):
        r = np.linalg.norm(x - volume.points, axis=1)
        r = np.maximum(r, 1e-12)
        for i, t in enumerate(times):
            tau = t - r
            u = np.array([np.interp(tau[j], volume.times, volume.values[j], left=0.0,
                                    right=0.0) for j in range(len(r))])
            out[k, i] = -np.sum(qy * u / r) * volume.cell_volume / (4 * np.pi)
    traces = [WaveTrace(x, np.asarray(omega, float), times, out[k],
                        {"experimental": True, "term": "u2"}) for k, x in enumerate(receivers)]
    return traces
