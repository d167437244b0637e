"""Phase-space geometry of nested submanifolds and the Lagrangians they generate.

Points of the cotangent bundle of ``R^n x R x S^{n-1}`` are stored with the
sphere covector ``Omega`` as an ambient vector orthogonal to ``omega``.
All Jacobians are central finite differences of explicit parametrizations;
ranks are counted from singular values relative to the largest one.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (DegenerateSample, GradientDegenerate, NotIntersecting,
                     RankDeficientParams, SigmaZero, TangentialRay, ZeroSection)
from .sphere import normalize, project_tangent

logger = logging.getLogger(__name__)

TANGENCY_TOL = 1e-3
SVD_TOL = 1e-8
FD_STEP = 1e-5
ON_MANIFOLD_TOL = 1e-10
ZERO_TOL = 1e-12


# ---------------------------------------------------------------------------
# nested pairs


@dataclass(frozen=True)
class NestedPair:
    """Defining functions of ``S2 c S1 c R^n``.

    Parameters
    ----------
    h : sequence of callables
        ``d1 + d2`` scalar functions, vectorized over the last axis of an
        ``(..., n)`` array. The first ``d1`` cut out S1, all of them cut out S2.
    grad : sequence of callables
        Matching gradients returning ``(..., n)`` arrays.
    d1, d2 : int
        Codimensions of S1 in ``R^n`` and of S2 in S1.
    domain_box : (n, 2) array
        Bounding box used for sampling.
    """

    h: Sequence[Callable]
    grad: Sequence[Callable]
    d1: int
    d2: int
    n: int = 3
    domain_box: np.ndarray = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.h) != self.d1 + self.d2 or len(self.grad) != len(self.h):
            raise ValueError("need d1 + d2 defining functions and gradients")
        if self.domain_box is None:
            object.__setattr__(self, "domain_box", np.tile([-1.0, 1.0], (self.n, 1)))

    def count(self, which):
        return self.d1 if which == "S1" else self.d1 + self.d2

    def codim(self, which):
        return self.count(which)

    def values(self, x, which="S2"):
        x = np.asarray(x, dtype=float)
        return np.stack([f(x) for f in self.h[:self.count(which)]], axis=-1)

    def gradients(self, x, which="S2"):
        """Gradient matrix of shape ``(..., k, n)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([g(x) for g in self.grad[:self.count(which)]], axis=-2)

    def on_manifold(self, x, which, tol=ON_MANIFOLD_TOL):
        return bool(np.all(np.abs(self.values(x, which)) <= tol))

    def project(self, x, which, tol=1e-14, maxiter=60):
        """Newton projection of ``x`` onto the submanifold along the normal space."""
        x = np.array(x, dtype=float)
        for _ in range(maxiter):
            hv = self.values(x, which)
            if np.max(np.abs(hv)) <= tol:
                break
            G = self.gradients(x, which)
            x = x - G.T @ np.linalg.solve(G @ G.T, hv)
        return x

    def tangent_basis(self, y, which):
        """Orthonormal basis (columns) of the tangent space at ``y``."""
        G = self.gradients(y, which)
        _, _, vt = np.linalg.svd(G)
        return vt[G.shape[0]:].T

    def sample(self, which, count, rng=None, max_tries=50):
        """Random points on the submanifold inside ``domain_box``."""
        rng = np.random.default_rng(rng)
        lo, hi = self.domain_box[:, 0], self.domain_box[:, 1]
        out = []
        for _ in range(max_tries):
            cand = lo + (hi - lo) * rng.random((count, self.n))
            for c in cand:
                p = self.project(c, which)
                if self.on_manifold(p, which, 1e-12) and np.all(p >= lo) and np.all(p <= hi):
                    out.append(p)
            if len(out) >= count:
                break
        return np.array(out[:count])

    def check_invariants(self, count=50, rng=0):
        """Verify independence of gradients and the nesting ``S2 c S1`` on samples."""
        pts = self.sample("S2", count, rng)
        for p in pts:
            if np.any(np.abs(self.values(p, "S1")) >= 1e-10):
                raise ValueError("sampled S2 point does not lie on S1")
            conormal_fiber(self, p, "S2")
        for p in self.sample("S1", count, rng):
            conormal_fiber(self, p, "S1")
        return True

    # named primitives -----------------------------------------------------

    @classmethod
    def plane(cls, normal=(0.0, 0.0, 1.0), offset=0.0, half_width=1.0):
        """Single hyperplane ``{x . normal = offset}`` (d2 = 0)."""
        nrm = normalize(normal)
        n = len(nrm)
        return cls(h=(lambda x: x @ nrm - offset,),
                   grad=(lambda x: np.broadcast_to(nrm, np.shape(x)).copy(),),
                   d1=1, d2=0, n=n, domain_box=np.tile([-half_width, half_width], (n, 1)),
                   name="plane", params={"normal": nrm.tolist(), "offset": float(offset)})

    @classmethod
    def plane_line(cls, n=3, height=0.0, line_offset=0.0, half_width=1.0):
        """Model pair ``S1 = {x_n = height}``, ``S2 = S1 n {x_{n-1} = line_offset}``."""
        en = np.eye(n)[n - 1]
        em = np.eye(n)[n - 2]
        return cls(h=(lambda x: x[..., n - 1] - height, lambda x: x[..., n - 2] - line_offset),
                   grad=(lambda x: np.broadcast_to(en, np.shape(x)).copy(),
                         lambda x: np.broadcast_to(em, np.shape(x)).copy()),
                   d1=1, d2=1, n=n, domain_box=np.tile([-half_width, half_width], (n, 1)),
                   name="plane_line",
                   params={"height": float(height), "line_offset": float(line_offset)})

    @classmethod
    def sphere(cls, radius=0.5, center=(0.0, 0.0, 0.0)):
        """Round sphere ``{|x - center| = radius}`` (d2 = 0)."""
        c = np.asarray(center, dtype=float)
        n = len(c)

        def h(x):
            return np.linalg.norm(x - c, axis=-1) - radius

        def g(x):
            return normalize(x - c)

        box = np.column_stack([c - 1.2 * radius, c + 1.2 * radius])
        return cls(h=(h,), grad=(g,), d1=1, d2=0, n=n, domain_box=box, name="sphere",
                   params={"radius": float(radius), "center": c.tolist()})

    @classmethod
    def sphere_equator(cls, radius=0.5, center=(0.0, 0.0, 0.0)):
        """Sphere with the equatorial circle ``{x_3 = center_3}`` as S2."""
        base = cls.sphere(radius, center)
        c = np.asarray(center, dtype=float)
        e3 = np.eye(len(c))[-1]
        return replace(base, h=(base.h[0], lambda x: x[..., -1] - c[-1]),
                       grad=(base.grad[0], lambda x: np.broadcast_to(e3, np.shape(x)).copy()),
                       d2=1, name="sphere_equator")


def conormal_fiber(pair, y, which="S1", tol=ON_MANIFOLD_TOL):
    """Orthonormal basis (rows) of the conormal fiber at ``y``.

    The basis is the Gram-Schmidt orthonormalization of the defining-function
    gradients taken in order, so a single unit gradient is returned as is.

    Raises
    ------
    GradientDegenerate
        If the normalized gradients are numerically dependent.
    """
    y = np.asarray(y, dtype=float)
    if not pair.on_manifold(y, which, tol):
        raise ValueError(f"point {y} is not on {which}")
    G = pair.gradients(y, which)
    norms = np.linalg.norm(G, axis=1)
    if np.any(norms < ZERO_TOL):
        raise GradientDegenerate("vanishing gradient")
    sv = np.linalg.svd(G / norms[:, None], compute_uv=False)
    if sv[-1] < SVD_TOL:
        raise GradientDegenerate(f"smallest singular value {sv[-1]:.2e}")
    q, r = np.linalg.qr(G.T)
    q = q * np.sign(np.diag(r))
    return q.T


def sigma_of(nu, omega, tol=TANGENCY_TOL):
    """Fiber variable on the characteristic set, ``|nu|^2 / (2 nu . omega)``."""
    nu = np.asarray(nu, dtype=float)
    omega = normalize(omega)
    nn = np.linalg.norm(nu)
    if nn < ZERO_TOL:
        raise ZeroSection("conormal covector vanishes")
    if abs(nu @ omega) / nn <= tol:
        raise TangentialRay(f"|nu.omega|/|nu| = {abs(nu @ omega) / nn:.2e}")
    return float(nn ** 2 / (2.0 * (nu @ omega)))


def is_tangential_ray(pair, y, which, omega, tol=TANGENCY_TOL, mode="any"):
    """Whether ``omega`` is a tangential ray for the conormal fiber at ``y``.

    ``mode="any"`` tests the minimum of ``|nu . omega|`` over the unit fiber
    (always zero once the fiber has dimension two or more); ``mode="all"``
    tests the maximum, i.e. whether no fiber direction is usable at all.
    """
    B = conormal_fiber(pair, y, which)
    b = B @ normalize(omega)
    if mode == "all":
        return bool(np.linalg.norm(b) <= tol)
    if len(b) > 1:
        return True
    return bool(abs(b[0]) <= tol)


# ---------------------------------------------------------------------------
# phase points and charts


SPACETIME, REFLECTED, BACKSCATTER = "spacetime", "reflected", "backscatter"


@dataclass(frozen=True)
class PhasePoint:
    """A cotangent vector over ``R^n x R x S^{n-1}`` or one of its data spaces.

    Slot usage by ``space``:

    - ``spacetime``: ``(x, t, omega; xi, tau, Omega)``.
    - ``reflected``: ``x`` holds the outgoing direction ``phi``, ``t`` holds
      ``s`` and ``xi`` holds the covector ``Phi`` at ``phi``.
    - ``backscatter``: ``t`` holds ``s``, ``omega`` holds ``phi``; ``x`` and
      ``xi`` are zero and unused.
    """

    x: np.ndarray
    t: float
    omega: np.ndarray
    xi: np.ndarray
    tau: float
    Omega: np.ndarray
    space: str = SPACETIME

    def __post_init__(self):
        if abs(np.linalg.norm(self.omega) - 1.0) > 1e-12:
            raise ValueError("omega must be a unit vector")
        if abs(self.Omega @ self.omega) > 1e-12 * max(1.0, np.linalg.norm(self.Omega)):
            raise ValueError("Omega must be orthogonal to omega")
        if self.cotangent_norm() < ZERO_TOL:
            raise ZeroSection("cotangent part vanishes")

    @property
    def s(self):
        return self.t

    @property
    def phi(self):
        return self.omega if self.space == BACKSCATTER else self.x

    def cotangent_norm(self):
        return float(np.sqrt(self.xi @ self.xi + self.tau ** 2 + self.Omega @ self.Omega))

    def base_vector(self):
        if self.space == BACKSCATTER:
            return np.concatenate([[self.t], self.omega])
        return np.concatenate([self.x, [self.t], self.omega])

    def cotangent_vector(self):
        if self.space == BACKSCATTER:
            return np.concatenate([[self.tau], self.Omega])
        return np.concatenate([self.xi, [self.tau], self.Omega])

    def as_vector(self):
        return np.concatenate([self.base_vector(), self.cotangent_vector()])


CHART_KINDS = ("PLUS", "ONE_PLUS", "TWO_PLUS", "FLOWOUT_A", "FLOWOUT_C",
               "REFLECTED_A", "REFLECTED_C", "BACKSCATTER_A", "BACKSCATTER_C")


@dataclass(frozen=True)
class LagrangianChart:
    """One parametrized Lagrangian piece.

    Parameters
    ----------
    kind : str
        One of ``CHART_KINDS``. Suffix ``_A`` uses S1, ``_C`` uses S2;
        ``ONE_PLUS`` and ``TWO_PLUS`` likewise.
    pair : NestedPair
    y : point on the submanifold (or any point of ``R^n`` for ``PLUS``).
    nu : conormal covector at ``y``.
    omega : incident direction.
    r : flow parameter (flowouts only).
    sigma : fiber variable for ``PLUS``/``ONE_PLUS``/``TWO_PLUS``; derived
        from ``nu`` and ``omega`` for the other kinds.
    flow_time : {"hamiltonian", "unit"}
        Time advance along a flowout. ``"hamiltonian"`` follows the flow of
        the wave symbol, ``t = y . omega + r sigma``, which makes the piece
        Lagrangian with base projection of rank ``2n - 1``. ``"unit"`` uses
        ``t = y . omega + r``.
    """

    kind: str
    pair: NestedPair
    y: np.ndarray
    nu: np.ndarray = None
    omega: np.ndarray = None
    r: float = 0.0
    sigma: float = None
    tol: float = TANGENCY_TOL
    flow_time: str = "hamiltonian"

    def __post_init__(self):
        if self.kind not in CHART_KINDS:
            raise ValueError(f"unknown chart kind {self.kind!r}")

    @property
    def which(self):
        if self.kind == "PLUS":
            return None
        if self.kind == "ONE_PLUS" or self.kind.endswith("_A"):
            return "S1"
        return "S2"

    @property
    def family(self):
        return self.kind.split("_")[0]

    def lagrangian_dim(self):
        n = self.pair.n
        if self.family == "REFLECTED":
            return 2 * n - 1
        if self.family == "BACKSCATTER":
            return n
        return 2 * n

    def with_params(self, **kw):
        return replace(self, **kw)


def _check_chart(chart):
    if chart.kind == "PLUS":
        return
    nu = np.asarray(chart.nu, dtype=float)
    if np.linalg.norm(nu) < ZERO_TOL:
        raise ZeroSection("conormal covector vanishes")


def chart_point(chart):
    """Evaluate the parametrization of ``chart`` at its parameters."""
    _check_chart(chart)
    kind = chart.kind
    y = np.asarray(chart.y, dtype=float)
    n = chart.pair.n
    if chart.family == "BACKSCATTER":
        nu = np.asarray(chart.nu, dtype=float)
        nn = np.linalg.norm(nu)
        nh = nu / nn
        return PhasePoint(np.zeros(n), float(-2.0 * y @ nh), nh, np.zeros(n), float(nn),
                          nn * project_tangent(y, nh), space=BACKSCATTER)
    omega = normalize(chart.omega)
    if kind == "PLUS":
        sig = float(chart.sigma)
        return PhasePoint(y.copy(), float(y @ omega), omega, -sig * omega, sig,
                          -sig * project_tangent(y, omega))
    nu = np.asarray(chart.nu, dtype=float)
    if kind in ("ONE_PLUS", "TWO_PLUS"):
        sig = float(chart.sigma)
        return PhasePoint(y.copy(), float(y @ omega), omega, nu - sig * omega, sig,
                          -sig * project_tangent(y, omega))
    sig = sigma_of(nu, omega, chart.tol)
    xi = nu - sig * omega
    if chart.family == "FLOWOUT":
        r = float(chart.r)
        dt = r * sig if chart.flow_time == "hamiltonian" else r
        return PhasePoint(y - r * xi, float(y @ omega + dt), omega, xi, sig,
                          -sig * project_tangent(y, omega))
    # reflected: outgoing direction phi = -xi / sigma is a unit vector on char
    phi = -xi / sig
    phi = phi / np.linalg.norm(phi)
    s = float(-y @ (xi / sig + omega))
    Phi = -sig * project_tangent(y, phi)
    Omega = sig * project_tangent(y, omega)
    return PhasePoint(phi, s, omega, Phi, sig, Omega, space=REFLECTED)


# -- local parametrizations used by the finite-difference Jacobians --------


@dataclass
class _LocalParam:
    """Maps a flat parameter vector to a phase vector near a chart point."""

    chart: LagrangianChart
    fiber_which: str = None     # fiber built from gradients of this set
    base_which: str = None      # submanifold carrying y
    vary_omega: bool = True
    vary_r: bool = False
    vary_sigma: bool = False
    project_base: bool = False

    def __post_init__(self):
        ch = self.chart
        pair = ch.pair
        self.y0 = np.asarray(ch.y, dtype=float)
        if self.base_which is None:
            self.T = np.eye(pair.n)
        else:
            self.T = pair.tangent_basis(self.y0, self.base_which)
        if self.fiber_which is not None:
            G = pair.gradients(self.y0, self.fiber_which)
            self.theta0, *_ = np.linalg.lstsq(G.T, np.asarray(ch.nu, dtype=float), rcond=None)
        else:
            self.theta0 = np.zeros(0)
        if ch.omega is not None:
            self.omega0 = normalize(ch.omega)
            _, _, vt = np.linalg.svd(self.omega0[None, :])
            self.E = vt[1:].T
        sizes = [self.T.shape[1], len(self.theta0),
                 (pair.n - 1) if self.vary_omega else 0,
                 1 if self.vary_r else 0, 1 if self.vary_sigma else 0]
        self.sizes = sizes
        self.p0 = np.zeros(sum(sizes))
        off = sizes[0]
        self.p0[off:off + sizes[1]] = self.theta0
        if self.vary_r:
            self.p0[sum(sizes[:3])] = ch.r
        if self.vary_sigma:
            self.p0[sum(sizes[:4])] = ch.sigma

    def unpack(self, p):
        pair = self.chart.pair
        i = np.cumsum([0] + self.sizes)
        u, th, w = p[i[0]:i[1]], p[i[1]:i[2]], p[i[2]:i[3]]
        y = self.y0 + self.T @ u
        if self.base_which is not None:
            y = pair.project(y, self.base_which)
        kw = {"y": y}
        if self.fiber_which is not None:
            kw["nu"] = pair.gradients(y, self.fiber_which).T @ th
        if self.vary_omega:
            kw["omega"] = normalize(self.omega0 + self.E @ w)
        if self.vary_r:
            kw["r"] = float(p[i[3]])
        if self.vary_sigma:
            kw["sigma"] = float(p[i[4]])
        return kw

    def __call__(self, p):
        pt = chart_point(self.chart.with_params(**self.unpack(p)))
        return pt.base_vector() if self.project_base else pt.as_vector()


def _local_param(chart, project_base=False):
    fam, which = chart.family, chart.which
    if chart.kind == "PLUS":
        return _LocalParam(chart, vary_sigma=True, project_base=project_base)
    if fam in ("ONE", "TWO"):
        return _LocalParam(chart, fiber_which=which, base_which=which, vary_sigma=True,
                           project_base=project_base)
    if fam == "FLOWOUT":
        return _LocalParam(chart, fiber_which=which, base_which=which, vary_r=True,
                           project_base=project_base)
    if fam == "REFLECTED":
        return _LocalParam(chart, fiber_which=which, base_which=which,
                           project_base=project_base)
    return _LocalParam(chart, fiber_which=which, base_which=which, vary_omega=False,
                       project_base=project_base)


def fd_jacobian(f, p0, step=FD_STEP):
    """Central-difference Jacobian of ``f`` at ``p0`` (columns = parameters)."""
    p0 = np.asarray(p0, dtype=float)
    cols = []
    for k in range(len(p0)):
        h = step * max(1.0, abs(p0[k]))
        dp = np.zeros_like(p0)
        dp[k] = h
        cols.append((f(p0 + dp) - f(p0 - dp)) / (2.0 * h))
    return np.column_stack(cols)


def symplectic_matrix(chart):
    """Canonical symplectic form in the ambient coordinates of ``as_vector``.

    Base and fiber blocks pair slot by slot, which is the canonical form
    ``d xi ^ dx + d tau ^ dt + d Omega ^ d omega`` (and its analogues on the
    reflected and backscatter spaces) written in ambient coordinates.
    """
    m = len(chart_point(chart).base_vector())
    W = np.zeros((2 * m, 2 * m))
    W[m:, :m] = np.eye(m)
    W[:m, m:] = -np.eye(m)
    return W


def isotropy_defect(chart, fd_step=FD_STEP):
    """Largest value of the symplectic form on pairs of chart tangent vectors,
    relative to the product of their norms; zero for a Lagrangian chart."""
    J = chart_jacobian(chart, False, fd_step)
    J = J / np.linalg.norm(J, axis=0, keepdims=True)
    return float(np.max(np.abs(J.T @ symplectic_matrix(chart) @ J)))


def numerical_rank(J, svd_tol=SVD_TOL):
    sv = np.linalg.svd(J, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > svd_tol * sv[0]))


def chart_jacobian(chart, projection=False, fd_step=FD_STEP):
    lp = _local_param(chart, projection)
    return fd_jacobian(lp, lp.p0, fd_step)


def chart_jacobian_rank(chart, projection=False, fd_step=FD_STEP, svd_tol=SVD_TOL):
    """Rank of the parametrization (or of its projection to the base).

    Raises
    ------
    RankDeficientParams
        If the full chart is not immersive at the parameters, or a flowout's
        base projection drops below ``2n - 1`` (caustic/focal parameters).
    """
    rank = numerical_rank(chart_jacobian(chart, projection, fd_step), svd_tol)
    if not projection and rank < chart.lagrangian_dim():
        raise RankDeficientParams(f"chart rank {rank} < {chart.lagrangian_dim()}", rank=rank)
    if projection and chart.family == "FLOWOUT" and rank < 2 * chart.pair.n - 1:
        raise RankDeficientParams(f"projection rank {rank} < {2 * chart.pair.n - 1}", rank=rank)
    return rank


# ---------------------------------------------------------------------------
# clean intersections


@dataclass
class IntersectionCertificate:
    kind: str
    params: dict
    rank: int
    rank_a: int
    rank_b: int
    rank_intersection: int
    codim: tuple
    clean: bool
    residuals: dict

    def as_record(self):
        return {"kind": self.kind, "params": self.params, "rank": self.rank,
                "codim": list(self.codim), "clean": self.clean, "residuals": self.residuals}


def _intersection_param(chart_b):
    """Parametrization of the intersection: y on S2, fiber restricted to N*(S1)."""
    fam = chart_b.family
    return _LocalParam(chart_b.with_params(), fiber_which="S1", base_which="S2",
                       vary_omega=fam != "BACKSCATTER", vary_r=fam == "FLOWOUT")


def clean_intersection_certificate(chart_a, chart_b, shared_params=None, fd_step=FD_STEP,
                                   svd_tol=SVD_TOL, match_tol=1e-8):
    """Certify that the S1 and S2 pieces of one family intersect cleanly.

    ``chart_a`` must be an ``_A`` kind and ``chart_b`` the matching ``_C``
    kind at the same parameters (optionally overridden by ``shared_params``
    with keys ``y, nu, omega, r``). The concatenated Jacobian rank is
    compared to ``dim L + d2`` and the codimension of the intersection in
    each chart to ``d2``.
    """
    if shared_params:
        chart_a = chart_a.with_params(**shared_params)
        chart_b = chart_b.with_params(**shared_params)
    if chart_a.family != chart_b.family or chart_a.which != "S1" or chart_b.which != "S2":
        raise ValueError("need an (_A, _C) pair of the same family")
    pa, pb = chart_point(chart_a).as_vector(), chart_point(chart_b).as_vector()
    mismatch = float(np.max(np.abs(pa - pb)))
    if mismatch > match_tol:
        raise NotIntersecting(f"chart points differ by {mismatch:.2e}")
    la, lb = _local_param(chart_a), _local_param(chart_b)
    Ja = fd_jacobian(la, la.p0, fd_step)
    Jb = fd_jacobian(lb, lb.p0, fd_step)
    li = _intersection_param(chart_b)
    Ji = fd_jacobian(li, li.p0, fd_step)
    ra, rb, ri = (numerical_rank(J, svd_tol) for J in (Ja, Jb, Ji))
    rsum = numerical_rank(np.hstack([Ja, Jb]), svd_tol)
    d2 = chart_a.pair.d2
    codim = (ra - ri, rb - ri)
    tangent_overlap = ra + rb - rsum
    clean = bool(rsum >= chart_a.lagrangian_dim() + d2 and codim == (d2, d2)
                 and tangent_overlap == ri)
    params = {"y": np.asarray(chart_a.y).tolist(), "nu": np.asarray(chart_a.nu).tolist(),
              "omega": None if chart_a.omega is None else np.asarray(chart_a.omega).tolist(),
              "r": float(chart_a.r)}
    return IntersectionCertificate(kind=f"{chart_a.kind}/{chart_b.kind}", params=params,
                                   rank=rsum, rank_a=ra, rank_b=rb, rank_intersection=ri,
                                   codim=codim, clean=clean,
                                   residuals={"point_mismatch": mismatch,
                                              "tangent_overlap": tangent_overlap})


def random_intersection_charts(pair, family, count, rng=None, tol=TANGENCY_TOL):
    """Random matching ``(_A, _C)`` chart pairs on S2 with fibers in N*(S1)."""
    rng = np.random.default_rng(rng)
    out = []
    while len(out) < count:
        y = pair.sample("S2", 1, rng)[0]
        G = pair.gradients(y, "S1")
        nu = G.T @ (rng.normal(size=pair.d1) + 0.5 * np.sign(rng.normal(size=pair.d1)))
        omega = normalize(rng.normal(size=pair.n))
        if abs(normalize(nu) @ omega) < 0.1:
            continue
        r = float(rng.uniform(0.3, 2.0) * rng.choice([-1, 1]))
        a = LagrangianChart(f"{family}_A", pair, y, nu, omega, r, tol=tol)
        c = LagrangianChart(f"{family}_C", pair, y, nu, omega, r, tol=tol)
        out.append((a, c))
    return out


# ---------------------------------------------------------------------------
# the codimension-two set generated by S2's flowout meeting S1


@dataclass
class IntersectionSample:
    point: np.ndarray          # (x, t, omega) in R^{2n+1}
    theta: np.ndarray
    r: float
    sv_min: float
    transversal: bool
    dist_s2: float
    dist_s1plus: float


def _model_axes(pair):
    n = pair.n
    probe = np.random.default_rng(7).normal(size=(5, n))
    G = pair.gradients(probe, "S2")
    en, em = np.eye(n)[n - 1], np.eye(n)[n - 2]
    ok = (np.allclose(G[:, 0], en) and np.allclose(G[:, 1], em)
          and np.allclose(pair.values(np.zeros(n), "S2"), 0.0))
    if not ok or pair.d1 != 1 or pair.d2 != 1:
        raise ValueError("expected the flat model S1={x_n=0}, S2={x_n=x_(n-1)=0}")


def _s2c_point(n, yy, theta, omega, r):
    """Base point of S2's flowout in the model: ``(x, t, omega)``."""
    th1, th2 = theta
    den = 2.0 * (th1 * omega[n - 2] + th2 * omega[n - 1])
    tau = (th1 ** 2 + th2 ** 2) / den
    nu = np.zeros(n)
    nu[n - 2], nu[n - 1] = th1, th2
    y = np.zeros(n)
    y[:n - 2] = yy
    x = y - r * (nu - tau * omega)
    t = yy @ omega[:n - 2] + r * tau
    return np.concatenate([x, [t], omega])


def prop71_intersection(pair, samples=None, count=50, rng=None, svd_tol=SVD_TOL,
                        tol=TANGENCY_TOL, fd_step=FD_STEP, strict=True):
    """Sample the set where S2's flowout meets S1 and certify transversality.

    Each sample is ``(theta1, theta2, omega, r, y'')``. The flowout point lies
    in ``{x_n = 0}`` exactly when ``theta2 = tau * omega_n``; the ratio
    ``theta1 / theta2`` solving this is one of two roots and the root nearest
    the drawn ratio is used, keeping the drawn ``theta2`` as the scale.

    Returns
    -------
    list of IntersectionSample
        With ``strict=False`` degenerate draws are skipped instead of raising.
    """
    _model_axes(pair)
    n = pair.n
    rng = np.random.default_rng(rng)
    if samples is None:
        samples = []
        for _ in range(count):
            samples.append((rng.normal(), rng.normal(), normalize(rng.normal(size=n)),
                            float(rng.uniform(0.2, 2.0)), rng.uniform(-0.5, 0.5, n - 2)))
    out = []
    for th1, th2, omega, r, yy in samples:
        try:
            out.append(_prop71_one(n, float(th1), float(th2), normalize(omega), float(r),
                                   np.atleast_1d(np.asarray(yy, dtype=float)),
                                   svd_tol, tol, fd_step))
        except DegenerateSample:
            if strict:
                raise
    return out


def _prop71_one(n, th1, th2, omega, r, yy, svd_tol, tol, fd_step):
    if abs(th2) < 1e-8:
        raise DegenerateSample("theta2 vanishes")
    if abs(r) < 1e-8:
        raise DegenerateSample("r vanishes")
    a, b = omega[n - 2], omega[n - 1]
    if abs(b) < tol:
        raise DegenerateSample("omega_n vanishes; the flowout ray is tangential")
    # theta1/theta2 = lam solves b lam^2 - 2 a lam - b = 0 ... written for lam = th1/th2:
    # th2^2 b + 2 th1 th2 a - th1^2 b = 0  ->  b lam^2 - 2 a lam - b = 0
    disc = np.sqrt(a * a + b * b)
    roots = np.array([(a + disc) / b, (a - disc) / b])
    lam = roots[np.argmin(np.abs(roots - th1 / th2))]
    theta = np.array([lam * th2, th2])
    nu = np.zeros(n)
    nu[n - 2:] = theta
    if abs(normalize(nu) @ omega) <= tol:
        raise DegenerateSample("tangential ray")
    pt = _s2c_point(n, yy, theta, omega, r)
    if abs(pt[n - 1]) > 1e-10:
        raise DegenerateSample("point left the hyperplane")

    # tangent space of the flowout: vary y'', theta, omega (locally), r
    _, _, vt = np.linalg.svd(omega[None, :])
    E = vt[1:].T

    def f(p):
        k = n - 2
        om = normalize(omega + E @ p[k + 2:k + 2 + n - 1])
        return _s2c_point(n, yy + p[:k], theta + p[k:k + 2], om, r + p[-1])

    p0 = np.zeros(n - 2 + 2 + n - 1 + 1)
    J = fd_jacobian(f, p0, fd_step)
    # express in the ambient tangent basis: R^{n+1} x T_omega S^{n-1}
    to_tan = np.zeros((2 * n, 2 * n + 1))
    to_tan[:n + 1, :n + 1] = np.eye(n + 1)
    to_tan[n + 1:, n + 1:] = E.T
    Jt = to_tan @ J
    u, sv, _ = np.linalg.svd(Jt)
    q2 = u[:, :int(np.sum(sv > svd_tol * sv[0]))]
    # S1 = {x_n = 0}: all tangent directions except dx_n
    q1 = np.delete(np.eye(2 * n), n - 1, axis=1)
    svals = np.linalg.svd(np.hstack([q1, q2]), compute_uv=False)
    sv_min = float(svals[2 * n - 1]) if len(svals) >= 2 * n else 0.0
    x, t = pt[:n], pt[n]
    return IntersectionSample(point=pt, theta=theta, r=r, sv_min=sv_min,
                              transversal=sv_min > svd_tol,
                              dist_s2=float(np.hypot(x[n - 2], x[n - 1])),
                              dist_s1plus=float(abs(t - x @ omega)))


# ---------------------------------------------------------------------------
# multiphase by characteristics


@dataclass
class MultiphaseResult:
    phi: np.ndarray
    grad_x: np.ndarray
    dphi_dt: np.ndarray
    dphi_ds: np.ndarray
    method: str
    foot: np.ndarray = None


def _phase0(pair, which, x, t, omega, theta, sigma):
    H = pair.values(x, which)
    return np.sum(H * theta, axis=-1) + (t - np.sum(x * omega, axis=-1)) * sigma


def _xi_at(pair, which, x, omega, theta, sigma):
    G = pair.gradients(x, which)          # (..., k, n)
    return np.einsum("...kn,...k->...n", G, theta) - sigma[..., None] * omega


def hamiltonian_p(xi, tau):
    """Symbol ``|xi|^2 / tau - tau`` whose zero set is the characteristic variety."""
    return np.sum(xi * xi, axis=-1) / tau - tau


def _broadcast_inputs(pair, which, x, t, omega, theta, sigma, s):
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], np.shape(t), np.shape(sigma), np.shape(s),
                                np.shape(omega)[:-1], np.shape(theta)[:-1] if np.ndim(theta) else ())
    n, k = pair.n, pair.count(which)
    x = np.broadcast_to(x, shape + (n,))
    omega = np.broadcast_to(normalize(omega), shape + (n,))
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = np.full(k, float(theta))
    theta = np.broadcast_to(theta, shape + (k,))
    t = np.broadcast_to(np.asarray(t, dtype=float), shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), shape)
    s = np.broadcast_to(np.asarray(s, dtype=float), shape)
    if np.any(np.abs(sigma) < 1e-12):
        raise SigmaZero("sigma must be nonzero")
    return x, t, omega, theta, sigma, s


def multiphase_closed_form(pair, which, x, t, omega, theta, sigma, s, tol=1e-14, maxiter=200):
    """Closed-form phase: transport the initial phase from the foot point.

    The foot point solves ``x_o = x + 2 s xi(x_o) / sigma`` with
    ``xi(x_o) = dH(x_o)^T theta - sigma omega``; for affine ``H`` one
    substitution is exact, otherwise the fixed point is iterated.
    """
    x, t, omega, theta, sigma, s = _broadcast_inputs(pair, which, x, t, omega, theta, sigma, s)
    xo = x.copy()
    for _ in range(maxiter):
        xi = _xi_at(pair, which, xo, omega, theta, sigma)
        new = x + 2.0 * (s / sigma)[..., None] * xi
        step = np.max(np.abs(new - xo)) if new.size else 0.0
        xo = new
        if step <= tol * max(1.0, np.max(np.abs(xo))):
            break
    xi = _xi_at(pair, which, xo, omega, theta, sigma)
    to = t - (np.sum(xi * xi, axis=-1) / sigma ** 2 + 1.0) * s
    phi = _phase0(pair, which, xo, to, omega, theta, sigma)
    return MultiphaseResult(phi=phi, grad_x=xi, dphi_dt=sigma.copy(),
                            dphi_ds=hamiltonian_p(xi, sigma), method="CLOSED_FORM", foot=xo)


def _rk4_characteristics(pair, which, xo, to, omega, theta, sigma, s, steps):
    """Integrate the characteristic system from ``s=0`` to ``s`` (fixed-step RK4).

    State is ``(x, t, xi, phi)``; ``xi`` and ``tau = sigma`` are constants of
    motion because the symbol does not depend on ``(x, t)``.
    """
    xi0 = _xi_at(pair, which, xo, omega, theta, sigma)
    phi0 = _phase0(pair, which, xo, to, omega, theta, sigma)
    state = np.concatenate([xo, to[..., None], xi0, phi0[..., None]], axis=-1)
    n = pair.n
    h = (s / steps)[..., None]
    sig = sigma[..., None]

    def rhs(z):
        xi = z[..., n + 1:2 * n + 1]
        q = np.sum(xi * xi, axis=-1, keepdims=True)
        dx = -2.0 * xi / sig
        dt = q / sig ** 2 + 1.0
        # d(phi)/ds = xi.dx + tau dt + p
        dphi = np.sum(xi * dx, axis=-1, keepdims=True) + sig * dt + (q / sig - sig)
        return np.concatenate([dx, dt, np.zeros_like(xi), dphi], axis=-1)

    for _ in range(steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * h * k1)
        k3 = rhs(state + 0.5 * h * k2)
        k4 = rhs(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return state


def multiphase_ode(pair, which, x, t, omega, theta, sigma, s, integrator_steps=128,
                   tol=1e-13, maxiter=50, fd_step=1e-7):
    """Phase by shooting along characteristics with Newton on the foot point."""
    x, t, omega, theta, sigma, s = _broadcast_inputs(pair, which, x, t, omega, theta, sigma, s)
    n = pair.n
    xo = x.copy()
    t0 = np.zeros_like(t)

    def endpoint(foot):
        return _rk4_characteristics(pair, which, foot, t0, omega, theta, sigma, s,
                                    integrator_steps)

    for _ in range(maxiter):
        res = endpoint(xo)[..., :n] - x
        if np.max(np.abs(res)) <= tol * max(1.0, np.max(np.abs(x))):
            break
        J = np.empty(x.shape + (n,))
        for k in range(n):
            d = np.zeros(n)
            d[k] = fd_step
            J[..., :, k] = (endpoint(xo + d)[..., :n] - endpoint(xo - d)[..., :n]) / (2 * fd_step)
        xo = xo - np.linalg.solve(J, res[..., None])[..., 0]
    end = endpoint(xo)
    # the foot time follows from the integrated time shift
    to = t - end[..., n]
    state = _rk4_characteristics(pair, which, xo, to, omega, theta, sigma, s, integrator_steps)
    xi = state[..., n + 1:2 * n + 1]
    phi = state[..., -1]
    return MultiphaseResult(phi=phi, grad_x=xi, dphi_dt=sigma.copy(),
                            dphi_ds=hamiltonian_p(xi, sigma), method="CHARACTERISTIC_ODE",
                            foot=xo)


@dataclass
class MultiphaseComparison:
    ode: MultiphaseResult
    closed: MultiphaseResult

    @property
    def rel_discrepancy(self):
        return float(np.max(np.abs(self.ode.phi - self.closed.phi)
                            / np.maximum(1.0, np.abs(self.closed.phi))))


def multiphase_solve(pair, which, x, t, omega, theta, sigma, s, integrator_steps=128):
    """Evaluate the multiphase by characteristics and by closed form.

    The phase solves ``d phi/ds = p(d_x phi, d_t phi)`` with
    ``phi(s=0) = H(x) . theta + (t - x . omega) sigma``; inputs broadcast.
    """
    return MultiphaseComparison(
        ode=multiphase_ode(pair, which, x, t, omega, theta, sigma, s, integrator_steps),
        closed=multiphase_closed_form(pair, which, x, t, omega, theta, sigma, s))


def hj_residual(pair, which, x, t, omega, theta, sigma, s, step=1e-5):
    """``|d phi/ds - p(d_x phi, d_t phi)|`` by central differences of the closed form."""
    x = np.asarray(x, dtype=float)
    n = pair.n

    def phi(xx, tt, ss):
        return multiphase_closed_form(pair, which, xx, tt, omega, theta, sigma, ss).phi

    gx = []
    for k in range(n):
        d = np.zeros(n)
        d[k] = step
        gx.append((phi(x + d, t, s) - phi(x - d, t, s)) / (2 * step))
    gx = np.stack(gx, axis=-1)
    gt = (phi(x, np.add(t, step), s) - phi(x, np.subtract(t, step), s)) / (2 * step)
    gs = (phi(x, t, np.add(s, step)) - phi(x, t, np.subtract(s, step))) / (2 * step)
    return np.abs(gs - hamiltonian_p(gx, gt))
