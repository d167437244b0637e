"""Utilities on the unit sphere: icosphere grids, tangent frames,
tangent-plane gradients and barycentric interpolation inside triangles."""

import logging
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def project_tangent(v, omega):
    """Return ``v - (v . omega) omega``, the pullback to the tangent plane at omega."""
    v = np.asarray(v, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return v - np.sum(v * omega, axis=-1, keepdims=True) * omega


def tangent_frame(omega):
    """Orthonormal vectors ``(e1, e2)`` completing ``omega`` to a right-handed frame.

    Works on stacked directions of shape ``(..., 3)``.
    """
    omega = normalize(omega)
    helper = np.zeros_like(omega)
    # pick the coordinate axis least aligned with omega
    idx = np.argmin(np.abs(omega), axis=-1)
    np.put_along_axis(helper, idx[..., None], 1.0, axis=-1)
    e1 = normalize(project_tangent(helper, omega))
    e2 = np.cross(omega, e1)
    return e1, e2


def rotation_about(axis, angle_deg):
    """3x3 rotation matrix about ``axis`` by ``angle_deg`` degrees."""
    return Rotation.from_rotvec(np.deg2rad(angle_deg) * normalize(axis)).as_matrix()


def _icosahedron():
    p = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v = normalize(v)
    # rotate vertex 5 onto +e3 so the poles are grid points
    rot, _ = Rotation.align_vectors([[0.0, 0.0, 1.0]], [v[5]])
    return rot.apply(v), f


@lru_cache(maxsize=8)
def _icosphere_cached(level):
    verts, faces = _icosahedron()
    verts = [tuple(x) for x in verts]
    for _ in range(level):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = normalize(np.add(verts[a], verts[b]))
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    return np.array(verts), np.asarray(faces)


class SphereGrid:
    """Icosphere vertices with triangle connectivity and lookup helpers.

    Parameters
    ----------
    level : int
        Subdivision level; level ``L`` has ``10 * 4**L + 2`` vertices.
        The grid is antipodally symmetric and contains both poles.
        Vertices of coarser levels come first, so ``points[:10 * 4**k + 2]``
        is the level-``k`` grid.
    rotation : (3, 3) array, optional
        Rigid rotation applied to every vertex.
    """

    def __init__(self, level=3, rotation=None):
        self.level = int(level)
        v, f = _icosphere_cached(self.level)
        self.rotation = None if rotation is None else np.asarray(rotation, dtype=float)
        self.points = v.copy() if rotation is None else v @ self.rotation.T
        self.faces = f.copy()
        self._tree = cKDTree(self.points)
        self._vertex_faces = [[] for _ in range(len(self.points))]
        for k, tri in enumerate(self.faces):
            for i in tri:
                self._vertex_faces[i].append(k)
        nb = [set() for _ in range(len(self.points))]
        for a, b, c in self.faces:
            nb[a].update((b, c))
            nb[b].update((a, c))
            nb[c].update((a, b))
        self.neighbors = [np.array(sorted(s)) for s in nb]

    def __len__(self):
        return len(self.points)

    @staticmethod
    def count_at(level):
        return 10 * 4 ** level + 2

    def coarse_indices(self, level):
        """Indices of the vertices forming the coarser ``level`` grid."""
        if level > self.level:
            raise ValueError("coarse level exceeds grid level")
        return np.arange(self.count_at(level))

    def describe(self):
        return {"level": self.level, "count": len(self),
                "rotation": None if self.rotation is None else self.rotation.tolist()}

    @property
    def spacing(self):
        """Mean angular distance between neighbouring vertices (radians)."""
        a, b = self.faces[:, 0], self.faces[:, 1]
        return float(np.mean(np.arccos(np.clip(np.sum(self.points[a] * self.points[b], -1), -1, 1))))

    def nearest(self, d):
        d = normalize(d)
        _, idx = self._tree.query(d)
        return idx

    def antipode_index(self):
        """Index of ``-omega`` for every vertex (exact on the icosphere)."""
        return self.nearest(-self.points)

    def ring(self, i, depth=1):
        """Vertex indices within ``depth`` edges of vertex ``i`` (excluding ``i``)."""
        seen = {i}
        frontier = {i}
        for _ in range(depth):
            nxt = set()
            for j in frontier:
                nxt.update(self.neighbors[j].tolist())
            nxt -= seen
            seen |= nxt
            frontier = nxt
        seen.discard(i)
        return np.array(sorted(seen))

    def locate(self, d, tol=1e-10):
        """Barycentric weights of direction ``d`` within its containing triangle.

        Returns ``(vertex_indices, weights)`` with weights summing to one.
        The weights are the coefficients of ``d`` in the basis of the three
        vertex vectors, rescaled to unit sum (gnomonic/planar barycentrics).
        """
        d = normalize(d)
        _, near = self._tree.query(d, k=3)
        candidates = []
        for v in near:
            candidates.extend(self._vertex_faces[v])
        best = None
        for k in dict.fromkeys(candidates):
            tri = self.faces[k]
            lam = np.linalg.solve(self.points[tri].T, d)
            worst = lam.min()
            if best is None or worst > best[0]:
                best = (worst, tri, lam)
            if worst >= -tol:
                break
        _, tri, lam = best
        lam = np.clip(lam, 0.0, None)
        return tri.copy(), lam / lam.sum()


def log_map(base, points):
    """Tangent vectors at ``base`` pointing to ``points`` with geodesic length."""
    base = normalize(base)
    points = normalize(points)
    c = np.clip(points @ base, -1.0, 1.0)
    ang = np.arccos(c)
    tang = project_tangent(points, base)
    nrm = np.linalg.norm(tang, axis=-1)
    scale = np.where(nrm > 1e-15, ang / np.maximum(nrm, 1e-300), 1.0)
    return tang * scale[:, None]


def tangent_gradient(base, points, values, base_value=None):
    """Least-squares gradient of a function on the sphere at ``base``.

    Fits ``f(p) = a + g . log_base(p)`` to the neighbour samples; the
    intercept absorbs the isotropic curvature term so the estimate is second
    order on symmetric stencils. The returned vector is tangent at ``base``.

    Parameters
    ----------
    base : (3,) array
    points : (k, 3) array
        Neighbour directions.
    values : (k,) array
    base_value : float, optional
        Value at ``base``; included in the fit when given.
    """
    base = normalize(base)
    e1, e2 = tangent_frame(base)
    v = log_map(base, points)
    coords = np.column_stack([v @ e1, v @ e2])
    vals = np.asarray(values, dtype=float)
    if base_value is not None:
        coords = np.vstack([[0.0, 0.0], coords])
        vals = np.concatenate([[base_value], vals])
    if len(vals) < 3:
        raise ValueError("need at least three samples for a tangent gradient")
    A = np.column_stack([np.ones(len(vals)), coords])
    sol, *_ = np.linalg.lstsq(A, vals, rcond=None)
    if np.linalg.matrix_rank(A, tol=1e-10) < 3:
        raise np.linalg.LinAlgError("degenerate stencil")
    return sol[1] * e1 + sol[2] * e2
