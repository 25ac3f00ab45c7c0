"""Degree computations that decide d-nontriviality of sampled ball maps, d <= 3.

A ball is a uniform grid over a box. Its boundary is measured in a mixed norm:
the first `round_dims` coordinates jointly in the Euclidean norm, the rest in
the max norm, all after scaling by the per-axis radii. This covers both plain
cubes and the products W~u(x, beta) x D^k used by certified disks.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

BOUNDARY_TOL = 1e-9


class OriginOnLoop(ValueError):
    pass


class DegenerateTriangle(ValueError):
    pass


class BoundaryEscape(ValueError):
    pass


class DomainMismatch(ValueError):
    pass


class DimensionTooHigh(ValueError):
    pass


@dataclass
class BallGrid:
    dim: int
    n: int = 33
    center: np.ndarray = None
    radii: np.ndarray = None
    round_dims: int = 0
    _points: np.ndarray = field(default=None, init=False, repr=False, compare=False)
    _bmask: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.center = np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)
        r = np.ones(self.dim) if self.radii is None else np.asarray(self.radii, dtype=float)
        self.radii = np.broadcast_to(r, (self.dim,)).astype(float)

    @property
    def axes(self):
        return [c + r * np.linspace(-1, 1, self.n) for c, r in zip(self.center, self.radii)]

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def points(self):
        if self._points is None:
            if self.dim == 0:
                self._points = np.zeros((1, 0))
            else:
                mesh = np.meshgrid(*self.axes, indexing="ij")
                self._points = np.stack([g.ravel() for g in mesh], axis=-1)
                self._points.flags.writeable = False
        return self._points

    def unit(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.radii

    def norm(self, x):
        """Mixed norm of points after scaling to the unit ball (1 on the boundary)."""
        u = self.unit(x)
        j = self.round_dims
        parts = []
        if j:
            parts.append(np.linalg.norm(u[..., :j], axis=-1))
        if self.dim > j:
            parts.append(np.max(np.abs(u[..., j:]), axis=-1))
        if not parts:
            return np.zeros(u.shape[:-1])
        return np.maximum.reduce(parts)

    @property
    def boundary_mask(self):
        # domain grids are parameter cubes: boundary means some index at an end
        if self._bmask is None:
            if self.dim == 0:
                self._bmask = np.zeros(1, dtype=bool)
            else:
                idx = np.indices(self.shape).reshape(self.dim, -1)
                self._bmask = np.any((idx == 0) | (idx == self.n - 1), axis=0)
        return self._bmask

    def same_as(self, other):
        return (self.dim == other.dim and self.round_dims == other.round_dims
                and np.allclose(self.center, other.center) and np.allclose(self.radii, other.radii))

    def boundary_loop(self):
        """Indices of the square's boundary in counterclockwise order, closed."""
        if self.dim != 2:
            raise ValueError("loop only defined for 2-dimensional grids")
        n = self.n
        ring = ([(i, 0) for i in range(n - 1)] + [(n - 1, j) for j in range(n - 1)]
                + [(i, n - 1) for i in range(n - 1, 0, -1)] + [(0, j) for j in range(n - 1, 0, -1)])
        ring.append(ring[0])
        return np.array([i * n + j for i, j in ring])

    def boundary_mesh(self):
        """Outward-oriented triangulation of the cube's boundary (a 2-sphere)."""
        if self.dim != 3:
            raise ValueError("mesh only defined for 3-dimensional grids")
        n = self.n
        lin = lambda i, j, k: (i * n + j) * n + k
        tris = []
        for axis in range(3):
            for end in (0, n - 1):
                a, b = [x for x in range(3) if x != axis]
                for p in range(n - 1):
                    for q in range(n - 1):
                        quad = []
                        for dp, dq in ((0, 0), (1, 0), (1, 1), (0, 1)):
                            idx = [0, 0, 0]
                            idx[axis], idx[a], idx[b] = end, p + dp, q + dq
                            quad.append(lin(*idx))
                        tris += [(quad[0], quad[1], quad[2]), (quad[0], quad[2], quad[3])]
        verts = self.unit(self.points)
        tris = np.array(tris)
        a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
        # flip triangles whose normal points into the cube
        inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
        tris[inward] = tris[inward][:, ::-1]
        return SphereMesh(verts, tris)


@dataclass
class SampledMap:
    domain: BallGrid
    codomain: BallGrid
    values: np.ndarray  # (domain samples, codomain.dim)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        count = len(self.domain.points)
        if vals.size != count * self.codomain.dim or (vals.ndim == 2 and len(vals) != count):
            raise DomainMismatch("one value per domain sample is required")
        self.values = vals.reshape(count, self.codomain.dim)

    @property
    def d(self):
        return self.domain.dim

    @classmethod
    def from_function(cls, fn, domain, codomain=None):
        codomain = codomain or BallGrid(domain.dim, domain.n)
        return cls(domain, codomain, fn(domain.points))


@dataclass
class SphereMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    meta: dict = field(default_factory=dict)

    def edges(self):
        e = {}
        for t in self.triangles:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                e[(a, b)] = e.get((a, b), 0) + 1
        return e

    def is_closed_oriented(self):
        e = self.edges()
        return all(c == 1 and e.get((b, a), 0) == 1 for (a, b), c in e.items())

    def euler_characteristic(self):
        used = np.unique(self.triangles)
        return len(used) - len(self.edges()) // 2 + len(self.triangles)

    def refine(self, project=True):
        """Split every triangle into four through edge midpoints."""
        verts = list(map(tuple, self.vertices))
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = 0.5 * (np.array(verts[a]) + np.array(verts[b]))
                if project:
                    p = p / np.linalg.norm(p)
                cache[key] = len(verts)
                verts.append(tuple(p))
            return cache[key]

        tris = []
        for a, b, c in self.triangles:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        return SphereMesh(np.array(verts), np.array(tris), dict(self.meta))


def icosphere(level=2):
    """Octahedron subdivided `level` times and projected to the unit sphere."""
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    t = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    mesh = SphereMesh(v, t)
    for _ in range(level):
        mesh = mesh.refine()
    return mesh


def winding_number(loop, origin=(0.0, 0.0)):
    p = np.asarray(loop, dtype=float) - np.asarray(origin, dtype=float)
    if np.any(np.linalg.norm(p, axis=-1) <= 1e-12):
        raise OriginOnLoop("loop passes through the origin")
    if not np.allclose(p[0], p[-1]):
        p = np.vstack([p, p[:1]])
    a, b = p[:-1], p[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.einsum("ij,ij->i", a, b)
    return int(round(math.fsum(np.arctan2(cross, dot)) / (2 * math.pi)))


def _origin_on_triangle(a, b, c):
    # distance from 0 to each triangle, vectorized (closest-point test)
    ab, ac = b - a, c - a
    nrm = np.cross(ab, ac)
    area2 = np.einsum("ij,ij->i", nrm, nrm)
    hits = np.zeros(len(a), dtype=bool)
    flat = np.abs(np.einsum("ij,ij->i", a, nrm)) <= 1e-12 * np.sqrt(np.maximum(area2, 1e-300))
    for i in np.flatnonzero(flat):
        if area2[i] <= 1e-300:
            # collapsed triangle: on it only if origin coincides with a vertex/segment
            pts = np.array([a[i], b[i], c[i]])
            hits[i] = np.min(np.linalg.norm(pts, axis=-1)) <= 1e-12
            continue
        # barycentric coordinates of the origin's projection
        v0, v1, v2 = ab[i], ac[i], -a[i]
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        s = (d11 * d20 - d01 * d21) / den
        t = (d00 * d21 - d01 * d20) / den
        hits[i] = s >= -1e-12 and t >= -1e-12 and s + t <= 1 + 1e-12
    return hits


def sphere_degree(mesh, image, origin=(0.0, 0.0, 0.0)):
    """Degree of a map S^2 -> R^3 minus origin, from the total signed solid angle."""
    img = np.asarray(image, dtype=float) - np.asarray(origin, dtype=float)
    a, b, c = img[mesh.triangles[:, 0]], img[mesh.triangles[:, 1]], img[mesh.triangles[:, 2]]
    if np.any(_origin_on_triangle(a, b, c)):
        raise DegenerateTriangle("an image triangle passes through the origin")
    la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
           + np.einsum("ij,ij->i", a, c) * lb + np.einsum("ij,ij->i", b, c) * la)
    omega = 2 * np.arctan2(num, den)
    return int(round(math.fsum(omega) / (4 * math.pi)))


def boundary_degree(h):
    """Degree of h restricted to the boundary sphere, about the codomain center.

    Raises BoundaryEscape when a boundary sample does not land on the
    codomain boundary.
    """
    d = h.d
    if d == 0:
        return 1
    if h.codomain.dim != d:
        raise DomainMismatch("domain and codomain dimensions differ")
    bmask = h.domain.boundary_mask
    nb = h.codomain.norm(h.values[bmask])
    if np.any(np.abs(nb - 1.0) > BOUNDARY_TOL):
        worst = float(np.max(np.abs(nb - 1.0)))
        raise BoundaryEscape(f"boundary image off the codomain boundary by {worst:.3g}")
    u = h.codomain.unit(h.values)
    if d == 1:
        lo, hi = u[0, 0], u[-1, 0]
        return int((np.sign(hi) - np.sign(lo)) // 2)
    if d == 2:
        return winding_number(u[h.domain.boundary_loop()])
    if d == 3:
        mesh = h.domain.boundary_mesh()
        return sphere_degree(mesh, u)
    raise DimensionTooHigh(f"degree for d={d} not supported")


def is_d_nontrivial(h):
    return boundary_degree(h) != 0


def _interpolator(g):
    grid = tuple(g.domain.axes)
    vals = g.values.reshape(g.domain.shape + (g.codomain.dim,))
    return RegularGridInterpolator(grid, vals, method="linear", bounds_error=False, fill_value=None)


def compose(h, g):
    """Sampled g o h, evaluating g by multilinear interpolation at h's values."""
    if not h.codomain.same_as(g.domain):
        raise DomainMismatch("h's codomain is not g's domain")
    if g.domain.dim == 0:
        return SampledMap(h.domain, g.codomain, np.repeat(g.values, len(h.values), axis=0))
    vals = _interpolator(g)(h.values)
    return SampledMap(h.domain, g.codomain, vals)


def product(h, g):
    d = h.domain.dim + g.domain.dim
    if d > 3:
        raise DimensionTooHigh(f"product dimension {d} exceeds 3")
    if h.domain.n != g.domain.n and h.domain.dim and g.domain.dim:
        raise DomainMismatch("product grids need matching resolution")
    if g.codomain.round_dims and g.codomain.dim > 1:
        raise DomainMismatch("second factor must have a cube codomain")
    n = h.domain.n if h.domain.dim else g.domain.n
    dom = BallGrid(d, n, np.concatenate([h.domain.center, g.domain.center]),
                   np.concatenate([h.domain.radii, g.domain.radii]))
    cod = BallGrid(h.codomain.dim + g.codomain.dim, n,
                   np.concatenate([h.codomain.center, g.codomain.center]),
                   np.concatenate([h.codomain.radii, g.codomain.radii]), h.codomain.round_dims)
    hv = np.repeat(h.values, len(g.values), axis=0)
    gv = np.tile(g.values, (len(h.values), 1))
    return SampledMap(dom, cod, np.hstack([hv, gv]))


def surjectivity_check(h, epsilon):
    """Every point of an epsilon-net of the codomain lies within epsilon of an image sample."""
    cod = h.codomain
    steps = [max(2, int(math.ceil(2 * r / epsilon)) + 1) for r in cod.radii]
    axes = [c + r * np.linspace(-1, 1, s) for c, r, s in zip(cod.center, cod.radii, steps)]
    net = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    net = net[cod.norm(net) <= 1 + 1e-12]
    dist, _ = cKDTree(h.values).query(net)
    return bool(np.all(dist <= epsilon))
