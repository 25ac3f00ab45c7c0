"""Homological transversality checks and perturbation probes for intersecting disks."""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .homology_degree import BallGrid, icosphere, sphere_degree, winding_number
from .hyperbolic_local import split

SLAB_TOL = 1e-9
MAX_HALVINGS = 20


class SlabHit(ValueError):
    pass


class UnsupportedCodimension(ValueError):
    pass


class NoSeparation(ValueError):
    pass


class SignViolation(ValueError):
    pass


@dataclass
class TransversalityQuery:
    """Two disks meeting at p, seen through a chart that flattens the first.

    chart maps points (n, m) to (n, m); the first disk goes to the first
    `iota` coordinates with the rest zero. h2 maps parameters in [-1, 1]^kappa
    to points, and h2(center) = p.
    """
    chart: Callable
    h2: Callable
    iota: int
    kappa: int
    m: int
    center: np.ndarray = None
    h1_samples: np.ndarray = None

    def __post_init__(self):
        self.center = np.zeros(self.kappa) if self.center is None else np.asarray(self.center, dtype=float)

    def normal(self, params):
        return self.chart(self.h2(np.atleast_2d(params)))[:, self.iota:]


@dataclass
class TResult:
    kind: str  # "nontrivial", "trivial" or "iota_full"
    degree: int = 0
    radius: float = 0.0
    directions: np.ndarray = None

    @property
    def satisfied(self):
        return self.kind in ("nontrivial", "iota_full")


def _ball_directions(q, radius):
    """Orthonormal (m - iota) directions in h2's parameter space spanning B_u."""
    c = q.m - q.iota
    if q.kappa == c:
        return np.eye(c)
    # largest singular directions of the normal part of h2 at the center
    h = 1e-3 * radius
    jac = np.stack([(q.normal(q.center + h * e) - q.normal(q.center - h * e))[0] / (2 * h)
                    for e in np.eye(q.kappa)], axis=-1)
    _, _, vt = np.linalg.svd(jac)
    return vt[:c]


def t_condition_check(q, ball_radius):
    if q.iota == q.m:
        return TResult("iota_full", 1, ball_radius)
    c = q.m - q.iota
    if c not in (1, 2, 3):
        raise UnsupportedCodimension(f"codimension {c}")
    if q.kappa < c:
        return TResult("trivial", 0, ball_radius)
    dirs = _ball_directions(q, ball_radius)
    if c == 1:
        sphere = np.array([[-1.0], [1.0]])
    elif c == 2:
        t = np.linspace(0, 2 * np.pi, 257)
        sphere = np.stack([np.cos(t), np.sin(t)], axis=-1)
    else:
        mesh = icosphere(3)
        sphere = mesh.vertices
    params = q.center + ball_radius * sphere @ dirs
    img = q.normal(params)
    if np.any(np.linalg.norm(img, axis=-1) <= SLAB_TOL):
        raise SlabHit(f"boundary image touches the slab at radius {ball_radius}")
    if c == 1:
        deg = int((np.sign(img[1, 0]) - np.sign(img[0, 0])) // 2)
    elif c == 2:
        deg = winding_number(img)
    else:
        deg = sphere_degree(mesh, img)
    return TResult("nontrivial" if deg else "trivial", deg, ball_radius, dirs)


def t_condition(q, radius=0.5):
    """t_condition_check, halving the ball radius on SlabHit up to 20 times."""
    r = radius
    for _ in range(MAX_HALVINGS + 1):
        try:
            return t_condition_check(q, r)
        except SlabHit:
            r *= 0.5
    raise SlabHit(f"no admissible ball down to radius {r}")


def connection_query(model, source, target, offset=0.1, depth=12, disk=1e-3):
    """Query for W^u(source) against W^s(target) at a point of their intersection.

    The unstable side is a small disk around the source pushed forward `depth`
    steps, so the check exercises the model's actual dynamics.
    """
    bs, bt = model.basic_set(source), model.basic_set(target)
    iota, kappa = bt.stable_dim, bs.unstable_dim
    # a point on the target's stable manifold, on the connecting axis
    shared = [a for a in bt.s_axes if a in bs.u_axes]
    if iota == model.dim:
        axis = list(bs.u_axes)[0]
    elif shared:
        axis = shared[0]
    else:
        raise ValueError("no connecting axis between these basic sets")
    v = np.zeros(model.dim)
    v[axis] = -offset if np.array(bt.point)[axis] > np.array(bs.point)[axis] else offset
    p = model.from_local(target, np.array(bt.point), v)
    q0 = p.copy()
    for _ in range(depth):
        q0 = model.inverse(q0)
    base_local = model.local(source, np.array(bs.point), q0)
    ax_u = list(bs.u_axes)
    scale = disk * max(1.0, float(np.max(np.abs(base_local))))

    def h2(params):
        vv = np.tile(base_local, (len(params), 1))
        vv[:, ax_u] += scale * params
        y = model.from_local(source, np.array(bs.point), vv)
        for _ in range(depth):
            y = model.forward(y)
        return y

    def chart(y):
        w = model.local(target, p, y)
        vu, vs = split(model, target, w)
        return np.hstack([vs, vu]) / offset

    return TransversalityQuery(chart, h2, iota, kappa, model.dim, None), p


def case1_separation(points, values, origin=None):
    """Two samples with opposite strict signs, preferably not on a common ray from origin."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    origin = np.zeros(points.shape[-1]) if origin is None else np.asarray(origin, dtype=float)
    at0 = np.argmin(np.linalg.norm(points - origin, axis=-1))
    if abs(values[at0]) > 1e-12:
        raise ValueError("the function must vanish at the center sample")
    pos, neg = np.flatnonzero(values > 0), np.flatnonzero(values < 0)
    if not len(pos) or not len(neg):
        raise NoSeparation("function keeps one sign: one-sided tangency")
    i1 = pos[np.argmax(values[pos])]
    v1 = points[i1] - origin
    for j in neg[np.argsort(values[neg])]:
        v2 = points[j] - origin
        cos = v1 @ v2 / (np.linalg.norm(v1) * np.linalg.norm(v2) + 1e-300)
        if cos < 1 - 1e-9:
            return points[i1], points[j]
    return points[i1], points[neg[np.argmin(values[neg])]]


@dataclass
class Case2Sphere:
    boundary: np.ndarray  # points of S0 in R^(m-1)
    image: np.ndarray  # (x_2, ..., x_{m-1}, g(x)) per boundary point
    mesh: object = None
    loop: np.ndarray = None

    def degree(self):
        c = self.image.shape[-1]
        if c == 1:
            return int((np.sign(self.image[-1, 0]) - np.sign(self.image[0, 0])) // 2)
        if c == 2:
            return winding_number(self.image[self.loop])
        return sphere_degree(self.mesh, self.image)


def case2_sphere_build(g, s1, s2, eps, n=17):
    """Box-boundary sphere S0 = S1 + S2 + C3 and its image under x -> (x_2.., g(x)).

    g takes points (k, m-1) with x_1 in [s1, s2] and the other coordinates in
    the cube of radius eps, and returns (k,) values.
    """
    dim = getattr(g, "dim", None) or 1
    grid = BallGrid(dim, n if dim > 1 else 2, center=[0.5 * (s1 + s2)] + [0.0] * (dim - 1),
                    radii=[0.5 * (s2 - s1)] + [eps] * (dim - 1))
    pts = grid.points
    vals = np.asarray(g(pts), dtype=float)
    x1 = pts[:, 0]
    cap1 = np.isclose(x1, s1)
    cap2 = np.isclose(x1, s2)
    if np.any(vals[cap1] <= 0) or np.any(vals[cap2] >= 0):
        raise SignViolation("g must be positive on S1 and negative on S2")
    image = np.hstack([pts[:, 1:], vals[:, None]])
    if dim == 1:
        return Case2Sphere(pts, image)
    if dim == 2:
        return Case2Sphere(pts, image, loop=grid.boundary_loop())
    return Case2Sphere(pts, image, mesh=grid.boundary_mesh())


def linear_model(g, s1, s2):
    """The interpolation in x_1 between g(s1, 0) and g(s2, 0)."""
    dim = getattr(g, "dim", None) or 1
    a = float(g(np.array([[s1] + [0.0] * (dim - 1)]))[0])
    b = float(g(np.array([[s2] + [0.0] * (dim - 1)]))[0])

    def lin(x):
        x = np.atleast_2d(x)
        return a + (b - a) * (x[:, 0] - s1) / (s2 - s1)

    lin.dim = dim
    return lin


def case2_homotopy_degrees(g, s1, s2, eps, ts=(0.0, 0.5, 1.0), n=17):
    """Degrees of S0 under G(t, .) = (1 - t) g + t g_lin for each t."""
    lin = linear_model(g, s1, s2)
    out = []
    for t in ts:
        def gt(x, t=t):
            return (1 - t) * np.asarray(g(x)) + t * lin(x)
        gt.dim = lin.dim
        out.append(case2_sphere_build(gt, s1, s2, eps, n).degree())
    return out


@dataclass
class ProbeResult:
    verdict: str  # "refuted" or "survived"
    trials: int
    threshold: float = 0.0
    witness: dict = field(default_factory=dict)


def _curve_points(h):
    return np.asarray(getattr(h, "values", h), dtype=float)


def _resample(curve, count=2001):
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=-1)
    s = np.concatenate([[0], np.cumsum(seg)])
    t = np.linspace(0, s[-1], count)
    return np.stack([np.interp(t, s, curve[:, j]) for j in range(curve.shape[1])], axis=-1), s[-1] / (count - 1)


def _bump_field(rng, box_lo, box_hi, delta, count=None):
    """A sum of up to five radial bumps, later scaled to sup norm delta on a curve."""
    k = count or int(rng.integers(1, 6))
    span = float(np.max(box_hi - box_lo)) or 1.0
    centers = rng.uniform(box_lo - 0.2 * span, box_hi + 0.2 * span, (k, len(box_lo)))
    widths = span * np.exp(rng.uniform(np.log(0.05), np.log(5.0), k))
    dirs = rng.normal(size=(k, len(box_lo)))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    amps = rng.uniform(0.2, 1.0, k)

    def field_at(y):
        out = np.zeros_like(y)
        for c, w, d, a in zip(centers, widths, dirs, amps):
            r2 = np.sum((y - c) ** 2, axis=-1) / w**2
            psi = np.where(r2 < 1, np.exp(1 - 1 / np.maximum(1 - r2, 1e-300)), 0.0)
            out += a * psi[:, None] * d
        return out

    return field_at, {"centers": centers.tolist(), "widths": widths.tolist(), "dirs": dirs.tolist()}


def _perturb(curve, field_at, delta):
    disp = field_at(curve)
    top = np.max(np.linalg.norm(disp, axis=-1))
    if top <= 0:
        return curve, 0.0
    return curve + disp * (delta / top), delta


def separation_threshold(h1, h2):
    """Half the smallest distance from either curve's endpoints to the other curve."""
    c1, _ = _resample(_curve_points(h1))
    c2, _ = _resample(_curve_points(h2))
    t1, t2 = cKDTree(c1), cKDTree(c2)
    d = min(np.min(t2.query(c1[[0, -1]])[0]), np.min(t1.query(c2[[0, -1]])[0]))
    return 0.5 * float(d)


def delta_essential_probe(h1, h2, delta, trials=100, rng_seed=0):
    """Try random C0-small perturbations of both curves that pull them apart."""
    c1, s1 = _resample(_curve_points(h1))
    c2, s2 = _resample(_curve_points(h2))
    spacing = max(s1, s2)
    if cKDTree(c1).query(c2)[0].min() > 2 * spacing:
        raise ValueError("images do not intersect; probe not applicable")
    rng = np.random.default_rng(rng_seed)
    both = np.vstack([c1, c2])
    lo, hi = both.min(axis=0), both.max(axis=0)
    thr = separation_threshold(h1, h2)
    for trial in range(1, trials + 1):
        f1, meta1 = _bump_field(rng, lo, hi, delta)
        f2, meta2 = _bump_field(rng, lo, hi, delta)
        p1, _ = _perturb(c1, f1, delta)
        p2, _ = _perturb(c2, f2, delta)
        gap = float(cKDTree(p1).query(p2)[0].min())
        if gap > 2 * spacing:
            return ProbeResult("refuted", trial, thr, {"gap": gap, "first": meta1, "second": meta2})
    return ProbeResult("survived", trials, thr)
