"""Pseudotrajectories: generation, validation, shadowing checks and oracles.

Cat-map orbits are checked in exact rational arithmetic. A double cannot
follow the unstable growth (a factor phi^2 per step) for more than a few
dozen steps, so floats would report spurious failures on long ranges.
"""

from dataclasses import dataclass, field
from fractions import Fraction
import io
import json

import mpmath
import numpy as np

from .models import CatMap, apply, torus_dist, wrap


class CostGuard(ValueError):
    pass


class NoConnection(ValueError):
    pass


class ModelMismatch(ValueError):
    pass


@dataclass
class Pseudotrajectory:
    points: np.ndarray  # (k_max - k_min + 1, m)
    d: float
    model_id: str
    k_min: int = 0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def k_max(self):
        return self.k_min + len(self.points) - 1

    def __len__(self):
        return len(self.points)

    def at(self, k):
        return self.points[k - self.k_min]

    def window(self, a, b):
        """Indices a..b, re-indexed so that a becomes 0."""
        return Pseudotrajectory(self.points[a - self.k_min:b - self.k_min + 1].copy(), self.d,
                                self.model_id, 0, self.seed, {"window": [a, b]})

    def header(self):
        return {"model": self.model_id, "d": self.d, "k_min": self.k_min,
                "k_max": self.k_max, "seed": self.seed}

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.header()) + "\n")
        m = self.points.shape[1]
        buf.write(",".join(["k"] + [f"x_{i + 1}" for i in range(m)]) + "\n")
        for j, p in enumerate(self.points):
            buf.write(",".join([str(self.k_min + j)] + [repr(float(c)) for c in p]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = {}
        if lines[0].startswith("#"):
            head = json.loads(lines.pop(0)[1:])
        rows = [ln.split(",") for ln in lines[1:]]
        ks = [int(r[0]) for r in rows]
        pts = np.array([[float(c) for c in r[1:]] for r in rows])
        return cls(pts, float(head.get("d", 0.0)), head.get("model", "unknown"), ks[0], head.get("seed"))


def validate(model, xi):
    """True iff every forward jump is below d; also the largest jump."""
    if len(xi) < 2:
        return True, 0.0
    jumps = torus_dist(model.forward(xi.points[:-1]), xi.points[1:])
    top = float(jumps.max())
    return bool(np.all(jumps < xi.d)) if xi.d > 0 else top == 0.0, top


def _ball_noise(rng, m, radius):
    v = rng.normal(size=m)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / m)


def generate(model, x0, k_min, k_max, d, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    m = model.dim
    pts = np.empty((k_max - k_min + 1, m))
    x0 = wrap(np.asarray(x0, dtype=float).reshape(m))
    if not k_min <= 0 <= k_max:
        raise ValueError("index 0 must lie in the range")
    pts[-k_min] = x0
    x = x0
    for k in range(1, k_max + 1):
        noise = _ball_noise(rng, m, 0.99 * d) if d > 0 else 0.0
        x = wrap(model.forward(x) + noise)
        pts[k - k_min] = x
    x = x0
    for k in range(-1, k_min - 1, -1):
        # x_k = f^-1(x_{k+1} - noise), so the forward jump is the noise itself
        noise = _ball_noise(rng, m, 0.99 * d) if d > 0 else 0.0
        x = model.inverse(wrap(x - noise))
        pts[k - k_min] = x
    return Pseudotrajectory(pts, float(d), model.id, k_min, rng_seed)


def orbit(model, z, k_min, k_max):
    """Points f^k(z) for k_min <= k <= k_max, z being the index-0 point.

    Cat-map orbits are exact; the others iterate the lift without wrapping,
    which keeps relative precision near integer coordinates.
    """
    if isinstance(model, CatMap):
        return CatMap.exact_orbit(z, k_min, k_max)
    z = np.array([float(c) for c in np.ravel(z)])
    out = np.empty((k_max - k_min + 1, model.dim))
    if k_min <= 0 <= k_max:
        out[-k_min] = z
    x = z
    for k in range(1, k_max + 1):
        x = model.forward_lift(x)
        if k >= k_min:
            out[k - k_min] = x
    x = z
    for k in range(-1, k_min - 1, -1):
        x = model.inverse_lift(x)
        if k <= k_max:
            out[k - k_min] = x
    return out


def verify_shadowing(model, xi, z, eps):
    dev = torus_dist(orbit(model, z, xi.k_min, xi.k_max), xi.points)
    top = float(dev.max())
    return top < eps, top


def _mp_dps(n):
    # unstable growth phi^2 per step costs log10(phi^2) digits per step
    return int(0.42 * n) + 40


def linear_shadow_oracle(model, xi):
    """Exact bounded solution of the linearized cat-map shadowing equations.

    With e_k = x_{k+1} - A x_k (minimal lift) the correction w_k = z_k - x_k
    solves w_{k+1} = A w_k - e_k. Its unstable part is summed over future
    errors and its stable part over past errors, so w stays O(d). Returns the
    index-0 shadow point as a pair of Fractions.
    """
    if not isinstance(model, CatMap):
        raise ModelMismatch("the linear oracle needs the cat map")
    n = len(xi)
    with mpmath.workdps(_mp_dps(n)):
        phi = (1 + mpmath.sqrt(5)) / 2
        lu, ls = phi**2, 1 / phi**2
        nrm = mpmath.sqrt(phi**2 + 1)
        eu = (phi / nrm, 1 / nrm)
        es = (-1 / nrm, phi / nrm)
        pts = [(mpmath.mpf(float(a)), mpmath.mpf(float(b))) for a, b in xi.points]
        eU, eS = [], []
        for k in range(n - 1):
            a, b = pts[k]
            ea = pts[k + 1][0] - (2 * a + b)
            eb = pts[k + 1][1] - (a + b)
            ea -= mpmath.nint(ea)
            eb -= mpmath.nint(eb)
            eU.append(ea * eu[0] + eb * eu[1])
            eS.append(ea * es[0] + eb * es[1])
        i0 = -xi.k_min
        wu = mpmath.mpf(0)
        for j in range(n - 2, i0 - 1, -1):
            wu = (wu + eU[j]) / lu
        ws = mpmath.mpf(0)
        for j in range(0, i0):
            ws = ls * ws - eS[j]
        z = (pts[i0][0] + wu * eu[0] + ws * es[0], pts[i0][1] + wu * eu[1] + ws * es[1])
        return tuple(mpf_to_fraction(c) % 1 for c in z)


def mpf_to_fraction(c):
    """Exact rational value of an mpmath number."""
    man, exp = mpmath.mpf(c).man_exp
    man, exp = int(man), int(exp)  # plain ints; gmpy2 integers break math.floor on Fraction
    return Fraction(man * 2**exp) if exp >= 0 else Fraction(man, 2**-exp)


def brute_force_shadow(model, xi, eps, grid_n, max_range=20):
    """Best grid point for the first index, pruning candidates already beyond eps.

    Returns the matching index-0 point, or None when no grid point shadows
    within eps. Pruning cannot change the answer: a pruned point already has
    a deviation of at least eps.
    """
    if model.dim > 2 or xi.k_max - xi.k_min > max_range:
        raise CostGuard(f"brute force limited to m <= 2 and {max_range} steps")
    axes = [np.arange(grid_n) / grid_n] * model.dim
    cand = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    worst = torus_dist(cand, xi.points[0])
    keep = worst < eps
    cand, worst, start = cand[keep], worst[keep], cand[keep]
    for j in range(1, len(xi)):
        if not len(cand):
            return None
        cand = model.forward(cand)
        worst = np.maximum(worst, torus_dist(cand, xi.points[j]))
        keep = worst < eps
        cand, worst, start = cand[keep], worst[keep], start[keep]
    if not len(cand):
        return None
    best = start[np.argmin(worst)]
    return best if xi.k_min == 0 else apply(model, best, -xi.k_min)


def _fixed_point(model, label):
    return np.array(model.basic_set(label).point, dtype=float)


def _kick_directions(model, label):
    b = model.basic_set(label)
    axes = list(b.u_axes)
    out = []
    for mask in range(1, 2 ** len(axes)):
        chosen = [a for i, a in enumerate(axes) if mask >> i & 1]
        for signs in range(2 ** len(chosen)):
            v = np.zeros(model.dim)
            for i, a in enumerate(chosen):
                v[a] = -1.0 if signs >> i & 1 else 1.0
            out.append(v / np.linalg.norm(v))
    return out


def _lipschitz_at(model, p):
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(model.jacobian(p)).reshape(model.dim, model.dim)))))


def _dwell(model, label, count, d, rng, first_exact=False, last_exact=False):
    p = _fixed_point(model, label)
    lip = _lipschitz_at(model, p)
    r = 0.9 * d / (1 + lip)
    out = [wrap(p + _ball_noise(rng, model.dim, r)) for _ in range(count)]
    if first_exact and out:
        out[0] = p.copy()
    if last_exact and out:
        out[-1] = p.copy()
    return out


def _transit(model, src, dst, d, horizon=1000):
    """Kick off the fixed point of src and follow the exact orbit toward dst.

    The kick has length d/2 along a combination of unstable axes. The path
    stops at the first point whose image is within d/2 of dst's fixed point,
    so the next pseudotrajectory point can be that fixed point itself.
    """
    p, q = _fixed_point(model, src), _fixed_point(model, dst)
    others = [_fixed_point(model, b.label) for b in model.basic_sets if b.label not in (src, dst)]
    for v in _kick_directions(model, src):
        x = model.from_local(src, p, 0.5 * d * v)
        path = [x]
        for _ in range(horizon):
            fx = model.forward(x)
            if torus_dist(fx, q) < d / 2:
                return path
            if any(torus_dist(fx, o) < d for o in others):
                break
            x = fx
            path.append(x)
    raise NoConnection(f"no connecting orbit from {src} to {dst}")


def craft_chain(model, labels, dwell_N, d, rng_seed=0):
    """Pseudotrajectory dwelling dwell_N steps at each fixed point of `labels` in turn."""
    rng = np.random.default_rng(rng_seed)
    pts = []
    for i, lab in enumerate(labels):
        last = i == len(labels) - 1
        pts += _dwell(model, lab, dwell_N, d, rng, first_exact=i > 0, last_exact=not last)
        if not last:
            pts += _transit(model, lab, labels[i + 1], d)
    return Pseudotrajectory(np.array(pts), float(d), model.id, 0, rng_seed, {"labels": list(labels)})


def craft_transition(model, from_set, to_set, dwell_N, d, rng_seed=0):
    if from_set == to_set:
        return craft_chain(model, [from_set], 2 * dwell_N, d, rng_seed)
    return craft_chain(model, [from_set, to_set], dwell_N, d, rng_seed)
