"""Certified disk families and the constructive shadowing pipeline.

A CertifiedDisk is a sampled ball D with a map h x eta from D onto
W~u(x, beta) x [-1, 1]^k. Two properties are checked at every certification
point: the boundary degree of h x eta is nonzero (P1), and on the interior
h(y) is the bracket [x, y] with y on the alpha-stable disk of h(y) (P2).

The pipeline tracks all disks on one parameter grid over the seed disk. The
grid is re-centred ("zoomed") on the surviving region whenever it covers too
few samples; seed parameters are kept in extended precision so that zooming
can go far below double resolution.
"""

from dataclasses import dataclass, field, replace
from fractions import Fraction
import math

import mpmath
import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .homology_degree import BallGrid, BoundaryEscape, SampledMap, boundary_degree, compose
from .hyperbolic_local import UNSTABLE, embed, estimate_constants, in_B_neighborhood, label_at, norm, split
from .models import CatMap, torus_dist, wrap
from .pseudotraj import _mp_dps, linear_shadow_oracle, mpf_to_fraction, orbit
from .segmentation import classify, excursion_lengths
from .transversality import SlabHit, TransversalityQuery, t_condition


class SeedFailure(ValueError):
    pass


class RadiusOverflow(ValueError):
    pass


class CertificationFailure(ValueError):
    pass


class NestingFailure(CertificationFailure):
    pass


class BaseTooFar(ValueError):
    pass


class SlackTooLarge(ValueError):
    pass


class DisplacementTooLarge(ValueError):
    pass


class NoTCondition(ValueError):
    pass


class TransitTooLong(ValueError):
    pass


class TransitionUnsupported(ValueError):
    pass


class Infeasible(ValueError):
    pass


class NotClassified(ValueError):
    pass


class EmptyIntersection(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# grid resolution per parameter dimension
GRID_N = {0: 1, 1: 33, 2: 17, 3: 9}
MAX_FOCUS = 80
MAX_RHO_HALVINGS = 30
ZOOM_FILL = 0.12
INTERIOR_TOL = 1e-8


def tol_p2(d):
    return max(1e-9, 1e-3 * d)


def clamp_ball(v, radius):
    """Radial retraction onto the closed Euclidean ball; the sphere absorbs the outside."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 0:
        return v.copy()
    n = norm(v)
    scale = np.where(n > radius, radius / np.maximum(n, 1e-300), 1.0)
    return v * scale[..., None]


def clamp_cube(v):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 0:
        return v.copy()
    n = np.max(np.abs(v), axis=-1)
    return v / np.maximum(1.0, n)[..., None]


def stretch_cube(v):
    """Doubles the half-size cube onto the unit cube, collapsing the rest to the boundary."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 0:
        return v.copy()
    n = np.max(np.abs(v), axis=-1)
    return np.where((n <= 0.5)[..., None], 2.0 * v, v / np.maximum(n, 1e-300)[..., None])


@dataclass
class CertifiedDisk:
    model: object = field(repr=False)
    grid: BallGrid
    points: np.ndarray  # (G, m) samples of D, lifted where the model allows
    base: np.ndarray
    label: int
    alpha: float
    beta: float
    k: int
    u: int
    h: np.ndarray  # (G, u) unstable chart offsets of h(y) from the base
    eta: np.ndarray  # (G, k)
    interior_mask: np.ndarray = None
    tol: float = 1e-9

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.h = np.asarray(self.h, dtype=float).reshape(len(self.points), self.u)
        self.eta = np.asarray(self.eta, dtype=float).reshape(len(self.points), self.k)
        if self.interior_mask is None:
            self.interior_mask = self.codomain_norm() < 1.0 - INTERIOR_TOL

    @property
    def m0(self):
        return self.u + self.k

    def values(self):
        hv = self.h / self.beta if self.u else self.h
        return np.hstack([hv, self.eta])

    def codomain_norm(self):
        parts = [np.zeros(len(self.points))]
        if self.u:
            parts.append(norm(self.h) / self.beta)
        if self.k:
            parts.append(np.max(np.abs(self.eta), axis=-1))
        return np.maximum.reduce(parts)

    def as_sampled_map(self):
        cod = BallGrid(self.m0, self.grid.n, round_dims=self.u)
        return SampledMap(self.grid, cod, self.values())

    def bracket_parts(self):
        return split(self.model, self.label, self.model.local(self.label, self.base, self.points))


@dataclass
class CertReport:
    ok: bool
    degree: int
    p2_residual: float
    stable_excess: float
    reason: str = ""


def certify(cd, alpha_bar=None):
    """Check (P1) by boundary degree and (P2) by bracket residuals on the interior."""
    try:
        deg = boundary_degree(cd.as_sampled_map())
    except BoundaryEscape as exc:
        return CertReport(False, 0, math.inf, math.inf, f"P1: {exc}")
    mask = cd.interior_mask
    if cd.m0 and not mask.any():
        return CertReport(False, deg, math.inf, math.inf, "empty interior")
    vu, vs = cd.bracket_parts()
    res = float(norm(cd.h[mask] - vu[mask]).max()) if cd.u and mask.any() else 0.0
    stab = float(norm(vs[mask]).max()) if vs.shape[-1] and mask.any() else 0.0
    excess = stab - cd.alpha
    reasons = []
    if deg == 0:
        reasons.append("P1: boundary degree 0")
    if res >= cd.tol:
        reasons.append(f"P2: bracket residual {res:.3g} >= {cd.tol:.3g}")
    if stab > cd.alpha * (1 + 1e-12) + 1e-15:
        reasons.append(f"P2: stable offset {stab:.3g} > alpha {cd.alpha:.3g}")
    if alpha_bar is not None and (cd.alpha > alpha_bar or (cd.u and cd.beta > alpha_bar)):
        reasons.append("radius above alpha_bar")
    return CertReport(not reasons, deg, res, excess, "; ".join(reasons))


def _require(cd, what):
    rep = certify(cd)
    if not rep.ok:
        raise CertificationFailure(f"{what}: {rep.reason}")
    return cd


def _check_inclusion(new, old, what):
    if np.any(new.interior_mask & ~old.interior_mask):
        raise NestingFailure(f"{what}: interior not nested in the previous one")


def _with_h(cd, **changes):
    return replace(cd, interior_mask=None, **changes)


# ---------------------------------------------------------------- operations

def seed_disk(model, y, x0, params, grid=None, points=None):
    """W~u(y, 2 beta0) as a certified disk over the base x0, alpha = Delta, k = 0."""
    x0 = np.asarray(x0, dtype=float)
    label = label_at(model, x0)
    u = model.basic_set(label).unstable_dim
    grid = grid or BallGrid(u, GRID_N[u])
    if points is None:
        offs = 2.0 * params.beta0 * grid.points
        points = model.from_local_keep(label, np.asarray(y, dtype=float), embed(model, label, offs, UNSTABLE))
    vu, _ = split(model, label, model.local(label, x0, points))
    cd = CertifiedDisk(model, grid, points, x0, label, params.Delta, params.beta0, 0, u,
                       clamp_ball(vu, params.beta0), np.zeros((len(points), 0)), tol=params.tol)
    rep = certify(cd)
    if not rep.ok:
        raise SeedFailure(rep.reason)
    return cd


def push_forward(cd, model=None, params=None, points=None, check=True):
    """Image under f: alpha shrinks by lambda, beta grows by 1/lambda.

    Without params the closed-form lambda is used and the alpha_bar bound is
    not enforced. `points` lets a caller supply f(D) computed more precisely.
    """
    model = model or cd.model
    lam = params.lam if params is not None else model.expansion_rates()[0]
    beta = cd.beta / lam
    if cd.u and params is not None and beta > params.alpha_bar:
        raise RadiusOverflow(f"beta/lambda = {beta:.3g} exceeds alpha_bar {params.alpha_bar:.3g}")
    fbase = model.forward(cd.base)
    if not model.basic_set(cd.label).contains(fbase, "U"):
        raise CertificationFailure("f(base) left the neighborhood of the basic set")
    pts = model.forward_keep(cd.points) if points is None else points
    if cd.u:
        on_disk = model.from_local_keep(cd.label, cd.base, embed(model, cd.label, cd.h, UNSTABLE))
        vu, _ = split(model, cd.label, model.local(cd.label, fbase, model.forward_keep(on_disk)))
        h = clamp_ball(vu, beta)
    else:
        h = cd.h.copy()
    new = _with_h(cd, points=pts, base=fbase, alpha=lam * cd.alpha, beta=beta, h=h)
    _check_inclusion(new, cd, "push_forward")
    return _require(new, "push_forward") if check else new


def shrink_beta(cd, beta_new, check=True):
    if not 0 < beta_new <= cd.beta:
        raise ValueError("need 0 < beta_new <= beta")
    if beta_new == cd.beta:
        return cd
    new = _with_h(cd, beta=beta_new, h=clamp_ball(cd.h, beta_new))
    _check_inclusion(new, cd, "shrink_beta")
    return _require(new, "shrink_beta") if check else new


def rebase_margin(cd, y):
    """Unstable and stable chart distances from the base to y."""
    du, ds = split(cd.model, cd.label, cd.model.local(cd.label, cd.base, np.asarray(y, dtype=float)))
    return float(norm(du)), float(norm(ds))


def rebase(cd, y, beta_prime, Delta, model=None, check=True):
    """Move the base to y: alpha grows by Delta, the unstable disk becomes W~u(y, beta_prime).

    Allowed when y's stable offset is below Delta and W~u(y, beta_prime) sits
    inside the bracket image of W~u(base, beta).
    """
    model = model or cd.model
    y = np.asarray(y, dtype=float)
    if not model.basic_set(cd.label).contains(y, "U"):
        raise BaseTooFar("new base outside the neighborhood of the basic set")
    du, ds = rebase_margin(cd, y)
    if ds >= Delta or du + beta_prime > cd.beta * (1 + 1e-12):
        raise BaseTooFar(f"offsets (u={du:.3g}, s={ds:.3g}) too large for beta'={beta_prime:.3g}, Delta={Delta:.3g}")
    if cd.u:
        on_disk = model.from_local_keep(cd.label, cd.base, embed(model, cd.label, cd.h, UNSTABLE))
        vu, _ = split(model, cd.label, model.local(cd.label, y, on_disk))
        h = clamp_ball(vu, beta_prime)
    else:
        h = cd.h.copy()
    new = _with_h(cd, base=y, alpha=cd.alpha + Delta, beta=beta_prime, h=h)
    _check_inclusion(new, cd, "rebase")
    return _require(new, "rebase") if check else new


def step(cd, model, y_next, params, points=None):
    """push_forward, rebase onto y_next, then shrink back to the beta0 plateau."""
    pushed = push_forward(cd, model, params, points, check=False)
    beta_r = cd.beta / params.mu
    moved = rebase(pushed, y_next, beta_r, params.Delta0, model, check=False)
    target = min(beta_r, params.beta0)
    out = shrink_beta(moved, target, check=False) if target < beta_r else moved
    _check_inclusion(out, cd, "step")
    return _require(out, "step")


def repair_P2(approx, eps, model=None):
    """Turn an approximate disk (bracket error below eps/(2m)) into an exact one at beta - eps.

    H is the bracket correction, faded out near the boundary; the cutoff
    tau(y) blends it in where |h| <= beta - eps/2 and the eta factor is
    stretched so that only |eta| < 1/2 stays interior.
    """
    if eps >= approx.beta:
        raise SlackTooLarge(f"eps {eps} >= beta {approx.beta}")
    vu, _ = approx.bracket_parts()
    hb, eb = approx.h, approx.eta
    beta = approx.beta
    tau = np.clip((beta - norm(hb)) / (eps / 2), 0.0, 1.0) if approx.u else np.ones(len(hb))
    chi = np.clip(2.0 * (1.0 - np.max(np.abs(eb), axis=-1)), 0.0, 1.0) if approx.k else np.ones(len(hb))
    H = clamp_ball((vu - hb) * chi[:, None], 0.5 * eps * (1 - 1e-9))
    G = tau[:, None] * H + hb
    new = _with_h(approx, beta=beta - eps, h=clamp_ball(G, beta - eps), eta=stretch_cube(eb))
    _check_inclusion(new, approx, "repair_P2")
    return _require(new, "repair_P2")


@dataclass
class SampledBall:
    grid: BallGrid
    points: np.ndarray


def transfer(cd0, D1, h1, eta1, eps, model=None):
    """Certified disk over D1 from a nontrivial map h1 x eta1 onto cd0's disk times a cube."""
    model = model or cd0.model
    ell = eta1.codomain.dim
    both = SampledMap(D1.grid, BallGrid(h1.codomain.dim + ell, D1.grid.n),
                      np.hstack([h1.values, eta1.values]))
    try:
        deg = boundary_degree(both)
    except BoundaryEscape as exc:
        raise CertificationFailure(f"h1 x eta1 not boundary preserving: {exc}") from exc
    if deg == 0:
        raise CertificationFailure("h1 x eta1 is trivial")
    inner = SampledMap(cd0.grid, BallGrid(cd0.m0, cd0.grid.n), cd0.values())
    comp = compose(h1, inner).values
    hbar = comp[:, :cd0.u] * cd0.beta
    ebar = np.hstack([comp[:, cd0.u:], eta1.values])
    approx = CertifiedDisk(model, D1.grid, D1.points, cd0.base, cd0.label, cd0.alpha + eps, cd0.beta,
                           cd0.k + ell, cd0.u, hbar, ebar, tol=cd0.tol)
    vu, _ = approx.bracket_parts()
    k0 = approx.interior_mask
    if cd0.u:
        k0 = k0 & (norm(hbar) < cd0.beta - eps / 2)
    if approx.k:
        k0 = k0 & (np.max(np.abs(ebar), axis=-1) < 0.5)
    if cd0.u and k0.any():
        gap = float(norm(vu[k0] - hbar[k0]).max())
        if gap >= eps / (2 * model.dim):
            raise DisplacementTooLarge(f"bracket displacement {gap:.3g} >= eps/(2m) = {eps / (2 * model.dim):.3g}")
    return repair_P2(approx, eps)


def _disk_query(model, grid, pts, x_t, label):
    """T-condition query for the pushed disk against the stable disk at x_t."""
    m = model.dim
    loc = model.local(label, x_t, pts)
    interp = RegularGridInterpolator(tuple(grid.axes), loc.reshape(grid.shape + (m,)),
                                     bounds_error=False, fill_value=None)
    vu, _ = split(model, label, loc)
    center = grid.points[int(np.argmin(norm(vu)))]
    b = model.basic_set(label)
    scale = max(float(np.max(np.abs(loc))), 1e-300)

    def h2(params):
        return interp(np.atleast_2d(params))

    def chart(w):
        wu, ws = split(model, label, w)
        return np.hstack([ws, wu]) / scale

    # h2 already returns chart coordinates; chart only reorders them
    return TransversalityQuery(chart, h2, b.stable_dim, grid.dim, m, center)


def _transition_core(cd, pts_t, x_t, new_label, params, rho, check_t=True):
    model = cd.model
    bo, bn = model.basic_set(cd.label), model.basic_set(new_label)
    if cd.m0 != model.dim:
        raise TransitionUnsupported(f"disk dimension {cd.m0} differs from the manifold dimension {model.dim}")
    lost = [a for a in bn.s_axes if a not in bo.s_axes]
    if len(lost) != bo.unstable_dim - bn.unstable_dim:
        raise TransitionUnsupported("unstable dimension must drop by the newly stable axes")
    if check_t and cd.grid.dim:
        try:
            res = t_condition(_disk_query(model, cd.grid, pts_t, x_t, new_label))
        except SlabHit as exc:
            raise NoTCondition(str(exc)) from exc
        if not res.satisfied:
            raise NoTCondition(f"degree {res.degree} at the connection into {new_label}")
    v = model.local(new_label, x_t, pts_t)
    vu, _ = split(model, new_label, v)
    eta = np.hstack([cd.eta, clamp_cube(v[:, lost] / rho)])
    new = CertifiedDisk(model, cd.grid, pts_t, x_t, new_label, params.alpha0, params.beta_prime,
                        cd.k + len(lost), bn.unstable_dim, clamp_ball(vu, params.beta_prime), eta, tol=cd.tol)
    _check_inclusion(new, cd, "transition")
    return _require(new, "transition")


def transition(cd, model, xi, leg, params, points=None):
    """Carry cd across the transit leg (tau index, t index) and re-certify at x_t.

    Stable axes gained at the new basic set join the trivial factor, scaled
    by alpha0, so k' = k + u_old - u_new.
    """
    tau_i, t_next = leg
    ell = t_next - tau_i
    if ell > params.L:
        raise TransitTooLong(f"transit of {ell} steps exceeds L = {params.L}")
    pts = cd.points
    if points is None:
        for _ in range(ell):
            pts = model.forward_keep(pts)
    else:
        pts = points
    x_t = np.asarray(xi.at(t_next), dtype=float)
    return _transition_core(cd, pts, x_t, label_at(model, x_t), params, params.alpha0)


# ---------------------------------------------------------------- parameters

@dataclass
class ShadowParams:
    alpha0: float
    beta0: float
    beta_prime: float
    Delta: float
    Delta0: float
    N0: int
    N1: int
    d3: float
    mu: float
    lam: float
    alpha_bar: float = math.inf
    L: float = math.inf
    eps: float = 0.0
    C0: float = 1.0
    tol: float = 1e-9
    details: dict = field(default_factory=dict)

    @property
    def lambda_(self):
        return self.lam

    def violations(self):
        out = []
        lam, mu = self.lam, self.mu
        if not self.beta_prime / lam - self.Delta0 > self.beta_prime / mu:
            out.append("beta'/lambda - Delta0 > beta'/mu")
        if not lam**self.N1 * self.alpha0 + self.Delta0 / (1 - lam) < self.Delta:
            out.append("lambda^N1 alpha0 + Delta0/(1-lambda) < Delta")
        if not self.beta_prime * mu**(-self.N1) > self.beta0:
            out.append("beta' mu^-N1 > beta0")
        if not self.Delta0 < self.Delta * (1 - lam):
            out.append("Delta0 < Delta (1 - lambda)")
        return out

    def to_json(self):
        keys = ["alpha0", "beta0", "beta_prime", "Delta", "Delta0", "N0", "N1", "d3", "mu", "lam",
                "alpha_bar", "L", "eps", "C0", "tol"]
        return {k: getattr(self, k) for k in keys}


def alpha_ledger(n, alpha0, lam, Delta0):
    """alpha after n steps from alpha0: lambda^n alpha0 + Delta0 (1 - lambda^n)/(1 - lambda)."""
    return lam**n * alpha0 + Delta0 * (1 - lam**n) / (1 - lam)


def alpha_ledger_printed(n, alpha0, lam, Delta0):
    """The same recursion with the coefficient Delta0 (1 - lambda)/(1 - lambda^n), kept for comparison."""
    if n == 0:
        return alpha0
    return lam**n * alpha0 + Delta0 * (1 - lam) / (1 - lam**n)


def minimal_N1(lam, mu, alpha0, Delta0, Delta, beta_prime, beta0, limit=10_000):
    if Delta0 / (1 - lam) >= Delta:
        raise Infeasible("lambda^N1 alpha0 + Delta0/(1-lambda) < Delta has no solution: Delta0/(1-lambda) >= Delta")
    for n in range(1, limit + 1):
        if lam**n * alpha0 + Delta0 / (1 - lam) < Delta and beta_prime * mu**(-n) > beta0:
            return n
    raise Infeasible(f"no N1 <= {limit} satisfies both dwell inequalities")


def rebase_closeness(beta, lam, mu, Delta0):
    """Adapted-norm radius within which a step can rebase from beta/lambda to beta/mu."""
    return min(Delta0, beta / lam - beta / mu)


def rebase_closeness_bisect(beta, lam, mu, Delta0, iters=200):
    """The same radius found by bisection on the rebase admissibility test."""
    def admissible(r):
        # worst offsets of size r in either factor
        return r < Delta0 and r + beta / mu <= beta / lam

    lo, hi = 0.0, max(Delta0, beta / lam) * 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    return lo


_CONSTANTS = {}


def model_constants(model, samples=500):
    key = (model.id, tuple(sorted(model.params().items())), samples)
    if key not in _CONSTANTS:
        _CONSTANTS[key] = estimate_constants(model, samples=samples, rng_seed=0)
    return _CONSTANTS[key]


def choose_parameters(model, eps, L=math.inf, d=None, constants=None):
    if eps <= 0:
        raise Infeasible("eps must be positive")
    hc = constants or model_constants(model)
    lam = max(hc.lam, hc.lam_closed)
    mu = math.sqrt(lam)
    C = max(hc.C_product, 1.0)
    alpha0 = beta0 = min(0.999 * eps / (2 * C), 0.999 * lam * hc.alpha_bar)
    Delta = 0.9 * alpha0
    beta_prime = beta0 if len(model.basic_sets) == 1 else 0.5 * beta0
    Delta0 = min(0.9 * Delta * (1 - lam), 0.9 * beta_prime * (1 / lam - 1 / mu))
    N1 = minimal_N1(lam, mu, alpha0, Delta0, Delta, beta_prime, beta0)
    betas = [beta_prime * mu**(-j) for j in range(N1 + 1)] + [beta0]
    closed = [rebase_closeness(b, lam, mu, Delta0) for b in betas]
    bisected = [rebase_closeness_bisect(b, lam, mu, Delta0) for b in betas]
    if max(abs(a - b) for a, b in zip(closed, bisected)) > 1e-9 * max(closed):
        raise Infeasible("rebase closeness: bisection disagrees with the closed form")
    d3 = min(closed) / hc.C0
    p = ShadowParams(alpha0, beta0, beta_prime, Delta, Delta0, N1, N1, d3, mu, lam, hc.alpha_bar, L, eps,
                     hc.C0, tol_p2(d or 0.0), {"closeness_closed": closed, "closeness_bisect": bisected})
    bad = p.violations()
    if bad:
        raise Infeasible("violated: " + ", ".join(bad))
    if d is not None and d >= d3:
        raise Infeasible(f"d = {d} is not below d3 = {d3:.4g}")
    return p


# ---------------------------------------------------------------- trackers

class _Box:
    """Sub-box of [-1, 1]^dim in seed parameters, in extended precision."""

    def __init__(self, dim, dps=60):
        self.dps = dps
        self.center = [mpmath.mpf(0)] * dim
        self.half = [mpmath.mpf(1)] * dim

    def shrink(self, lo, hi):
        with mpmath.workdps(self.dps):
            self._shrink(lo, hi)

    def _shrink(self, lo, hi):
        for i in range(len(self.center)):
            c, h = self.center[i], self.half[i]
            self.center[i] = c + h * mpmath.mpf((float(lo[i]) + float(hi[i])) / 2)
            self.half[i] = h * mpmath.mpf((float(hi[i]) - float(lo[i])) / 2)

    def seed_params(self, tau):
        """Absolute seed parameters for box-relative tau, rounded to doubles."""
        tau = np.atleast_2d(tau)
        out = np.empty(tau.shape)
        with mpmath.workdps(self.dps):
            for i in range(tau.shape[1]):
                c, h = self.center[i], self.half[i]
                out[:, i] = [float(c + h * mpmath.mpf(float(t))) for t in tau[:, i]]
        return out

    def width(self):
        return [float(2 * h) for h in self.half]


class LiftTracker:
    """Orbits of seed-grid samples, replayed from the seed after every zoom."""

    def __init__(self, model, label, y, radius, grid):
        self.model, self.label, self.radius = model, label, radius
        self.y = np.asarray(y, dtype=float)
        self.grid = grid
        self.box = _Box(grid.dim)
        self.time = 0
        self.keep = set()
        self.stored = {}
        self.current = self.seeds(grid.points)

    def seeds(self, tau):
        s = self.box.seed_params(tau) * self.radius
        return self.model.from_local_keep(self.label, self.y, embed(self.model, self.label, s, UNSTABLE))

    def advance(self):
        self.current = self.model.forward_keep(self.current)
        self.time += 1
        if self.time in self.keep:
            self.stored[self.time] = self.current

    def remember(self, t):
        self.keep.add(t)
        if t == self.time:
            self.stored[t] = self.current

    def sample(self, tau, times):
        """Positions of arbitrary box-relative parameters at the requested times."""
        want = set(times)
        x = self.seeds(tau)
        out = {0: x} if 0 in want else {}
        for t in range(1, max(want) + 1):
            x = self.model.forward_keep(x)
            if t in want:
                out[t] = x
        return out

    def set_box(self, lo, hi):
        self.box.shrink(lo, hi)
        got = self.sample(self.grid.points, self.keep | {self.time})
        self.current = got[self.time]
        self.stored = {t: got[t] for t in self.keep if t <= self.time}

    def point(self, tau):
        return self.seeds(np.atleast_2d(tau))[0]


class CatTracker:
    """Closed-form seed orbits for the cat map.

    The unstable line through y maps affinely: f^t(y + s e_u) = A^t y + s phi^(2t) e_u,
    so positions need A^t y exactly (integer numerators) and one
    extended-precision anchor per step.
    """

    def __init__(self, model, y, radius, grid, steps):
        self.model, self.radius, self.grid = model, radius, grid
        self.dps = _mp_dps(steps)
        yf = [Fraction(float(c)) for c in np.ravel(y)]
        self.q = math.lcm(yf[0].denominator, yf[1].denominator)
        self.nums = {0: tuple(int(c * self.q) % self.q for c in yf)}
        self.box = _Box(1, self.dps)
        self.time = 0
        self.keep = set()
        self._cache = None
        with mpmath.workdps(self.dps):
            phi = (1 + mpmath.sqrt(5)) / 2
            nrm = mpmath.sqrt(phi**2 + 1)
            self._eu = (phi / nrm, 1 / nrm)
            self._phi2 = phi**2

    def _num_at(self, t):
        while t not in self.nums:
            a, b = self.nums[max(self.nums)]
            self.nums[max(self.nums) + 1] = ((2 * a + b) % self.q, (a + b) % self.q)
        return self.nums[t]

    def positions(self, tau, t):
        a, b = self._num_at(t)
        with mpmath.workdps(self.dps):
            g = self._phi2**t * self.radius
            c = self.box.center[0] * g
            anchor = [mpmath.mpf(a) / self.q + c * self._eu[0], mpmath.mpf(b) / self.q + c * self._eu[1]]
            anchor = np.array([float(v - mpmath.floor(v)) for v in anchor])
            scale = float(self.box.half[0] * g)
        tau = np.atleast_2d(tau)
        return wrap(anchor + scale * tau[:, :1] * self.model.e_u)

    @property
    def current(self):
        if self._cache is None:
            self._cache = self.positions(self.grid.points, self.time)
        return self._cache

    @property
    def stored(self):
        return {t: self.positions(self.grid.points, t) for t in self.keep}

    def advance(self):
        self.time += 1
        self._cache = None

    def remember(self, t):
        self.keep.add(t)

    def sample(self, tau, times):
        return {t: self.positions(tau, t) for t in times}

    def set_box(self, lo, hi):
        self.box.shrink(lo, hi)
        self._cache = None

    def point_exact(self, tau):
        """Seed point as exact Fractions mod 1."""
        with mpmath.workdps(self.dps):
            s = (self.box.center[0] + self.box.half[0] * mpmath.mpf(float(np.ravel(tau)[0]))) * self.radius
            a, b = self.nums[0]
            z = (mpmath.mpf(a) / self.q + s * self._eu[0], mpmath.mpf(b) / self.q + s * self._eu[1])
            return tuple(mpf_to_fraction(c) % 1 for c in z)

    def point(self, tau):
        return np.array([float(c) for c in self.point_exact(tau)])


# ---------------------------------------------------------------- pipeline

@dataclass
class ShadowResult:
    z: np.ndarray
    verified: bool
    max_deviation: float
    ledger: list
    z_exact: tuple = None
    segmentation: object = None
    params: ShadowParams = None
    membership_ok: bool = True
    nesting_ok: bool = True
    disks: list = field(default_factory=list, repr=False)

    def to_json(self):
        return {"z": [float(c) for c in self.z], "verified": bool(self.verified),
                "max_deviation": float(self.max_deviation), "membership_ok": bool(self.membership_ok),
                "nesting_ok": bool(self.nesting_ok),
                "params": self.params.to_json() if self.params else None,
                "segmentation": self.segmentation.to_json() if self.segmentation else None,
                "ledger": self.ledger}

    def ledger_csv(self):
        m = len(self.ledger[0]["base"]) if self.ledger else 0
        cols = ["ell", "alpha", "beta"] + [f"base_x{i + 1}" for i in range(m)] + ["diam"]
        lines = [",".join(cols)]
        for r in self.ledger:
            lines.append(",".join([str(r["ell"]), repr(r["alpha"]), repr(r["beta"])]
                                  + [repr(c) for c in r["base"]] + [repr(r["diam"])]))
        return "\n".join(lines) + "\n"


def tail_shadow_point(model, xi, l, radius, label):
    """A point whose backward orbit shadows x_{k_min..l} within radius, at index l."""
    x_l = np.asarray(xi.at(l), dtype=float)
    if l == xi.k_min:
        return x_l
    b = model.basic_set(label)
    n = l - xi.k_min
    if b.whole and isinstance(model, CatMap):
        z = linear_shadow_oracle(model, xi.window(xi.k_min, l))
        return np.array([float(c) for c in CatMap.exact_step(z, n)])
    tail = xi.points[:n + 1]
    if b.point is not None:
        fixed = np.array(b.point, dtype=float)
        if float(torus_dist(tail, fixed).max()) < radius:
            return fixed
    back = orbit(model, x_l, -n, 0)
    if float(torus_dist(back, tail).max()) < radius:
        return x_l
    raise SeedFailure("no candidate shadows the backward tail")


def _grid_index(g):
    return np.rint((g.points + 1) * (g.n - 1) / 2).astype(int)


@dataclass
class _EtaFormula:
    time: int
    label: int
    base: np.ndarray
    axes: list
    rho: float


class _Run:
    def __init__(self, model, xi, eps, params, seg, keep_disks):
        self.model, self.xi, self.eps, self.p, self.seg = model, xi, eps, params, seg
        self.keep_disks = keep_disks
        self.disks = []
        self.ledger = []
        self.formulas = []
        self.rhos = []
        self.nesting_ok = True

    # direct evaluation of the current disk on the current grid
    def _eta(self, stored, formulas):
        parts = [np.zeros((len(self.tracker.grid.points), 0))]
        for f in formulas:
            v = self.model.local(f.label, f.base, stored[f.time])
            parts.append(clamp_cube(v[:, f.axes] / f.rho))
        return np.hstack(parts)

    def _direct(self, time, template, formulas=None):
        formulas = self.formulas if formulas is None else formulas
        stored = self.tracker.stored
        pts = self.tracker.current if time == self.tracker.time else stored[time]
        vu, _ = split(self.model, template.label, self.model.local(template.label, template.base, pts))
        return _with_h(template, points=pts, grid=self.tracker.grid, h=clamp_ball(vu, template.beta),
                       eta=self._eta(stored, formulas))

    def _needs_zoom(self, mask):
        g = self.tracker.grid
        if g.dim == 0:
            return False
        if not mask.any():
            return True
        idx = _grid_index(g)[mask]
        lo, hi = idx.min(0), idx.max(0)
        return bool(np.any(hi - lo < ZOOM_FILL * (g.n - 1)) or np.any(lo == 0) or np.any(hi == g.n - 1))

    def _focus(self, score):
        g = self.tracker.grid
        if g.dim == 0:
            return
        axis = np.linspace(-1, 1, g.n)
        cell = axis[1] - axis[0]
        for _ in range(MAX_FOCUS):
            s = score()
            mask = s < 1.0 - INTERIOR_TOL
            if not self._needs_zoom(mask):
                return
            if mask.any():
                idx = _grid_index(g)[mask]
                lo = np.clip(axis[idx.min(0)] - 1.5 * cell, -1, 1)
                hi = np.clip(axis[idx.max(0)] + 1.5 * cell, -1, 1)
            else:
                c = g.points[int(np.argmin(s))]
                lo, hi = np.clip(c - 0.25, -1, 1), np.clip(c + 0.25, -1, 1)
            if np.all(lo <= -1) and np.all(hi >= 1):
                return
            self.tracker.set_box(lo, hi)
        raise EmptyIntersection("no surviving region after repeated zooms",
                                {"time": self.tracker.time, "box_width": self.tracker.box.width()})

    def _record(self, cd, ell, n_in_dwell, alpha_start):
        p = self.p
        mask = cd.interior_mask
        if cd.grid.dim and mask.any():
            tau = cd.grid.points[mask]
            widths = (tau.max(0) - tau.min(0)) / 2 * np.array(self.tracker.box.width()) * self.tracker.radius
            diam = float(np.max(widths))
        else:
            diam = 0.0
        bound = alpha_ledger(n_in_dwell, p.alpha0, p.lam, p.Delta0)
        within = cd.alpha <= p.lam**n_in_dwell * p.alpha0 + p.Delta0 / (1 - p.lam) + 1e-12
        if not within or (n_in_dwell >= p.N1 and not cd.alpha < p.Delta):
            raise CertificationFailure(f"alpha ledger violated at step {ell}: alpha = {cd.alpha:.6g}")
        self.ledger.append({"ell": ell, "alpha": cd.alpha, "beta": cd.beta,
                            "base": [float(c) for c in cd.base], "diam": diam, "label": cd.label,
                            "u": cd.u, "k": cd.k, "alpha_bound": bound,
                            "alpha_bound_printed": alpha_ledger_printed(n_in_dwell, alpha_start, p.lam, p.Delta0)})
        if self.keep_disks:
            self.disks.append(cd)

    def _step(self, cd, cur):
        self.tracker.advance()
        nxt = step(cd, self.model, self.xi.at(cur + 1), self.p, points=self.tracker.current)
        if self._needs_zoom(nxt.interior_mask):
            template = nxt
            self._focus(lambda: self._direct(self.tracker.time, template).codomain_norm())
            nxt = _require(self._direct(self.tracker.time, template), "zoom")
        return nxt

    def _transition(self, cd, tau_abs, t_abs, new_label):
        p, tr = self.p, self.tracker
        ell = t_abs - tau_abs
        if ell > p.L:
            raise TransitTooLong(f"transit of {ell} steps exceeds L = {p.L}")
        tr.remember(tau_abs - self.seg.l)
        for _ in range(ell):
            tr.advance()
        t_rel = t_abs - self.seg.l
        tr.remember(t_rel)
        bo, bn = self.model.basic_set(cd.label), self.model.basic_set(new_label)
        lost = [a for a in bn.s_axes if a not in bo.s_axes]
        x_t = np.asarray(self.xi.at(t_abs), dtype=float)
        old_formulas = list(self.formulas)
        # eta scale for the newly stable axes: alpha0, halved until the new
        # region pulls back inside the old one
        for j in range(MAX_RHO_HALVINGS):
            rho = p.alpha0 * 0.5**j
            new_f = _EtaFormula(t_rel, new_label, x_t, lost, rho)
            self._focus(lambda: self._transition_score(t_rel, new_label, x_t, old_formulas + [new_f]))
            # the old disk is certified on the old box; on the zoomed box only its mask is needed
            old = self._direct(tau_abs - self.seg.l, cd, old_formulas)
            try:
                new = _transition_core(old, tr.stored[t_rel], x_t, new_label, p, rho)
            except NestingFailure:
                continue
            self.formulas.append(new_f)
            self.rhos.append(rho)
            return new
        raise NestingFailure(f"transition into {new_label}: no eta scale gives a nested region")

    def _transition_score(self, t_rel, new_label, x_t, formulas):
        stored = self.tracker.stored
        v = self.model.local(new_label, x_t, stored[t_rel])
        vu, _ = split(self.model, new_label, v)
        parts = [norm(vu) / self.p.beta_prime if vu.shape[1] else np.zeros(len(v))]
        eta = self._eta(stored, formulas)
        if eta.shape[1]:
            parts.append(np.max(np.abs(eta), axis=-1))
        return np.maximum.reduce(parts)

    def run(self):
        model, xi, p, seg = self.model, self.xi, self.p, self.seg
        l = seg.l
        first = seg.labels[0]
        y = tail_shadow_point(model, xi, l, self.eps / 2, first)
        u = model.basic_set(first).unstable_dim
        grid = BallGrid(u, GRID_N[u])
        if isinstance(model, CatMap):
            self.tracker = CatTracker(model, y, 2 * p.beta0, grid, xi.k_max - l + 1)
        else:
            self.tracker = LiftTracker(model, first, y, 2 * p.beta0, grid)
        cd = seed_disk(model, y, xi.at(l), p, grid, self.tracker.current)
        self._record(cd, l, 0, cd.alpha)
        cur = l
        for i in range(seg.s_bar):
            start, end = seg.dwell(i)
            if i > 0:
                cd = self._transition(cd, cur, start, seg.labels[i])
                cur = start
            n = 0
            alpha_start = cd.alpha
            if i > 0:
                self._record(cd, cur, n, alpha_start)
            while cur < end:
                cd = self._step(cd, cur)
                cur += 1
                n += 1
                self._record(cd, cur, n, alpha_start)
        return self._extract(cd)

    def _final_score(self, tau, template):
        tr = self.tracker
        times = {f.time for f in self.formulas} | {tr.time}
        got = tr.sample(tau, times)
        vu, _ = split(self.model, template.label, self.model.local(template.label, template.base, got[tr.time]))
        parts = [norm(vu) / template.beta if template.u else np.zeros(len(tau))]
        for f in self.formulas:
            v = self.model.local(f.label, f.base, got[f.time])
            parts.append(np.max(np.abs(clamp_cube(v[:, f.axes] / f.rho)), axis=-1))
        return np.maximum.reduce(parts)

    def _extract(self, cd):
        model, xi, tr = self.model, self.xi, self.tracker
        g = tr.grid
        if g.dim:
            mask = cd.interior_mask
            if not mask.any():
                raise EmptyIntersection("final region is empty", {"time": tr.time})
            pts = g.points[mask]
            axis = np.linspace(-1, 1, g.n)
            cell = axis[1] - axis[0]
            lo, hi = pts.min(0) - cell, pts.max(0) + cell
            nref = [max(2, int(round((b - a) / cell * 4)) + 1) for a, b in zip(lo, hi)]
            mesh = np.meshgrid(*[np.linspace(a, b, k) for a, b, k in zip(lo, hi, nref)], indexing="ij")
            fine = np.stack([m.ravel() for m in mesh], axis=-1)
            fmask = self._final_score(fine, cd) < 1.0 - INTERIOR_TOL
            tau = fine[fmask].mean(0) if fmask.any() else pts.mean(0)
        else:
            tau = np.zeros(0)
        l = self.seg.l
        z_exact = None
        if isinstance(tr, CatTracker):
            z_exact = CatMap.exact_step(tr.point_exact(tau), -l)
            z = np.array([float(c) for c in z_exact])
        else:
            z = tr.point(np.atleast_2d(tau))
            for _ in range(abs(l)):
                z = model.inverse_lift(z) if l > 0 else model.forward_lift(z)
        traj = orbit(model, z_exact if z_exact is not None else z, xi.k_min, xi.k_max)
        dev = float(torus_dist(traj, xi.points).max())
        ok = dev < self.eps
        member = True
        for i in range(self.seg.s_bar):
            start, end = self.seg.dwell(i)
            for k in range(max(start, l), end + 1):
                if not in_B_neighborhood(model, xi.at(k), self.p.alpha0, self.p.beta0, traj[k - xi.k_min]):
                    member = False
                    break
        return ShadowResult(z, bool(ok), dev, self.ledger, z_exact, self.seg, self.p, member,
                            self.nesting_ok, self.disks)


def default_L(model, xi):
    """One more than the longest stay outside every W_i."""
    return max(excursion_lengths(model, xi) + [0]) + 1


def run_shadowing(model, xi, eps, L=None, params=None, keep_disks=False, constants=None):
    L = default_L(model, xi) if L is None else L
    if params is None:
        params = choose_parameters(model, eps, L, constants=constants)
    params = replace(params, tol=tol_p2(xi.d), L=L)
    if xi.d >= params.d3:
        raise NotClassified(f"d = {xi.d} is not below d3 = {params.d3:.4g}")
    seg = classify(xi, model, L, params.N1 + 1, len(model.basic_sets))
    if seg is None:
        raise NotClassified(f"no segmentation with L={L}, N={params.N1 + 1}, s0={len(model.basic_sets)}")
    return _Run(model, xi, eps, params, seg, keep_disks).run()
