"""Local product structure: invariant disks, adapted metrics, the bracket [x, y].

All computations go through the model's adapted chart: local(label, x, y)
gives coordinates of y relative to x, split into unstable and stable parts.
The adapted norm of a displacement is max(|v_s|, |v_u|).
"""

from dataclasses import dataclass, field

import numpy as np

from .models import OutsideExtendedNeighborhood, torus_dist

UNSTABLE = "unstable"
STABLE = "stable"
ALPHA_BAR_CAP = 0.25


class NoBracket(ValueError):
    pass


class RadiusTooLarge(ValueError):
    pass


class SamplingFailure(RuntimeError):
    pass


def label_at(model, x, which="U"):
    label = model.basic_set_of(np.asarray(x, dtype=float), which)
    if label is None:
        raise OutsideExtendedNeighborhood(f"{x} lies outside every neighborhood")
    return label


def split(model, label, v):
    """Split chart coordinates v (..., m) into (unstable, stable) parts."""
    b = model.basic_set(label)
    return v[..., list(b.u_axes)], v[..., list(b.s_axes)]


def norm(v):
    if v.shape[-1] == 0:
        return np.zeros(v.shape[:-1])
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def adapted_norm(model, label, v):
    vu, vs = split(model, label, v)
    return np.maximum(norm(vu), norm(vs))


def d_sigma(model, x, y, z, sigma=None):
    """Adapted distance between y and z measured in the chart at x."""
    label = label_at(model, x)
    v = model.local(label, x, y) - model.local(label, x, z)
    if sigma is None:
        return float(adapted_norm(model, label, v))
    vu, vs = split(model, label, v)
    return float(norm(vu if sigma == UNSTABLE else vs))


def embed(model, label, coords, sigma):
    """Chart vector with `coords` placed on the sigma axes, zeros elsewhere."""
    b = model.basic_set(label)
    axes = list(b.u_axes if sigma == UNSTABLE else b.s_axes)
    coords = np.asarray(coords, dtype=float)
    v = np.zeros(coords.shape[:-1] + (model.dim,))
    v[..., axes] = coords
    return v


@dataclass
class LocalDisk:
    base: np.ndarray
    sigma: str
    radius: float
    label: int
    params: np.ndarray  # (n, dim) chart offsets on the sigma axes
    samples: np.ndarray  # (n, m) points on the torus

    @property
    def dim(self):
        return self.params.shape[-1]


def local_disk(model, x, sigma, radius, resolution=129, alpha_bar=None):
    """Sampled W~^sigma(x, radius): a uniform grid in adapted coordinates."""
    x = np.asarray(x, dtype=float)
    label = label_at(model, x)
    if alpha_bar is not None and radius > alpha_bar:
        raise RadiusTooLarge(f"radius {radius} exceeds alpha_bar {alpha_bar}")
    b = model.basic_set(label)
    dim = len(b.u_axes if sigma == UNSTABLE else b.s_axes)
    if radius == 0 or dim == 0:
        params = np.zeros((1, dim))
    else:
        t = np.linspace(-radius, radius, resolution)
        mesh = np.meshgrid(*([t] * dim), indexing="ij")
        params = np.stack([g.ravel() for g in mesh], axis=-1)
        if dim > 1:
            params = params[np.linalg.norm(params, axis=-1) <= radius * (1 + 1e-12)]
    samples = model.from_local(label, x, embed(model, label, params, sigma))
    return LocalDisk(x, sigma, float(radius), label, params, samples)


def bracket_coords(model, label, x, y):
    """Unstable and stable chart parts of y relative to x.

    [x, y] is x shifted by the unstable part; y sits on its stable disk at
    adapted distance |stable part|.
    """
    return split(model, label, model.local(label, x, y))


def bracket(model, x, y, alpha, beta):
    x = np.asarray(x, dtype=float)
    label = label_at(model, x)
    vu, vs = bracket_coords(model, label, x, y)
    if norm(vu) > beta or norm(vs) > alpha:
        raise NoBracket(f"|v_u|={float(norm(vu)):.3g} vs beta={beta}, |v_s|={float(norm(vs)):.3g} vs alpha={alpha}")
    return model.from_local(label, x, embed(model, label, vu, UNSTABLE))


def in_B_neighborhood(model, x, alpha, beta, y):
    try:
        bracket(model, x, y, alpha, beta)
    except (NoBracket, OutsideExtendedNeighborhood):
        return False
    return True


@dataclass
class HyperbolicConstants:
    C0: float
    lam: float
    alpha_bar: float
    mu: float
    lam_closed: float
    C_product: float  # sup dist(x, y) / adapted norm of local(x, y)
    C_bracket: float = 0.0  # empirical constant of the bracket continuity claim
    details: dict = field(default_factory=dict)


def _sample_bases(model, label, n, rng, invariant=True):
    """Points of W_label, optionally restricted to W_label cut f^-1(W_label)."""
    b = model.basic_set(label)
    if b.whole:
        return rng.random((n, model.dim))
    out = []
    c = np.array(b.point)
    # unstable axes expand, so the invariant part is thinner along them
    half = np.full(model.dim, b.w_radius)
    if invariant:
        half[list(b.u_axes)] *= min(1.0, 1.1 * model.expansion_rates()[0])
    while sum(len(o) for o in out) < n:
        cand = c + rng.uniform(-half, half, (2 * n, model.dim))
        ok = b.contains(cand, "W")
        if invariant:
            ok &= b.contains(model.forward(cand), "W")
        out.append(cand[ok])
    return np.mod(np.concatenate(out)[:n], 1.0)


def _box_boundary(dim, per_edge=6):
    t = np.linspace(-1, 1, per_edge)
    mesh = np.stack([g.ravel() for g in np.meshgrid(*([t] * dim), indexing="ij")], axis=-1)
    return mesh[np.max(np.abs(mesh), axis=-1) >= 1 - 1e-12]


def alpha_bar_estimate(model, samples=200, rng=None, cap=ALPHA_BAR_CAP):
    """Largest radius r with B(x, r, r) in U cut f^-1(U) for sampled x in W cut f^-1(W)."""
    rng = np.random.default_rng(rng)
    best = cap
    box = _box_boundary(model.dim)
    for b in model.basic_sets:
        if b.whole:
            continue
        xs = _sample_bases(model, b.label, samples, rng)

        def fits(r):
            y = model.from_local(b.label, xs[:, None, :], r * box[None, :, :]).reshape(-1, model.dim)
            return bool(np.all(b.contains(y, "U") & b.contains(model.forward(y), "U")))

        lo, hi = 0.0, best
        if fits(hi):
            continue
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if fits(mid) else (lo, mid)
        best = lo
    return best


def _disk_pairs(model, label, n, r, sigma, rng):
    """Random bases z and pairs x, y on W~^sigma(z, r), as chart offsets."""
    b = model.basic_set(label)
    k = len(b.u_axes if sigma == UNSTABLE else b.s_axes)
    z = _sample_bases(model, label, n, rng)
    a = rng.uniform(-r, r, (n, k))
    c = rng.uniform(-r, r, (n, k))
    return z, a, c, k


def estimate_constants(model, samples=2000, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    lam_closed, _ = model.expansion_rates()
    alpha_bar = alpha_bar_estimate(model, min(samples, 400), rng)
    ratios = []  # adapted / torus distance on disks
    contraction = []
    for b in model.basic_sets:
        for sigma in (STABLE, UNSTABLE):
            dim = len(b.u_axes if sigma == UNSTABLE else b.s_axes)
            if dim == 0:
                continue
            z, a, c, _ = _disk_pairs(model, b.label, samples, alpha_bar, sigma, rng)
            x = model.from_local(b.label, z, embed(model, b.label, a, sigma))
            y = model.from_local(b.label, z, embed(model, b.label, c, sigma))
            ds = np.linalg.norm(a - c, axis=-1)
            dist = torus_dist(x, y)
            keep = dist > 1e-12
            ratios.append(ds[keep] / dist[keep])
            # contraction: stable forward, unstable backward
            step = model.forward if sigma == STABLE else model.inverse
            fz, fx, fy = step(z), step(x), step(y)
            va = split(model, b.label, model.local(b.label, fz, fx))[0 if sigma == UNSTABLE else 1]
            vc = split(model, b.label, model.local(b.label, fz, fy))[0 if sigma == UNSTABLE else 1]
            dn = np.linalg.norm(va - vc, axis=-1)
            contraction.append(dn[keep] / ds[keep])
    ratios = np.concatenate(ratios)
    worst = max(ratios.max(), 1.0 / ratios.min())
    C0 = 1.01 * worst
    lam = float(np.concatenate(contraction).max())

    # fresh samples must respect the reported C0 with strict inequalities
    fresh = check_metric_equivalence(model, C0, alpha_bar, samples, rng)
    if fresh:
        raise SamplingFailure(f"{fresh} metric-equivalence violations with C0={C0}")

    C_product, C_bracket = _product_constants(model, alpha_bar, samples, rng)
    mu = float(np.sqrt(max(lam, lam_closed)))
    return HyperbolicConstants(float(C0), lam, float(alpha_bar), mu, float(lam_closed),
                               C_product, C_bracket,
                               {"ratio_min": float(ratios.min()), "ratio_max": float(ratios.max())})


def check_metric_equivalence(model, C0, radius, samples, rng):
    """Number of sampled disk pairs violating C0^-1 dist < d_sigma < C0 dist."""
    bad = 0
    for b in model.basic_sets:
        for sigma in (STABLE, UNSTABLE):
            if not (b.u_axes if sigma == UNSTABLE else b.s_axes):
                continue
            z, a, c, _ = _disk_pairs(model, b.label, samples, radius, sigma, rng)
            x = model.from_local(b.label, z, embed(model, b.label, a, sigma))
            y = model.from_local(b.label, z, embed(model, b.label, c, sigma))
            ds = np.linalg.norm(a - c, axis=-1)
            dist = torus_dist(x, y)
            keep = dist > 1e-12
            bad += int(np.sum(~((dist[keep] / C0 < ds[keep]) & (ds[keep] < C0 * dist[keep]))))
    return bad


def _product_constants(model, radius, samples, rng):
    c_prod = 1.0
    c_br = 0.0
    for b in model.basic_sets:
        x = _sample_bases(model, b.label, samples, rng, invariant=False)
        v = rng.uniform(-radius, radius, (samples, model.dim))
        y = model.from_local(b.label, x, v)
        an = adapted_norm(model, b.label, model.local(b.label, x, y))
        dist = torus_dist(x, y)
        keep = an > 1e-12
        c_prod = max(c_prod, float(np.max(dist[keep] / an[keep])))
        vu, vs = split(model, b.label, model.local(b.label, x, y))
        c_br = max(c_br, float(np.max(norm(vs)[keep] / dist[keep])))
    return 1.001 * c_prod, c_br


def bracket_continuity_delta(model, eps=1e-3, samples=500, rng_seed=0, radius=None):
    """Largest delta (by bisection) with |[x,y] - [x,y']|_u < eps whenever dist(y,y') < delta."""
    rng = np.random.default_rng(rng_seed)
    radius = radius or 0.5 * alpha_bar_estimate(model, 100, rng)
    bases = []
    for b in model.basic_sets:
        x = _sample_bases(model, b.label, samples, rng, invariant=False)
        y = model.from_local(b.label, x, rng.uniform(-radius, radius, (samples, model.dim)))
        bases.append((b.label, x, y))
    dirs = rng.normal(size=(samples, model.dim))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    def ok(delta):
        for label, x, y in bases:
            y2 = np.mod(y + 0.999 * delta * dirs, 1.0)
            u1 = split(model, label, model.local(label, x, y))[0]
            u2 = split(model, label, model.local(label, x, y2))[0]
            if np.max(norm(u1 - u2)) >= eps:
                return False
        return True

    lo, hi = 0.0, eps
    while ok(hi) and hi < 1.0:
        lo, hi = hi, 2 * hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo
