"""Concrete Axiom A diffeomorphisms of flat tori with closed-form hyperbolic data.

Points are numpy arrays of shape (m,) or (n, m) with coordinates in [0, 1).
Each model also exposes a *lifted* map that skips the final wrap, which keeps
full relative precision for coordinates near an integer.
"""

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np

PHI = (1.0 + math.sqrt(5.0)) / 2.0


class OutsideExtendedNeighborhood(ValueError):
    pass


class UnknownModel(ValueError):
    pass


def wrap(x):
    r = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(r >= 1.0, 0.0, r)


def displacement(x, y):
    """Minimal lift of y - x, each coordinate in [-1/2, 1/2]."""
    d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    return d - np.round(d)


def torus_dist(x, y):
    return np.linalg.norm(displacement(x, y), axis=-1)


@dataclass(frozen=True)
class BasicSet:
    label: int
    name: str
    point: tuple | None  # None: the basic set is the whole torus
    stable_dim: int
    unstable_dim: int
    u_axes: tuple  # chart coordinates that are unstable
    s_axes: tuple
    w_radius: float
    u_radius: float

    @property
    def whole(self):
        return self.point is None

    def contains(self, x, which="W"):
        if self.whole:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        r = self.w_radius if which == "W" else self.u_radius
        return torus_dist(x, np.array(self.point)) < r


class Model:
    id = "abstract"
    dim = 0

    def __init__(self):
        self.basic_sets = []

    # subclasses provide forward_lift / inverse_lift on arrays (..., m)
    def forward(self, x):
        return wrap(self.forward_lift(np.asarray(x, dtype=float)))

    def inverse(self, x):
        return wrap(self.inverse_lift(np.asarray(x, dtype=float)))

    def params(self):
        return {"model": self.id}

    def basic_set(self, label):
        for b in self.basic_sets:
            if b.label == label:
                return b
        raise KeyError(label)

    def basic_set_of(self, x, which="W"):
        """Label of the neighborhood containing x, or None."""
        for b in self.basic_sets:
            if b.contains(x, which):
                return b.label
        return None

    # charts: local(label, x, y) are coordinates of y relative to x in the
    # adapted frame of the basic set; from_local inverts it.
    def local(self, label, x, y):
        b = self.basic_set(label)
        return self._chart(b, y) - self._chart(b, x)

    def from_local(self, label, x, v):
        b = self.basic_set(label)
        return self._unchart(b, self._chart(b, x) + v)

    def from_local_lift(self, label, x, v):
        b = self.basic_set(label)
        return self._unchart_lift(b, self._chart(b, x) + v)

    def _unchart(self, b, c):
        return wrap(self._unchart_lift(b, c))

    # The engine keeps lifted points for models whose lift commutes with
    # integer translation; the cat map's lift grows without bound, so it wraps.
    def forward_keep(self, x):
        return self.forward(x) if self.wrap_each_step else self.forward_lift(np.asarray(x, dtype=float))

    def from_local_keep(self, label, x, v):
        return self.from_local(label, x, v) if self.wrap_each_step else self.from_local_lift(label, x, v)


def apply(model, x, n):
    """n-fold composition of the model map, inverse for negative n, wrapped."""
    x = np.asarray(x, dtype=float)
    step = model.forward_lift if n >= 0 else model.inverse_lift
    for _ in range(abs(int(n))):
        x = step(x)
        if model.wrap_each_step:
            x = wrap(x)
    return wrap(x)


def splitting_at(model, x):
    """Unit stable and unstable directions at x, as (k, m) and (j, m) arrays."""
    return model.splitting_at(np.asarray(x, dtype=float))


def expansion_rates(model):
    return model.expansion_rates()


class CatMap(Model):
    """The linear automorphism x -> A x mod 1 with A = [[2, 1], [1, 1]]."""

    id = "cat"
    dim = 2
    wrap_each_step = True
    A = np.array([[2.0, 1.0], [1.0, 1.0]])
    A_inv = np.array([[1.0, -1.0], [-1.0, 2.0]])
    A_int = ((2, 1), (1, 1))
    A_inv_int = ((1, -1), (-1, 2))

    def __init__(self):
        super().__init__()
        self.e_u = np.array([PHI, 1.0]) / math.hypot(PHI, 1.0)
        self.e_s = np.array([-1.0, PHI]) / math.hypot(PHI, 1.0)
        self.lam_u = PHI**2
        self.lam_s = 1.0 / PHI**2
        # chart coordinates (u, s): projection onto the orthonormal eigenbasis
        self.frame = np.stack([self.e_u, self.e_s])
        self.basic_sets = [BasicSet(1, "torus", None, 1, 1, (0,), (1,), math.inf, math.inf)]

    def forward_lift(self, x):
        return x @ self.A.T

    def inverse_lift(self, x):
        return x @ self.A_inv.T

    def forward(self, x):
        return wrap(wrap(np.asarray(x, dtype=float)) @ self.A.T)

    def inverse(self, x):
        return wrap(wrap(np.asarray(x, dtype=float)) @ self.A_inv.T)

    def jacobian(self, x):
        return np.broadcast_to(self.A, np.shape(x)[:-1] + (2, 2))

    def splitting_at(self, x):
        return self.e_s[None, :], self.e_u[None, :]

    def expansion_rates(self):
        lam = (3.0 - math.sqrt(5.0)) / 2.0
        return lam, {1: {"stable": self.lam_s, "unstable": self.lam_u}}

    def local(self, label, x, y):
        return displacement(x, y) @ self.frame.T

    def from_local(self, label, x, v):
        return wrap(np.asarray(x, dtype=float) + np.asarray(v) @ self.frame)

    def from_local_lift(self, label, x, v):
        return np.asarray(x, dtype=float) + np.asarray(v) @ self.frame

    @staticmethod
    def exact_step(p, n=1):
        """Apply A^n (n may be negative) to a pair of Fractions, reduced mod 1."""
        a, b = p
        M = CatMap.A_int if n >= 0 else CatMap.A_inv_int
        for _ in range(abs(n)):
            a, b = M[0][0] * a + M[0][1] * b, M[1][0] * a + M[1][1] * b
            a, b = a - math.floor(a), b - math.floor(b)
        return a, b

    @staticmethod
    def exact_orbit(z, k_min, k_max):
        """Float images of the exact orbit of the rational point z (index 0).

        Iterates on integer numerators over a common power-of-two or general
        denominator, so the cost per step is two small big-int products.
        """
        z = tuple(Fraction(c) for c in z)
        q = math.lcm(z[0].denominator, z[1].denominator)
        start = (z[0].numerator * (q // z[0].denominator) % q,
                 z[1].numerator * (q // z[1].denominator) % q)
        out = np.empty((k_max - k_min + 1, 2))
        for M, ks in ((CatMap.A_int, range(0, k_max + 1)), (CatMap.A_inv_int, range(0, k_min - 1, -1))):
            a, b = start
            for k in ks:
                if k != 0:
                    a, b = (M[0][0] * a + M[0][1] * b) % q, (M[1][0] * a + M[1][1] * b) % q
                if k_min <= k <= k_max:
                    out[k - k_min] = (a / q, b / q)
        return wrap(out)


class NorthSouthCircle(Model):
    """x -> x - a sin(2 pi x) on the circle: sink at 0, source at 1/2."""

    id = "north_south_circle"
    dim = 1
    wrap_each_step = False

    def __init__(self, a=0.1, w_radius=0.08, u_radius=0.15):
        super().__init__()
        if not 0 < a < 1 / (2 * math.pi):
            raise ValueError("amplitude must lie in (0, 1/(2 pi)) for a diffeomorphism")
        self.a = float(a)
        self.basic_sets = [
            BasicSet(1, "source", (0.5,), 0, 1, (0,), (), w_radius, u_radius),
            BasicSet(2, "sink", (0.0,), 1, 0, (), (0,), w_radius, u_radius),
        ]

    def params(self):
        return {"model": self.id, "a": self.a}

    def forward_lift(self, x):
        return x - self.a * np.sin(2 * np.pi * x)

    def inverse_lift(self, y):
        y = np.asarray(y, dtype=float)
        x = y.copy()
        for _ in range(60):
            g = x - self.a * np.sin(2 * np.pi * x) - y
            x = x - g / (1 - 2 * np.pi * self.a * np.cos(2 * np.pi * x))
            if np.all(np.abs(g) < 1e-17):
                break
        return x

    def derivative(self, x):
        return 1 - 2 * np.pi * self.a * np.cos(2 * np.pi * x)

    def jacobian(self, x):
        return self.derivative(np.asarray(x))[..., None]

    def splitting_at(self, x):
        label = self.basic_set_of(x, "U")
        if label is None:
            raise OutsideExtendedNeighborhood(x)
        one = np.ones((1, 1))
        none = np.zeros((0, 1))
        return (none, one) if label == 1 else (one, none)

    def expansion_rates(self):
        c = 2 * math.pi * self.a
        lam = max(1 - c, 1 / (1 + c))
        return lam, {1: {"unstable": 1 + c}, 2: {"stable": 1 - c}}

    def _chart(self, b, y):
        return displacement(np.array(b.point), y)

    def _unchart_lift(self, b, c):
        return np.array(b.point) + c


class GradientTorus(Model):
    """Time-t map of the gradient flow x' = 2 pi sin(2 pi x) per coordinate, by RK4.

    Fixed points: source (0,0), saddles (0,1/2) and (1/2,0), sink (1/2,1/2).
    Around each fixed point c the chart tan(pi (y - c)) / pi linearizes the
    exact flow, so the adapted frame contracts by exactly e^{-4 pi^2 t}.
    """

    id = "gradient_torus"
    dim = 2
    wrap_each_step = False

    def __init__(self, t=0.05, steps=200, w_radius=0.08, u_radius=0.15):
        super().__init__()
        self.t = float(t)
        self.steps = int(steps)
        self.basic_sets = [
            BasicSet(1, "source", (0.0, 0.0), 0, 2, (0, 1), (), w_radius, u_radius),
            BasicSet(2, "saddle_0_half", (0.0, 0.5), 1, 1, (0,), (1,), w_radius, u_radius),
            BasicSet(3, "saddle_half_0", (0.5, 0.0), 1, 1, (1,), (0,), w_radius, u_radius),
            BasicSet(4, "sink", (0.5, 0.5), 2, 0, (), (0, 1), w_radius, u_radius),
        ]

    def params(self):
        return {"model": self.id, "t": self.t, "steps": self.steps}

    def _flow(self, x, t, with_derivative=False):
        h = t / self.steps
        x = np.array(x, dtype=float)
        dx = np.ones_like(x)
        two_pi = 2 * np.pi
        for _ in range(self.steps):
            k1 = two_pi * np.sin(two_pi * x)
            x2 = x + 0.5 * h * k1
            k2 = two_pi * np.sin(two_pi * x2)
            x3 = x + 0.5 * h * k2
            k3 = two_pi * np.sin(two_pi * x3)
            x4 = x + h * k3
            k4 = two_pi * np.sin(two_pi * x4)
            if with_derivative:
                c = two_pi**2
                j1 = c * np.cos(two_pi * x) * dx
                j2 = c * np.cos(two_pi * x2) * (dx + 0.5 * h * j1)
                j3 = c * np.cos(two_pi * x3) * (dx + 0.5 * h * j2)
                j4 = c * np.cos(two_pi * x4) * (dx + h * j3)
                dx = dx + h / 6 * (j1 + 2 * j2 + 2 * j3 + j4)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return (x, dx) if with_derivative else x

    def forward_lift(self, x):
        return self._flow(x, self.t)

    def inverse_lift(self, y):
        # RK4 backwards is only an approximate inverse; polish with Newton
        # per coordinate against the forward map.
        y = np.asarray(y, dtype=float)
        x = self._flow(y, -self.t)
        for _ in range(4):
            fx, dfx = self._flow(x, self.t, with_derivative=True)
            x = x - (fx - y) / dfx
        return x

    def exact_flow(self, x, t=None):
        """Closed-form flow for the lift x in (-1/2, 1/2] per coordinate."""
        t = self.t if t is None else t
        x = np.asarray(x, dtype=float)
        x = x - np.round(x)
        return np.arctan(np.exp(4 * np.pi**2 * t) * np.tan(np.pi * x)) / np.pi

    def jacobian(self, x):
        _, d = self._flow(x, self.t, with_derivative=True)
        out = np.zeros(np.shape(x) + (2,))
        out[..., 0, 0] = d[..., 0]
        out[..., 1, 1] = d[..., 1]
        return out

    def splitting_at(self, x):
        label = self.basic_set_of(x, "U")
        if label is None:
            raise OutsideExtendedNeighborhood(x)
        b = self.basic_set(label)
        eye = np.eye(2)
        return eye[list(b.s_axes)].reshape(-1, 2), eye[list(b.u_axes)].reshape(-1, 2)

    def expansion_rates(self):
        lam = math.exp(-4 * math.pi**2 * self.t)
        return lam, {b.label: {"stable": lam if b.stable_dim else None,
                               "unstable": 1 / lam if b.unstable_dim else None}
                     for b in self.basic_sets}

    def _chart(self, b, y):
        return np.tan(np.pi * displacement(np.array(b.point), y)) / np.pi

    def _unchart_lift(self, b, c):
        return np.array(b.point) + np.arctan(np.pi * c) / np.pi


MODELS = {"cat": CatMap, "north_south_circle": NorthSouthCircle, "gradient_torus": GradientTorus}


def make_model(model_cfg):
    """Build a model from {"model": id, ...params} or a bare id string."""
    if isinstance(model_cfg, str):
        model_cfg = {"model": model_cfg}
    model_cfg = dict(model_cfg)
    name = model_cfg.pop("model", None)
    if name not in MODELS:
        raise UnknownModel(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    return MODELS[name](**model_cfg)
