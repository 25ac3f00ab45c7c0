"""Dwell/transit segmentation of pseudotrajectories and the basic-set connection graph."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .hyperbolic_local import embed, UNSTABLE
from .pseudotraj import generate


class InvalidInput(ValueError):
    pass


@dataclass
class Segmentation:
    """Witness data: dwell i covers absolute indices [l + t(i), l + tau(i)].

    taus[i] is tau(i+1) and ts[i] is t(i+2) in the one-based notation; the
    first dwell ends at the shift l (tau(1) = 0) and the last one runs to the
    end of the trajectory.
    """
    l: int
    labels: list
    taus: list
    ts: list
    L: float
    N: int
    s0: int
    d: float = 0.0
    k_min: int = 0
    k_max: int = 0

    @property
    def s_bar(self):
        return len(self.labels)

    def dwell(self, i):
        """Absolute index interval of dwell i (0-based), tails included."""
        start = self.k_min if i == 0 else self.l + self.ts[i - 1]
        end = self.k_max if i == self.s_bar - 1 else self.l + self.taus[i]
        return start, end

    def to_json(self):
        return {"l": self.l, "labels": list(self.labels), "t": list(self.ts), "tau": list(self.taus),
                "L": self.L, "N": self.N, "s0": self.s0, "d": self.d}


def _labels(model, xi):
    return [model.basic_set_of(p, "W") for p in xi.points]


def _runs(labels, k_min):
    runs = []
    for j, lab in enumerate(labels):
        if lab is None:
            continue
        if runs and runs[-1][0] == lab and runs[-1][2] == k_min + j - 1:
            runs[-1][2] += 1
        else:
            runs.append([lab, k_min + j, k_min + j])
    return [tuple(r) for r in runs]


def classify(xi, model, L, N, s0):
    """Greedy witness of membership in PT(L, N, s0, d), or None.

    Dwells are maximal runs of consecutive points in one W_i. Among chains of
    runs from the first index to the last with gaps at most L and interior
    runs of at least N steps, the shortest is returned, earliest runs first,
    with the earliest admissible shift l.
    """
    labels = _labels(model, xi)
    runs = _runs(labels, xi.k_min)
    if not runs or runs[0][1] != xi.k_min:
        return None
    k_max = xi.k_max
    n = len(runs)
    # breadth-first search over runs keeps the shortest chain; scanning
    # successors in index order makes it the earliest among those
    prev = {0: None}
    queue = deque([0])
    goal = None
    while queue:
        i = queue.popleft()
        if runs[i][2] == k_max:
            goal = i
            break
        for j in range(i + 1, n):
            if runs[j][1] - runs[i][2] > L:
                break
            is_last = runs[j][2] == k_max
            if not is_last and runs[j][2] - runs[j][1] < N:
                continue
            if j not in prev:
                prev[j] = i
                queue.append(j)
    if goal is None:
        return None
    chain = []
    while goal is not None:
        chain.append(goal)
        goal = prev[goal]
    chain.reverse()
    if len(chain) > s0:
        return None
    sel = [runs[i] for i in chain]
    if len(sel) == 1:
        return Segmentation(xi.k_min, [sel[0][0]], [], [], L, N, s0, xi.d, xi.k_min, xi.k_max)
    l = max(xi.k_min, sel[1][1] - int(np.floor(L)))
    taus = [0] + [r[2] - l for r in sel[1:-1]]
    ts = [r[1] - l for r in sel[1:]]
    return Segmentation(l, [r[0] for r in sel], taus, ts, L, N, s0, xi.d, xi.k_min, xi.k_max)


def validate_segmentation(seg, xi, model, L=None, N=None, s0=None):
    """Independent check of every witness condition; returns (ok, problems)."""
    L = seg.L if L is None else L
    N = seg.N if N is None else N
    s0 = seg.s0 if s0 is None else s0
    problems = []
    sb = len(seg.labels)
    if sb < 1 or sb > s0:
        problems.append(f"segment count {sb} outside 1..{s0}")
    if len(seg.taus) != max(sb - 1, 0) or len(seg.ts) != max(sb - 1, 0):
        problems.append("taus/ts lengths must equal s_bar - 1")
        return False, problems
    if sb > 1 and seg.taus[0] != 0:
        problems.append("tau(1) must be 0")
    # ordering 0 = tau(1) < t(2) <= tau(2) < ... < t(s_bar)
    for i in range(sb - 1):
        t_next = seg.ts[i]
        if not seg.taus[i] < t_next:
            problems.append(f"tau({i + 1}) < t({i + 2}) violated")
        gap = t_next - seg.taus[i]
        if not 0 < gap <= L:
            problems.append(f"gap {gap} after dwell {i + 1} outside (0, {L}]")
        if i + 1 < sb - 1:
            if not t_next <= seg.taus[i + 1]:
                problems.append(f"t({i + 2}) <= tau({i + 2}) violated")
            if seg.taus[i + 1] - t_next < N:
                problems.append(f"dwell {i + 2} shorter than {N}")
    # membership of dwells and tails
    for i in range(sb):
        start = xi.k_min if i == 0 else seg.l + seg.ts[i - 1]
        end = xi.k_max if i == sb - 1 else seg.l + seg.taus[i]
        if sb == 1:
            start, end = xi.k_min, xi.k_max
        if start < xi.k_min or end > xi.k_max:
            problems.append(f"dwell {i + 1} leaves the index range")
            continue
        b = model.basic_set(seg.labels[i])
        pts = xi.points[start - xi.k_min:end - xi.k_min + 1]
        if not np.all(b.contains(pts, "W")):
            problems.append(f"dwell {i + 1} leaves W_{seg.labels[i]}")
    return not problems, problems


def induction_refine(seg, N):
    """Drop interior dwells of length <= N, trading them for a longer transit bound.

    The result is a witness for (L', 1, s0 - 1) with L' = (s0-1) L + (s0-2) N.
    When every interior dwell already exceeds N the input is returned with
    its dwell bound raised to N + 1.
    """
    sb = len(seg.labels)
    if sb < 1 or len(seg.taus) != max(sb - 1, 0) or len(seg.ts) != max(sb - 1, 0):
        raise InvalidInput("malformed segmentation")
    if sb > 1 and seg.taus[0] != 0:
        raise InvalidInput("tau(1) must be 0")
    for i in range(sb - 1):
        if not seg.taus[i] < seg.ts[i] or seg.ts[i] - seg.taus[i] > seg.L:
            raise InvalidInput("ordering or gap condition fails")
        if i + 1 < sb - 1 and seg.taus[i + 1] < seg.ts[i]:
            raise InvalidInput("dwell interval reversed")
    interior = range(1, sb - 1)
    short = [i for i in interior if seg.taus[i] - seg.ts[i - 1] <= N]
    if not short:
        return Segmentation(seg.l, list(seg.labels), list(seg.taus), list(seg.ts), seg.L, N + 1,
                            seg.s0, seg.d, seg.k_min, seg.k_max)
    if seg.s0 < 2:
        raise InvalidInput("s0 must be at least 2 to drop a dwell")
    keep = [0] + [i for i in interior if i not in short] + [sb - 1]
    taus = [seg.taus[i] for i in keep[:-1]]
    ts = [seg.ts[i - 1] for i in keep[1:]]
    L2 = (seg.s0 - 1) * seg.L + (seg.s0 - 2) * N
    return Segmentation(seg.l, [seg.labels[i] for i in keep], taus, ts, L2, 1, seg.s0 - 1,
                        seg.d, seg.k_min, seg.k_max)


def excursion_lengths(model, xi):
    """Lengths of the maximal runs of points outside every W_i."""
    out, run = [], 0
    for lab in _labels(model, xi):
        if lab is None:
            run += 1
        elif run:
            out.append(run)
            run = 0
    if run:
        out.append(run)
    return out


def birkhoff_constant(model, d, trials=50, horizon=300, rng_seed=0):
    """Twice the longest sampled stay outside the union of the W_i."""
    rng = np.random.default_rng(rng_seed)
    longest = 0
    for _ in range(trials):
        x0 = rng.random(model.dim)
        seed = int(rng.integers(2**31))
        xi = generate(model, x0, 0, horizon, d, seed)
        longest = max([longest] + excursion_lengths(model, xi))
    return 2.0 * longest


@dataclass
class ConnectionDigraph:
    nodes: list
    edges: set = field(default_factory=set)
    witnesses: dict = field(default_factory=dict)

    def successors(self, u):
        return sorted(v for a, v in self.edges if a == u)

    def to_json(self):
        return {"nodes": list(self.nodes), "edges": sorted(map(list, self.edges)),
                "witnesses": {f"{a}->{b}": list(map(float, w)) for (a, b), w in self.witnesses.items()}}


def connection_digraph(model, samples=32, rng_seed=0, horizon=1000, radius=1e-3):
    """Edges i -> j found by pushing points of the local unstable manifold of i."""
    rng = np.random.default_rng(rng_seed)
    g = ConnectionDigraph([b.label for b in model.basic_sets])
    for b in model.basic_sets:
        if b.whole or b.unstable_dim == 0:
            continue
        k = b.unstable_dim
        dirs = [v for e in np.eye(k) for v in (e, -e)]
        if k > 1:
            dirs += list(rng.normal(size=(samples, k)))
        dirs = np.array([v / np.linalg.norm(v) for v in dirs])
        p = np.array(b.point)
        starts = model.from_local(b.label, np.tile(p, (len(dirs), 1)), embed(model, b.label, radius * dirs, UNSTABLE))
        back = starts.copy()
        for _ in range(50):
            back = model.inverse(back)
        x = starts.copy()
        for _ in range(horizon):
            x = model.forward(x)
        for s, bk, end in zip(starts, back, x):
            if not b.contains(bk, "W"):
                continue
            j = model.basic_set_of(end, "W")
            if j is not None and j != b.label:
                g.edges.add((b.label, j))
                g.witnesses.setdefault((b.label, j), s)
    return g


def has_cycle(g):
    """A directed cycle as a node list, or None."""
    state = {}
    adj = {u: [] for u in g.nodes}
    for a, b in g.edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, [])
    for u in adj:
        adj[u].sort()
    stack = []

    def visit(u):
        state[u] = "gray"
        stack.append(u)
        for v in adj[u]:
            if state.get(v) == "gray":
                return stack[stack.index(v):]
            if v not in state:
                found = visit(v)
                if found:
                    return found
        state[u] = "black"
        stack.pop()
        return None

    for u in sorted(adj):
        if u not in state:
            found = visit(u)
            if found:
                return list(found)
    return None


def topological_order(g):
    """Kahn order of the nodes; raises ValueError on a cycle."""
    indeg = {u: 0 for u in g.nodes}
    for _, b in g.edges:
        indeg[b] += 1
    ready = sorted(u for u, c in indeg.items() if c == 0)
    out = []
    while ready:
        u = ready.pop(0)
        out.append(u)
        for v in g.successors(u):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
                ready.sort()
    if len(out) != len(g.nodes):
        raise ValueError("graph has a cycle")
    return out
