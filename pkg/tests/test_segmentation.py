import numpy as np
import pytest
from hypothesis import given, strategies as st

from shadowlab.models import NorthSouthCircle
from shadowlab.pseudotraj import craft_transition, generate
from shadowlab.segmentation import (ConnectionDigraph, InvalidInput, Segmentation, birkhoff_constant,
                                    classify, connection_digraph, excursion_lengths, has_cycle,
                                    induction_refine, topological_order, validate_segmentation)

from oracles import check_witness, segmentations_brute
from segment_fixtures import LabelLine, label_xi, random_witness


def _labels_at(labels, k_min=0):
    return lambda k: labels[k - k_min]


def test_single_neighborhood_is_one_segment(nsc):
    xi = generate(nsc, [0.01], 0, 50, 1e-3, 0)
    assert np.all(nsc.basic_set(2).contains(xi.points))
    seg = classify(xi, nsc, 5, 10, 3)
    assert seg.s_bar == 1 and seg.labels == [2]
    assert validate_segmentation(seg, xi, nsc)[0]


def test_source_to_sink_two_segments(nsc):
    xi = craft_transition(nsc, 1, 2, 20, 1e-3)
    seg = classify(xi, nsc, 10, 15, 2)
    assert seg.s_bar == 2 and seg.labels == [1, 2]
    labels = [nsc.basic_set_of(p) for p in xi.points]
    brute = segmentations_brute(labels, 10, 15, 2)
    assert brute and min(len(w) for w in brute) == 2
    assert check_witness(seg, _labels_at(labels), xi.k_min, xi.k_max, 10, 15, 2) == []


def test_source_to_sink_ignores_dwell_bound(nsc):
    # two dwells have no interior one, so the dwell bound never applies
    xi = craft_transition(nsc, 1, 2, 20, 1e-3)
    labels = [nsc.basic_set_of(p) for p in xi.points]
    seg = classify(xi, nsc, 10, 25, 2)
    assert seg is not None and seg.s_bar == 2
    assert segmentations_brute(labels, 10, 25, 2)


def test_transit_longer_than_L_fails(nsc):
    xi = craft_transition(nsc, 1, 2, 20, 1e-3)
    gap = excursion_lengths(nsc, xi)[0]
    assert classify(xi, nsc, gap + 1, 1, 2) is not None
    assert classify(xi, nsc, gap, 1, 2) is None


def test_cat_is_one_segment(cat):
    xi = generate(cat, [0.2, 0.7], 0, 200, 1e-4, 1)
    assert classify(xi, cat, 1, 1, 1).s_bar == 1


def test_interior_dwell_bound():
    labels = [1] * 3 + [None] * 2 + [2] * 4 + [None] + [3] * 3
    xi = label_xi(labels)
    model = LabelLine()
    assert classify(xi, model, 3, 3, 3).labels == [1, 2, 3]
    assert classify(xi, model, 3, 4, 3) is None
    # a long enough jump skips the short dwell
    assert classify(xi, model, 7, 4, 3) is None
    assert classify(xi, model, 8, 4, 3).labels == [1, 3]


def test_too_many_segments():
    labels = [1, None, 2, 2, None, 3, 3, None, 4]
    xi = label_xi(labels)
    assert classify(xi, LabelLine(), 2, 1, 4).s_bar == 4
    assert classify(xi, LabelLine(), 2, 1, 3) is None


def test_starting_outside_fails():
    assert classify(label_xi([None, 1, 1]), LabelLine(), 5, 1, 3) is None


def test_validate_reports_problems():
    labels = [1] * 3 + [None] * 2 + [2] * 4
    xi = label_xi(labels)
    seg = classify(xi, LabelLine(), 5, 1, 2)
    assert validate_segmentation(seg, xi, LabelLine())[0]
    ok, problems = validate_segmentation(seg, xi, LabelLine(), L=1)
    assert not ok and any("gap" in p for p in problems)
    bad = Segmentation(seg.l, [1, 3], seg.taus, seg.ts, 5, 1, 2, k_min=0, k_max=8)
    ok, problems = validate_segmentation(bad, xi, LabelLine())
    assert not ok and any("leaves W_3" in p for p in problems)


def test_negative_index_range():
    labels = [1] * 4 + [None] + [2] * 3
    xi = label_xi(labels, k_min=-4)
    seg = classify(xi, LabelLine(), 2, 1, 2)
    assert seg.labels == [1, 2] and seg.l >= -4
    assert check_witness(seg, _labels_at(labels, -4), -4, 3, 2, 1, 2) == []


label_seq = st.lists(st.one_of(st.none(), st.integers(1, 3)), min_size=1, max_size=14)


@given(label_seq, st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
def test_classify_matches_brute_force(labels, L, N, s0):
    xi = label_xi(labels)
    seg = classify(xi, LabelLine(), L, N, s0)
    brute = segmentations_brute(labels, L, N, s0)
    assert (seg is not None) == bool(brute)
    if seg is not None:
        assert seg.s_bar == min(len(w) for w in brute)
        assert check_witness(seg, _labels_at(labels), 0, len(labels) - 1, L, N, s0) == []
        assert validate_segmentation(seg, xi, LabelLine())[0]


@given(label_seq, st.integers(1, 4), st.integers(1, 6), st.integers(1, 2))
def test_small_s0_independent_of_dwell_bound(labels, L, N, s0):
    xi = label_xi(labels)
    a = classify(xi, LabelLine(), L, N, s0)
    b = classify(xi, LabelLine(), L, 1, s0)
    assert (a is None) == (b is None)


def test_induction_bound_example():
    seg = Segmentation(0, [1, 2, 3, 4, 1], [0, 5, 7, 13], [2, 6, 10, 15], 5, 3, 4, k_min=0, k_max=20)
    out = induction_refine(seg, 3)
    # L' = (s0 - 1) L + (s0 - 2) N
    assert out.L == 3 * 5 + 2 * 3 == 21
    assert out.N == 1 and out.s0 == 3


def test_induction_identity_when_dwells_long():
    seg = Segmentation(0, [1, 2, 3], [0, 12], [3, 15], 5, 3, 3, k_min=0, k_max=20)
    out = induction_refine(seg, 4)
    assert out.labels == seg.labels and out.taus == seg.taus and out.ts == seg.ts
    assert out.N == 5 and out.L == 5 and out.s0 == 3


def test_induction_rejects_bad_input():
    with pytest.raises(InvalidInput):
        induction_refine(Segmentation(0, [1, 2], [1], [3], 5, 1, 2), 1)
    with pytest.raises(InvalidInput):
        induction_refine(Segmentation(0, [1, 2], [0], [9], 5, 1, 2), 1)
    with pytest.raises(InvalidInput):
        induction_refine(Segmentation(0, [1, 2, 3], [0, 2], [4], 5, 1, 3), 1)


def test_induction_random_witnesses():
    rng = np.random.default_rng(2024)
    model = LabelLine()
    for _ in range(1000):
        N = int(rng.integers(1, 6))
        seq, seg = random_witness(rng, N)
        xi = label_xi(seq, seg.k_min)
        at = _labels_at(seq, seg.k_min)
        assert check_witness(seg, at, seg.k_min, seg.k_max, seg.L, seg.N, seg.s0) == []
        out = induction_refine(seg, N)
        L2 = (seg.s0 - 1) * seg.L + (seg.s0 - 2) * N
        assert out.L == L2
        assert check_witness(out, at, seg.k_min, seg.k_max, L2, 1, seg.s0 - 1) == []
        assert validate_segmentation(out, xi, model, L2, 1, seg.s0 - 1)[0]


@given(label_seq, st.integers(1, 4), st.integers(1, 3), st.integers(2, 5))
def test_refine_classified_validates(labels, L, N, s0):
    xi = label_xi(labels)
    seg = classify(xi, LabelLine(), L, 1, s0)
    if seg is None:
        return
    out = induction_refine(seg, N)
    if out.N == N + 1:
        assert validate_segmentation(out, xi, LabelLine())[0]
    else:
        L2 = (s0 - 1) * L + (s0 - 2) * N
        assert validate_segmentation(out, xi, LabelLine(), L2, 1, s0 - 1)[0]


def test_birkhoff_never_leaving(nsc):
    # a model whose W covers everything has no excursions
    class Whole:
        dim = 1
        id = "whole"
        basic_sets = []

        def basic_set_of(self, x, which="W"):
            return 1

        def forward(self, x):
            return nsc.forward(x)

    assert birkhoff_constant(Whole(), 1e-3, trials=5, horizon=20) == 0.0


def test_birkhoff_matches_noiseless_transit(nsc):
    # iterate the noiseless map from just outside the source neighborhood
    x = np.array([0.5 - nsc.basic_set(1).w_radius - 1e-9])
    steps = 0
    while nsc.basic_set_of(x) is None:
        x = nsc.forward(x)
        steps += 1
    assert abs(birkhoff_constant(nsc, 1e-3) - 2 * steps) <= 2


def test_birkhoff_monotone_in_radius():
    values = [birkhoff_constant(NorthSouthCircle(w_radius=w), 1e-3) for w in (0.05, 0.08, 0.12)]
    assert values[0] >= values[1] >= values[2]


def test_digraph_nsc(nsc):
    g = connection_digraph(nsc)
    assert g.edges == {(1, 2)}


def test_digraph_gradient(gt):
    g = connection_digraph(gt)
    assert g.edges == {(1, 2), (1, 3), (2, 4), (3, 4), (1, 4)}
    assert topological_order(g) == [1, 2, 3, 4]
    assert has_cycle(g) is None


def test_digraph_cat(cat):
    g = connection_digraph(cat)
    assert g.edges == set() and has_cycle(g) is None


def test_synthetic_cycle():
    g = ConnectionDigraph([1, 2, 3], {(1, 2), (2, 3), (3, 1)})
    assert has_cycle(g) == [1, 2, 3]
    with pytest.raises(ValueError):
        topological_order(g)


def test_empty_graph():
    assert has_cycle(ConnectionDigraph([])) is None
    assert topological_order(ConnectionDigraph([])) == []


@given(st.sets(st.tuples(st.integers(1, 6), st.integers(1, 6)), max_size=12))
def test_cycle_detection_matches_topological_sort(edges):
    edges = {(a, b) for a, b in edges if a != b}
    g = ConnectionDigraph([1, 2, 3, 4, 5, 6], edges)
    cyc = has_cycle(g)
    if cyc is None:
        order = topological_order(g)
        pos = {u: i for i, u in enumerate(order)}
        assert all(pos[a] < pos[b] for a, b in edges)
    else:
        loop = cyc + cyc[:1]
        assert all((a, b) in edges for a, b in zip(loop[:-1], loop[1:]))
