from __future__ import annotations

import numpy as np
import pytest

from gridblocks.errors import BridgeOutageError, ControlError, CutSetError, UndefinedRatioError
from gridblocks.factors import (
    CYCLE_BLOCKED,
    UNKNOWN,
    ZERO_CERTIFIED,
    bridge_outage_lodf,
    cutset_flow_change,
    glodf,
    glodf_from_submatrix,
    influence_graph,
    island_imbalance,
    island_imbalance_from_flows,
    lodf,
    lodf_from_resistance,
    lodf_matrix,
    lodf_submatrix,
    ptdf_forest_matrix,
    ptdf_matrix,
    ptdf_pair,
    zero_glodf_conditions,
    zero_ptdf_by_cycle,
)
from gridblocks.graphs import block_decomposition, bridges_and_bridge_blocks, enumerate_two_tree_forests
from gridblocks.graphs import network_spanning_trees
from gridblocks.spectral import build_system, dc_flow, effective_resistance

from conftest import (
    balanced,
    cutset_scenario,
    grounded_flows,
    island_resolve,
    make_net,
    non_cut_outage,
    random_connected,
    two_triangles,
)

TRIANGLE = [(0, 1), (1, 2), (2, 0)]
# C4 on 1..4 plus chord (1,3), written 0-based; lines 0..4
DIAMOND = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]


def unit_shift_flows(net, s, t):
    p = np.zeros(net.n)
    p[s] += 1.0
    p[t] -= 1.0
    return grounded_flows(net, p)


def resolve_change(net, outage, p):
    """Flow change on survivors from two direct solves."""
    before = grounded_flows(net, p)
    after_net = net.without_lines(outage)
    after = grounded_flows(after_net, p)
    return np.array([after[k] - before[net.position(ln.id)] for k, ln in enumerate(after_net.lines)])


# PTDF -------------------------------------------------------------------------

def test_ptdf_same_bus_is_zero():
    net = make_net(TRIANGLE)
    assert ptdf_pair(build_system(net), net, 0, 2, 2) == 0.0


def test_ptdf_bridge_endpoints_is_one():
    net = two_triangles()
    assert ptdf_pair(build_system(net), net, 6, 2, 3) == pytest.approx(1.0, abs=1e-12)


def test_ptdf_unit_triangle_matches_forest_ratio():
    net = make_net(TRIANGLE)
    d = ptdf_pair(build_system(net), net, 0, 0, 1)
    # b (F({i,s},{j,t}) - F({i,t},{j,s})) / trees with i=s=0, j=t=1
    forests = len(list(enumerate_two_tree_forests(net, {0}, {1})))
    trees = len(list(network_spanning_trees(net)))
    assert d == pytest.approx(forests / trees) == pytest.approx(2 / 3)
    assert ptdf_matrix(build_system(net), net).diagonal == pytest.approx([2 / 3] * 3)


def test_ptdf_tree_network_by_path_membership(rng):
    net = random_connected(rng, 8, 0)
    D = ptdf_matrix(build_system(net), net)
    for c, lh in enumerate(net.lines):
        col = unit_shift_flows(net, lh.from_bus, lh.to_bus)
        assert np.allclose(D.values[:, c], col, atol=1e-12)
        assert set(np.round(col, 12)) <= {-1.0, 0.0, 1.0}
    assert D.diagonal == pytest.approx(np.ones(net.m))


def test_ptdf_columns_match_unit_shift_resolve(rng):
    for _ in range(20):
        net = random_connected(rng, int(rng.integers(2, 9)), int(rng.integers(0, 6)))
        D = ptdf_matrix(build_system(net), net)
        for c, lh in enumerate(net.lines):
            assert np.allclose(D.values[:, c], unit_shift_flows(net, lh.from_bus, lh.to_bus), atol=1e-10)


def test_ptdf_forest_formula_small(rng):
    for _ in range(15):
        net = random_connected(rng, int(rng.integers(2, 7)), int(rng.integers(0, 4)))
        D = ptdf_matrix(build_system(net), net).values
        assert np.abs(D - ptdf_forest_matrix(net).values).max() < 1e-9


def test_ptdf_diagonal_is_one_minus_tree_ratio(rng):
    for _ in range(15):
        net = random_connected(rng, int(rng.integers(2, 7)), int(rng.integers(0, 4)))
        diag = ptdf_matrix(build_system(net), net).diagonal
        b = {ln.id: ln.susceptance for ln in net.lines}
        trees = [np.prod([b[e] for e in T]) for T in network_spanning_trees(net)]
        all_trees = list(network_spanning_trees(net))
        for k, ln in enumerate(net.lines):
            without = sum(w for w, T in zip(trees, all_trees) if ln.id not in T)
            assert diag[k] == pytest.approx(1 - without / sum(trees), abs=1e-10)


def test_ptdf_diagonal_equals_b_times_resistance(rng):
    for _ in range(20):
        net = random_connected(rng, int(rng.integers(2, 12)), int(rng.integers(0, 8)))
        sys = build_system(net)
        diag = ptdf_matrix(sys, net).diagonal
        for k, ln in enumerate(net.lines):
            assert diag[k] == pytest.approx(ln.susceptance * effective_resistance(sys, ln.from_bus, ln.to_bus), abs=1e-12)
            assert 0 < diag[k] <= 1 + 1e-12


def test_bridge_iff_unit_diagonal(rng):
    for _ in range(20):
        net = random_connected(rng, int(rng.integers(2, 12)), int(rng.integers(0, 5)))
        diag = ptdf_matrix(build_system(net), net).diagonal
        bridges = bridges_and_bridge_blocks(net).bridges
        for k, ln in enumerate(net.lines):
            assert (abs(diag[k] - 1) < 1e-9) == (ln.id in bridges)


def test_ptdf_disconnected_cross_entries_zero():
    net = make_net([(0, 1), (1, 2), (2, 0), (3, 4)])
    D = ptdf_matrix(build_system(net), net).values
    assert not D[:3, 3].any() and not D[3, :3].any()
    assert D[3, 3] == pytest.approx(1.0)


def test_ptdf_independent_of_injections(rng):
    net = random_connected(rng, 9, 6)
    sys = build_system(net)
    D0 = ptdf_matrix(sys, net).values.copy()
    for _ in range(10):
        dc_flow(sys, net, balanced(rng, net))
        assert np.array_equal(ptdf_matrix(sys, net).values, D0)


def test_zero_ptdf_by_cycle_certificates():
    net = two_triangles()
    bd = block_decomposition(net)
    D = ptdf_matrix(build_system(net), net)
    assert zero_ptdf_by_cycle(bd, 6, 0)
    assert not zero_ptdf_by_cycle(bd, 0, 1)
    assert zero_ptdf_by_cycle(bd, 0, 3)
    assert abs(D[0, 3]) < 1e-9 and abs(D[3, 0]) < 1e-9


def test_zero_ptdf_certificate_sound(rng):
    for _ in range(30):
        net = random_connected(rng, int(rng.integers(3, 10)), int(rng.integers(0, 4)))
        bd = block_decomposition(net)
        D = ptdf_matrix(build_system(net), net)
        for a in net.line_ids:
            for c in net.line_ids:
                if a != c and zero_ptdf_by_cycle(bd, int(a), int(c)):
                    assert abs(D[int(a), int(c)]) < 1e-9


# single-line outages -------------------------------------------------------------

def test_lodf_unit_triangle():
    net = make_net(TRIANGLE)
    sys = build_system(net)
    for out in range(3):
        for ln in range(3):
            if ln != out:
                assert abs(lodf(sys, net, ln, out)) == pytest.approx(1.0)
    assert lodf(sys, net, 0, 0) == -1.0


def test_lodf_shared_source_positive():
    # lines 0 = (0,1) and 2 = (0,2) leave the same bus
    net = make_net([(0, 1), (1, 2), (0, 2)])
    assert lodf(build_system(net), net, 2, 0) > 0


def test_lodf_across_blocks_zero():
    net = two_triangles()
    sys = build_system(net)
    assert abs(lodf(sys, net, 4, 0)) < 1e-9


def test_lodf_bridge_outage_rejected():
    net = two_triangles()
    with pytest.raises(BridgeOutageError):
        lodf(build_system(net), net, 0, 6)


def test_lodf_matches_resolve_and_resistance_form(rng):
    for _ in range(30):
        net = random_connected(rng, int(rng.integers(3, 10)), int(rng.integers(1, 6)))
        sys = build_system(net)
        p = balanced(rng, net)
        f = grounded_flows(net, p)
        bridges = bridges_and_bridge_blocks(net).bridges
        for out in net.line_ids:
            out = int(out)
            if out in bridges:
                continue
            df = resolve_change(net, [out], p)
            survivors = [int(e) for e in net.line_ids if e != out]
            for k, ln in enumerate(survivors):
                K = lodf(sys, net, ln, out)
                assert K * f[net.position(out)] == pytest.approx(df[k], abs=1e-8)
                assert lodf_from_resistance(sys, net, ln, out) == pytest.approx(K, abs=1e-9)


def test_single_outage_zero_ptdf_iff_zero_lodf(rng):
    for _ in range(20):
        net = random_connected(rng, int(rng.integers(3, 10)), int(rng.integers(0, 4)))
        sys = build_system(net)
        D = ptdf_matrix(sys, net).values
        K, is_bridge = lodf_matrix(sys, net)
        for c in range(net.m):
            if is_bridge[c]:
                continue
            for r in range(net.m):
                if r != c:
                    assert (abs(D[r, c]) < 1e-9) == (abs(K[r, c]) < 1e-9)


# multiple-line outages ---------------------------------------------------------------

def test_glodf_single_outage_equals_lodf(rng):
    net = random_connected(rng, 8, 5)
    sys = build_system(net)
    out = non_cut_outage(rng, net, 1)[0]
    G = glodf(sys, net, [out])
    for ln in G.survivors:
        assert G[ln, out] == pytest.approx(lodf(sys, net, ln, out), abs=1e-12)


def test_glodf_diamond_matches_resolve():
    net = make_net(DIAMOND)
    sys = build_system(net)
    E = [0, 4]  # (1,2) and (1,3) in one-based labels
    G = glodf(sys, net, E)
    for s, t in [(0, 2), (1, 3), (0, 1)]:
        p = np.zeros(4)
        p[s], p[t] = 1.0, -1.0
        f = grounded_flows(net, p)
        assert np.allclose(G.flow_change(f[E]), resolve_change(net, E, p), atol=1e-12)
    single = lodf_submatrix(sys, net, E).values
    assert np.abs(single - G.values).max() > 1e-3


def test_glodf_matches_resolve_random(rng):
    done = 0
    while done < 40:
        net = random_connected(rng, int(rng.integers(3, 10)), int(rng.integers(2, 7)))
        E = non_cut_outage(rng, net, int(rng.integers(1, 4)))
        if E is None:
            continue
        sys = build_system(net)
        p = balanced(rng, net)
        f = grounded_flows(net, p)
        G = glodf(sys, net, E)
        want = resolve_change(net, E, p)
        assert np.allclose(G.flow_change(f[[net.position(e) for e in E]]), want, rtol=1e-8, atol=1e-9)
        if all(abs(ptdf_matrix(sys, net)[e, e] - 1) > 1e-9 for e in E):
            assert np.abs(glodf_from_submatrix(sys, net, E) - G.values).max() < 1e-9
        done += 1


def test_glodf_block_diagonal():
    net = make_net(DIAMOND + [(2, 4), (4, 5), (5, 6), (6, 4)])
    G = glodf(build_system(net), net, [0, 4])
    for ln in (5, 6, 7, 8):
        assert abs(G[ln, 0]) < 1e-9 and abs(G[ln, 4]) < 1e-9


def test_glodf_columns_are_lodfs_of_reduced_network(rng):
    net = make_net(DIAMOND)
    E = [0, 4]
    G = glodf(build_system(net), net, E)
    for out in E:
        rest = net.without_lines([e for e in E if e != out])
        sys_r = build_system(rest)
        for ln in G.survivors:
            assert G[ln, out] == pytest.approx(lodf(sys_r, rest, ln, out), abs=1e-12)


def test_glodf_cut_set_rejected():
    net = two_triangles()
    with pytest.raises(CutSetError) as exc:
        glodf(build_system(net), net, [6])
    assert sorted(map(sorted, exc.value.islands)) == [[0, 1, 2], [3, 4, 5]]


def test_lodf_submatrix_rejects_bridge():
    net = two_triangles()
    with pytest.raises(BridgeOutageError):
        lodf_submatrix(build_system(net), net, [0, 6])


# cut sets ------------------------------------------------------------------------

def test_island_imbalance_examples():
    net = make_net([(0, 1), (1, 2)])
    p = [1.0, 0.0, -1.0]
    f = grounded_flows(net, p)
    assert island_imbalance(net, p, [0], [1, 2]) == pytest.approx(-1.0)
    assert island_imbalance_from_flows(net, f, [0], [1, 2]) == pytest.approx(-1.0)
    assert island_imbalance(net, p, [0], [0]) == pytest.approx(1.0)
    assert island_imbalance_from_flows(net, f, [0], [0]) == pytest.approx(1.0)
    q = [0.0, 1.0, -1.0]
    assert island_imbalance_from_flows(net, grounded_flows(net, q), [0], [1, 2]) == 0.0
    with pytest.raises(CutSetError):
        island_imbalance(net, p, [0], [0, 1])


def test_island_imbalance_two_expressions_agree(rng):
    for _ in range(30):
        net, island, internal, ties, _, p = cutset_scenario(rng)
        f = grounded_flows(net, p)
        E = internal + ties
        assert island_imbalance(net, p, E, island) == pytest.approx(island_imbalance_from_flows(net, f, E, island), abs=1e-8)


def test_cutset_path_example():
    net = make_net([(0, 1), (1, 2)])
    p = [1.0, 0.0, -1.0]
    change = cutset_flow_change(net, [1, 2], [], [0], {2: 1.0}, grounded_flows(net, p))
    assert change.as_dict() == pytest.approx({1: -1.0})


def test_cutset_without_ties_is_glodf(rng):
    net = random_connected(rng, 7, 5)
    E = non_cut_outage(rng, net, 2)
    p = balanced(rng, net)
    f = grounded_flows(net, p)
    alpha = np.full(net.n, 1 / net.n)
    change = cutset_flow_change(net, list(range(net.n)), E, [], alpha, f)
    G = glodf(build_system(net), net, E)
    assert np.allclose(change.delta, G.flow_change(f[[net.position(e) for e in E]]), atol=1e-12)


def test_cutset_opposite_ties_matches_resolve():
    # island {1,2,3} (path) attached to bus 0 by two ties with opposite flows
    net = make_net([(0, 1), (1, 2), (2, 3), (0, 3)])
    p = [0.0, 1.0, 0.0, -1.0]
    f = grounded_flows(net, p)
    alpha = {1: 0.3, 2: 0.7}
    change = cutset_flow_change(net, [1, 2, 3], [], [0, 3], alpha, f)
    want = island_resolve(net, [1, 2, 3], [], [0, 3], [0, 0.3, 0.7, 0], p)
    assert change.as_dict() == pytest.approx(want, abs=1e-12)


def test_cutset_matches_island_resolve(rng):
    for _ in range(40):
        net, island, internal, ties, alpha, p = cutset_scenario(rng)
        change = cutset_flow_change(net, island, internal, ties, alpha, grounded_flows(net, p))
        want = island_resolve(net, island, internal, ties, alpha, p)
        got = change.as_dict()
        assert got.keys() == want.keys()
        for e in want:
            assert got[e] == pytest.approx(want[e], rel=1e-8, abs=1e-9)


def test_cutset_errors():
    net = make_net([(0, 1), (1, 2)])
    f = grounded_flows(net, [1.0, 0.0, -1.0])
    with pytest.raises(ControlError):
        cutset_flow_change(net, [1, 2], [], [0], {2: 0.5}, f)
    with pytest.raises(CutSetError):
        cutset_flow_change(net, [1, 2], [1], [0], {2: 1.0}, f)


def test_bridge_outage_lodf_examples():
    # 0 -b- 1 - 2 - 3 with pendant 2 - 4
    net = make_net([(0, 1), (1, 2), (2, 3), (2, 4)])
    p = [1.0, 0.0, 0.0, -1.0, 0.0]
    f = grounded_flows(net, p)
    assert bridge_outage_lodf(net, 1, 0, {3: 1.0}, f) == pytest.approx(-1.0)
    assert bridge_outage_lodf(net, 2, 0, {3: 1.0}, f) == pytest.approx(-1.0)
    assert bridge_outage_lodf(net, 3, 0, {3: 1.0}, f) == pytest.approx(0.0, abs=1e-12)
    for ln in (1, 2, 3):
        assert bridge_outage_lodf(net, ln, 0, {1: 1.0}, f) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(UndefinedRatioError):
        bridge_outage_lodf(net, 1, 0, {3: 1.0}, np.zeros(4))


def test_bridge_outage_lodf_matches_resolve(rng):
    for _ in range(20):
        net = random_connected(rng, int(rng.integers(3, 9)), int(rng.integers(0, 3)))
        bridges = sorted(bridges_and_bridge_blocks(net).bridges)
        if not bridges:
            continue
        br = int(rng.choice(bridges))
        islands = net.without_lines([br]).islands()
        p = balanced(rng, net)
        f = grounded_flows(net, p)
        for I in islands:
            alpha = np.zeros(net.n)
            alpha[I] = 1 / len(I)
            want = island_resolve(net, I, [], [br], alpha, p)
            for e, d in want.items():
                assert bridge_outage_lodf(net, e, br, alpha, f) * f[net.position(br)] == pytest.approx(d, abs=1e-9)


# localization ------------------------------------------------------------------------

def test_influence_graph_threshold_above_max_is_edgeless(rng):
    net = random_connected(rng, 8, 6)
    sys = build_system(net)
    K, _ = lodf_matrix(sys, net)
    A = np.abs(np.nan_to_num(K))
    np.fill_diagonal(A, 0)
    assert influence_graph(sys, net, float(A.max()) + 1e-9).edges == ()


def test_influence_graph_respects_bridge():
    net = two_triangles()
    ig = influence_graph(build_system(net), net, 1e-6)
    left, right = {0, 1, 2}, {3, 4, 5}
    for a, c in ig.edges:
        assert not ({a, c} & left and {a, c} & right)
        assert 6 not in (a, c)
    assert sorted(ig.nontrivial_components()) == [[0, 1, 2], [3, 4, 5]]


def test_zero_glodf_tristate():
    net = two_triangles()
    assert zero_glodf_conditions(net, [0, 1], 4, 0) == ZERO_CERTIFIED
    k4 = make_net([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
    G = glodf(build_system(k4), k4, [0])
    assert zero_glodf_conditions(k4, [0], 1, 0) == UNKNOWN
    assert abs(G[1, 0]) > 1e-3


def test_cycle_blocked_instance():
    # a=0 b=1 c=2 d=3 e=4; outaged (a,b); every cycle through (c,d) and (a,b) uses (b,c)
    net = make_net([(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (4, 1)])
    E = [0, 1]
    sys = build_system(net)
    assert abs(ptdf_matrix(sys, net)[2, 0]) > 1e-3
    assert abs(glodf(sys, net, E)[2, 0]) < 1e-9
    assert zero_glodf_conditions(net, E, 2, 0) == CYCLE_BLOCKED


def test_cycle_blocked_found_by_search(rng):
    """Random search for survivors with zero GLODF but nonzero PTDF."""
    found = 0
    for _ in range(300):
        net = random_connected(rng, int(rng.integers(4, 8)), int(rng.integers(2, 5)))
        E = non_cut_outage(rng, net, 2)
        if E is None:
            continue
        sys = build_system(net)
        D = ptdf_matrix(sys, net)
        G = glodf(sys, net, E)
        bd = block_decomposition(net)
        for ln in G.survivors:
            for out in E:
                verdict = zero_glodf_conditions(net, E, ln, out, bd)
                if verdict != UNKNOWN:
                    assert abs(G[ln, out]) < 1e-9
                if verdict == CYCLE_BLOCKED and abs(D[ln, out]) > 1e-6:
                    found += 1
    assert found > 0
