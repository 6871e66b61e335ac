import pytest

from sd3.numerics import Rng
from sd3.scenegraph import (
    ADJ_EDGE, ADJ_NO_EDGE, ADJ_PAD, GraphTokenGrid, NodeKind, SceneGraph,
    Triplet, Vocabulary, canonical_form, from_token_grid, graph_from_json,
    graph_to_json, is_isomorphic, to_token_grid, triplet_recall, triplets,
)

V = Vocabulary({
    NodeKind.OBJECT: ["cup", "table", "lamp"],
    NodeKind.ATTRIBUTE: ["red", "blue"],
    NodeKind.RELATION: ["on", "left-of", "in-region"],
    NodeKind.CONCEPT: ["corner"],
})


def obj(tag):
    return (NodeKind.OBJECT, V.index(NodeKind.OBJECT, tag))


def attr(tag):
    return (NodeKind.ATTRIBUTE, V.index(NodeKind.ATTRIBUTE, tag))


def rel(tag):
    return (NodeKind.RELATION, V.index(NodeKind.RELATION, tag))


def cup_on_table():
    # cup -> on -> table, cup is red
    return SceneGraph(
        [obj("cup"), obj("table"), rel("on"), attr("red")],
        [(0, 2), (2, 1), (0, 3)],
    )


def permuted(g, perm):
    nodes = [None] * g.num_nodes
    for i, node in enumerate(g.nodes):
        nodes[perm[i]] = node
    edges = [(perm[s], perm[d]) for s, d in g.edges]
    return SceneGraph(nodes, edges)


def random_graph(rng, max_objects=5):
    """Small random graph honoring the structural invariants."""
    n_obj = 2 + rng.randint(max_objects - 1)
    nodes = []
    edges = []
    for _ in range(n_obj):
        nodes.append((NodeKind.OBJECT, 2 + rng.randint(V.size(NodeKind.OBJECT) - 2)))
    for i in range(n_obj):
        if rng.uniform() < 0.7:
            nodes.append((NodeKind.ATTRIBUTE, 2 + rng.randint(V.size(NodeKind.ATTRIBUTE) - 2)))
            edges.append((i, len(nodes) - 1))
    pairs = [(i, j) for i in range(n_obj) for j in range(n_obj) if i != j]
    rng.shuffle(pairs)
    for s, o in pairs[: rng.randint(len(pairs) + 1)]:
        nodes.append((NodeKind.RELATION, 2 + rng.randint(V.size(NodeKind.RELATION) - 2)))
        r = len(nodes) - 1
        edges.append((s, r))
        edges.append((r, o))
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Vocabulary


def test_vocab_reserved_slots():
    for kind in NodeKind:
        assert V.tag(kind, 0) == "PAD"
        assert V.tag(kind, 1) == "NULL"


def test_vocab_joint_roundtrip():
    for j in range(V.joint_size):
        kind, tag = V.from_joint(j)
        assert V.joint_index(kind, tag) == j


def test_vocab_duplicate_tag():
    with pytest.raises(ValueError):
        Vocabulary({NodeKind.OBJECT: ["cup", "cup"]})


# ---------------------------------------------------------------------------
# Validation


def test_validate_good_graph():
    cup_on_table().validate(V)


def test_validate_self_loop():
    g = SceneGraph([obj("cup"), obj("table"), rel("on")], [(0, 2), (2, 1), (1, 1)])
    with pytest.raises(ValueError, match="self loop"):
        g.validate(V)


def test_validate_duplicate_edge():
    g = SceneGraph([obj("cup"), attr("red")], [(0, 1), (0, 1)])
    with pytest.raises(ValueError, match="duplicate edge"):
        g.validate(V)


def test_validate_edge_out_of_range():
    g = SceneGraph([obj("cup")], [(0, 5)])
    with pytest.raises(ValueError, match="out of range"):
        g.validate(V)


def test_validate_dangling_relation():
    g = SceneGraph([obj("cup"), rel("on")], [(0, 1)])
    with pytest.raises(ValueError, match="malformed relation"):
        g.validate(V)


def test_validate_orphan_attribute():
    g = SceneGraph([obj("cup"), attr("red")], [])
    with pytest.raises(ValueError, match="malformed attribute"):
        g.validate(V)


def test_validate_pad_tag_rejected():
    g = SceneGraph([(NodeKind.OBJECT, 0)], [])
    with pytest.raises(ValueError, match="PAD"):
        g.validate(V)


# ---------------------------------------------------------------------------
# Triplets


def test_triplets_single_relation():
    assert triplets(cup_on_table(), V) == {Triplet("cup", "on", "table")}


def test_triplets_empty():
    g = SceneGraph([obj("cup"), attr("red")], [(0, 1)])
    assert triplets(g, V) == set()


def test_triplets_two_relations():
    g = SceneGraph(
        [obj("cup"), obj("table"), obj("lamp"), rel("left-of"), rel("on")],
        [(0, 3), (3, 1), (1, 4), (4, 2)],
    )
    assert triplets(g, V) == {
        Triplet("cup", "left-of", "table"),
        Triplet("table", "on", "lamp"),
    }


def test_triplets_dangling_relation_errors():
    g = SceneGraph([obj("cup"), rel("on")], [(0, 1)])
    with pytest.raises(ValueError, match="malformed relation"):
        triplets(g, V)


def test_recall_identity():
    g = cup_on_table()
    assert triplet_recall(g, g, V) == 1.0


def test_recall_partial():
    gold = SceneGraph(
        [obj("cup"), obj("table"), obj("lamp"),
         rel("on"), rel("on"), rel("left-of"), rel("left-of")],
        [(0, 3), (3, 1), (1, 4), (4, 2), (0, 5), (5, 2), (2, 6), (6, 0)],
    )
    assert len(triplets(gold, V)) == 4
    pred = SceneGraph(
        [obj("cup"), obj("table"), obj("lamp"),
         rel("on"), rel("on"), rel("left-of"), rel("on")],
        [(0, 3), (3, 1), (1, 4), (4, 2), (0, 5), (5, 2), (1, 6), (6, 0)],
    )
    assert triplet_recall(pred, gold, V) == 0.75


def test_recall_disjoint():
    gold = cup_on_table()
    pred = SceneGraph([obj("lamp"), obj("table"), rel("on")], [(0, 2), (2, 1)])
    assert triplet_recall(pred, gold, V) == 0.0


def test_recall_empty_gold():
    gold = SceneGraph([obj("cup")], [])
    with pytest.raises(ValueError, match="undefined recall"):
        triplet_recall(gold, gold, V)


def test_recall_monotone_under_added_gold_triplet():
    rng = Rng(40)
    for _ in range(50):
        gold = random_graph(rng)
        if not triplets(gold, V):
            continue
        pred = random_graph(rng)
        before = triplet_recall(pred, gold, V)
        # append one random gold relation (with its endpoints) to pred
        gt = sorted(triplets(gold, V))
        t = gt[rng.randint(len(gt))]
        nodes = list(pred.nodes) + [
            obj(t.subject), rel(t.predicate), obj(t.object)]
        k = len(pred.nodes)
        edges = list(pred.edges) + [(k, k + 1), (k + 1, k + 2)]
        after = triplet_recall(SceneGraph(nodes, edges), gold, V)
        assert after >= before


# ---------------------------------------------------------------------------
# Canonical serialization


def test_grid_empty_graph_roundtrip():
    g = SceneGraph([], [])
    grid = to_token_grid(g, V, 8)
    assert set(grid.node_tokens) == {0}
    assert set(grid.adj_tokens) == {ADJ_PAD}
    back = from_token_grid(grid, V)
    assert back.num_nodes == 0


def test_grid_single_node():
    g = SceneGraph([obj("cup")], [])
    grid = to_token_grid(g, V, 4)
    non_pad = [t for t in grid.node_tokens if t != 0]
    assert len(non_pad) == 1
    assert grid.adj_tokens[0] == ADJ_NO_EDGE


def test_grid_too_large():
    g = cup_on_table()
    with pytest.raises(ValueError, match="graph too large"):
        to_token_grid(g, V, 3)


def test_grid_roundtrip_isomorphic():
    rng = Rng(41)
    for _ in range(200):
        g = random_graph(rng)
        back = from_token_grid(to_token_grid(g, V, 40), V)
        assert is_isomorphic(g, back)


def test_grid_permutation_invariance():
    rng = Rng(42)
    for _ in range(100):
        g = random_graph(rng)
        perm = list(range(g.num_nodes))
        rng.shuffle(perm)
        h = permuted(g, perm)
        assert to_token_grid(g, V, 40) == to_token_grid(h, V, 40)


def test_grid_malformed_pad_hole():
    g = SceneGraph([obj("cup"), obj("table")], [])
    grid = to_token_grid(g, V, 4)
    toks = list(grid.node_tokens)
    toks[0] = 0  # PAD before a real node
    with pytest.raises(ValueError, match="malformed grid"):
        from_token_grid(GraphTokenGrid(tuple(toks), grid.adj_tokens, 4), V)


def test_grid_malformed_adj_pad_inside():
    g = SceneGraph([obj("cup"), obj("table")], [])
    grid = to_token_grid(g, V, 4)
    adj = list(grid.adj_tokens)
    adj[1] = ADJ_PAD  # inside the live block
    with pytest.raises(ValueError, match="malformed grid"):
        from_token_grid(GraphTokenGrid(grid.node_tokens, tuple(adj), 4), V)


def test_grid_malformed_edge_in_pad_region():
    g = SceneGraph([obj("cup")], [])
    grid = to_token_grid(g, V, 4)
    adj = list(grid.adj_tokens)
    adj[3] = ADJ_EDGE  # column beyond the node count
    with pytest.raises(ValueError, match="malformed grid"):
        from_token_grid(GraphTokenGrid(grid.node_tokens, tuple(adj), 4), V)


def test_grid_malformed_self_loop_bit():
    g = SceneGraph([obj("cup"), obj("table")], [])
    grid = to_token_grid(g, V, 4)
    adj = list(grid.adj_tokens)
    adj[0] = ADJ_EDGE
    with pytest.raises(ValueError, match="malformed grid"):
        from_token_grid(GraphTokenGrid(grid.node_tokens, tuple(adj), 4), V)


def test_grid_malformed_alphabet():
    g = SceneGraph([obj("cup")], [])
    grid = to_token_grid(g, V, 4)
    toks = list(grid.node_tokens)
    toks[0] = V.joint_size + 3
    with pytest.raises(ValueError, match="malformed grid"):
        from_token_grid(GraphTokenGrid(tuple(toks), grid.adj_tokens, 4), V)


def test_canonical_form_separates_non_isomorphic():
    a = cup_on_table()
    b = SceneGraph(  # same nodes, relation flipped
        [obj("cup"), obj("table"), rel("on"), attr("red")],
        [(1, 2), (2, 0), (0, 3)],
    )
    assert canonical_form(a) != canonical_form(b)
    assert not is_isomorphic(a, b)


def test_canonical_handles_identical_twins():
    # two interchangeable cup nodes plus a shared table
    g = SceneGraph(
        [obj("cup"), obj("cup"), obj("table"), rel("on"), rel("on")],
        [(0, 3), (3, 2), (1, 4), (4, 2)],
    )
    rng = Rng(43)
    for _ in range(20):
        perm = list(range(g.num_nodes))
        rng.shuffle(perm)
        assert to_token_grid(permuted(g, perm), V, 8) == to_token_grid(g, V, 8)


def test_canonical_bank_of_isolated_nodes_fast():
    g = SceneGraph([obj("cup")] * 20, [])
    grid = to_token_grid(g, V, 24)
    assert sum(1 for t in grid.node_tokens if t != 0) == 20


# ---------------------------------------------------------------------------
# JSON corpus format


def test_graph_json_roundtrip():
    g = cup_on_table()
    line = graph_to_json(g, V)
    back = graph_from_json(line, V)
    assert back.nodes == g.nodes
    assert back.edges == g.edges
    assert '"nodes"' in line and '"edges"' in line
