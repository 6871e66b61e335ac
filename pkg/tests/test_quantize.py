import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sd3.numerics import ParamStore, Rng, grad_check
from sd3.quantize import (
    PAD_CODE, Codebook, DgaeParams, QuantizationLevels, _repair, Decoded,
    dgae_decode, dgae_encode, dgae_loss, pack_levels, scalar_quantize,
    tokens_to_grid, unpack_levels, vq_quantize,
)
from sd3.scenegraph import NodeKind, SceneGraph, is_isomorphic
from sd3.toyworld import WorldConfig, derive_3dsg, sample_scene, toy_vocabulary

VOCAB = toy_vocabulary()
CFG = WorldConfig()


def toy_graphs(seed, count):
    rng = Rng(seed)
    return [derive_3dsg(sample_scene(rng, CFG), VOCAB, CFG) for _ in range(count)]


def fresh_params(seed=7, **kw):
    return DgaeParams(ParamStore(), "dgae", VOCAB, rng=Rng(seed), **kw)


def permuted(g, perm):
    """Graph with node i of g living at position perm[i]."""
    nodes = [None] * g.num_nodes
    for i, (kind, tag) in enumerate(g.nodes):
        nodes[perm[i]] = (kind, tag)
    edges = [(perm[s], perm[d]) for s, d in g.edges]
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Codebook quantizer


def test_vq_exact_entry_returns_its_index():
    rng = np.random.default_rng(3)
    cb = Codebook(rng.normal(size=(6, 4)))
    for k in range(cb.K):
        assert vq_quantize(cb.entries[k], cb) == k


def test_vq_two_entry_example():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    # squared distances 1.45 vs 0.05
    assert vq_quantize(np.array([0.9, 0.8]), cb) == 1


def test_vq_tie_goes_to_lower_index():
    cb = Codebook(np.array([[0.0], [2.0]]))
    assert vq_quantize(np.array([1.0]), cb) == 0


def test_codebook_rejects_bad_entries():
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Codebook(np.array([[1.0, 2.0], [1.0, 2.0]]))


def test_vq_rejects_bad_vectors():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        vq_quantize(np.zeros(3), cb)
    with pytest.raises(ValueError):
        vq_quantize(np.array([np.nan, 0.0]), cb)


# ---------------------------------------------------------------------------
# Scalar quantizer and packing


def test_levels_validation():
    with pytest.raises(ValueError):
        QuantizationLevels(())
    with pytest.raises(ValueError):
        QuantizationLevels((3,))
    with pytest.raises(ValueError):
        QuantizationLevels((0, 4))


def test_levels_alphabet_sizes():
    assert QuantizationLevels((4, 4, 4)).alphabet == 125
    assert QuantizationLevels((2, 4)).alphabet == 15


def test_scalar_quantize_examples():
    assert scalar_quantize(0.0, 4) == 0
    assert scalar_quantize(0.5, 4) == 1  # 2*tanh 0.5 = 0.9242
    assert scalar_quantize(50.0, 4) == 2
    assert scalar_quantize(-50.0, 4) == -2


def test_scalar_quantize_half_rounds_away_from_zero():
    z = np.arctanh(0.25)  # 2*tanh z = 0.5 exactly in float64
    assert 2 * np.tanh(z) == 0.5
    assert scalar_quantize(z, 4) == 1
    assert scalar_quantize(-z, 4) == -1


def test_scalar_quantize_matches_formula():
    for z in np.linspace(-4, 4, 173):
        for L in (2, 4, 8):
            x = (L / 2) * np.tanh(z)
            want = int(np.sign(x) * np.floor(abs(x) + 0.5))
            assert scalar_quantize(z, L) == want


def test_scalar_quantize_rejects_bad_level_counts():
    with pytest.raises(ValueError):
        scalar_quantize(0.3, 3)
    with pytest.raises(ValueError):
        scalar_quantize(0.3, 0)


@given(st.floats(min_value=-30, max_value=30),
       st.floats(min_value=-30, max_value=30),
       st.sampled_from([2, 4, 6, 8]))
@settings(max_examples=200, deadline=None)
def test_scalar_quantize_monotone_and_bounded(a, b, L):
    qa, qb = scalar_quantize(a, L), scalar_quantize(b, L)
    assert abs(qa) <= L // 2 and abs(qb) <= L // 2
    if a <= b:
        assert qa <= qb
    assert scalar_quantize(-a, L) == -qa


def test_pack_corner_values():
    q = QuantizationLevels((4, 4, 4))
    assert pack_levels(np.array([-2, -2, -2]), q) == 0
    assert pack_levels(np.array([2, 2, 2]), q) == 124
    # dimension 0 is the least significant digit
    assert pack_levels(np.array([-1, -2, -2]), q) == 1


def test_pack_unpack_bijection_exhaustive():
    q = QuantizationLevels((4, 4, 4))
    tokens = np.arange(125)
    levels = unpack_levels(tokens, q)
    assert np.array_equal(pack_levels(levels, q), tokens)
    lattice = np.array([(i, j, k) for k in range(-2, 3)
                        for j in range(-2, 3) for i in range(-2, 3)])
    packed = pack_levels(lattice, q)
    assert sorted(packed.tolist()) == list(range(125))
    assert np.array_equal(unpack_levels(packed, q), lattice)


def test_pack_unpack_heterogeneous_sizes():
    q = QuantizationLevels((2, 4))
    tokens = np.arange(q.alphabet)
    levels = unpack_levels(tokens, q)
    assert np.array_equal(pack_levels(levels, q), tokens)
    assert levels[:, 0].min() == -1 and levels[:, 0].max() == 1
    assert levels[:, 1].min() == -2 and levels[:, 1].max() == 2


def test_pack_validations():
    q = QuantizationLevels((4, 4, 4))
    with pytest.raises(ValueError):
        pack_levels(np.array([0, 0]), q)
    with pytest.raises(ValueError, match="level out of range"):
        pack_levels(np.array([3, 0, 0]), q)
    with pytest.raises(ValueError, match="code out of range"):
        unpack_levels(np.array([125]), q)
    with pytest.raises(ValueError, match="code out of range"):
        unpack_levels(np.array([-1]), q)


def test_tokens_to_grid():
    grid = tokens_to_grid(np.array([5, 7]), 6)
    assert grid.tolist() == [5, 7, PAD_CODE, PAD_CODE, PAD_CODE, PAD_CODE]
    with pytest.raises(ValueError, match="graph too large"):
        tokens_to_grid(np.arange(1, 8), 6)


# ---------------------------------------------------------------------------
# DGAE encoder


def test_encode_deterministic():
    p = fresh_params()
    g = toy_graphs(11, 1)[0]
    t1, z1 = dgae_encode(g, p)
    t2, z2 = dgae_encode(g, p)
    assert np.array_equal(t1, t2)
    assert np.array_equal(z1.data, z2.data)


def test_encode_permutation_equivariance_exact():
    p = fresh_params()
    rng = np.random.default_rng(23)
    for g in toy_graphs(31, 100):
        tokens, _ = dgae_encode(g, p)
        perm = rng.permutation(g.num_nodes)
        t2, _ = dgae_encode(permuted(g, perm), p)
        # node i moved to position perm[i], carrying its code along
        assert np.array_equal(t2[perm], tokens)


def test_encode_rejects_oversized_graph():
    p = fresh_params()
    nodes = [(NodeKind.OBJECT, 2)] * 57
    with pytest.raises(ValueError, match="graph too large"):
        dgae_encode(SceneGraph(nodes, []), p)


def test_encode_empty_graph():
    p = fresh_params()
    tokens, z = dgae_encode(SceneGraph([], []), p)
    assert tokens.size == 0 and z.shape == (0, 3)


def test_single_node_code_is_a_function_of_the_tag():
    p = fresh_params()
    a, _ = dgae_encode(SceneGraph([(NodeKind.OBJECT, 3)], []), p)
    b, _ = dgae_encode(SceneGraph([(NodeKind.OBJECT, 3)], []), p)
    assert np.array_equal(a, b)


def test_encoded_tokens_never_collide_with_pad():
    p = fresh_params()
    for g in toy_graphs(41, 25):
        tokens, _ = dgae_encode(g, p)
        assert np.all(tokens != PAD_CODE)
        assert np.all((tokens > 0) & (tokens < 125))


def test_straight_through_matches_token_levels():
    p = fresh_params()
    g = toy_graphs(47, 1)[0]
    tokens, z = dgae_encode(g, p)
    assert np.array_equal(pack_levels(z.data.astype(np.int64), p.levels), tokens)


# ---------------------------------------------------------------------------
# DGAE decoder


def test_decode_all_pad_gives_empty_graph():
    p = fresh_params()
    out = dgae_decode(np.zeros(10, dtype=np.int64), p)
    assert out.graph.num_nodes == 0
    assert out.positions.size == 0


def test_decode_rejects_out_of_range_codes():
    p = fresh_params()
    with pytest.raises(ValueError, match="code out of range"):
        dgae_decode(np.array([1, 125]), p)
    with pytest.raises(ValueError, match="code out of range"):
        dgae_decode(np.array([-1]), p)


def test_decode_deterministic():
    p = fresh_params()
    tokens = np.array([3, 50, 99, 17])
    a = dgae_decode(tokens, p)
    b = dgae_decode(tokens, p)
    assert np.array_equal(a.tag_logits.data, b.tag_logits.data)
    assert np.array_equal(a.edge_logits.data, b.edge_logits.data)


def test_decode_permutation_equivariance_exact():
    p = fresh_params()
    rng = np.random.default_rng(5)
    tokens = np.array([3, 50, 99, 17, 42, 42, 7])
    base = dgae_decode(tokens, p)
    for _ in range(20):
        perm = rng.permutation(tokens.size)
        out = dgae_decode(tokens[perm], p)
        # position j of the permuted input carries input node perm[j]
        assert np.array_equal(out.tag_logits.data, base.tag_logits.data[perm])
        assert np.array_equal(out.edge_logits.data,
                              base.edge_logits.data[np.ix_(perm, perm)])


def test_decode_skips_pad_positions():
    p = fresh_params()
    tokens = np.array([9, PAD_CODE, 61, PAD_CODE, 14])
    out = dgae_decode(tokens, p)
    assert out.positions.tolist() == [0, 2, 4]
    assert out.tag_logits.shape[0] == 3


def test_decode_repaired_graph_is_always_valid():
    p = fresh_params()
    rng = np.random.default_rng(9)
    for _ in range(25):
        tokens = rng.integers(1, 125, size=rng.integers(1, 20))
        out = dgae_decode(tokens, p)
        out.graph.validate(VOCAB)  # must not raise


# ---------------------------------------------------------------------------
# Greedy repair


def O(tag=2):
    return (NodeKind.OBJECT, tag)


def A(tag=2):
    return (NodeKind.ATTRIBUTE, tag)


def R(tag=2):
    return (NodeKind.RELATION, tag)


def test_repair_attribute_takes_most_probable_owner():
    nodes = [O(2), O(3), A(2)]
    prob = np.zeros((3, 3))
    prob[0, 2] = 0.2
    prob[1, 2] = 0.4
    g, kept = _repair(nodes, prob)
    assert kept.tolist() == [0, 1, 2]
    assert (1, 2) in g.edges and (0, 2) not in g.edges


def test_repair_attribute_without_any_object_is_dropped():
    nodes = [(NodeKind.CONCEPT, 2), A(2)]
    g, kept = _repair(nodes, np.zeros((2, 2)))
    assert kept.tolist() == [0]
    assert g.num_nodes == 1


def test_repair_relation_takes_best_endpoint_pair():
    nodes = [O(2), O(3), R(2)]
    prob = np.zeros((3, 3))
    prob[0, 2] = 0.3   # subject candidates
    prob[1, 2] = 0.1
    prob[2, 0] = 0.1   # target candidates
    prob[2, 1] = 0.3
    g, kept = _repair(nodes, prob)
    assert set(g.edges) == {(0, 2), (2, 1)}


def test_repair_identical_relations_split_over_pairs():
    # two same-tag relation nodes with identical probability rows must not
    # both claim the argmax pair
    nodes = [O(2), O(3), R(2), R(2)]
    prob = np.zeros((4, 4))
    for r in (2, 3):
        prob[0, r] = 0.4
        prob[1, r] = 0.3
        prob[r, 0] = 0.3
        prob[r, 1] = 0.4
    g, kept = _repair(nodes, prob)
    subj = {}
    for s, d in g.edges:
        if nodes[d][0] is NodeKind.RELATION:
            subj[d] = s
    assert sorted(subj.values()) == [0, 1]
    g.validate(VOCAB)


def test_repair_relation_with_one_anchor_is_dropped():
    nodes = [O(2), R(2)]
    g, kept = _repair(nodes, np.full((2, 2), 0.9))
    assert kept.tolist() == [0]


def test_repair_optional_edges_use_threshold():
    nodes = [O(2), (NodeKind.CONCEPT, 3)]
    prob = np.zeros((2, 2))
    prob[0, 1] = 0.51
    prob[1, 0] = 0.49
    g, _ = _repair(nodes, prob)
    assert (0, 1) in g.edges and (1, 0) not in g.edges


# ---------------------------------------------------------------------------
# Reconstruction loss


def one_hot_decoded(g, vocab, right=True):
    n = g.num_nodes
    tags = np.full((n, vocab.joint_size), -1000.0)
    for i, (kind, tag) in enumerate(g.nodes):
        j = vocab.joint_index(kind, tag)
        tags[i, j if right else (j + 1) % vocab.joint_size] = 1000.0
    edges = np.full((n, n), -1000.0)
    for s, d in g.edges:
        edges[s, d] = 1000.0
    from sd3.numerics import constant
    return Decoded(constant(tags), constant(edges), np.arange(n), g, np.arange(n))


def test_loss_perfect_predictions_are_zero():
    p = fresh_params()
    g = toy_graphs(53, 1)[0]
    loss, info = dgae_loss(g, one_hot_decoded(g, VOCAB), p)
    assert abs(loss.item()) < 1e-9
    assert info["clamped"] == 0


def test_loss_uniform_tags_closed_form():
    p = fresh_params()
    g = toy_graphs(59, 1)[0]
    n = g.num_nodes
    dec = one_hot_decoded(g, VOCAB)
    from sd3.numerics import constant
    dec = Decoded(constant(np.zeros((n, VOCAB.joint_size))), dec.edge_logits,
                  dec.positions, dec.graph, dec.node_positions)
    loss, _ = dgae_loss(g, dec, p)
    assert loss.item() == pytest.approx(n * np.log(VOCAB.joint_size), rel=1e-9)


def test_loss_clamps_impossible_labels():
    p = fresh_params()
    g = toy_graphs(61, 1)[0]
    dec = one_hot_decoded(g, VOCAB, right=False)
    loss, info = dgae_loss(g, dec, p)
    assert info["clamped"] == g.num_nodes
    assert np.isfinite(loss.item())
    assert loss.item() >= g.num_nodes * abs(np.log(1e-12)) * 0.99


def test_loss_rejects_misaligned_outputs():
    p = fresh_params()
    g1, g2 = toy_graphs(67, 2)
    assert g1.num_nodes != g2.num_nodes
    dec = one_hot_decoded(g2, VOCAB)
    with pytest.raises(ValueError, match="not aligned"):
        dgae_loss(g1, dec, p)


def test_dgae_grad_check_on_soft_path():
    p = fresh_params(d_hidden=10, rounds=1)
    g = toy_graphs(71, 1)[0]

    def loss_fn():
        tokens, z = dgae_encode(g, p, quantize=False)
        dec = dgae_decode(tokens, p, z_latent=z)
        loss, _ = dgae_loss(g, dec, p)
        return loss

    names = [n for n in p.store.names() if n.startswith("dgae.")]
    err = grad_check(loss_fn, [p.store[n] for n in names], sample=72, rng=Rng(3))
    assert err <= 1e-4


def test_dgae_smoke_overfit():
    from sd3.numerics import AdamW
    p = fresh_params(seed=13)
    graphs = toy_graphs(73, 8)
    opt = AdamW(p.store, lr=3e-3, weight_decay=1e-4, warmup_steps=10)
    first = last = None
    for step in range(30):
        opt.zero_grad()
        total = 0.0
        for g in graphs:
            tokens, z = dgae_encode(g, p)
            dec = dgae_decode(tokens, p, z_latent=z)
            loss, _ = dgae_loss(g, dec, p)
            (loss * (1.0 / len(graphs))).backward()
            total += loss.item() / len(graphs)
        opt.step()
        if first is None:
            first = total
        last = total
    assert last < 0.5 * first
