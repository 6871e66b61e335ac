"""Quantizers and the discrete graph autoencoder.

Two quantizers live here: nearest-entry lookup against a fixed codebook,
and the per-dimension scalar quantizer ``round((L/2)*tanh z)`` whose levels
pack into a single token per graph node by mixed-radix combination.  On top
of them sits the graph autoencoder: a message-passing encoder that turns a
scene graph into one token per node, and a decoder that rebuilds node tags
and edges from the token multiset alone.

Both directions are exactly permutation-equivariant on the integer codes:
the encoder computes in canonical node order and maps results back, and the
decoder computes in sorted-token order and maps results back, so float
summation order never depends on how the caller happened to index nodes.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ParamStore, Rng, Tensor, concat, constant, embedding, gather_last, layer_norm,
    normal_init, st_round,
)
from .scenegraph import (
    KIND_ORDER, NULL_INDEX, NodeKind, PAD_INDEX, SceneGraph, Vocabulary, canonical_order,
)

PAD_CODE = 0


# ---------------------------------------------------------------------------
# Codebook quantizer


@dataclass(frozen=True)
class Codebook:
    """Fixed set of code vectors; tokens index its rows."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 2:
            raise ValueError("codebook needs at least 2 entries")
        if len({row.tobytes() for row in e}) != e.shape[0]:
            raise ValueError("codebook entries must be pairwise distinct")
        object.__setattr__(self, "entries", e)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]


def vq_quantize(e, cb: Codebook) -> int:
    """Index of the nearest codebook entry; ties go to the lowest index."""
    v = np.asarray(e, dtype=np.float64)
    if v.shape != (cb.d,):
        raise ValueError(f"expected a length-{cb.d} vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector not finite")
    d2 = np.sum((cb.entries - v) ** 2, axis=1)
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# Scalar quantizer and mixed-radix packing


@dataclass(frozen=True)
class QuantizationLevels:
    """Even level count per latent dimension; dimension j spans [-L_j/2, L_j/2]."""

    sizes: tuple = (4, 4, 4)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ValueError("need at least one latent dimension")
        for s in sizes:
            if s < 2 or s % 2:
                raise ValueError("quantization levels must be even and at least 2")
        object.__setattr__(self, "sizes", sizes)

    @property
    def dim(self) -> int:
        return len(self.sizes)

    @property
    def alphabet(self) -> int:
        out = 1
        for s in self.sizes:
            out *= s + 1
        return out


def scalar_quantize(z: float, L: int) -> int:
    """round((L/2)*tanh z) with halves away from zero; lands in [-L/2, L/2]."""
    if L < 2 or L % 2:
        raise ValueError("quantization levels must be even and at least 2")
    x = (L / 2) * np.tanh(z)
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def pack_levels(levels, q: QuantizationLevels):
    """Levels (..., dim) -> token, offsetting each digit by L_j/2."""
    arr = np.asarray(levels, dtype=np.int64)
    if arr.shape[-1] != q.dim:
        raise ValueError(f"expected {q.dim} levels per code")
    out = np.zeros(arr.shape[:-1], dtype=np.int64)
    radix = 1
    for j, L in enumerate(q.sizes):
        digit = arr[..., j] + L // 2
        if np.any(digit < 0) or np.any(digit > L):
            raise ValueError("level out of range")
        out += digit * radix
        radix *= L + 1
    return out


def unpack_levels(tokens, q: QuantizationLevels):
    """Token -> levels (..., dim); rejects tokens outside the alphabet."""
    arr = np.asarray(tokens, dtype=np.int64)
    if np.any(arr < 0) or np.any(arr >= q.alphabet):
        raise ValueError("code out of range")
    out = np.zeros(arr.shape + (q.dim,), dtype=np.int64)
    rest = arr.copy()
    for j, L in enumerate(q.sizes):
        out[..., j] = rest % (L + 1) - L // 2
        rest //= L + 1
    return out


def tokens_to_grid(tokens, n_max: int) -> np.ndarray:
    """Right-pad a per-node token sequence to a fixed-length diffusion state."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size > n_max:
        raise ValueError("graph too large")
    out = np.full(n_max, PAD_CODE, dtype=np.int64)
    out[:arr.size] = arr
    return out


# ---------------------------------------------------------------------------
# Graph autoencoder


class DgaeParams:
    """Parameters and hyperparameters of the graph autoencoder.

    Per-kind tag embeddings feed ``rounds`` of directed message passing in
    the encoder.  The decoder embeds each node's quantized levels three ways
    (a linear lift that carries straight-through gradients, per-dimension
    level tables, and a table over the node's rank among the scene's tokens)
    and runs ``rounds`` of attention blocks over the complete graph before
    scoring joint-vocabulary tags per node and presence per ordered pair.

    The rank feature is a function of the token multiset alone (count of
    strictly smaller tokens), so it breaks symmetry between distinct codes
    without breaking permutation equivariance.
    """

    def __init__(self, store: ParamStore, prefix: str, vocab: Vocabulary,
                 d_hidden: int = 64, rounds: int = 3,
                 levels: QuantizationLevels = QuantizationLevels(),
                 n_max: int = 56, rng: Rng | None = None):
        if rounds < 1:
            raise ValueError("need at least one message-passing round")
        self.store = store
        self.prefix = prefix
        self.vocab = vocab
        self.d = d_hidden
        self.rounds = rounds
        self.levels = levels
        self.n_max = n_max
        # wide tag embeddings so nodes start separated; with everything
        # near zero the shared weights cannot pull codes apart at all
        seed_rng = rng if rng is not None else Rng(1, 13)
        wide = normal_init(seed_rng, 1.0)
        init = normal_init(seed_rng, 0.3)
        d = d_hidden
        p = self._param
        for kind in KIND_ORDER:
            p(f"emb.{kind.value.lower()}", (vocab.size(kind), d), wide)
        for r in range(rounds):
            for w in ("w_self", "w_in", "w_out"):
                p(f"enc.r{r}.{w}", (d, d), init)
            p(f"enc.r{r}.b", (d,), np.zeros(d))
        p("enc.proj.w", (d, levels.dim), init)
        p("enc.proj.b", (levels.dim,), np.zeros(levels.dim))
        p("enc.gain", (levels.dim,), np.full(levels.dim, 1.2))
        p("enc.bias", (levels.dim,), np.zeros(levels.dim))
        p("dec.lift.w", (levels.dim, d), init)
        p("dec.lift.b", (d,), np.zeros(d))
        for j, L in enumerate(levels.sizes):
            p(f"dec.lvl{j}", (L + 1, d), init)
        p("dec.rank", (n_max, d), init)
        for r in range(rounds):
            for name, shape in (("ln_g", (d,)), ("ln_b", (d,))):
                p(f"dec.b{r}.attn.{name}", shape,
                  np.ones(d) if name == "ln_g" else np.zeros(d))
                p(f"dec.b{r}.ff.{name}", shape,
                  np.ones(d) if name == "ln_g" else np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                p(f"dec.b{r}.attn.{w}", (d, d), init)
            p(f"dec.b{r}.ff.w1", (d, 2 * d), init)
            p(f"dec.b{r}.ff.b1", (2 * d,), np.zeros(2 * d))
            p(f"dec.b{r}.ff.w2", (2 * d, d), init)
            p(f"dec.b{r}.ff.b2", (d,), np.zeros(d))
        for head in ("tag", "edge"):
            p(f"dec.{head}.ln_g", (d,), np.ones(d))
            p(f"dec.{head}.ln_b", (d,), np.zeros(d))
        p("dec.tag.w", (d, vocab.joint_size), init)
        p("dec.tag.b", (vocab.joint_size,), np.zeros(vocab.joint_size))
        p("dec.edge.w", (d, d), init)
        p("dec.edge.src", (d, 1), init)
        p("dec.edge.dst", (d, 1), init)
        p("dec.edge.b", (1,), np.zeros(1))

    def _param(self, name, shape, init):
        return self.store.param(f"{self.prefix}.{name}", shape, init)

    def _p(self, name) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]


def _encode_canonical(g: SceneGraph, p: DgaeParams, quantize: bool) -> Tensor:
    """Level tensor for nodes in canonical order.

    With ``quantize`` the values are straight-through rounded integers and
    all-minimum codes get bumped off the reserved PAD corner; without it the
    continuous pre-quantization path is returned for derivative checks.
    """
    n = g.num_nodes
    a_in = np.zeros((n, n))
    a_out = np.zeros((n, n))
    for s, d in g.edges:
        a_in[d, s] = 1.0
        a_out[s, d] = 1.0
    rows = [embedding(p._p(f"emb.{kind.value.lower()}"), np.array([tag]))
            for kind, tag in g.nodes]
    h = concat(rows, axis=0)
    for r in range(p.rounds):
        h = (h @ p._p(f"enc.r{r}.w_self")
             + constant(a_in) @ (h @ p._p(f"enc.r{r}.w_in"))
             + constant(a_out) @ (h @ p._p(f"enc.r{r}.w_out"))
             + p._p(f"enc.r{r}.b")).tanh()
    z = h @ p._p("enc.proj.w") + p._p("enc.proj.b")
    # normalize each latent dimension across the scene before squashing:
    # without this the cheapest descent direction collapses every node
    # onto one code and the decoder degenerates to marginal statistics
    mu = z.mean(axis=0, keepdims=True)
    var = ((z - mu) * (z - mu)).mean(axis=0, keepdims=True)
    z = (z - mu) * ((var + 1e-5).log() * -0.5).exp() * p._p("enc.gain") + p._p("enc.bias")
    half = constant(np.array([s / 2 for s in p.levels.sizes]))
    soft = half * z.tanh()
    if not quantize:
        return soft
    zq = st_round(soft)
    # the all-minimum corner is reserved as PAD: bump such nodes off it
    corner = np.array([-s // 2 for s in p.levels.sizes], dtype=np.float64)
    hit = np.all(zq.data == corner, axis=-1)
    bump = np.zeros((n, p.levels.dim))
    bump[hit, 0] = 1.0
    return zq + constant(bump)


def dgae_encode(g: SceneGraph, p: DgaeParams, quantize: bool = True,
                noise_rng: Rng | None = None):
    """One token per node, in the input node order.

    Returns (tokens, z): integer codes and the level tensor the decoder
    consumes during training; the backward pass treats quantization as
    identity.  With ``quantize=False`` the tensor keeps the continuous
    pre-quantization values (tokens are still the rounded codes), which
    keeps the whole encode-decode-loss path differentiable for finite
    difference checks; ``noise_rng`` then adds uniform dither matching the
    rounding-error support so soft training cannot hide information between
    lattice points.  Message passing happens in canonical node order so
    that relabeling a graph relabels its codes exactly.
    """
    n = g.num_nodes
    if n > p.n_max:
        raise ValueError("graph too large")
    if n == 0:
        return np.zeros(0, dtype=np.int64), constant(np.zeros((0, p.levels.dim)))
    order = canonical_order(g)
    back = np.empty(n, dtype=np.int64)
    for pos, v in enumerate(order):
        back[v] = pos
    canon = SceneGraph(
        [g.nodes[v] for v in order],
        sorted((back[s], back[d]) for s, d in g.edges))
    zq_canon = _encode_canonical(canon, p, quantize)
    zq = embedding(zq_canon, back)
    if noise_rng is not None and not quantize:
        eps = np.array([noise_rng.uniform() - 0.5
                        for _ in range(n * p.levels.dim)])
        zq = zq + constant(eps.reshape(n, p.levels.dim))
    ints = _integer_levels(zq.data, p.levels)
    corner = np.array([-s // 2 for s in p.levels.sizes], dtype=np.int64)
    hit = np.all(ints == corner, axis=-1)
    ints[hit, 0] += 1
    tokens = pack_levels(ints, p.levels)
    return tokens, zq


def _integer_levels(z_data: np.ndarray, q: QuantizationLevels) -> np.ndarray:
    """Nearest lattice levels (halves away from zero, like scalar_quantize)."""
    half = np.array([s // 2 for s in q.sizes])
    rounded = np.sign(z_data) * np.floor(np.abs(z_data) + 0.5)
    return np.clip(rounded, -half, half).astype(np.int64)


def _decode_core(z: Tensor, p: DgaeParams):
    """Tag and edge logits for one set of node codes (any fixed order).

    Each node enters as the sum of a linear lift of its levels (the only
    term that passes gradients back to the encoder), per-dimension level
    tables, and a rank table indexed by how many strictly smaller tokens
    the scene contains; attention blocks then exchange information across
    the complete graph.
    """
    n = z.shape[0]
    half = np.array([s / 2 for s in p.levels.sizes])
    lv = _integer_levels(z.data, p.levels)
    ranks = _token_ranks(pack_levels(lv, p.levels))
    h = ((z * constant(1.0 / half)) @ p._p("dec.lift.w") + p._p("dec.lift.b")).tanh()
    for j in range(p.levels.dim):
        h = h + embedding(p._p(f"dec.lvl{j}"), lv[:, j] + p.levels.sizes[j] // 2)
    h = h + embedding(p._p("dec.rank"), ranks)
    scale = 1.0 / np.sqrt(p.d)
    for r in range(p.rounds):
        a = f"dec.b{r}.attn"
        x = layer_norm(h, p._p(f"{a}.ln_g"), p._p(f"{a}.ln_b"))
        q = x @ p._p(f"{a}.wq")
        k = x @ p._p(f"{a}.wk")
        v = x @ p._p(f"{a}.wv")
        att = ((q @ k.swapaxes(0, 1)) * scale).softmax_last()
        h = h + (att @ v) @ p._p(f"{a}.wo")
        f = f"dec.b{r}.ff"
        x = layer_norm(h, p._p(f"{f}.ln_g"), p._p(f"{f}.ln_b"))
        h = h + (x @ p._p(f"{f}.w1") + p._p(f"{f}.b1")).relu() @ p._p(f"{f}.w2") \
            + p._p(f"{f}.b2")
    t = layer_norm(h, p._p("dec.tag.ln_g"), p._p("dec.tag.ln_b"))
    tag_logits = t @ p._p("dec.tag.w") + p._p("dec.tag.b")
    e = layer_norm(h, p._p("dec.edge.ln_g"), p._p("dec.edge.ln_b"))
    bilinear = (e @ p._p("dec.edge.w")) @ e.swapaxes(0, 1)
    src = e @ p._p("dec.edge.src")
    dst = (e @ p._p("dec.edge.dst")).swapaxes(0, 1)
    edge_logits = bilinear + src + dst + p._p("dec.edge.b")
    return tag_logits, edge_logits


def _token_ranks(tokens: np.ndarray) -> np.ndarray:
    """Rank with ties: how many tokens in the scene are strictly smaller."""
    return np.sum(tokens[None, :] < tokens[:, None], axis=1).astype(np.int64)


@dataclass
class Decoded:
    """Soft decoder outputs plus the repaired hard graph.

    ``tag_logits`` and ``edge_logits`` align with ``positions`` (the non-PAD
    indices of the input token array); ``node_positions`` maps each node of
    ``graph`` back to its input position.
    """

    tag_logits: Tensor
    edge_logits: Tensor
    positions: np.ndarray
    graph: SceneGraph
    node_positions: np.ndarray


def _valid_joint_tags(vocab: Vocabulary) -> np.ndarray:
    bad = np.zeros(vocab.joint_size, dtype=bool)
    for kind in KIND_ORDER:
        bad[vocab.joint_index(kind, PAD_INDEX)] = True
        bad[vocab.joint_index(kind, NULL_INDEX)] = True
    return ~bad


def _repair(nodes, edge_prob: np.ndarray):
    """Greedy projection onto the graph invariants.

    Attribute and relation nodes must fill their required slots (one owner;
    one subject and one target), so those take the most probable legal
    candidates outright; only optional anchor-to-anchor edges go through
    the 0.5 threshold.  Nodes with no legal candidate at all are dropped.

    Relation nodes claim endpoint pairs preferring ones no equally tagged
    relation has taken yet: nodes with identical codes produce identical
    probability rows, and without the preference they would all pile onto
    one argmax instead of splitting over their true endpoints.
    """
    m = len(nodes)
    keep_edges = set()
    drop_nodes = set()
    anchor_kinds = (NodeKind.OBJECT, NodeKind.CONCEPT)
    used = set()
    for i, (kind, tag) in enumerate(nodes):
        if kind is NodeKind.ATTRIBUTE:
            owners = [s for s in range(m) if s != i
                      and nodes[s][0] is NodeKind.OBJECT]
            if not owners:
                drop_nodes.add(i)
                continue
            owners.sort(key=lambda s: (-edge_prob[s, i], s))
            pick = next((s for s in owners if (s, tag) not in used), owners[0])
            used.add((pick, tag))
            keep_edges.add((pick, i))
    scored = []
    for i, (kind, tag) in enumerate(nodes):
        if kind is not NodeKind.RELATION:
            continue
        ins = [s for s in range(m) if s != i and nodes[s][0] in anchor_kinds]
        outs = [d for d in range(m) if d != i and nodes[d][0] in anchor_kinds]
        pairs = sorted(((s, d) for s in ins for d in outs if s != d),
                       key=lambda sd: (-edge_prob[sd[0], i] * edge_prob[i, sd[1]],
                                       sd))
        if not pairs:
            drop_nodes.add(i)
            continue
        scored.append((-edge_prob[pairs[0][0], i] * edge_prob[i, pairs[0][1]],
                       i, pairs))
    taken = set()
    for _, i, pairs in sorted(scored):
        tag = nodes[i][1]
        s, d = next((sd for sd in pairs if (sd[0], tag, sd[1]) not in taken),
                    pairs[0])
        taken.add((s, tag, d))
        keep_edges.add((s, i))
        keep_edges.add((i, d))
    for s in range(m):
        for d in range(m):
            if s != d and edge_prob[s, d] > 0.5 \
                    and nodes[s][0] in anchor_kinds and nodes[d][0] in anchor_kinds:
                keep_edges.add((s, d))
    kept = [i for i in range(m) if i not in drop_nodes]
    remap = {v: i for i, v in enumerate(kept)}
    edges = sorted((remap[s], remap[d]) for s, d in keep_edges
                   if s in remap and d in remap)
    return SceneGraph([nodes[i] for i in kept], edges), np.array(kept, dtype=np.int64)


def dgae_decode(tokens, p: DgaeParams, z_latent: Tensor | None = None) -> Decoded:
    """Rebuild tags and edges from per-node tokens; PAD positions are absent.

    With ``z_latent`` (the tensor from ``dgae_encode``) gradients flow into
    the encoder; without it the levels are unpacked from the tokens and the
    computation runs in sorted-token order so permuting the input permutes
    every output exactly.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any(tokens < 0) or np.any(tokens >= p.levels.alphabet):
        raise ValueError("code out of range")
    pos = np.nonzero(tokens != PAD_CODE)[0]
    vocab = p.vocab
    if z_latent is not None:
        if len(pos) != len(tokens):
            raise ValueError("latent tensor requires PAD-free tokens")
        tag_logits, edge_logits = _decode_core(z_latent, p)
    elif len(pos) == 0:
        tag_logits = constant(np.zeros((0, vocab.joint_size)))
        edge_logits = constant(np.zeros((0, 0)))
    else:
        real = tokens[pos]
        order = np.argsort(-real, kind="stable")
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        lv = unpack_levels(real[order], p.levels).astype(np.float64)
        tl, el = _decode_core(constant(lv), p)
        tag_logits = constant(tl.data[inv])
        edge_logits = constant(el.data[np.ix_(inv, inv)])

    m = len(pos)
    masked = tag_logits.data.copy()
    masked[:, ~_valid_joint_tags(vocab)] = -np.inf
    nodes = [vocab.from_joint(int(j)) for j in np.argmax(masked, axis=1)] if m else []
    edge_prob = 1.0 / (1.0 + np.exp(-np.clip(edge_logits.data, -500, 500))) \
        if m else np.zeros((0, 0))
    graph, kept = _repair(nodes, edge_prob)
    return Decoded(tag_logits, edge_logits, pos, graph, pos[kept])


def dgae_loss(g: SceneGraph, dec: Decoded, p: DgaeParams):
    """Negative log-likelihood of the host graph under the decoder outputs.

    Summed over node tags and all ordered node pairs; rows must align with
    the host's node order.  True labels that received probability below
    1e-12 are clamped there and counted in the info dict.
    """
    n = g.num_nodes
    if dec.tag_logits.shape[0] != n:
        raise ValueError("decoded outputs not aligned with host graph")
    info = {"clamped": 0}
    floor = np.log(1e-12)
    total = constant(np.zeros(()))
    if n:
        tags = np.array([p.vocab.joint_index(kind, tag) for kind, tag in g.nodes])
        logp = gather_last(dec.tag_logits.log_softmax_last(), tags)
        total = total - _clamped_sum(logp, floor, info)
    if n > 1:
        target = np.zeros((n, n), dtype=np.int64)
        for s, d in g.edges:
            target[s, d] = 1
        e = dec.edge_logits.reshape(n, n, 1)
        pair = concat([constant(np.zeros((n, n, 1))), e], axis=-1).log_softmax_last()
        logp = gather_last(pair, target)
        off_diag = constant(1.0 - np.eye(n))
        total = total - _clamped_sum(logp * off_diag, floor, info)
    return total, info


def _clamped_sum(logp: Tensor, floor: float, info: dict) -> Tensor:
    low = logp.data < floor
    info["clamped"] += int(np.sum(low))
    if not np.any(low):
        return logp.sum()
    keep = constant((~low).astype(np.float64))
    return (logp * keep).sum() + float(np.sum(low) * floor)
