"""Scene-graph data model shared by the textual, visual, and 3D graph views.

Nodes are (kind, tag) pairs over a fixed per-kind vocabulary; relations and
attributes are reified as nodes so that graph diffusion can edit them as
ordinary tokens.  Edges run subject -> relation -> object and
object -> attribute.  A graph serializes to a fixed-size token grid (node
channel + adjacency channel) through a canonical node order, so the grid is
a function of the isomorphism class and never of the caller's node numbering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

ADJ_NO_EDGE = 0
ADJ_EDGE = 1
ADJ_PAD = 2

PAD_INDEX = 0
NULL_INDEX = 1


class NodeKind(Enum):
    OBJECT = "Object"
    ATTRIBUTE = "Attribute"
    RELATION = "Relation"
    CONCEPT = "Concept"


KIND_ORDER = (NodeKind.OBJECT, NodeKind.ATTRIBUTE, NodeKind.RELATION, NodeKind.CONCEPT)
_KIND_RANK = {k: i for i, k in enumerate(KIND_ORDER)}


class Vocabulary:
    """Per-kind tag lists; PAD and NULL are pinned to indices 0 and 1.

    A ``joint`` index space lays the four kinds end to end (objects first),
    which is what the graph token grid and the tag classifier heads use.
    """

    def __init__(self, tags_by_kind: dict):
        self._tags: dict[NodeKind, tuple] = {}
        for kind in KIND_ORDER:
            tags = list(tags_by_kind.get(kind, []))
            if tags[:2] != ["PAD", "NULL"]:
                tags = ["PAD", "NULL"] + tags
            if len(set(tags)) != len(tags):
                raise ValueError(f"duplicate tag in kind {kind.value}")
            self._tags[kind] = tuple(tags)
        self._offsets = {}
        off = 0
        for kind in KIND_ORDER:
            self._offsets[kind] = off
            off += len(self._tags[kind])
        self.joint_size = off

    def tags(self, kind: NodeKind) -> tuple:
        return self._tags[kind]

    def size(self, kind: NodeKind) -> int:
        return len(self._tags[kind])

    def tag(self, kind: NodeKind, index: int) -> str:
        return self._tags[kind][index]

    def index(self, kind: NodeKind, tag: str) -> int:
        return self._tags[kind].index(tag)

    def joint_index(self, kind: NodeKind, tag_index: int) -> int:
        if not 0 <= tag_index < len(self._tags[kind]):
            raise ValueError("tag index out of range")
        return self._offsets[kind] + tag_index

    def from_joint(self, joint: int) -> tuple:
        """joint index -> (kind, tag index)"""
        if not 0 <= joint < self.joint_size:
            raise ValueError("joint index out of range")
        for kind in reversed(KIND_ORDER):
            if joint >= self._offsets[kind]:
                return kind, joint - self._offsets[kind]
        raise AssertionError


class Triplet(NamedTuple):
    subject: str
    predicate: str
    object: str


@dataclass(frozen=True)
class SceneGraph:
    """Directed graph of (kind, tag-index) nodes; immutable after construction."""

    nodes: tuple  # tuple of (NodeKind, tag index)
    edges: tuple  # tuple of (src, dst)
    _in: dict = field(init=False, repr=False, compare=False)
    _out: dict = field(init=False, repr=False, compare=False)

    def __init__(self, nodes, edges):
        object.__setattr__(self, "nodes", tuple((k, int(t)) for k, t in nodes))
        object.__setattr__(self, "edges", tuple((int(s), int(d)) for s, d in edges))
        ins: dict[int, list] = {i: [] for i in range(len(self.nodes))}
        outs: dict[int, list] = {i: [] for i in range(len(self.nodes))}
        for s, d in self.edges:
            if 0 <= d < len(self.nodes):
                ins[d].append(s)
            if 0 <= s < len(self.nodes):
                outs[s].append(d)
        object.__setattr__(self, "_in", ins)
        object.__setattr__(self, "_out", outs)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def in_neighbors(self, i: int) -> list:
        return self._in[i]

    def out_neighbors(self, i: int) -> list:
        return self._out[i]

    def validate(self, vocab: Vocabulary):
        """Raise ValueError on any structural invariant violation."""
        n = len(self.nodes)
        for kind, tag in self.nodes:
            if not isinstance(kind, NodeKind):
                raise ValueError("unknown node kind")
            if not 0 <= tag < vocab.size(kind):
                raise ValueError("tag index out of range")
            if tag == PAD_INDEX:
                raise ValueError("reserved PAD tag in graph")
        seen = set()
        for s, d in self.edges:
            if not (0 <= s < n and 0 <= d < n):
                raise ValueError("edge endpoint out of range")
            if s == d:
                raise ValueError("self loop")
            if (s, d) in seen:
                raise ValueError("duplicate edge")
            seen.add((s, d))
        for i, (kind, _) in enumerate(self.nodes):
            if kind is NodeKind.RELATION:
                subs = [u for u in self._in[i]
                        if self.nodes[u][0] in (NodeKind.OBJECT, NodeKind.CONCEPT)]
                objs = [w for w in self._out[i]
                        if self.nodes[w][0] in (NodeKind.OBJECT, NodeKind.CONCEPT)]
                if len(subs) != 1 or len(self._in[i]) != 1 \
                        or len(objs) != 1 or len(self._out[i]) != 1:
                    raise ValueError("malformed relation")
            elif kind is NodeKind.ATTRIBUTE:
                owners = [u for u in self._in[i] if self.nodes[u][0] is NodeKind.OBJECT]
                if len(owners) != 1 or len(self._in[i]) != 1 or self._out[i]:
                    raise ValueError("malformed attribute")


# ---------------------------------------------------------------------------
# Triplets and recall


def triplets(g: SceneGraph, vocab: Vocabulary) -> set:
    """One (subject, predicate, object) triplet per Relation node."""
    out = set()
    for i, (kind, tag) in enumerate(g.nodes):
        if kind is not NodeKind.RELATION:
            continue
        subs = g.in_neighbors(i)
        objs = g.out_neighbors(i)
        if len(subs) != 1 or len(objs) != 1:
            raise ValueError("malformed relation")
        s_kind, s_tag = g.nodes[subs[0]]
        o_kind, o_tag = g.nodes[objs[0]]
        if s_kind not in (NodeKind.OBJECT, NodeKind.CONCEPT) \
                or o_kind not in (NodeKind.OBJECT, NodeKind.CONCEPT):
            raise ValueError("malformed relation")
        out.add(Triplet(vocab.tag(s_kind, s_tag), vocab.tag(NodeKind.RELATION, tag),
                        vocab.tag(o_kind, o_tag)))
    return out


def triplet_recall(predicted: SceneGraph, gold: SceneGraph, vocab: Vocabulary) -> float:
    gt = triplets(gold, vocab)
    if not gt:
        raise ValueError("undefined recall")
    pt = triplets(predicted, vocab)
    return len(pt & gt) / len(gt)


# ---------------------------------------------------------------------------
# Canonical ordering
#
# Color refinement on (kind, tag) plus directed neighborhoods; remaining ties
# are broken by individualization with a lexicographically smallest
# serialization, so the order depends only on the isomorphism class.


def _refine(g: SceneGraph, colors: list) -> list:
    n = g.num_nodes
    while True:
        sigs = []
        for v in range(n):
            ins = sorted(colors[u] for u in g.in_neighbors(v))
            outs = sorted(colors[w] for w in g.out_neighbors(v))
            sigs.append((colors[v], tuple(ins), tuple(outs)))
        ranks = {s: r for r, s in enumerate(sorted(set(sigs)))}
        new = [ranks[s] for s in sigs]
        if new == colors:
            return colors
        colors = new


def _serialize(g: SceneGraph, order: list) -> tuple:
    pos = {v: i for i, v in enumerate(order)}
    nodes = tuple((_KIND_RANK[g.nodes[v][0]], g.nodes[v][1]) for v in order)
    adj = tuple(sorted((pos[s], pos[d]) for s, d in g.edges))
    return nodes, adj


def canonical_order(g: SceneGraph) -> list:
    """Node ids in canonical order (stable across any input permutation)."""
    n = g.num_nodes
    if n == 0:
        return []
    init = [(_KIND_RANK[k], t) for k, t in g.nodes]
    ranks = {s: r for r, s in enumerate(sorted(set(init)))}
    colors = _refine(g, [ranks[s] for s in init])

    edge_set = set(g.edges)

    def swapped_is_automorphism(u, v):
        # the transposition (u v) maps the edge set onto itself
        m = {u: v, v: u}
        for s, d in g.edges:
            if (m.get(s, s), m.get(d, d)) not in edge_set:
                return False
        return True

    best = [None]  # best (serialization, order) found so far

    def descend(colors):
        classes: dict[int, list] = {}
        for v, c in enumerate(colors):
            classes.setdefault(c, []).append(v)
        target = None
        for c in sorted(classes):
            if len(classes[c]) > 1:
                target = classes[c]
                break
        if target is None:
            order = sorted(range(n), key=lambda v: colors[v])
            ser = _serialize(g, order)
            if best[0] is None or ser < best[0][0]:
                best[0] = (ser, order)
            return
        # collapse the orbit when the whole cell is pairwise interchangeable,
        # which kills the factorial blowup on banks of identical nodes
        head = target[0]
        if all(swapped_is_automorphism(head, v) for v in target[1:]):
            target = [head]
        fresh = max(colors) + 1
        for v in target:
            branched = list(colors)
            branched[v] = fresh
            descend(_refine(g, branched))

    descend(colors)
    return best[0][1]


def canonical_form(g: SceneGraph) -> tuple:
    """Hashable isomorphism invariant: node sequence + relabeled edge set."""
    return _serialize(g, canonical_order(g))


def is_isomorphic(a: SceneGraph, b: SceneGraph) -> bool:
    if a.num_nodes != b.num_nodes or len(a.edges) != len(b.edges):
        return False
    return canonical_form(a) == canonical_form(b)


# ---------------------------------------------------------------------------
# Token-grid serialization


@dataclass(frozen=True)
class GraphTokenGrid:
    """Fixed-size categorical encoding of a graph for the diffusion models.

    ``node_tokens``: N_max joint tag indices, PAD (= 0) past the true count.
    ``adj_tokens``: row-major N_max * N_max over {no-edge, edge, PAD}.
    """

    node_tokens: tuple
    adj_tokens: tuple
    n_max: int


def to_token_grid(g: SceneGraph, vocab: Vocabulary, n_max: int) -> GraphTokenGrid:
    n = g.num_nodes
    if n > n_max:
        raise ValueError("graph too large")
    order = canonical_order(g)
    pos = {v: i for i, v in enumerate(order)}
    node_tokens = [PAD_INDEX] * n_max
    for v, i in pos.items():
        kind, tag = g.nodes[v]
        node_tokens[i] = vocab.joint_index(kind, tag)
    adj = [ADJ_PAD] * (n_max * n_max)
    for i in range(n):
        for j in range(n):
            adj[i * n_max + j] = ADJ_NO_EDGE
    for s, d in g.edges:
        adj[pos[s] * n_max + pos[d]] = ADJ_EDGE
    return GraphTokenGrid(tuple(node_tokens), tuple(adj), n_max)


def from_token_grid(grid: GraphTokenGrid, vocab: Vocabulary) -> SceneGraph:
    n_max = grid.n_max
    if len(grid.node_tokens) != n_max or len(grid.adj_tokens) != n_max * n_max:
        raise ValueError("malformed grid")
    n = n_max
    for i, tok in enumerate(grid.node_tokens):
        if tok == PAD_INDEX:
            n = i
            break
    # PAD must form a contiguous tail
    nodes = []
    for i, tok in enumerate(grid.node_tokens):
        if i < n:
            if tok == PAD_INDEX or not 0 <= tok < vocab.joint_size:
                raise ValueError("malformed grid")
            kind, tag = vocab.from_joint(tok)
            if tag == PAD_INDEX:
                raise ValueError("malformed grid")
            nodes.append((kind, tag))
        elif tok != PAD_INDEX:
            raise ValueError("malformed grid")
    edges = []
    for i in range(n_max):
        for j in range(n_max):
            tok = grid.adj_tokens[i * n_max + j]
            if i < n and j < n:
                if tok == ADJ_EDGE:
                    if i == j:
                        raise ValueError("malformed grid")
                    edges.append((i, j))
                elif tok != ADJ_NO_EDGE:
                    raise ValueError("malformed grid")
            elif tok != ADJ_PAD:
                raise ValueError("malformed grid")
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Line-delimited JSON corpus format


def graph_to_obj(g: SceneGraph, vocab: Vocabulary) -> dict:
    return {
        "nodes": [[kind.value, vocab.tag(kind, tag)] for kind, tag in g.nodes],
        "edges": [[s, d] for s, d in g.edges],
    }


def graph_from_obj(rec: dict, vocab: Vocabulary) -> SceneGraph:
    nodes = [(NodeKind(kind), vocab.index(NodeKind(kind), tag)) for kind, tag in rec["nodes"]]
    edges = [(int(s), int(d)) for s, d in rec["edges"]]
    return SceneGraph(nodes, edges)


def graph_to_json(g: SceneGraph, vocab: Vocabulary) -> str:
    return json.dumps(graph_to_obj(g, vocab), separators=(",", ":"))


def graph_from_json(line: str, vocab: Vocabulary) -> SceneGraph:
    return graph_from_obj(json.loads(line), vocab)
