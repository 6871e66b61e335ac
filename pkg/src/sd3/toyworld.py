"""Synthetic lattice micro-world with exact ground truth.

Scenes are 2-6 colored shapes on a 6x6x3 integer lattice viewed from the
front (camera looks along +z, so smaller z is nearer).  From a scene we
derive, all exactly:

* a 3D scene graph (objects, color attributes, pairwise spatial relations
  for close pairs, octant region concepts),
* a 12x12 tile image with occlusion (stacked objects hide the farther one),
* a visual scene graph parsed back from visible tiles only (2D predicates,
  adjacent pairs only - deliberately poorer than the 3D graph),
* a templated description covering a random subset of the relations, and a
  textual scene graph that inverts the grammar exactly.

Axis rule for an ordered pair (a, b): if a and b share (x, y) the relation
is depth (smaller z is "in front of"); otherwise the larger of |dx|, |dy|
wins (left-of/right-of vs above/below) and an exact diagonal is "next-to".
Depth predicates therefore appear only where the image could never decide
the pair, which keeps every visual-graph triplet a true 3D triplet.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from .numerics.rng import Rng, rng_stream
from .scenegraph import (
    NodeKind, SceneGraph, Triplet, Vocabulary, graph_from_obj, graph_to_obj,
)

SHAPES = ("cube", "ball", "cone", "slab")
COLORS = ("red", "green", "blue", "gray")
RELATIONS = ("left-of", "right-of", "above", "below",
             "in-front-of", "behind", "next-to", "in-region")
DEPTH_RELATIONS = ("in-front-of", "behind")

REGION_TAGS = tuple(
    f"{'east' if xh else 'west'}-{'upper' if yh else 'lower'}-{'far' if zh else 'near'}"
    for zh in (0, 1) for yh in (0, 1) for xh in (0, 1)
)

# tile alphabet: background + shape x color
K_IMG = 1 + len(SHAPES) * len(COLORS)
IMG_SIDE = 12

WORDS = ("<pad>", "the", "is", "and", "of", "to", "in", "left", "right",
         "above", "below", "front", "behind", "next") + SHAPES + COLORS
WORD_INDEX = {w: i for i, w in enumerate(WORDS)}
K_TEXT = len(WORDS)

_PRED_WORDS = {
    "left-of": ("left", "of"),
    "right-of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
    "in-front-of": ("in", "front", "of"),
    "behind": ("behind",),
    "next-to": ("next", "to"),
}
_WORDS_PRED = {v: k for k, v in _PRED_WORDS.items()}

# largest derived 3DSG: 6 objects + 6 attributes + 30 pair relations
# + 6 region relations + 6 concepts = 54 nodes
TOY_N_MAX = 56


@dataclass(frozen=True)
class WorldConfig:
    grid_x: int = 6
    grid_y: int = 6
    grid_z: int = 3
    min_objects: int = 2
    max_objects: int = 6
    close_distance: int = 2
    coverage_lo: float = 0.4
    coverage_hi: float = 0.8
    max_text_len: int = 24

    def validate(self):
        if not (2 <= self.min_objects <= self.max_objects):
            raise ValueError("bad object count range")
        if self.max_objects > self.grid_x * self.grid_y * self.grid_z:
            raise ValueError("more objects than lattice cells")
        if self.grid_x < 2 or self.grid_y < 2 or self.grid_z < 2:
            raise ValueError("lattice too small")
        if not (0.0 < self.coverage_lo <= self.coverage_hi <= 1.0):
            raise ValueError("bad coverage band")
        if self.max_text_len < 10:
            raise ValueError("text length cannot fit one sentence")


class SceneObject(NamedTuple):
    shape: str
    color: str
    pos: tuple  # (x, y, z)


@dataclass(frozen=True)
class ToyScene:
    objects: tuple  # tuple of SceneObject


def toy_vocabulary() -> Vocabulary:
    return Vocabulary({
        NodeKind.OBJECT: list(SHAPES),
        NodeKind.ATTRIBUTE: list(COLORS),
        NodeKind.RELATION: list(RELATIONS),
        NodeKind.CONCEPT: list(REGION_TAGS),
    })


# ---------------------------------------------------------------------------
# Scene sampling and geometry


def sample_scene(rng: Rng, cfg: WorldConfig = WorldConfig()) -> ToyScene:
    """Uniform scene: count, tags, and collision-free positions."""
    cfg.validate()
    count = cfg.min_objects + rng.randint(cfg.max_objects - cfg.min_objects + 1)
    cells = [(x, y, z) for x in range(cfg.grid_x)
             for y in range(cfg.grid_y) for z in range(cfg.grid_z)]
    objects = []
    for _ in range(count):
        k = rng.randint(len(cells))
        pos = cells.pop(k)
        objects.append(SceneObject(SHAPES[rng.randint(len(SHAPES))],
                                   COLORS[rng.randint(len(COLORS))], pos))
    return ToyScene(tuple(objects))


def spatial_predicate(pa: tuple, pb: tuple, close_distance: int = 2) -> Optional[str]:
    """Predicate P such that "a P b", or None when the pair is not close."""
    dx, dy, dz = pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2]
    if max(abs(dx), abs(dy), abs(dz)) > close_distance:
        return None
    if dx == 0 and dy == 0:
        return "in-front-of" if dz < 0 else "behind"
    if abs(dy) > abs(dx):
        return "above" if dy > 0 else "below"
    if abs(dx) > abs(dy):
        return "left-of" if dx < 0 else "right-of"
    return "next-to"


def planar_predicate(ca: tuple, cb: tuple, close_distance: int = 2) -> Optional[str]:
    """2D restriction of the axis rule, for image-space judgements."""
    dx, dy = ca[0] - cb[0], ca[1] - cb[1]
    if (dx, dy) == (0, 0) or max(abs(dx), abs(dy)) > close_distance:
        return None
    if abs(dy) > abs(dx):
        return "above" if dy > 0 else "below"
    if abs(dx) > abs(dy):
        return "left-of" if dx < 0 else "right-of"
    return "next-to"


def region_of(pos: tuple, cfg: WorldConfig = WorldConfig()) -> str:
    xh = pos[0] >= cfg.grid_x // 2
    yh = pos[1] >= cfg.grid_y // 2
    zh = pos[2] >= max(1, cfg.grid_z // 2)
    return REGION_TAGS[int(xh) + 2 * int(yh) + 4 * int(zh)]


def derive_3dsg(scene: ToyScene, vocab: Vocabulary,
                cfg: WorldConfig = WorldConfig()) -> SceneGraph:
    """Exact 3D scene graph: the shared latent every task is scored against."""
    nodes = []
    edges = []
    for o in scene.objects:
        nodes.append((NodeKind.OBJECT, vocab.index(NodeKind.OBJECT, o.shape)))
    for i, o in enumerate(scene.objects):
        nodes.append((NodeKind.ATTRIBUTE, vocab.index(NodeKind.ATTRIBUTE, o.color)))
        edges.append((i, len(nodes) - 1))
    for i, a in enumerate(scene.objects):
        for j, b in enumerate(scene.objects):
            if i == j:
                continue
            pred = spatial_predicate(a.pos, b.pos, cfg.close_distance)
            if pred is None:
                continue
            nodes.append((NodeKind.RELATION, vocab.index(NodeKind.RELATION, pred)))
            edges.append((i, len(nodes) - 1))
            edges.append((len(nodes) - 1, j))
    # concept nodes go last; region-membership edges are patched afterwards
    membership = []
    for i, o in enumerate(scene.objects):
        nodes.append((NodeKind.RELATION, vocab.index(NodeKind.RELATION, "in-region")))
        edges.append((i, len(nodes) - 1))
        membership.append((len(nodes) - 1, region_of(o.pos, cfg)))
    concept_ids = {}
    for region in sorted({r for _, r in membership}):
        nodes.append((NodeKind.CONCEPT, vocab.index(NodeKind.CONCEPT, region)))
        concept_ids[region] = len(nodes) - 1
    for rel_id, region in membership:
        edges.append((rel_id, concept_ids[region]))
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Rendering and the visual parser


def tile_token(shape: str, color: str) -> int:
    return 1 + SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def tile_tags(token: int) -> tuple:
    """token -> (shape, color); token 0 is background."""
    if not 1 <= token < K_IMG:
        raise ValueError("tile token out of range")
    s, c = divmod(token - 1, len(COLORS))
    return SHAPES[s], COLORS[c]


def render_image(scene: ToyScene, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """12x12 int grid; each lattice cell paints a uniform 2x2 tile block.

    Orthographic front view: column pairs follow x, row pairs follow y with
    row 0 at the top (largest y).  Where two objects share (x, y) only the
    smaller-z one is drawn.
    """
    img = np.zeros((2 * cfg.grid_y, 2 * cfg.grid_x), dtype=np.int64)
    depth = np.full((cfg.grid_y, cfg.grid_x), np.iinfo(np.int64).max, dtype=np.int64)
    for o in scene.objects:
        x, y, z = o.pos
        if z >= depth[y, x]:
            continue
        depth[y, x] = z
        r, c = 2 * (cfg.grid_y - 1 - y), 2 * x
        img[r:r + 2, c:c + 2] = tile_token(o.shape, o.color)
    return img


def visible_objects(image: np.ndarray) -> list:
    """[(shape, color, x, y)] for every painted cell, in scan order."""
    rows, cols = image.shape
    out = []
    for r in range(0, rows, 2):
        for c in range(0, cols, 2):
            tok = int(image[r, c])
            if tok == 0:
                continue
            shape, color = tile_tags(tok)
            out.append((shape, color, c // 2, rows // 2 - 1 - r // 2))
    return out


def derive_vsg(image: np.ndarray, vocab: Vocabulary) -> SceneGraph:
    """Visual scene graph from visible tiles only.

    A deliberately myopic parser: it links only strictly-adjacent cells
    (Manhattan distance 1 in the plane) and never emits depth predicates,
    mirroring how much poorer off-the-shelf 2D parses are than the gold 3D
    graph.
    """
    objs = visible_objects(image)
    nodes = []
    edges = []
    for shape, _, _, _ in objs:
        nodes.append((NodeKind.OBJECT, vocab.index(NodeKind.OBJECT, shape)))
    for i, (_, color, _, _) in enumerate(objs):
        nodes.append((NodeKind.ATTRIBUTE, vocab.index(NodeKind.ATTRIBUTE, color)))
        edges.append((i, len(nodes) - 1))
    for i, a in enumerate(objs):
        for j, b in enumerate(objs):
            if i == j:
                continue
            if abs(a[2] - b[2]) + abs(a[3] - b[3]) != 1:
                continue
            pred = planar_predicate((a[2], a[3]), (b[2], b[3]))
            if pred is None:
                continue
            nodes.append((NodeKind.RELATION, vocab.index(NodeKind.RELATION, pred)))
            edges.append((i, len(nodes) - 1))
            edges.append((len(nodes) - 1, j))
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Text: templated description and its exact inverse


class Mention(NamedTuple):
    subj_color: str
    subj_shape: str
    predicate: str
    obj_color: str
    obj_shape: str


def _scene_mentions(scene: ToyScene, cfg: WorldConfig) -> list:
    """Describable object-object relations.

    "the red cube" is a definite description, so a relation is statable only
    between objects whose (color, shape) is unique in the scene; anything
    else would be ambiguous to invert and unjudgeable against a rendering.
    """
    tally: dict[tuple, int] = {}
    for o in scene.objects:
        tally[(o.color, o.shape)] = tally.get((o.color, o.shape), 0) + 1
    out = []
    for a in scene.objects:
        if tally[(a.color, a.shape)] != 1:
            continue
        for b in scene.objects:
            if b is a or tally[(b.color, b.shape)] != 1:
                continue
            pred = spatial_predicate(a.pos, b.pos, cfg.close_distance)
            if pred is not None:
                out.append(Mention(a.color, a.shape, pred, b.color, b.shape))
    return out


def _sentence_words(m: Mention) -> list:
    return ["the", m.subj_color, m.subj_shape, "is", *_PRED_WORDS[m.predicate],
            "the", m.obj_color, m.obj_shape]


def describe(scene: ToyScene, rng: Rng, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """Templated description of a random 40-80% slice of the relations.

    Sentences are joined by "and"; whole trailing sentences are dropped when
    the token budget runs out, and at least one sentence always survives.
    Scenes with no describable relation fall back to one attribute sentence
    ("the cube is red").
    """
    mentions = _scene_mentions(scene, cfg)
    if mentions:
        frac = cfg.coverage_lo + (cfg.coverage_hi - cfg.coverage_lo) * rng.uniform()
        k = max(1, int(round(frac * len(mentions))))
        rng.shuffle(mentions)
        chosen = mentions[:k]
        words = []
        for i, m in enumerate(chosen):
            cand = (["and"] if i else []) + _sentence_words(m)
            if words and len(words) + len(cand) > cfg.max_text_len:
                break
            words.extend(cand)
    else:
        o = scene.objects[rng.randint(len(scene.objects))]
        words = ["the", o.shape, "is", o.color]
    tokens = np.zeros(cfg.max_text_len, dtype=np.int64)
    for i, w in enumerate(words):
        tokens[i] = WORD_INDEX[w]
    return tokens


def text_to_words(tokens) -> list:
    words = []
    for t in np.asarray(tokens, dtype=np.int64):
        if t == 0:
            break
        if not 0 < t < K_TEXT:
            raise ValueError("grammar violation")
        words.append(WORDS[t])
    return words


def parse_text(tokens) -> tuple:
    """Invert the grammar: (relation mentions, attribute mentions).

    Raises ValueError("grammar violation") on anything the grammar cannot
    produce, including trailing garbage after the final sentence.
    """
    words = text_to_words(tokens)
    if not words:
        raise ValueError("grammar violation")
    relations = []
    attributes = []
    pos = 0

    def expect(w):
        nonlocal pos
        if pos >= len(words) or words[pos] != w:
            raise ValueError("grammar violation")
        pos += 1

    def take(group):
        nonlocal pos
        if pos >= len(words) or words[pos] not in group:
            raise ValueError("grammar violation")
        pos += 1
        return words[pos - 1]

    while True:
        expect("the")
        first = take(SHAPES + COLORS)
        if first in COLORS:
            subj_color, subj_shape = first, take(SHAPES)
            expect("is")
            pred = None
            for length in (3, 2, 1):
                cand = tuple(words[pos:pos + length])
                if cand in _WORDS_PRED:
                    pred = _WORDS_PRED[cand]
                    pos += length
                    break
            if pred is None:
                raise ValueError("grammar violation")
            expect("the")
            obj_color = take(COLORS)
            obj_shape = take(SHAPES)
            relations.append(Mention(subj_color, subj_shape, pred, obj_color, obj_shape))
        else:
            expect("is")
            attributes.append((first, take(COLORS)))
        if pos == len(words):
            return relations, attributes
        expect("and")


def derive_tsg(tokens, vocab: Vocabulary) -> SceneGraph:
    """Textual scene graph; mentions merge on (color, shape)."""
    relations, attributes = parse_text(tokens)
    entities = []
    for m in relations:
        for ent in ((m.subj_color, m.subj_shape), (m.obj_color, m.obj_shape)):
            if ent not in entities:
                entities.append(ent)
    plain = []
    for shape, _ in attributes:
        if (None, shape) not in plain:
            plain.append((None, shape))
    nodes = []
    edges = []
    index = {}
    for ent in entities + plain:
        index[ent] = len(nodes)
        nodes.append((NodeKind.OBJECT, vocab.index(NodeKind.OBJECT, ent[1])))
    for ent in entities:
        nodes.append((NodeKind.ATTRIBUTE, vocab.index(NodeKind.ATTRIBUTE, ent[0])))
        edges.append((index[ent], len(nodes) - 1))
    for shape, color in attributes:
        nodes.append((NodeKind.ATTRIBUTE, vocab.index(NodeKind.ATTRIBUTE, color)))
        edges.append((index[(None, shape)], len(nodes) - 1))
    seen = set()
    for m in relations:
        key = ((m.subj_color, m.subj_shape), m.predicate, (m.obj_color, m.obj_shape))
        if key in seen:
            continue
        seen.add(key)
        nodes.append((NodeKind.RELATION, vocab.index(NodeKind.RELATION, m.predicate)))
        edges.append((index[key[0]], len(nodes) - 1))
        edges.append((len(nodes) - 1, index[key[2]]))
    return SceneGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Image/text consistency oracle


def spatial_accuracy(image: np.ndarray, text) -> float:
    """Fraction of the text's claims the image visibly satisfies.

    Depth claims and claims about entities with no visible instance cannot
    be decided from a 2D rendering and stay out of the denominator; a text
    with no decidable claim scores 1.0 vacuously.
    """
    relations, _ = parse_text(text)
    cells: dict[tuple, list] = {}
    for shape, color, x, y in visible_objects(image):
        cells.setdefault((color, shape), []).append((x, y))
    judged = 0
    satisfied = 0
    for m in relations:
        if m.predicate in DEPTH_RELATIONS:
            continue
        subs = cells.get((m.subj_color, m.subj_shape), [])
        objs = cells.get((m.obj_color, m.obj_shape), [])
        if not subs or not objs:
            continue
        judged += 1
        if any(planar_predicate(a, b) == m.predicate
               for a in subs for b in objs if a != b):
            satisfied += 1
    return satisfied / judged if judged else 1.0


# ---------------------------------------------------------------------------
# Independent re-check of derived triplets (separate code path)

_PRED_DEFS = {
    "left-of": lambda d: abs(d[0]) > abs(d[1]) and d[0] < 0,
    "right-of": lambda d: abs(d[0]) > abs(d[1]) and d[0] > 0,
    "above": lambda d: abs(d[1]) > abs(d[0]) and d[1] > 0,
    "below": lambda d: abs(d[1]) > abs(d[0]) and d[1] < 0,
    "in-front-of": lambda d: d[0] == 0 and d[1] == 0 and d[2] < 0,
    "behind": lambda d: d[0] == 0 and d[1] == 0 and d[2] > 0,
    "next-to": lambda d: (d[0], d[1]) != (0, 0) and abs(d[0]) == abs(d[1]),
}


def check_triplet(scene: ToyScene, trip: Triplet,
                  cfg: WorldConfig = WorldConfig()) -> bool:
    """Verify one triplet straight from raw positions.

    Declarative per-predicate definitions, written independently of
    derive_3dsg, so the two can cross-validate each other.
    """
    if trip.predicate == "in-region":
        return any(o.shape == trip.subject and region_of(o.pos, cfg) == trip.object
                   for o in scene.objects)
    definition = _PRED_DEFS.get(trip.predicate)
    if definition is None:
        return False
    for a in scene.objects:
        if a.shape != trip.subject:
            continue
        for b in scene.objects:
            if b is a or b.shape != trip.object:
                continue
            d = (a.pos[0] - b.pos[0], a.pos[1] - b.pos[1], a.pos[2] - b.pos[2])
            if max(abs(v) for v in d) <= cfg.close_distance and definition(d):
                return True
    return False


# ---------------------------------------------------------------------------
# Dataset files


def scene_to_obj(scene: ToyScene) -> dict:
    return {"objects": [[o.shape, o.color, list(o.pos)] for o in scene.objects]}


def scene_from_obj(rec: dict) -> ToyScene:
    return ToyScene(tuple(SceneObject(s, c, tuple(p)) for s, c, p in rec["objects"]))


def make_record(scene: ToyScene, vocab: Vocabulary, rng: Rng,
                cfg: WorldConfig = WorldConfig()) -> dict:
    image = render_image(scene, cfg)
    text = describe(scene, rng, cfg)
    return {
        "scene": scene_to_obj(scene),
        "image": image.reshape(-1).tolist(),
        "text": text.tolist(),
        "tsg": graph_to_obj(derive_tsg(text, vocab), vocab),
        "vsg": graph_to_obj(derive_vsg(image, vocab), vocab),
        "sg3d": graph_to_obj(derive_3dsg(scene, vocab, cfg), vocab),
    }


def record_image(rec: dict) -> np.ndarray:
    return np.asarray(rec["image"], dtype=np.int64).reshape(IMG_SIDE, IMG_SIDE)


def record_text(rec: dict) -> np.ndarray:
    return np.asarray(rec["text"], dtype=np.int64)


def generate_dataset(path, count: int, seed: int,
                     cfg: WorldConfig = WorldConfig(), vocab=None) -> dict:
    """Write `count` JSONL records plus a manifest; per-item RNG streams."""
    vocab = vocab or toy_vocabulary()
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(count):
            rng = rng_stream(seed, i)
            rec = make_record(sample_scene(rng, cfg), vocab, rng, cfg)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    manifest = {"seed": seed, "count": count, "world": asdict(cfg)}
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
