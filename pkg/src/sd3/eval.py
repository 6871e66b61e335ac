"""Metrics and analysis experiments over the trained pipeline.

Scores generated text against gold captions and the rendering oracle,
generated images against gold tile grids and the text they were asked to
satisfy, and generated scene graphs against the exact 3D graphs, with the
myopic VSG/TSG parses as reference baselines.  Also fits the corruption
ablation: retrain the graph denoiser on increasingly noisy targets and
watch the recall curve fall.

Everything is deterministic given (checkpoint, split, seed); reports
serialize to JSON byte-identically across reruns.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_checkpoint, restore_into
from .diffusion import sample_reverse
from .dual import SD3Models, StagePlan, joint_condition, train_stage
from .numerics import Rng
from .scenegraph import (NodeKind, SceneGraph, Vocabulary, graph_from_obj,
                         graph_to_obj, triplet_recall, triplets)
from .toyworld import (derive_tsg, record_image, record_text, spatial_accuracy,
                       toy_vocabulary)

CORRUPTION_RATES = (0.0, 0.2, 0.4, 0.6, 0.8)


# ---------------------------------------------------------------------------
# BLEU


def _ngram_counts(seq, n):
    counts = {}
    for i in range(len(seq) - n + 1):
        key = tuple(seq[i:i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu4(hypothesis, references) -> float:
    """Smoothed token-level BLEU4 with brevity penalty.

    Zero n-gram matches fall back to add-one smoothing 1/(t+1); orders the
    hypothesis is too short to populate contribute a factor of 1.
    """
    hyp = [int(t) for t in hypothesis]
    refs = [[int(t) for t in r] for r in references]
    if not refs or any(not r for r in refs):
        raise ValueError("empty reference set")
    if not hyp:
        raise ValueError("empty hypothesis")
    c = len(hyp)
    # closest reference length; ties break toward the shorter reference
    r = min((len(ref) for ref in refs), key=lambda n: (abs(n - c), n))
    log_p = 0.0
    for n in range(1, 5):
        total = max(0, c - n + 1)
        hyp_counts = _ngram_counts(hyp, n)
        matched = 0
        for gram, cnt in hyp_counts.items():
            best = max(_ngram_counts(ref, n).get(gram, 0) for ref in refs)
            matched += min(cnt, best)
        if matched > 0:
            log_p += math.log(matched / total)
        else:
            log_p += math.log(1.0 / (total + 1))
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_p / 4.0)


# ---------------------------------------------------------------------------
# Report plumbing


def summarize(scores) -> dict:
    """Mean with a normal-approximation 95% interval over per-item scores."""
    xs = np.asarray(list(scores), dtype=np.float64)
    if xs.size == 0:
        raise ValueError("no samples for metric")
    value = float(xs.mean())
    if xs.size > 1:
        half = 1.96 * float(xs.std(ddof=1)) / math.sqrt(xs.size)
    else:
        half = 0.0
    return {
        "value": value,
        "count": int(xs.size),
        "ci_low": value - half,
        "ci_high": value + half,
    }


@dataclass
class EvalReport:
    """Per-metric summaries plus unbounded stats and grid tables.

    `metrics` entries are scores in [0, 1]; `stats` holds node-count style
    summaries with the same {value, count, ci_low, ci_high} shape; `tables`
    holds row lists such as the corruption grid.
    """

    metrics: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> str:
        payload = {
            "metrics": self.metrics,
            "stats": self.stats,
            "tables": self.tables,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def save_csv(self, path, table: str = "corruption") -> None:
        rows = self.tables.get(table)
        if not rows:
            raise ValueError(f"no table named {table!r}")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=sorted(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)


def _strip_pad(tokens) -> list:
    out = []
    for t in np.asarray(tokens).reshape(-1):
        if t == 0:
            break
        out.append(int(t))
    return out


# ---------------------------------------------------------------------------
# Generation


def generate_for_records(models: SD3Models, records, rng: Rng, stride: int = 2,
                         use_graph: bool = True, batch: int = 64) -> dict:
    """Sample every modality for a record list, batched for throughput.

    Returns arrays keyed "graph_from_text", "graph_from_image", "image",
    "text"; the graph grids are the ones that conditioned the image/text
    draws, matching the graph-first sampling order.
    """
    texts = np.stack([record_text(r) for r in records])
    images = np.stack([record_image(r) for r in records])
    out = {"graph_from_text": [], "graph_from_image": [], "image": [], "text": []}
    for lo in range(0, len(records), batch):
        t = texts[lo:lo + batch]
        im = images[lo:lo + batch]
        c, m = joint_condition(models, text=t)
        g_t = sample_reverse(models.sched_gph, models.psi, c, rng, stride, m)
        c, m = joint_condition(models, image=im)
        g_i = sample_reverse(models.sched_gph, models.psi, c, rng, stride, m)
        c, m = joint_condition(models, text=t, graph=g_t if use_graph else None)
        tiles = sample_reverse(models.sched_img, models.theta, c, rng, stride, m)
        c, m = joint_condition(models, image=im, graph=g_i if use_graph else None)
        words = sample_reverse(models.sched_txt, models.phi, c, rng, stride, m)
        out["graph_from_text"].append(g_t)
        out["graph_from_image"].append(g_i)
        out["image"].append(tiles.reshape(-1, 12, 12))
        out["text"].append(words)
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


def generate_graphs_for_records(models: SD3Models, records, rng: Rng,
                                stride: int = 2, batch: int = 64) -> dict:
    """Graph-only variant for the 3DSG quality and corruption parts."""
    texts = np.stack([record_text(r) for r in records])
    images = np.stack([record_image(r) for r in records])
    g_t, g_i = [], []
    for lo in range(0, len(records), batch):
        c, m = joint_condition(models, text=texts[lo:lo + batch])
        g_t.append(sample_reverse(models.sched_gph, models.psi, c, rng, stride, m))
        c, m = joint_condition(models, image=images[lo:lo + batch])
        g_i.append(sample_reverse(models.sched_gph, models.psi, c, rng, stride, m))
    return {
        "graph_from_text": np.concatenate(g_t, axis=0),
        "graph_from_image": np.concatenate(g_i, axis=0),
    }


# ---------------------------------------------------------------------------
# Per-part scoring


def si2t_scores(records, gen_text, vocab: Vocabulary) -> dict:
    """BLEU4 vs gold, oracle accuracy vs the input image, and toy-SPICE.

    Unparseable generated text scores 0 on the oracle and toy-SPICE; items
    whose gold caption carries no relation triplet are skipped for
    toy-SPICE (recall is undefined there).
    """
    bleu, acc, spice = [], [], []
    for rec, words in zip(records, gen_text):
        gold = _strip_pad(record_text(rec))
        hyp = _strip_pad(words)
        bleu.append(bleu4(hyp, [gold]) if hyp else 0.0)
        try:
            acc.append(spatial_accuracy(record_image(rec), words))
        except ValueError:
            acc.append(0.0)
        gold_tsg = graph_from_obj(rec["tsg"], vocab)
        if not triplets(gold_tsg, vocab):
            continue
        try:
            spice.append(triplet_recall(derive_tsg(words, vocab), gold_tsg, vocab))
        except ValueError:
            spice.append(0.0)
    return {
        "si2t_bleu4": summarize(bleu),
        "si2t_spatial_accuracy": summarize(acc),
        "toy_spice": summarize(spice),
    }


def st2i_scores(records, gen_images) -> dict:
    """Per-tile match rate vs the gold rendering plus the oracle check."""
    match, acc = [], []
    for rec, tiles in zip(records, gen_images):
        gold = record_image(rec)
        match.append(float(np.mean(tiles == gold)))
        acc.append(spatial_accuracy(np.asarray(tiles), record_text(rec)))
    return {
        "st2i_token_match": summarize(match),
        "st2i_spatial_accuracy": summarize(acc),
    }


def graph_scores(models: SD3Models, records, graph_from_text, graph_from_image,
                 vocab: Vocabulary) -> dict:
    """Triplet recall of decoded generations vs gold, with VSG/TSG baselines."""
    from_t, from_i, gen_mean, vsg_b, tsg_b = [], [], [], [], []
    for rec, gt, gi in zip(records, graph_from_text, graph_from_image):
        gold = graph_from_obj(rec["sg3d"], vocab)
        rt = triplet_recall(models.decode_graph(gt), gold, vocab)
        ri = triplet_recall(models.decode_graph(gi), gold, vocab)
        from_t.append(rt)
        from_i.append(ri)
        gen_mean.append(0.5 * (rt + ri))
        vsg_b.append(triplet_recall(graph_from_obj(rec["vsg"], vocab), gold, vocab))
        tsg_b.append(triplet_recall(graph_from_obj(rec["tsg"], vocab), gold, vocab))
    return {
        "trirec_generated": summarize(gen_mean),
        "trirec_from_text": summarize(from_t),
        "trirec_from_image": summarize(from_i),
        "trirec_vsg": summarize(vsg_b),
        "trirec_tsg": summarize(tsg_b),
    }


def _kind_count(g: SceneGraph, kind: NodeKind) -> float:
    return float(sum(1 for k, _ in g.nodes if k is kind))


def node_count_stats(models: SD3Models, records, graph_from_text,
                     graph_from_image, vocab: Vocabulary) -> dict:
    """Mean node counts per kind: initial VSG vs generated 3DSGs pooled."""
    kinds = (NodeKind.OBJECT, NodeKind.ATTRIBUTE, NodeKind.RELATION)
    vsg_counts = {k: [] for k in kinds}
    gen_counts = {k: [] for k in kinds}
    for rec, gt, gi in zip(records, graph_from_text, graph_from_image):
        vsg = graph_from_obj(rec["vsg"], vocab)
        for k in kinds:
            vsg_counts[k].append(_kind_count(vsg, k))
        for grid in (gt, gi):
            g = models.decode_graph(grid)
            for k in kinds:
                gen_counts[k].append(_kind_count(g, k))
    stats = {}
    for k in kinds:
        name = k.name.lower()
        stats[f"nodes_{name}_vsg"] = summarize(vsg_counts[k])
        stats[f"nodes_{name}_generated"] = summarize(gen_counts[k])
    return stats


# ---------------------------------------------------------------------------
# Corruption ablation


def corrupt_graph(g: SceneGraph, rate: float, rng: Rng,
                  vocab: Vocabulary) -> SceneGraph:
    """Resample a `rate` fraction of node tags (within kind, PAD/NULL
    excluded) and re-point the same fraction of edge destinations.

    The result may violate the scene grammar; the graph encoder accepts it
    regardless, which is the point: the training targets get noisy, not the
    scoring."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("corruption rate must lie in [0, 1]")
    nodes = list(g.nodes)
    for i, (kind, tag) in enumerate(nodes):
        if rng.uniform() < rate:
            pool = [t for t in range(2, vocab.size(kind)) if t != tag]
            if pool:
                nodes[i] = (kind, pool[rng.randint(len(pool))])
    edges = []
    for src, dst in g.edges:
        if rng.uniform() < rate and len(nodes) > 1:
            shifted = rng.randint(len(nodes) - 1)
            dst = shifted if shifted < dst else shifted + 1
        edges.append((src, dst))
    return SceneGraph(tuple(nodes), tuple(edges))


def corrupted_records(records, rate: float, rng: Rng, vocab: Vocabulary) -> list:
    """Copy of `records` with each gold 3DSG corrupted at `rate`."""
    out = []
    for rec in records:
        g = corrupt_graph(graph_from_obj(rec["sg3d"], vocab), rate, rng, vocab)
        rec2 = dict(rec)
        rec2["sg3d"] = graph_to_obj(g, vocab)
        out.append(rec2)
    return out


def corruption_ablation(stage2_ckpt, train_records, test_records,
                        plan: StagePlan, rng: Rng,
                        rates=CORRUPTION_RATES, stride: int = 2,
                        batch: int = 64, model_kw=None) -> list:
    """Retrain the graph denoiser on corrupted targets, one run per rate.

    Each run restarts from the stage-2 checkpoint with the same plan and
    seed, so the rows differ only in target noise.  Returns the grid rows.
    """
    entries = load_checkpoint(stage2_ckpt)
    base = int(rng.randint(1 << 31))
    rows = []
    for rate in rates:
        models = SD3Models(seed=plan.seed, **(model_kw or {}))
        restore_into(models.store, entries)
        noisy = corrupted_records(train_records, rate,
                                  Rng(base, 1000 + int(round(rate * 100))),
                                  models.vocab)
        train_stage(replace(plan, stage=3), noisy, models=models)
        gen = generate_graphs_for_records(
            models, test_records, Rng(base, 2000 + int(round(rate * 100))),
            stride=stride, batch=batch)
        scores = graph_scores(models, test_records, gen["graph_from_text"],
                              gen["graph_from_image"], models.vocab)
        rows.append({
            "rate": rate,
            "trirec_generated": scores["trirec_generated"]["value"],
            "trirec_from_text": scores["trirec_from_text"]["value"],
            "trirec_from_image": scores["trirec_from_image"]["value"],
            "count": scores["trirec_generated"]["count"],
        })
    return rows


# ---------------------------------------------------------------------------
# Suite


def gold_self_scores(records, vocab: Vocabulary) -> dict:
    """Score the gold data against itself; every metric must sit at 1.0."""
    bleu, acc, rec3d = [], [], []
    for rec in records:
        gold = _strip_pad(record_text(rec))
        bleu.append(bleu4(gold, [gold]))
        acc.append(spatial_accuracy(record_image(rec), record_text(rec)))
        g = graph_from_obj(rec["sg3d"], vocab)
        rec3d.append(triplet_recall(g, g, vocab))
    return {
        "bleu4": summarize(bleu),
        "spatial_accuracy": summarize(acc),
        "trirec": summarize(rec3d),
    }


def evaluate_suite(checkpoints: dict, records, rng: Rng,
                   parts=("a", "b", "c", "d"), train_records=None,
                   stride: int = 2, batch: int = 64,
                   rates=CORRUPTION_RATES, stage3_plan: StagePlan = None,
                   model_kw=None) -> EvalReport:
    """Run the requested metric parts against a trained checkpoint.

    `checkpoints` maps names to paths; "model" is always required, and the
    corruption part ("e") additionally needs "stage2" plus `train_records`
    and a stage-3 plan.
    """
    unknown = set(parts) - set("abcde")
    if unknown:
        raise ValueError(f"unknown eval part {sorted(unknown)[0]!r}")
    needed = {"model"} | ({"stage2"} if "e" in parts else set())
    for name in sorted(needed):
        path = checkpoints.get(name)
        if path is None or not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint: {name}")
    if "e" in parts:
        if train_records is None:
            raise ValueError("corruption part needs train_records")
        if stage3_plan is None:
            raise ValueError("corruption part needs a stage-3 plan")
    base = int(rng.randint(1 << 31))
    vocab = toy_vocabulary()
    models = SD3Models(seed=0, **(model_kw or {}))
    restore_into(models.store, load_checkpoint(checkpoints["model"]))

    report = EvalReport(seed=base)
    want_full = "a" in parts or "b" in parts
    if want_full:
        gen = generate_for_records(models, records, Rng(base, 1),
                                   stride=stride, batch=batch)
    elif "c" in parts or "d" in parts:
        gen = generate_graphs_for_records(models, records, Rng(base, 1),
                                          stride=stride, batch=batch)
    if "a" in parts:
        report.metrics.update(si2t_scores(records, gen["text"], vocab))
    if "b" in parts:
        report.metrics.update(st2i_scores(records, gen["image"]))
    if "c" in parts:
        report.metrics.update(graph_scores(
            models, records, gen["graph_from_text"], gen["graph_from_image"],
            vocab))
    if "d" in parts:
        report.stats.update(node_count_stats(
            models, records, gen["graph_from_text"], gen["graph_from_image"],
            vocab))
    if "e" in parts:
        report.tables["corruption"] = corruption_ablation(
            checkpoints["stage2"], train_records, records, stage3_plan,
            Rng(base, 5), rates=rates, stride=stride, batch=batch,
            model_kw=model_kw)
    return report
