"""Command-line front end tying the pipeline together.

One JSON config drives everything: dataset generation, the four training
stages, sampling, and the metric suite.  Every invocation writes into its
own run directory (a deterministic hash of the effective config), starting
with a copy of that config, so reruns land in the same place and byte-match.

Exit codes: 0 success, 1 validation problem (bad config, bad flags, failed
precondition), 2 filesystem trouble.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .dual import (ABLATIONS, DEFAULT_WEIGHTS, SD3Models, StagePlan,
                   ablation_weights, sample_graph_tokens, sample_si2t,
                   sample_st2i, train_stage)
from .eval import CORRUPTION_RATES, evaluate_suite
from .numerics import Rng
from .scenegraph import graph_to_obj
from .toyworld import (IMG_SIDE, K_IMG, K_TEXT, TOY_N_MAX, WORD_INDEX, WORDS,
                       WorldConfig, generate_dataset, load_dataset, parse_text,
                       record_image, toy_vocabulary)

_WORLD_FIELDS = {f.name for f in dc_fields(WorldConfig)}

DEFAULT_CONFIG = {
    "world": {
        "grid_x": 6, "grid_y": 6, "grid_z": 3,
        "min_objects": 2, "max_objects": 6,
        "close_distance": 2,
        "coverage_lo": 0.4, "coverage_hi": 0.8,
        "max_text_len": 24,
        "train_count": 512, "test_count": 128,
    },
    "model": {
        "d_model": 32, "n_blocks": 2, "dgae_hidden": 64,
        "latent_dims": 3, "levels": [4, 4, 4],
        "img_vocab": K_IMG, "text_vocab": K_TEXT, "max_nodes": TOY_N_MAX,
        "T": 64, "stride": 2,
    },
    "train": {
        "batch_size": 16,
        "seed": 0,
        "ablation": "full",
        "weights": {},
        "stages": {
            "1": {"epochs": 64, "lr": 3e-3, "warmup": 100, "weight_decay": 1e-4},
            "2": {"epochs": 2, "lr": 1e-3, "warmup": 100, "weight_decay": 0.0},
            "3": {"epochs": 12, "lr": 1e-3, "warmup": 100, "weight_decay": 0.0},
            "4": {"epochs": 2, "lr": 3e-4, "warmup": 100, "weight_decay": 0.0},
        },
    },
    "paths": {
        "run_root": "runs",
        "data": None,
        "test_data": None,
        "checkpoint_in": None,
        "stage2_checkpoint": None,
    },
}


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config key {name}.{sorted(unknown)[0]}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(defaults.get(key), dict) and isinstance(value, dict):
            if key in ("stages", "weights"):
                out[key] = _merge_free(name + "." + key, defaults[key], value)
            else:
                out[key] = _merge_section(name + "." + key, defaults[key], value)
        else:
            out[key] = value
    return out


def _merge_free(name: str, defaults: dict, given: dict) -> dict:
    # stage table / weight table: keys validated semantically below
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(out.get(key), dict) and isinstance(value, dict):
            out[key] = _merge_section(f"{name}.{key}", out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Read, default-fill, and validate a config file; returns the
    effective config every run directory gets a copy of."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]}")
    cfg = {}
    for section, defaults in DEFAULT_CONFIG.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ValueError(f"config section {section!r} must be an object")
        cfg[section] = _merge_section(section, defaults, given)
    validate_config(cfg)
    return cfg


def world_config(cfg: dict) -> WorldConfig:
    kw = {k: v for k, v in cfg["world"].items() if k in _WORLD_FIELDS}
    return WorldConfig(**kw)


def validate_config(cfg: dict) -> None:
    world = cfg["world"]
    world_config(cfg).validate()
    for key in ("train_count", "test_count"):
        if not (isinstance(world[key], int) and world[key] >= 1):
            raise ValueError(f"world.{key} must be a positive integer")
    if world["max_text_len"] != 24:
        raise ValueError("world.max_text_len is pinned to 24 by the text model")

    model = cfg["model"]
    if model["levels"] != [4, 4, 4]:
        raise ValueError("model.levels: only the 5^3 code lattice is supported")
    if model["latent_dims"] != 3:
        raise ValueError("model.latent_dims is pinned to 3 by the code lattice")
    fixed = {"img_vocab": K_IMG, "text_vocab": K_TEXT, "max_nodes": TOY_N_MAX}
    for key, want in fixed.items():
        if model[key] != want:
            raise ValueError(f"model.{key} must equal {want} for this world")
    if not (isinstance(model["d_model"], int) and model["d_model"] >= 8):
        raise ValueError("model.d_model must be an integer >= 8")
    if not (isinstance(model["n_blocks"], int) and model["n_blocks"] >= 1):
        raise ValueError("model.n_blocks must be a positive integer")
    if not (isinstance(model["dgae_hidden"], int) and model["dgae_hidden"] >= 4):
        raise ValueError("model.dgae_hidden must be an integer >= 4")
    if not (isinstance(model["T"], int) and model["T"] >= 2):
        raise ValueError("model.T must be an integer >= 2")
    stride = model["stride"]
    if not (isinstance(stride, int) and stride >= 1 and model["T"] % stride == 0):
        raise ValueError("model.stride must divide model.T")

    train = cfg["train"]
    if train["ablation"] not in ABLATIONS:
        raise ValueError(f"train.ablation must be one of {sorted(ABLATIONS)}")
    unknown = set(train["weights"]) - set(DEFAULT_WEIGHTS)
    if unknown:
        raise ValueError(f"unknown loss weight {sorted(unknown)[0]!r}")
    if set(train["stages"]) - {"1", "2", "3", "4"}:
        raise ValueError("train.stages keys must be '1'..'4'")
    for stage_key, sub in train["stages"].items():
        stage_plan(cfg, int(stage_key))  # constructor validates


def stage_plan(cfg: dict, stage: int) -> StagePlan:
    train = cfg["train"]
    sub = train["stages"].get(str(stage))
    if sub is None:
        raise ValueError(f"train.stages has no entry for stage {stage}")
    allowed = {"epochs", "lr", "warmup", "weight_decay"}
    unknown = set(sub) - allowed
    if unknown:
        raise ValueError(
            f"unknown config key train.stages.{stage}.{sorted(unknown)[0]}")
    weights = dict(ablation_weights(train["ablation"]))
    weights.update(train["weights"])
    return StagePlan(stage=stage, batch_size=train["batch_size"],
                     seed=train["seed"], weights=weights, **sub)


def model_kwargs(cfg: dict) -> dict:
    m = cfg["model"]
    return {"d_model": m["d_model"], "T": m["T"], "n_blocks": m["n_blocks"],
            "dgae_hidden": m["dgae_hidden"]}


# ---------------------------------------------------------------------------
# Run directories


def run_dir_for(cfg: dict, command: str) -> str:
    root = os.environ.get("SD3_RUN_DIR") or cfg["paths"]["run_root"]
    digest = hashlib.sha256(json.dumps(
        {"cfg": cfg, "cmd": command}, sort_keys=True).encode()).hexdigest()[:10]
    return os.path.join(root, f"{command}-{digest}")


def _open_run_dir(cfg: dict, command: str) -> str:
    rd = run_dir_for(cfg, command)
    os.makedirs(rd, exist_ok=True)
    with open(os.path.join(rd, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rd


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _restored_models(cfg: dict, path) -> SD3Models:
    if path is None:
        raise ValueError("paths.checkpoint_in is required for this command")
    models = SD3Models(seed=cfg["train"]["seed"], **model_kwargs(cfg))
    restore_into(models.store, load_checkpoint(path))
    return models


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(cfg: dict) -> int:
    rd = _open_run_dir(cfg, "gen-data")
    wcfg = world_config(cfg)
    seed = cfg["train"]["seed"]
    train_path = os.path.join(rd, "train.jsonl")
    test_path = os.path.join(rd, "test.jsonl")
    generate_dataset(train_path, cfg["world"]["train_count"], seed, wcfg)
    generate_dataset(test_path, cfg["world"]["test_count"], seed + 1, wcfg)
    print(f"run directory: {rd}")
    print(f"wrote {cfg['world']['train_count']} train / "
          f"{cfg['world']['test_count']} test records")
    return 0


def cmd_train(cfg: dict, stage: int) -> int:
    if cfg["paths"]["data"] is None:
        raise ValueError("paths.data is required for training")
    records = load_dataset(cfg["paths"]["data"])
    holdout = None
    if cfg["paths"]["test_data"]:
        holdout = load_dataset(cfg["paths"]["test_data"])
    rd = _open_run_dir(cfg, f"train-stage{stage}")
    plan = stage_plan(cfg, stage)
    report = train_stage(plan, records,
                         ckpt_in=cfg["paths"]["checkpoint_in"],
                         ckpt_out=os.path.join(rd, "model.ckpt"),
                         holdout=holdout, model_kw=model_kwargs(cfg))
    _write_json(os.path.join(rd, "report.json"), report)
    print(f"run directory: {rd}")
    last = report["epochs"][-1] if report["epochs"] else {}
    print(f"stage {stage} done; last epoch: {json.dumps(last, sort_keys=True)}")
    return 0


def _sentence_tokens(sentence: str) -> np.ndarray:
    words = sentence.strip().split()
    tokens = []
    for w in words:
        if w not in WORD_INDEX or WORD_INDEX[w] == 0:
            raise ValueError(f"word {w!r} is outside the toy grammar")
        tokens.append(WORD_INDEX[w])
    if len(tokens) > 24:
        raise ValueError("sentence longer than the 24-token budget")
    parse_text(tokens)  # grammar check before any sampling work
    return np.array(tokens + [0] * (24 - len(tokens)), dtype=np.int64)


def _record_by_index(cfg: dict, index) -> dict:
    if index is None:
        raise ValueError("--record is required for this task")
    if cfg["paths"]["data"] is None:
        raise ValueError("paths.data is required to look up records")
    records = load_dataset(cfg["paths"]["data"])
    if not 0 <= index < len(records):
        raise ValueError(f"record index {index} outside the dataset")
    return records[index]


def cmd_sample(cfg: dict, task: str, text, record_index) -> int:
    models = _restored_models(cfg, cfg["paths"]["checkpoint_in"])
    vocab = models.vocab
    stride = cfg["model"]["stride"]
    rng = Rng(cfg["train"]["seed"], 7000)
    out = {"task": task}
    if task == "st2i":
        if text is None:
            raise ValueError("--text is required for st2i")
        tokens = _sentence_tokens(text)
        tiles, grid = sample_st2i(models, tokens, rng, stride=stride)
        out["text_tokens"] = tokens.tolist()
        out["image"] = tiles.tolist()
        out["graph_codes"] = grid.tolist()
        out["graph"] = graph_to_obj(models.decode_graph(grid), vocab)
    elif task == "si2t":
        rec = _record_by_index(cfg, record_index)
        image = record_image(rec)
        words, grid = sample_si2t(models, image, rng, stride=stride)
        words = [int(w) for w in words]
        out["record"] = record_index
        out["words"] = words
        out["text"] = " ".join(WORDS[w] for w in words if w != 0)
        out["graph_codes"] = grid.tolist()
        out["graph"] = graph_to_obj(models.decode_graph(grid), vocab)
    else:
        if text is not None:
            cond_tokens = _sentence_tokens(text).reshape(1, -1)
            grids = sample_graph_tokens(models, rng, text=cond_tokens,
                                        stride=stride)
        else:
            rec = _record_by_index(cfg, record_index)
            image = record_image(rec).reshape(1, IMG_SIDE, IMG_SIDE)
            grids = sample_graph_tokens(models, rng, image=image,
                                        stride=stride)
        out["graph_codes"] = grids[0].tolist()
        out["graph"] = graph_to_obj(models.decode_graph(grids[0]), vocab)
    rd = _open_run_dir(cfg, f"sample-{task}")
    _write_json(os.path.join(rd, "sample.json"), out)
    print(f"run directory: {rd}")
    if "text" in out:
        print(f"text: {out['text']}")
    print(f"graph nodes: {len(out['graph']['nodes'])}")
    return 0


def cmd_eval(cfg: dict, parts: str) -> int:
    parts = tuple(parts)
    bad = set(parts) - set("abcde")
    if bad:
        raise ValueError(f"unknown eval part {sorted(bad)[0]!r}")
    if cfg["paths"]["test_data"] is None:
        raise ValueError("paths.test_data is required for eval")
    records = load_dataset(cfg["paths"]["test_data"])
    checkpoints = {"model": cfg["paths"]["checkpoint_in"]}
    if cfg["paths"]["checkpoint_in"] is None:
        raise ValueError("paths.checkpoint_in is required for eval")
    train_records = None
    stage3 = None
    if "e" in parts:
        checkpoints["stage2"] = cfg["paths"]["stage2_checkpoint"]
        if checkpoints["stage2"] is None:
            raise ValueError("paths.stage2_checkpoint is required for part e")
        if cfg["paths"]["data"] is None:
            raise ValueError("paths.data is required for part e")
        train_records = load_dataset(cfg["paths"]["data"])
        stage3 = stage_plan(cfg, 3)
    report = evaluate_suite(checkpoints, records,
                            Rng(cfg["train"]["seed"], 9000), parts=parts,
                            train_records=train_records,
                            stride=cfg["model"]["stride"],
                            rates=CORRUPTION_RATES, stage3_plan=stage3,
                            model_kw=model_kwargs(cfg))
    rd = _open_run_dir(cfg, "eval-" + "".join(parts))
    report.save(os.path.join(rd, "report.json"))
    if "corruption" in report.tables:
        report.save_csv(os.path.join(rd, "corruption.csv"))
    print(f"run directory: {rd}")
    for name in sorted(report.metrics):
        entry = report.metrics[name]
        print(f"  {name}: {entry['value']:.4f} (n={entry['count']})")
    return 0


def cmd_inspect(path: str) -> int:
    entries = load_checkpoint(path)
    total = 0
    for name in sorted(entries):
        arr = entries[name]
        total += arr.size
        print(f"  {name}  {tuple(arr.shape)}")
    print(f"{len(entries)} entries, {total} parameters")
    return 0


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors: exit 1, not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sd3", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed")

    add_common(sub.add_parser("gen-data", help="write train/test datasets"))

    p_train = sub.add_parser("train", help="run one training stage")
    add_common(p_train)
    p_train.add_argument("--stage", type=int, required=True,
                         choices=(1, 2, 3, 4))

    p_sample = sub.add_parser("sample", help="draw from trained models")
    add_common(p_sample)
    p_sample.add_argument("--task", required=True,
                          choices=("st2i", "si2t", "graph"))
    p_sample.add_argument("--text", default=None,
                          help="grammar sentence (st2i / graph)")
    p_sample.add_argument("--record", type=int, default=None,
                          help="dataset row index (si2t / graph)")

    p_eval = sub.add_parser("eval", help="run the metric suite")
    add_common(p_eval)
    p_eval.add_argument("--parts", default="abcd",
                        help="metric parts, subset of abcde")

    p_inspect = sub.add_parser("inspect-checkpoint",
                               help="list checkpoint entries")
    p_inspect.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "inspect-checkpoint":
            return cmd_inspect(args.path)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["train"]["seed"] = args.seed
            validate_config(cfg)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage)
        if args.command == "sample":
            return cmd_sample(cfg, args.task, args.text, args.record)
        return cmd_eval(cfg, args.parts)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
