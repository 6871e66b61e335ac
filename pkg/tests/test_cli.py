import json
import os

import numpy as np
import pytest

from sd3.checkpoint import save_checkpoint
from sd3.cli import (
    DEFAULT_CONFIG, load_config, main, model_kwargs, run_dir_for, stage_plan,
)
from sd3.dual import SD3Models
from sd3.numerics import Rng

TINY = {
    "world": {"train_count": 10, "test_count": 4},
    "model": {"d_model": 8, "T": 4, "n_blocks": 1, "dgae_hidden": 8,
              "stride": 2},
    "train": {
        "seed": 3,
        "stages": {
            "1": {"epochs": 1, "lr": 3e-3, "warmup": 4},
            "2": {"epochs": 1, "lr": 1e-3, "warmup": 4},
            "3": {"epochs": 1, "lr": 1e-3, "warmup": 4},
            "4": {"epochs": 1, "lr": 5e-4, "warmup": 4},
        },
    },
}


def write_config(tmp_path, extra=None, name="c.json"):
    cfg = json.loads(json.dumps(TINY))
    for section, sub in (extra or {}).items():
        cfg.setdefault(section, {}).update(sub)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def run_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("SD3_RUN_DIR", str(root))
    return root


def printed_run_dir(capsys):
    out = capsys.readouterr().out
    for line in out.splitlines():
        if line.startswith("run directory: "):
            return line.split(": ", 1)[1]
    raise AssertionError(f"no run directory line in output:\n{out}")


# ---------------------------------------------------------------------------
# Config handling


def test_load_config_fills_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg["world"]["grid_x"] == 6
    assert cfg["model"]["levels"] == [4, 4, 4]
    assert cfg["train"]["ablation"] == "full"
    assert cfg["paths"]["run_root"] == "runs"
    assert model_kwargs(cfg) == {"d_model": 8, "T": 4, "n_blocks": 1,
                                 "dgae_hidden": 8}


def test_load_config_rejects_unknown_keys(tmp_path):
    cases = [
        ({"worldz": {}}, "worldz"),
        ({"world": {"bogus": 1}}, "world.bogus"),
        ({"model": {"nheads": 2}}, "model.nheads"),
        ({"train": {"stages": {"2": {"epocs": 1}}}}, "train.stages.2.epocs"),
        ({"paths": {"outdir": "x"}}, "paths.outdir"),
    ]
    for extra, needle in cases:
        cfg = json.loads(json.dumps(TINY))
        for k, v in extra.items():
            if k in cfg and isinstance(v, dict):
                merged = json.loads(json.dumps(cfg[k]))
                merged.update(v)
                cfg[k] = merged
            else:
                cfg[k] = v
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(cfg))
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(str(p))


def test_load_config_validates_values(tmp_path):
    bad = [
        ({"model": {"stride": 3}}, "stride"),
        ({"model": {"levels": [2, 2]}}, "levels"),
        ({"model": {"img_vocab": 99}}, "img_vocab"),
        ({"train": {"ablation": "noop"}}, "ablation"),
        ({"train": {"weights": {"zeta": 1.0}}}, "weight"),
        ({"world": {"coverage_lo": 0.9, "coverage_hi": 0.2}}, "coverage"),
        ({"world": {"train_count": 0}}, "train_count"),
        ({"train": {"stages": {"1": {"epochs": 0}}}}, "positive"),
    ]
    for extra, needle in bad:
        with pytest.raises(ValueError, match=needle):
            load_config(write_config(tmp_path, extra, name="bad.json"))


def test_stage_plan_merges_ablation_weights(tmp_path):
    cfg = load_config(write_config(
        tmp_path, {"train": {"ablation": "vanilla",
                             "weights": {"theta": 0.5}}}))
    plan = stage_plan(cfg, 4)
    assert plan.weight("graph_cond") == 0.0   # from the ablation
    assert plan.weight("theta") == 0.5        # explicit override
    assert plan.weight("phi") == 1.0          # default
    assert plan.seed == 3 and plan.epochs == 1


def test_run_dir_is_deterministic_and_env_rooted(tmp_path, monkeypatch):
    cfg = load_config(write_config(tmp_path))
    monkeypatch.setenv("SD3_RUN_DIR", "/alt/root")
    a = run_dir_for(cfg, "train-stage1")
    assert a.startswith("/alt/root/train-stage1-")
    assert a == run_dir_for(cfg, "train-stage1")
    assert a != run_dir_for(cfg, "train-stage2")
    cfg2 = json.loads(json.dumps(cfg))
    cfg2["train"]["seed"] = 4
    assert run_dir_for(cfg2, "train-stage1") != a
    monkeypatch.delenv("SD3_RUN_DIR")
    assert run_dir_for(cfg, "train-stage1").startswith("runs/")


# ---------------------------------------------------------------------------
# Subcommands


def test_gen_data_writes_and_reruns_identically(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path]) == 0
    rd = printed_run_dir(capsys)
    train = os.path.join(rd, "train.jsonl")
    test = os.path.join(rd, "test.jsonl")
    assert os.path.exists(train) and os.path.exists(test)
    assert os.path.exists(train + ".manifest.json")
    assert os.path.exists(os.path.join(rd, "config.json"))
    records = [json.loads(l) for l in open(train)]
    assert len(records) == 10
    assert len([json.loads(l) for l in open(test)]) == 4
    blob = open(train, "rb").read()
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert printed_run_dir(capsys) == rd
    assert open(train, "rb").read() == blob


def test_train_without_previous_stage_names_it(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path]) == 0
    rd = printed_run_dir(capsys)
    cfg_path = write_config(tmp_path, {"paths": {
        "data": os.path.join(rd, "train.jsonl")}})
    code = main(["train", "--config", cfg_path, "--stage", "4"])
    err = capsys.readouterr().err
    assert code == 1
    assert "stage 3" in err


def test_full_pipeline_through_the_cli(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path]) == 0
    gen_rd = printed_run_dir(capsys)
    paths = {"data": os.path.join(gen_rd, "train.jsonl"),
             "test_data": os.path.join(gen_rd, "test.jsonl")}

    ckpt = None
    for stage in (1, 2, 3, 4):
        extra = dict(paths)
        if ckpt:
            extra["checkpoint_in"] = ckpt
        cfg_path = write_config(tmp_path, {"paths": extra})
        assert main(["train", "--config", cfg_path, "--stage",
                     str(stage)]) == 0
        rd = printed_run_dir(capsys)
        assert os.path.exists(os.path.join(rd, "report.json"))
        ckpt = os.path.join(rd, "model.ckpt")
        assert os.path.exists(ckpt)
        if stage == 2:
            stage2_ckpt = ckpt

    sample_cfg = write_config(tmp_path, {"paths": {
        **paths, "checkpoint_in": ckpt, "stage2_checkpoint": stage2_ckpt}})
    assert main(["sample", "--config", sample_cfg, "--task", "st2i",
                 "--text", "the red cube is left of the blue ball"]) == 0
    rd = printed_run_dir(capsys)
    payload = json.loads(open(os.path.join(rd, "sample.json")).read())
    assert np.asarray(payload["image"]).shape == (12, 12)
    assert len(payload["graph_codes"]) == 56
    assert "nodes" in payload["graph"]

    assert main(["sample", "--config", sample_cfg, "--task", "si2t",
                 "--record", "0"]) == 0
    rd = printed_run_dir(capsys)
    payload = json.loads(open(os.path.join(rd, "sample.json")).read())
    assert len(payload["words"]) == 24

    assert main(["sample", "--config", sample_cfg, "--task", "graph",
                 "--record", "1"]) == 0
    capsys.readouterr()

    assert main(["eval", "--config", sample_cfg, "--parts", "abcd"]) == 0
    rd = printed_run_dir(capsys)
    report = json.loads(open(os.path.join(rd, "report.json")).read())
    assert "si2t_bleu4" in report["metrics"]
    assert "nodes_object_generated" in report["stats"]

    assert main(["inspect-checkpoint", ckpt]) == 0
    out = capsys.readouterr().out
    assert "entries" in out and "dgae" in out


def test_sample_validation_paths(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path]) == 0
    gen_rd = printed_run_dir(capsys)
    data = os.path.join(gen_rd, "train.jsonl")

    models = SD3Models(seed=3, d_model=8, T=4, n_blocks=1, dgae_hidden=8)
    ckpt = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt, models.store)
    cfg_ok = write_config(tmp_path, {"paths": {"data": data,
                                               "checkpoint_in": ckpt}})

    # no checkpoint configured: validation error
    cfg_no_ckpt = write_config(tmp_path, {"paths": {"data": data}},
                               name="n.json")
    assert main(["sample", "--config", cfg_no_ckpt, "--task", "st2i",
                 "--text", "the red cube is above the blue ball"]) == 1
    # missing checkpoint file: I/O error
    cfg_bad_ckpt = write_config(
        tmp_path, {"paths": {"data": data,
                             "checkpoint_in": str(tmp_path / "no.ckpt")}},
        name="b.json")
    assert main(["sample", "--config", cfg_bad_ckpt, "--task", "st2i",
                 "--text", "the red cube is above the blue ball"]) == 2
    # grammar violations and flag mismatches: validation errors
    assert main(["sample", "--config", cfg_ok, "--task", "st2i",
                 "--text", "purple dragon"]) == 1
    assert main(["sample", "--config", cfg_ok, "--task", "st2i"]) == 1
    assert main(["sample", "--config", cfg_ok, "--task", "si2t"]) == 1
    assert main(["sample", "--config", cfg_ok, "--task", "si2t",
                 "--record", "999"]) == 1
    err = capsys.readouterr().err
    assert "error:" in err


def test_eval_validation(tmp_path, run_root, capsys):
    models = SD3Models(seed=3, d_model=8, T=4, n_blocks=1, dgae_hidden=8)
    ckpt = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt, models.store)
    cfg = write_config(tmp_path, {"paths": {"checkpoint_in": ckpt}})
    assert main(["eval", "--config", cfg, "--parts", "abq"]) == 1
    assert main(["eval", "--config", cfg]) == 1  # no test_data configured
    err = capsys.readouterr().err
    assert "test_data" in err


def test_usage_and_io_exit_codes(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", cfg_path, "--stage", "1",
                 "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1
    capsys.readouterr()
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 1
    capsys.readouterr()


def test_inspect_checkpoint_errors(tmp_path, capsys):
    assert main(["inspect-checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(b"SD3Cgarbage")
    assert main(["inspect-checkpoint", str(corrupt)]) == 1
    err = capsys.readouterr().err
    assert "corrupt" in err


def test_seed_override_lands_in_effective_config(tmp_path, run_root, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg_path, "--seed", "9"]) == 0
    rd = printed_run_dir(capsys)
    effective = json.loads(open(os.path.join(rd, "config.json")).read())
    assert effective["train"]["seed"] == 9
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert printed_run_dir(capsys) != rd
