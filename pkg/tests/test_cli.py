import hashlib
import json

import pytest

from fgl.cli import RunConfig, dump_config, load_config, main

TINY = {
    "model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16},
    "stages": {s: {"steps": 2, "batch_size": 2} for s in ("pretrain", "sft1", "sft2")},
    "grpo": {"G": 2, "n_steps": 8, "w_s": 2, "batch_size": 1, "total_iters": 1},
    "eval": {"n_steps": 4},
    "heldout_per_cell": 1,
    "ablations": [],
}


def _digest(path):
    h = hashlib.sha256()
    for p in sorted(x for x in path.rglob("*") if x.is_file()):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_config_round_trip(cfg_file):
    cfg = load_config(str(cfg_file), env={})
    again = RunConfig.from_dict(json.loads(dump_config(cfg)))
    assert dump_config(again) == dump_config(cfg)
    assert load_config(str(cfg_file), env={"FGL_SEED": "7"}).seed == 7
    assert load_config(str(cfg_file), seed=3, env={"FGL_SEED": "7"}).seed == 3


def test_unknown_key_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"model": {"n_layer": 2}}))
    assert main(["train", str(p), "--out", str(tmp_path / "r")]) == 1
    assert "model.n_layer" in capsys.readouterr().err
    p.write_text(json.dumps({"colour": 1}))
    assert main(["bench", str(p), "--out", str(tmp_path / "m.jsonl")]) == 1
    assert "colour" in capsys.readouterr().err


def test_train_stage_and_resume(cfg_file, tmp_path):
    run = tmp_path / "run"
    assert main(["train", str(cfg_file), "--stage", "pretrain", "--out", str(run), "--quiet"]) == 0
    assert (run / "checkpoints" / "pretrain.ckpt").exists()
    assert len((run / "metrics" / "pretrain.csv").read_text().splitlines()) > 1
    # sft2 before sft1 is a configuration error
    assert main(["train", str(cfg_file), "--stage", "sft2", "--out", str(run), "--quiet"]) == 1
    longer = dict(TINY, stages={**TINY["stages"], "pretrain": {"steps": 4, "batch_size": 2}})
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(json.dumps(longer))
    assert main(["train", str(cfg2), "--stage", "pretrain", "--out", str(run), "--quiet",
                 "--resume", str(run / "checkpoints" / "pretrain.ckpt")]) == 0
    from fgl.model import load_checkpoint
    _, meta, _ = load_checkpoint(run / "checkpoints" / "pretrain.ckpt")
    assert meta["step"] == 4


def test_bench_eval_report(cfg_file, tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    assert main(["bench", str(cfg_file), "--out", str(m)]) == 0
    assert len(m.read_text().splitlines()) == 241
    assert main(["eval", "oracle", str(m), "--out", str(tmp_path / "ev")]) == 0
    lines = (tmp_path / "ev" / "report.csv").read_text().splitlines()
    assert lines[0] == "setting,type,language,metric,value" and len(lines) == 97
    assert all(float(l.split(",")[-1]) == 0.0 for l in lines[1:] if l.split(",")[3] == "P")
    assert main(["report", str(tmp_path / "ev" / "report.csv"), "--out", str(tmp_path / "all.csv")]) == 0
    assert (tmp_path / "all.csv").read_text().startswith("source,setting")


def test_eval_world_mismatch(cfg_file, tmp_path, capsys):
    m = tmp_path / "m.jsonl"
    assert main(["bench", str(cfg_file), "--out", str(m)]) == 0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(TINY, world={"seed": 3})))
    assert main(["eval", "oracle", str(m), "--out", str(tmp_path / "ev"), "--config", str(other)]) == 1
    assert "world" in capsys.readouterr().err


def test_commands_are_deterministic(cfg_file, tmp_path):
    digests = []
    for k in range(2):
        root = tmp_path / f"r{k}"
        assert main(["train", str(cfg_file), "--out", str(root / "run"), "--quiet"]) == 0
        assert main(["bench", str(cfg_file), "--out", str(root / "bench" / "m.jsonl")]) == 0
        assert main(["eval", str(root / "run" / "checkpoints" / "sft2.ckpt"), str(root / "bench" / "m.jsonl"),
                     "--out", str(root / "eval"), "--config", str(cfg_file)]) == 0
        (root / "run" / "config.snapshot").write_text("")  # embeds the out path
        digests.append(_digest(root))
    assert digests[0] == digests[1]
