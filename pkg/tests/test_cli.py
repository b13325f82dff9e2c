import json

import pytest

from alignlab.cli import main
from alignlab.synthdata import read_shard

from conftest import tiny_config


@pytest.fixture(scope="module")
def cli_cfg_path(tmp_path_factory):
    cfg = tiny_config(
        pairs_train_count=24,
        scorer_train_count=24,
        instructions_train_count=24,
        lm_text_count=16,
        scorer_steps=6,
        lm_warmstart_steps=6,
        pretrain_steps=4,
        finetune_steps=4,
    )
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    overrides = {k: v for k, v in cfg.items()}
    path.write_text(json.dumps(overrides))
    return path


def run(args):
    assert main(args) == 0


def test_full_cli_pipeline(tmp_path, cli_cfg_path, capsys):
    cfg = ["--config", str(cli_cfg_path)]

    run(cfg + ["--out", str(tmp_path / "data"), "gen-data", "--kind", "pairs", "--count", "24"])
    pairs = tmp_path / "data" / "train_pairs.jsonl"
    assert len(read_shard(pairs)) == 24
    assert (tmp_path / "data" / "resolved_config.json").exists()

    run(cfg + ["--out", str(tmp_path / "data"), "gen-data", "--kind", "instructions", "--count", "24"])
    instr = tmp_path / "data" / "train_instructions.jsonl"

    run(cfg + ["--out", str(tmp_path / "scorer"), "score-train", "--data", str(pairs)])
    scorer = tmp_path / "scorer" / "scorer"

    run(cfg + ["--out", str(tmp_path / "lm"), "lm-train", "--data", str(pairs), str(instr)])
    lm = tmp_path / "lm" / "checkpoint"

    run(cfg + ["--out", str(tmp_path / "scored"), "score", "--data", str(pairs), "--scorer", str(scorer)])
    scored = tmp_path / "scored" / "scored.jsonl"
    assert all(r["score"] is not None for r in read_shard(scored))

    run(cfg + ["--out", str(tmp_path / "bucketed"), "bucket", "--data", str(scored), "--levels", "4", "--strategy", "quantile"])
    bucketed = tmp_path / "bucketed" / "bucketed.jsonl"
    summary = json.loads((tmp_path / "bucketed" / "summary.json").read_text())
    assert summary["levels"] == 4

    run(cfg + ["--out", str(tmp_path / "report"), "report", "--data", str(bucketed), "--bins", "5"])
    assert (tmp_path / "report" / "histogram.csv").exists()

    cfg4 = ["--config", str(cli_cfg_path)]
    run(cfg4 + ["--out", str(tmp_path / "pre"), "pretrain", "--data", str(bucketed),
                "--scorer", str(scorer), "--lm", str(lm)])
    pre_ckpt = tmp_path / "pre" / "checkpoint"

    run(cfg4 + ["--out", str(tmp_path / "ft"), "finetune", "--data", str(instr),
                "--init", str(pre_ckpt), "--gating", "local+global"])
    ft_ckpt = tmp_path / "ft" / "checkpoint"

    run(["--seed", "99", "--config", str(cli_cfg_path), "--out", str(tmp_path / "evaldata"),
         "gen-data", "--kind", "instructions", "--split", "eval", "--count", "8"])
    eval_shard = tmp_path / "evaldata" / "eval_instructions.jsonl"

    run(cfg4 + ["--out", str(tmp_path / "eval"), "eval", "--ckpt", str(ft_ckpt), "--data", str(eval_shard)])
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert 0.0 <= report["exact_match"] <= 1.0

    run(cfg4 + ["--out", str(tmp_path / "gate"), "inspect-gate", "--ckpt", str(ft_ckpt), "--data", str(eval_shard)])
    gate = json.loads((tmp_path / "gate" / "gate.json").read_text())
    assert "per_task" in gate

    out = capsys.readouterr().out
    assert "config hash" in out


def test_bucket_width_alias(tmp_path, cli_cfg_path):
    cfg = ["--config", str(cli_cfg_path)]
    run(cfg + ["--out", str(tmp_path / "d"), "gen-data", "--kind", "pairs", "--count", "12"])
    pairs = read_shard(tmp_path / "d" / "train_pairs.jsonl")
    for i, rec in enumerate(pairs):
        rec["score"] = i / 11.0
    from alignlab.synthdata import write_shard

    scored = tmp_path / "d" / "scored.jsonl"
    write_shard(pairs, scored)
    run(cfg + ["--out", str(tmp_path / "b"), "bucket", "--data", str(scored), "--levels", "3", "--strategy", "width"])
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert summary["strategy"] == "equal_width"


def test_seed_override_changes_data(tmp_path, cli_cfg_path):
    cfg = ["--config", str(cli_cfg_path)]
    run(cfg + ["--seed", "1", "--out", str(tmp_path / "s1"), "gen-data", "--kind", "pairs", "--count", "4"])
    run(cfg + ["--seed", "2", "--out", str(tmp_path / "s2"), "gen-data", "--kind", "pairs", "--count", "4"])
    a = read_shard(tmp_path / "s1" / "train_pairs.jsonl")
    b = read_shard(tmp_path / "s2" / "train_pairs.jsonl")
    assert a != b


def test_missing_out_flag_errors():
    with pytest.raises(SystemExit):
        main(["gen-data", "--kind", "pairs"])
