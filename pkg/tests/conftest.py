import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alignlab.config import resolve_config
from alignlab.synthdata import generate_instruction_shard, generate_pair_shard


def tiny_config(**overrides) -> dict:
    base = {
        "pairs_train_count": 48,
        "pairs_eval_count": 32,
        "scorer_train_count": 64,
        "instructions_train_count": 48,
        "instructions_eval_count": 16,
        "lm_text_count": 32,
        "scorer_steps": 30,
        "lm_warmstart_steps": 25,
        "pretrain_steps": 20,
        "finetune_steps": 20,
        "pretrain_batch_size": 8,
        "finetune_batch_size": 8,
        "lm_warmstart_batch_size": 8,
        "scorer_batch_size": 8,
    }
    base.update(overrides)
    return resolve_config(overrides=base)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_pairs(tiny_cfg):
    records = generate_pair_shard(tiny_cfg["seed"], tiny_cfg["pairs_train_count"])
    # Deterministic stand-in levels so trainer tests don't need the scorer.
    for i, rec in enumerate(records):
        rec["level"] = (i % tiny_cfg["levels"]) + 1
    return records


@pytest.fixture(scope="session")
def tiny_instructions(tiny_cfg):
    return generate_instruction_shard(tiny_cfg["seed"], tiny_cfg["instructions_train_count"])
