"""Flat run configuration: defaults, JSON loading, canonical hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

DEFAULTS: dict = {
    "seed": 7,
    # synthetic data
    "grid_size": 4,
    "resolution": 32,
    "patch_size": 8,
    "pair_object_counts": [4, 8],
    "coverage_choices": [0.25, 0.5, 0.75, 1.0],
    "instruction_min_objects": 2,
    "instruction_max_objects": 8,
    "pairs_train_count": 4000,
    "pairs_eval_count": 512,
    "scorer_train_count": 2048,
    "instructions_train_count": 4000,
    "instructions_eval_count": 512,
    # similarity scorer
    "scorer_dim": 32,
    "scorer_hidden": 64,
    "scorer_text_embed": 32,
    "scorer_batch_size": 32,
    "scorer_lr": 1e-3,
    "scorer_steps": 1500,
    "scorer_warmup_fraction": 0.03,
    "scorer_temperature_init": 0.07,
    "scorer_temperature_min": 1e-3,
    "scorer_weight_decay": 0.0,
    # bucketing
    "levels": 8,
    "bucket_strategy": "quantile",
    # model stack
    "model_dim": 64,
    "model_layers": 4,
    "model_heads": 4,
    "vision_dim": 64,
    "vision_layers": 2,
    "vision_heads": 4,
    "max_seq_len": 128,
    # decoder LM text warm start (desk-scale stand-in for starting from a
    # pretrained LM; the warmed weights are frozen through stage 1)
    "lm_warmstart_steps": 2000,
    "lm_warmstart_lr": 1e-3,
    "lm_warmstart_batch_size": 32,
    "lm_text_count": 4000,
    # two-stage training (batch sizes are the paper pair scaled 8x down;
    # learning rates are the stage pair used at full scale)
    "pretrain_batch_size": 32,
    "pretrain_lr": 1e-3,
    "pretrain_steps": 2000,
    "finetune_batch_size": 16,
    "finetune_lr": 2e-5,
    "finetune_steps": 2000,
    "warmup_fraction": 0.03,
    "weight_decay": 0.01,
    "grad_clip": 1.0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "gating_mode": "local+global",
    "gate_feature": "hadamard",  # or "concat"
    "max_answer_len": 80,
}


def resolve_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults <- JSON file <- overrides; reject unknown keys."""
    cfg = dict(DEFAULTS)
    for source_name, source in (("config file", _load(path)), ("override", overrides or {})):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise KeyError(f"unknown {source_name} key: {key!r}")
            cfg[key] = value
    return cfg


def _load(path: str | Path | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a flat JSON object")
    return data


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def write_resolved_config(cfg: dict, out_dir: str | Path) -> str:
    """Write resolved_config.json into out_dir and return its hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return config_hash(cfg)
