"""Evaluation metrics and the ablation suite.

Reports are pure functions of (checkpoint, shard): no timestamps, sorted
JSON, so re-emission is byte-identical. Ablation grids share data, seed and
every non-axis hyperparameter across cells (asserted by hashing), and each
cell can be re-run individually to identical numbers. Directional outcomes
between cells are reported, never asserted.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bucketing, simscore, trainer
from .aligncore import alignment_slot_embedding
from .checkpoint import checkpoint_hash
from .config import canonical_json, config_hash
from .model import MultimodalStack, generate, image_to_tensor
from .synthdata import (
    decode_tokens,
    encode_tokens,
    generate_instruction_shard,
    generate_pair_shard,
    namespace_of,
    read_shard,
    render_scene,
    scene_from_json,
    write_shard,
)

# Eval/scorer/LM-text splits draw from shifted seed streams so their scenes
# cannot collide with the training namespaces.
EVAL_SEED_OFFSET = 104729
SCORER_SEED_OFFSET = 15485863
LMTEXT_SEED_OFFSET = 32452843

# The warm-start text corpus leans on cell-lookup and predicate tasks:
# positional reading is the circuit the multimodal stages need most and the
# one that trains slowest from a uniform mix.
LMTEXT_TASK_MIX = (
    "region_query", "region_query", "region_query",
    "existence", "existence", "existence",
    "count", "caption",
)

ABLATION_AXES = {
    "levels": ("levels", (4, 6, 8, 10)),
    "gating": ("gating_mode", ("local", "global", "average", "local+global")),
    "table-init": ("table_init", ("pretrained", "random")),
}


def shard_digest(records: list[dict]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(canonical_json(rec).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class EvalReport:
    sample_count: int
    exact_match: float
    per_task: dict
    caption_token_accuracy: float | None
    checkpoint_hash: str
    config_hash: str
    shard_hash: str
    predictions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "exact_match": self.exact_match,
            "per_task": self.per_task,
            "caption_token_accuracy": self.caption_token_accuracy,
            "checkpoint_hash": self.checkpoint_hash,
            "config_hash": self.config_hash,
            "shard_hash": self.shard_hash,
            "predictions": self.predictions,
        }


def _alignment_embedding_for(
    stack: MultimodalStack, mode: str, instruction_ids: torch.Tensor, image_tokens: torch.Tensor
) -> torch.Tensor:
    h_instruction = stack.lm.embed_tokens(instruction_ids).mean(dim=0)
    h_image = image_tokens.mean(dim=0)
    return alignment_slot_embedding(stack.align_table, stack.gate, h_instruction, h_image, mode)


@torch.no_grad()
def evaluate(ckpt_dir: str | Path, records: list[dict], max_answer_len: int | None = None) -> EvalReport:
    """Greedy-decode every instruction record and collect exact-match accuracy."""
    if not records:
        raise ValueError("evaluation shard is empty")
    stack, ckpt = trainer.load_stack(ckpt_dir)
    cfg = ckpt.meta["config"]
    mode = ckpt.meta.get("gating_mode", cfg["gating_mode"])
    max_len = cfg["max_answer_len"] if max_answer_len is None else max_answer_len

    train_namespaces = set(ckpt.meta.get("train_namespaces", []))
    train_namespaces.update(ckpt.meta.get("pretrain_namespaces", []))
    eval_namespaces = {namespace_of(rec["id"]) for rec in records}
    overlap = train_namespaces & eval_namespaces
    if overlap:
        raise ValueError(f"evaluation shard overlaps training namespaces: {sorted(overlap)}")

    hits_by_task: dict[str, list[int]] = {}
    caption_token_scores: list[float] = []
    predictions = []
    for rec in records:
        if not rec.get("instruction") or not rec.get("answer"):
            raise ValueError(f"record {rec['id']!r} is not an instruction sample")
        image = image_to_tensor(render_scene(scene_from_json(rec["scene"]), cfg["resolution"]))
        instruction_ids = torch.tensor(encode_tokens(rec["instruction"]), dtype=torch.long)
        image_tokens = stack.project(stack.encode_image(image.unsqueeze(0)))[0]
        slot = _alignment_embedding_for(stack, mode, instruction_ids, image_tokens)
        predicted = decode_tokens(generate(stack, image, instruction_ids, slot, max_len))
        gold = list(rec["answer"])
        hit = int(predicted == gold)
        task = rec["task_kind"]
        hits_by_task.setdefault(task, []).append(hit)
        if task == "caption":
            width = max(len(predicted), len(gold))
            matching = sum(1 for a, b in zip(predicted, gold) if a == b)
            caption_token_scores.append(matching / width)
        predictions.append(
            {"id": rec["id"], "task_kind": task, "predicted": predicted, "gold": gold, "hit": hit}
        )

    all_hits = [p["hit"] for p in predictions]
    per_task = {
        task: {"exact_match": float(np.mean(hits)), "count": len(hits)}
        for task, hits in sorted(hits_by_task.items())
    }
    return EvalReport(
        sample_count=len(records),
        exact_match=float(np.mean(all_hits)),
        per_task=per_task,
        caption_token_accuracy=(
            float(np.mean(caption_token_scores)) if caption_token_scores else None
        ),
        checkpoint_hash=checkpoint_hash(ckpt_dir),
        config_hash=ckpt.meta["config_hash"],
        shard_hash=shard_digest(records),
        predictions=predictions,
    )


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


@torch.no_grad()
def inspect_gate(ckpt_dir: str | Path, records: list[dict]) -> dict:
    """Mean local-level weights and softmax entropy per task kind."""
    stack, ckpt = trainer.load_stack(ckpt_dir)
    if "gate.W" not in ckpt.tensors:
        raise ValueError(f"checkpoint at {ckpt_dir} lacks gate parameters")
    cfg = ckpt.meta["config"]
    alphas: dict[str, list[np.ndarray]] = {}
    entropies: dict[str, list[float]] = {}
    for rec in records:
        if not rec.get("instruction"):
            raise ValueError(f"record {rec['id']!r} has no instruction")
        image = image_to_tensor(render_scene(scene_from_json(rec["scene"]), cfg["resolution"]))
        instruction_ids = torch.tensor(encode_tokens(rec["instruction"]), dtype=torch.long)
        image_tokens = stack.project(stack.encode_image(image.unsqueeze(0)))[0]
        h_instruction = stack.lm.embed_tokens(instruction_ids).mean(dim=0)
        # Renormalize in float64 so the entropy statistic respects its
        # [0, ln(N-1)] bound instead of inheriting float32 softmax roundoff.
        alpha = stack.gate(h_instruction, image_tokens.mean(dim=0)).double()
        alpha = alpha / alpha.sum()
        task = rec["task_kind"] or "pair"
        alphas.setdefault(task, []).append(alpha.numpy())
        entropies.setdefault(task, []).append(float(-(alpha * torch.log(alpha)).sum()))
    out = {
        "levels": stack.align_table.levels,
        "gating_mode": ckpt.meta.get("gating_mode"),
        "max_entropy": math.log(stack.align_table.levels - 1),
        "per_task": {
            task: {
                "mean_alpha": [float(x) for x in np.mean(alphas[task], axis=0)],
                "mean_entropy": float(np.mean(entropies[task])),
                "count": len(alphas[task]),
            }
            for task in sorted(alphas)
        },
    }
    return out


def emit_distribution_report(records: list[dict], bins: int, out_dir: str | Path) -> dict:
    """Histogram CSV plus per-level score ranges for a scored, bucketed shard."""
    for rec in records:
        if rec.get("score") is None:
            raise ValueError(f"record {rec['id']!r} is unscored")
        if rec.get("level") is None:
            raise ValueError(f"record {rec['id']!r} has no level; bucket the shard first")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scores = [float(rec["score"]) for rec in records]
    edges, counts = bucketing.histogram(scores, bins)
    lines = ["bin_lo,bin_hi,count"]
    lines += [
        f"{edges[i]!r},{edges[i + 1]!r},{int(counts[i])}" for i in range(len(counts))
    ]
    (out / "histogram.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    levels = sorted({int(rec["level"]) for rec in records})
    summary = {
        "total": len(records),
        "bins": bins,
        "per_level": {
            str(level): {
                "count": sum(1 for r in records if r["level"] == level),
                "score_min": min(float(r["score"]) for r in records if r["level"] == level),
                "score_max": max(float(r["score"]) for r in records if r["level"] == level),
            }
            for level in levels
        },
    }
    (out / "levels.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return summary


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationGrid:
    axis: str
    values: tuple
    seed: int

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"axis must be one of {sorted(ABLATION_AXES)}, got {self.axis!r}")


def default_grid(axis: str, cfg: dict) -> AblationGrid:
    return AblationGrid(axis=axis, values=ABLATION_AXES[axis][1], seed=cfg["seed"])


def _cell_config(grid: AblationGrid, cfg: dict, value) -> dict:
    key = ABLATION_AXES[grid.axis][0]
    cell = dict(cfg)
    if key in cell:
        cell[key] = value
    return cell


def _fairness_hash(grid: AblationGrid, cell_cfg: dict) -> str:
    key = ABLATION_AXES[grid.axis][0]
    stripped = {k: v for k, v in cell_cfg.items() if k != key}
    return config_hash(stripped)


def _ensure_shared_data(cfg: dict, shared: Path) -> dict:
    """Generate (or reuse) the datasets and scorer every cell shares."""
    shared.mkdir(parents=True, exist_ok=True)
    paths = {
        "pairs": shared / "pairs_train.jsonl",
        "scorer_pairs": shared / "pairs_scorer.jsonl",
        "instr_train": shared / "instructions_train.jsonl",
        "instr_eval": shared / "instructions_eval.jsonl",
    }
    if not paths["pairs"].exists():
        write_shard(
            generate_pair_shard(
                cfg["seed"],
                cfg["pairs_train_count"],
                split="train",
                grid_size=cfg["grid_size"],
                object_counts=tuple(cfg["pair_object_counts"]),
                coverage_choices=tuple(cfg["coverage_choices"]),
            ),
            paths["pairs"],
        )
    if not paths["scorer_pairs"].exists():
        write_shard(
            generate_pair_shard(
                cfg["seed"] + SCORER_SEED_OFFSET,
                cfg["scorer_train_count"],
                split="scorertrain",
                grid_size=cfg["grid_size"],
                object_counts=tuple(cfg["pair_object_counts"]),
                coverage_choices=tuple(cfg["coverage_choices"]),
            ),
            paths["scorer_pairs"],
        )
    if not paths["instr_train"].exists():
        write_shard(
            generate_instruction_shard(
                cfg["seed"],
                cfg["instructions_train_count"],
                split="train",
                grid_size=cfg["grid_size"],
                min_objects=cfg["instruction_min_objects"],
                max_objects=cfg["instruction_max_objects"],
            ),
            paths["instr_train"],
        )
    if not paths["instr_eval"].exists():
        write_shard(
            generate_instruction_shard(
                cfg["seed"] + EVAL_SEED_OFFSET,
                cfg["instructions_eval_count"],
                split="eval",
                grid_size=cfg["grid_size"],
                min_objects=cfg["instruction_min_objects"],
                max_objects=cfg["instruction_max_objects"],
            ),
            paths["instr_eval"],
        )
    lmtext_path = shared / "instructions_lmtext.jsonl"
    if not lmtext_path.exists():
        write_shard(
            generate_instruction_shard(
                cfg["seed"] + LMTEXT_SEED_OFFSET,
                cfg["lm_text_count"],
                split="lmtext",
                grid_size=cfg["grid_size"],
                min_objects=cfg["instruction_min_objects"],
                max_objects=cfg["instruction_max_objects"],
                task_kinds=LMTEXT_TASK_MIX,
            ),
            lmtext_path,
        )
    paths["lmtext"] = lmtext_path

    scorer_dir = shared / "scorer"
    if not (scorer_dir / "manifest.json").exists():
        simscore.train_contrastive(read_shard(paths["scorer_pairs"]), cfg, scorer_dir)
    paths["scorer"] = scorer_dir

    lm_dir = shared / "lm_warmstart"
    if not (lm_dir / "manifest.json").exists():
        corpus = read_shard(paths["pairs"]) + read_shard(lmtext_path)
        trainer.warmstart_lm(corpus, cfg, lm_dir)
    paths["lm"] = lm_dir

    scored_path = shared / "pairs_scored.jsonl"
    if not scored_path.exists():
        model = simscore.load_scorer(scorer_dir)
        write_shard(simscore.annotate_scores(read_shard(paths["pairs"]), model), scored_path)
    paths["scored"] = scored_path
    return paths


def _bucketed_path(cfg: dict, paths: dict, workdir: Path) -> Path:
    out = workdir / f"pairs_bucketed_n{cfg['levels']}_{cfg['bucket_strategy']}.jsonl"
    if not out.exists():
        bucketing.annotate_dataset(
            paths["scored"],
            out,
            bucketing.BucketingConfig(levels=cfg["levels"], strategy=cfg["bucket_strategy"]),
        )
    return out


def _pretrain_ckpt(cfg: dict, paths: dict, workdir: Path, tag: str) -> Path:
    ckpt_dir = workdir / f"pretrain_{tag}"
    if not (ckpt_dir / "manifest.json").exists():
        records = read_shard(_bucketed_path(cfg, paths, workdir))
        trainer.pretrain(
            records, cfg, ckpt_dir, scorer_ckpt_dir=paths["scorer"], lm_ckpt_dir=paths["lm"]
        )
    return ckpt_dir


def run_ablation_cell(grid: AblationGrid, cfg: dict, value, out_dir: str | Path) -> dict:
    """One grid cell end to end; returns its comparison-table row."""
    out = Path(out_dir)
    shared = out / "shared"
    cell_cfg = _cell_config(grid, cfg, value)
    # Shared artifacts are built from the base config: they do not depend on
    # the axis value, and tying them to a cell would leak that cell's config
    # into checkpoint metadata shared by every other cell.
    paths = _ensure_shared_data(cfg, shared)

    cell_name = str(value).replace("+", "_")
    cell_dir = out / f"cell_{grid.axis}_{cell_name}"
    gating_mode = cell_cfg["gating_mode"]
    reinit_seed = None
    if grid.axis == "table-init" and value == "random":
        reinit_seed = cell_cfg["seed"] + 1

    if grid.axis == "levels":
        # The table size follows the cell's level count, so stage 1 is per cell.
        pretrain_dir = _pretrain_ckpt(cell_cfg, paths, out / f"cell_{grid.axis}_{cell_name}_stage1", f"n{value}")
    else:
        pretrain_dir = _pretrain_ckpt(cfg, paths, shared, "shared")

    finetune_dir = cell_dir / "finetune"
    if not (finetune_dir / "manifest.json").exists():
        trainer.finetune(
            read_shard(paths["instr_train"]),
            cell_cfg,
            finetune_dir,
            pretrain_dir,
            gating_mode=gating_mode,
            reinit_table_seed=reinit_seed,
        )
    report = evaluate(finetune_dir, read_shard(paths["instr_eval"]))
    write_report(report, cell_dir / "report.json")

    row = {
        "axis": grid.axis,
        "value": value,
        "exact_match": report.exact_match,
        "caption_token_accuracy": report.caption_token_accuracy,
        "checkpoint_hash": report.checkpoint_hash,
        "config_hash": config_hash(cell_cfg),
        "fairness_hash": _fairness_hash(grid, cell_cfg),
        "seed": cell_cfg["seed"],
    }
    for task, stats in report.per_task.items():
        row[f"exact_match_{task}"] = stats["exact_match"]
    return row


def run_ablation(grid: AblationGrid, cfg: dict, out_dir: str | Path) -> list[dict]:
    """All cells of one axis; writes ablation.csv and ablation.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in grid.values:
        try:
            rows.append(run_ablation_cell(grid, cfg, value, out))
        except Exception as exc:
            raise RuntimeError(f"ablation cell {grid.axis}={value!r} failed: {exc}") from exc

    fairness = {row["fairness_hash"] for row in rows}
    if len(fairness) != 1:
        raise RuntimeError(f"ablation cells disagree on non-axis config: {sorted(fairness)}")

    columns = sorted({key for row in rows for key in row})
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(col)) for col in columns))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return rows


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
