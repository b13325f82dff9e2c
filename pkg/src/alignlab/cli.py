"""Command line entry points for the full pipeline.

    alignlab gen-data | score-train | score | bucket | pretrain | finetune
             | eval | ablate | inspect-gate | report

Every run writes resolved_config.json (and its hash) into --out.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from . import bucketing, harness, simscore, trainer
from .config import resolve_config, write_resolved_config
from .synthdata import (
    generate_instruction_shard,
    generate_pair_shard,
    read_shard,
    write_shard,
)

STRATEGY_ALIASES = {"quantile": "quantile", "width": "equal_width", "equal_width": "equal_width"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alignlab")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--config", type=Path, default=None, help="flat JSON config file")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shard")
    p.add_argument("--kind", choices=("pairs", "instructions"), required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=int, default=None)

    p = sub.add_parser("score-train", help="train the similarity scorer")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("lm-train", help="text-only LM warm start (frozen backbone stand-in)")
    p.add_argument("--data", type=Path, nargs="+", required=True, help="shards forming the text corpus")

    p = sub.add_parser("score", help="fill the score field of a shard")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scorer", type=Path, required=True)

    p = sub.add_parser("bucket", help="assign alignment levels")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES), default=None)

    p = sub.add_parser("pretrain", help="stage-1 training on bucketed pairs")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scorer", type=Path, default=None, help="scorer checkpoint for vision warm start")
    p.add_argument("--lm", type=Path, default=None, help="lm-train checkpoint for LM warm start")

    p = sub.add_parser("finetune", help="stage-2 instruction tuning")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, required=True, help="pretrain checkpoint")
    p.add_argument("--gating", choices=("local", "global", "average", "local+global"), default=None)
    p.add_argument("--random-table", action="store_true", help="reinitialize the level table")

    p = sub.add_parser("eval", help="exact-match evaluation of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--axis", choices=sorted(harness.ABLATION_AXES), required=True)
    p.add_argument("--cell", default=None, help="run a single cell value")

    p = sub.add_parser("inspect-gate", help="per-task gate weight summary")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("report", help="score histogram and level summary")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bins", type=int, default=20)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = resolve_config(args.config, overrides)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = write_resolved_config(cfg, out)
    print(f"config hash {cfg_hash}")

    if args.command == "gen-data":
        if args.kind == "pairs":
            count = cfg["pairs_train_count"] if args.count is None else args.count
            records = generate_pair_shard(
                cfg["seed"], count, split=args.split,
                grid_size=cfg["grid_size"],
                object_counts=tuple(cfg["pair_object_counts"]),
                coverage_choices=tuple(cfg["coverage_choices"]),
            )
        else:
            count = cfg["instructions_train_count"] if args.count is None else args.count
            records = generate_instruction_shard(
                cfg["seed"], count, split=args.split,
                grid_size=cfg["grid_size"],
                min_objects=cfg["instruction_min_objects"],
                max_objects=cfg["instruction_max_objects"],
            )
        path = out / f"{args.split}_{args.kind}.jsonl"
        write_shard(records, path)
        print(f"wrote {len(records)} records to {path}")

    elif args.command == "score-train":
        _, rows = simscore.train_contrastive(read_shard(args.data), cfg, out / "scorer")
        print(f"scorer trained for {len(rows)} steps; final loss {rows[-1][3]:.4f}")

    elif args.command == "lm-train":
        corpus = [rec for shard in args.data for rec in read_shard(shard)]
        result = trainer.warmstart_lm(corpus, cfg, out / "checkpoint")
        print(f"lm warm start done: {len(result.rows)} steps -> {result.checkpoint_dir}")

    elif args.command == "score":
        model = simscore.load_scorer(args.scorer)
        records = simscore.annotate_scores(read_shard(args.data), model)
        path = out / "scored.jsonl"
        write_shard(records, path)
        print(f"scored {len(records)} records -> {path}")

    elif args.command == "bucket":
        levels = cfg["levels"] if args.levels is None else args.levels
        strategy = STRATEGY_ALIASES[args.strategy or cfg["bucket_strategy"]]
        bucket_cfg = bucketing.BucketingConfig(levels=levels, strategy=strategy)
        path = out / "bucketed.jsonl"
        summary = bucketing.annotate_dataset(args.data, path, bucket_cfg)
        (out / "summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        print(f"bucketed {summary['total']} records into {levels} levels -> {path}")

    elif args.command == "pretrain":
        result = trainer.pretrain(
            read_shard(args.data), cfg, out / "checkpoint",
            scorer_ckpt_dir=args.scorer, lm_ckpt_dir=args.lm,
        )
        print(f"pretrain done: {len(result.rows)} steps -> {result.checkpoint_dir}")

    elif args.command == "finetune":
        result = trainer.finetune(
            read_shard(args.data), cfg, out / "checkpoint", args.init,
            gating_mode=args.gating,
            reinit_table_seed=(cfg["seed"] + 1) if args.random_table else None,
        )
        print(f"finetune done: {len(result.rows)} steps -> {result.checkpoint_dir}")

    elif args.command == "eval":
        report = harness.evaluate(args.ckpt, read_shard(args.data))
        harness.write_report(report, out / "report.json")
        print(f"exact match {report.exact_match:.4f} over {report.sample_count} samples")
        for task, stats in report.per_task.items():
            print(f"  {task}: {stats['exact_match']:.4f} (n={stats['count']})")

    elif args.command == "ablate":
        grid = harness.default_grid(args.axis, cfg)
        if args.cell is not None:
            value = int(args.cell) if args.axis == "levels" else args.cell
            row = harness.run_ablation_cell(grid, cfg, value, out)
            print(json.dumps(row, sort_keys=True, indent=2))
        else:
            rows = harness.run_ablation(grid, cfg, out)
            for row in rows:
                print(f"{row['axis']}={row['value']}: exact match {row['exact_match']:.4f}")

    elif args.command == "inspect-gate":
        summary = harness.inspect_gate(args.ckpt, read_shard(args.data))
        (out / "gate.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        for task, stats in summary["per_task"].items():
            print(f"{task}: entropy {stats['mean_entropy']:.4f} (max {summary['max_entropy']:.4f})")

    elif args.command == "report":
        summary = harness.emit_distribution_report(read_shard(args.data), args.bins, out)
        print(f"histogram and level summary for {summary['total']} records -> {out}")

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
