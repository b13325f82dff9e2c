"""Rank scored image-text pairs into N discrete alignment levels.

Two readings of "equally spaced intervals" are provided:

  quantile    -- equal-count buckets after ranking by (score, id); bucket
                 sizes differ by at most one (default, so every level token
                 receives training signal)
  equal_width -- equal score-width intervals between min and max, top edge
                 inclusive

Ties are broken by record id, which makes level assignment deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .simscore import ScoredPair
from .synthdata import read_shard, write_shard

STRATEGIES = ("quantile", "equal_width")


@dataclass(frozen=True)
class BucketingConfig:
    levels: int = 8
    strategy: str = "quantile"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


def assign_levels(scores: list[ScoredPair], config: BucketingConfig) -> list[ScoredPair]:
    """Return the pairs in input order with level set to a value in {1..N}."""
    if not scores:
        raise ValueError("cannot bucket an empty score list")
    for pair in scores:
        if pair.score is None or math.isnan(pair.score):
            raise ValueError(f"record {pair.id!r} has no valid score")

    n = len(scores)
    levels_of = [0] * n
    if config.strategy == "quantile":
        order = sorted(range(n), key=lambda i: (scores[i].score, scores[i].id))
        base, extra = divmod(n, config.levels)
        pos = 0
        for level in range(1, config.levels + 1):
            size = base + (1 if level <= extra else 0)
            for i in order[pos : pos + size]:
                levels_of[i] = level
            pos += size
    else:
        lo = min(p.score for p in scores)
        hi = max(p.score for p in scores)
        width = (hi - lo) / config.levels
        for i, pair in enumerate(scores):
            if width == 0.0 or pair.score == hi:
                levels_of[i] = config.levels
            else:
                levels_of[i] = min(config.levels, 1 + int((pair.score - lo) / width))
    return [replace(pair, level=levels_of[i]) for i, pair in enumerate(scores)]


def histogram(scores: list[float], bins: int) -> tuple[np.ndarray, np.ndarray]:
    """(edges, counts) with counts summing to len(scores)."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not scores:
        raise ValueError("cannot histogram an empty score list")
    counts, edges = np.histogram(np.asarray(scores, dtype=np.float64), bins=bins)
    return edges, counts


def level_summary(pairs: list[ScoredPair], config: BucketingConfig) -> dict:
    per_level = {}
    for level in range(1, config.levels + 1):
        member_scores = [p.score for p in pairs if p.level == level]
        per_level[str(level)] = {
            "count": len(member_scores),
            "score_min": min(member_scores) if member_scores else None,
            "score_max": max(member_scores) if member_scores else None,
        }
    return {
        "levels": config.levels,
        "strategy": config.strategy,
        "total": len(pairs),
        "per_level": per_level,
    }


def annotate_dataset(shard_in, shard_out, config: BucketingConfig) -> dict:
    """Fill the `level` field of a scored shard; returns the per-level summary."""
    records = read_shard(shard_in)
    for rec in records:
        if rec.get("score") is None:
            raise ValueError(f"record {rec['id']!r} is unscored; run scoring first")
    pairs = [ScoredPair(id=rec["id"], score=float(rec["score"])) for rec in records]
    assigned = assign_levels(pairs, config)
    for rec, pair in zip(records, assigned):
        rec["level"] = pair.level
    write_shard(records, shard_out)
    return level_summary(assigned, config)
