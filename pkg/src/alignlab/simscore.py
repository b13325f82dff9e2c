"""Toy contrastive dual encoder that scores image-text alignment.

Stands in for an off-the-shelf similarity model: both towers embed into a
shared unit sphere and the cosine between them is the alignment score used
for bucketing. Trained with symmetric in-batch InfoNCE on the synthetic
corpus, where caption coverage provides ground truth the tests can check
scores against. Deliberately independent of the decoder LM being trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash
from .model import image_to_tensor, init_module_parameters, patchify
from .synthdata import VOCAB, encode_tokens, render_scene, scene_from_json


@dataclass(frozen=True)
class ScorerPair:
    """One (image, text) training example, already tensorized."""

    image: torch.Tensor
    token_ids: torch.Tensor


@dataclass(frozen=True)
class ScoredPair:
    """A record's similarity score; level stays unset until bucketing runs."""

    id: str
    score: float
    level: int | None = None


@dataclass(frozen=True)
class ScorerConfig:
    dim: int = 32
    hidden: int = 64
    text_embed: int = 32
    resolution: int = 32
    patch_size: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 1500
    warmup_fraction: float = 0.03
    temperature_init: float = 0.07
    temperature_min: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 7

    @classmethod
    def from_config(cls, cfg: dict) -> "ScorerConfig":
        return cls(
            dim=cfg["scorer_dim"],
            hidden=cfg["scorer_hidden"],
            text_embed=cfg["scorer_text_embed"],
            resolution=cfg["resolution"],
            patch_size=cfg["patch_size"],
            batch_size=cfg["scorer_batch_size"],
            lr=cfg["scorer_lr"],
            steps=cfg["scorer_steps"],
            warmup_fraction=cfg["scorer_warmup_fraction"],
            temperature_init=cfg["scorer_temperature_init"],
            temperature_min=cfg["scorer_temperature_min"],
            weight_decay=cfg["scorer_weight_decay"],
            seed=cfg["seed"],
        )


class ImageTower(nn.Module):
    """Per-patch two-layer MLP, mean-pooled and normalized to the unit sphere.

    A learned per-patch bias enters the hidden layer so the pooled embedding
    can encode *where* content sits: captions reference grid coordinates, and
    without the bias every patch position is interchangeable.
    """

    def __init__(self, resolution: int, patch_size: int, hidden: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        num_patches = (resolution // patch_size) ** 2
        self.fc1 = nn.Linear(patch_size * patch_size * 3, hidden)
        self.pos = nn.Parameter(torch.zeros(num_patches, hidden))
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        patches = patchify(images, self.patch_size)
        h = self.fc2(F.gelu(self.fc1(patches) + self.pos)).mean(dim=-2)
        return F.normalize(h, dim=-1)


class TextTower(nn.Module):
    """Mean bag-of-token-embeddings through a two-layer MLP, unit-normalized."""

    def __init__(self, vocab_size: int, text_embed: int, hidden: int, dim: int):
        super().__init__()
        self.emb = nn.Embedding(vocab_size, text_embed)
        self.fc1 = nn.Linear(text_embed, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if token_ids.shape[-1] == 0:
            raise ValueError("token list must be nonempty")
        embeds = self.emb(token_ids)
        if lengths is None:
            pooled = embeds.mean(dim=-2)
        else:
            positions = torch.arange(token_ids.shape[-1])
            mask = (positions[None, :] < lengths[:, None]).unsqueeze(-1)
            pooled = (embeds * mask).sum(dim=-2) / lengths[:, None]
        h = self.fc2(F.gelu(self.fc1(pooled)))
        return F.normalize(h, dim=-1)


class ScorerModel(nn.Module):
    def __init__(self, config: ScorerConfig):
        super().__init__()
        self.scorer_config = config
        self.image_tower = ImageTower(config.resolution, config.patch_size, config.hidden, config.dim)
        self.text_tower = TextTower(len(VOCAB), config.text_embed, config.hidden, config.dim)
        generator = torch.Generator().manual_seed(config.seed)
        init_module_parameters(self, generator)
        self.image_tower.pos.data.normal_(mean=0.0, std=0.02, generator=generator)
        # Nonzero bias path: all-zero inputs must still map to a unit vector,
        # and it keeps the pooled features away from the normalize() singularity.
        for module in self.modules():
            if isinstance(module, nn.Linear):
                module.bias.data.normal_(mean=0.0, std=0.02, generator=generator)
        self.temperature = nn.Parameter(torch.tensor(config.temperature_init))

    def clamp_temperature(self) -> None:
        with torch.no_grad():
            self.temperature.clamp_(min=self.scorer_config.temperature_min)


def encode_image(model: ScorerModel, images: torch.Tensor) -> torch.Tensor:
    return model.image_tower(images)


def encode_text(
    model: ScorerModel, token_ids: torch.Tensor, lengths: torch.Tensor | None = None
) -> torch.Tensor:
    return model.text_tower(token_ids, lengths)


def similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine of unit vectors: their dot product, in [-1, 1]."""
    return (u * v).sum(dim=-1)


def contrastive_loss(
    image_embeds: torch.Tensor, text_embeds: torch.Tensor, temperature: torch.Tensor
) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch logits s_ij / temperature.

    Equals ln(batch) when all logits coincide; needs batch >= 2 to have
    negatives at all.
    """
    batch = image_embeds.shape[0]
    if batch < 2:
        raise ValueError(f"contrastive batch must have >= 2 pairs, got {batch}")
    logits = image_embeds @ text_embeds.T / temperature
    labels = torch.arange(batch)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def _tensorize(records: list[dict], config: ScorerConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = np.stack(
        [render_scene(scene_from_json(rec["scene"]), config.resolution) for rec in records]
    )
    captions = [encode_tokens(rec["caption"]) for rec in records]
    lengths = torch.tensor([len(c) for c in captions], dtype=torch.long)
    ids = torch.zeros(len(captions), int(lengths.max()), dtype=torch.long)
    for i, caption in enumerate(captions):
        ids[i, : len(caption)] = torch.tensor(caption, dtype=torch.long)
    return image_to_tensor(images), ids, lengths


def train_contrastive(
    records: list[dict], cfg: dict, out_dir: str | Path | None = None
) -> tuple[ScorerModel, list[tuple[int, str, float, float]]]:
    """Train the dual encoder; returns the model and its loss curve rows."""
    from .trainer import AdamW, cosine_lr, epoch_permutation, write_loss_csv

    config = ScorerConfig.from_config(cfg)
    if config.batch_size < 2:
        raise ValueError("scorer batch_size must be >= 2")
    model = ScorerModel(config)
    images, text_ids, text_lens = _tensorize(records, config)

    named = {name: p for name, p in model.named_parameters()}
    optimizer = AdamW(
        named,
        beta1=cfg["adam_beta1"],
        beta2=cfg["adam_beta2"],
        eps=cfg["adam_eps"],
        weight_decay=config.weight_decay,
    )
    n = len(records)
    steps_per_epoch = max(1, n // config.batch_size)
    rows = []
    order = None
    order_epoch = -1
    for step in range(config.steps):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != order_epoch:
            order = epoch_permutation(config.seed, "scorer", epoch, n)
            order_epoch = epoch
        idx = torch.from_numpy(
            np.ascontiguousarray(order[pos * config.batch_size : (pos + 1) * config.batch_size])
        )
        lr = cosine_lr(step, config.steps, config.lr, config.warmup_fraction)
        optimizer.zero_grad()
        loss = contrastive_loss(
            encode_image(model, images[idx]),
            encode_text(model, text_ids[idx], text_lens[idx]),
            model.temperature,
        )
        loss.backward()
        optimizer.step(lr)
        model.clamp_temperature()
        rows.append((step, "scorer", lr, float(loss.detach())))

    if out_dir is not None:
        save_scorer(model, cfg, out_dir)
        write_loss_csv(rows, Path(out_dir) / "losses.csv")
    return model, rows


@torch.no_grad()
def score_dataset(model: ScorerModel, records: list[dict]) -> list[ScoredPair]:
    """One similarity score per record, order preserved."""
    if not records:
        return []
    config = model.scorer_config
    out = []
    for start in range(0, len(records), 256):
        chunk = records[start : start + 256]
        images, text_ids, text_lens = _tensorize(chunk, config)
        scores = similarity(encode_image(model, images), encode_text(model, text_ids, text_lens))
        out.extend(
            ScoredPair(id=rec["id"], score=float(s)) for rec, s in zip(chunk, scores)
        )
    return out


def annotate_scores(records: list[dict], model: ScorerModel) -> list[dict]:
    for rec, pair in zip(records, score_dataset(model, records)):
        rec["score"] = pair.score
    return records


@torch.no_grad()
def retrieval_accuracy(model: ScorerModel, records: list[dict], batch_size: int = 32) -> dict:
    """Held-out in-batch top-1 retrieval, both directions, over fixed chunks."""
    total = (len(records) // batch_size) * batch_size
    if total == 0:
        raise ValueError(f"need at least {batch_size} records")
    i2t_hits = t2i_hits = 0
    for start in range(0, total, batch_size):
        chunk = records[start : start + batch_size]
        images, text_ids, text_lens = _tensorize(chunk, model.scorer_config)
        logits = encode_image(model, images) @ encode_text(model, text_ids, text_lens).T
        labels = torch.arange(batch_size)
        i2t_hits += int((logits.argmax(dim=1) == labels).sum())
        t2i_hits += int((logits.argmax(dim=0) == labels).sum())
    return {
        "image_to_text": i2t_hits / total,
        "text_to_image": t2i_hits / total,
        "pairs": total,
    }


def save_scorer(model: ScorerModel, cfg: dict, out_dir: str | Path) -> Path:
    tensors = {name: p.detach().numpy() for name, p in model.named_parameters()}
    frozen = {name: False for name in tensors}
    meta = {
        "stage": "scorer",
        "config": cfg,
        "config_hash": config_hash(cfg),
        "step": ScorerConfig.from_config(cfg).steps,
        "rng_state": {"data_seed": cfg["seed"], "next_step": ScorerConfig.from_config(cfg).steps},
    }
    return save_checkpoint(out_dir, tensors, frozen, meta)


def load_scorer(ckpt_dir: str | Path) -> ScorerModel:
    ckpt = load_checkpoint(ckpt_dir)
    model = ScorerModel(ScorerConfig.from_config(ckpt.meta["config"]))
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(torch.from_numpy(ckpt.require(name).copy()))
    return model
