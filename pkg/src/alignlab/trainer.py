"""Two-stage training with an explicit freeze schedule.

Stage 1 (pretrain) trains only the projector and the alignment embedding
table against frozen vision and LM weights, with the level embedding at
sequence slot 0. Stage 2 (finetune) freezes the table and vision backbone
and trains projector, LM and gate on instruction data, with the fused
alignment embedding at slot 0.

Both frozen towers are warm-started to reproduce "frozen pretrained
backbone" behavior at desk scale: the vision encoder takes its patch embed
from the similarity scorer's image tower, and the decoder LM is first
trained on text-rendered scenes (token embeddings standing in for the
slot-0/image positions, captions and instruction text behind them). A
frozen *random* LM gives the stage-1 projector nothing to steer; a frozen
LM that can read its prefix slots is what the two-stage recipe assumes.

Everything is deterministic under (seed, config): batch order comes from a
stateless per-epoch permutation, the optimizer is an in-repo AdamW, and
checkpoints capture parameters, optimizer moments, step and RNG state, so a
save/resume at any step reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .aligncore import GATING_MODES, alignment_slot_embedding
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from .config import config_hash
from .model import ModelConfig, MultimodalStack, image_to_tensor, lm_loss
from .synthdata import (
    EOS_ID,
    TOKEN_TO_ID,
    encode_tokens,
    namespace_of,
    render_scene,
    scene_from_json,
)

STAGE_CODES = {"scorer": 1, "pretrain": 2, "finetune": 3, "lmtext": 4}


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = int(round(warmup_fraction * total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    m: torch.Tensor,
    v: torch.Tensor,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place on (param, m, v).

    t is the 1-based step count after this update. Decay multiplies the
    parameter directly and never enters the moment estimates.
    """
    if param.shape != grad.shape:
        raise ValueError(f"param/grad shape mismatch: {tuple(param.shape)} vs {tuple(grad.shape)}")
    m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param.sub_(lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * param))


def decay_for(name: str, weight_decay: float) -> float:
    """Decoupled decay applies everywhere except biases and the level table."""
    if name.endswith(".bias") or name in ("align.table", "gate.b", "temperature"):
        return 0.0
    return weight_decay


class AdamW:
    """Named-parameter AdamW with per-name decay and serializable state."""

    def __init__(
        self,
        named_params: dict[str, torch.Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: torch.zeros_like(p) for name, p in self.params.items()}
        self.v = {name: torch.zeros_like(p) for name, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        for name, param in self.params.items():
            if param.grad is None:
                continue
            adamw_step(
                param, param.grad, self.m[name], self.v[name], self.t, lr,
                self.beta1, self.beta2, self.eps, decay_for(name, self.weight_decay),
            )

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name].detach().numpy()
            out[f"optim.v.{name}"] = self.v[name].detach().numpy()
        return out

    def load_state(self, ckpt: Checkpoint) -> None:
        self.t = int(ckpt.meta["optim_step"])
        for name in self.params:
            self.m[name] = torch.from_numpy(ckpt.require(f"optim.m.{name}").copy())
            self.v[name] = torch.from_numpy(ckpt.require(f"optim.v.{name}").copy())


def epoch_permutation(seed: int, stage: str, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one pass over the data; a pure function of its args."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, STAGE_CODES[stage], epoch]))
    return rng.permutation(n)


def smoothed_losses(losses: list[float], window: int = 50) -> tuple[float, float]:
    """(initial, final) window means of a loss curve."""
    if not losses:
        raise ValueError("empty loss curve")
    w = min(window, len(losses))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


@dataclass(frozen=True)
class StageConfig:
    stage: str
    base_lr: float
    batch_size: int
    steps: int
    warmup_fraction: float
    seed: int
    gating_mode: str | None = None

    def __post_init__(self):
        if self.stage not in ("lmtext", "pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.stage == "finetune" and self.gating_mode not in GATING_MODES:
            raise ValueError(f"gating_mode must be one of {GATING_MODES}, got {self.gating_mode!r}")

    @property
    def trainable_prefixes(self) -> tuple[str, ...]:
        if self.stage == "lmtext":
            return ("lm.",)
        if self.stage == "pretrain":
            return ("proj.", "align.table")
        if self.gating_mode in ("global", "average"):
            # The gate has no gradient path in these modes; keeping it in the
            # optimizer would decay it without signal.
            return ("proj.", "lm.")
        return ("proj.", "lm.", "gate.")


def apply_freeze_schedule(stack: MultimodalStack, stage_cfg: StageConfig) -> dict[str, torch.Tensor]:
    """Set requires_grad per the stage contract; returns the trainable map."""
    trainable = {}
    for name, tensor in stack.named_tensor_map().items():
        is_trainable = any(
            name == p or name.startswith(p) for p in stage_cfg.trainable_prefixes
        )
        tensor.requires_grad_(is_trainable)
        if is_trainable:
            trainable[name] = tensor
    return trainable


@dataclass
class PreparedDataset:
    """Tensorized records: frozen vision features plus padded text segments."""

    ids: list[str]
    vision_feats: torch.Tensor | None  # (n, patches, vision_dim), no grad
    text_ids: torch.Tensor  # (n, max_text) padded with 0
    text_lens: torch.Tensor  # (n,)
    sup_from: torch.Tensor  # (n,) first supervised index within the text segment
    levels: torch.Tensor | None = None  # (n,) 1-based, pretrain only
    # lmtext only: token ids whose (summed) embeddings fill the prefix slots
    prefix_ids_a: torch.Tensor | None = None  # (n, 1 + patches)
    prefix_ids_b: torch.Tensor | None = None  # (n, 1 + patches), 0 = absent

    def __len__(self) -> int:
        return len(self.ids)


def _pad_token_lists(token_lists: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lens = torch.tensor([len(t) for t in token_lists], dtype=torch.long)
    out = torch.zeros(len(token_lists), int(lens.max()), dtype=torch.long)
    for i, toks in enumerate(token_lists):
        out[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return out, lens


@torch.no_grad()
def encode_frozen_vision(stack: MultimodalStack, records: list[dict]) -> torch.Tensor:
    """Vision features for every record; cached because the backbone is frozen."""
    cfg = stack.config
    feats = []
    for start in range(0, len(records), 64):
        chunk = records[start : start + 64]
        images = np.stack(
            [render_scene(scene_from_json(r["scene"]), cfg.resolution) for r in chunk]
        )
        feats.append(stack.encode_image(image_to_tensor(images)))
    return torch.cat(feats, dim=0)


def prepare_pretrain_dataset(stack: MultimodalStack, records: list[dict]) -> PreparedDataset:
    for rec in records:
        if rec.get("level") is None:
            raise ValueError(f"record {rec['id']!r} has no alignment level; bucket the shard first")
    text = [encode_tokens(rec["caption"]) + [EOS_ID] for rec in records]
    text_ids, text_lens = _pad_token_lists(text)
    return PreparedDataset(
        ids=[rec["id"] for rec in records],
        vision_feats=encode_frozen_vision(stack, records),
        text_ids=text_ids,
        text_lens=text_lens,
        sup_from=torch.zeros(len(records), dtype=torch.long),
        levels=torch.tensor([rec["level"] for rec in records], dtype=torch.long),
    )


def prepare_finetune_dataset(stack: MultimodalStack, records: list[dict]) -> PreparedDataset:
    text: list[list[int]] = []
    sup_from: list[int] = []
    for rec in records:
        if not rec.get("instruction") or not rec.get("answer"):
            raise ValueError(f"record {rec['id']!r} is not an instruction sample")
        instr = encode_tokens(rec["instruction"])
        answer = encode_tokens(rec["answer"]) + [EOS_ID]
        text.append(instr + answer)
        sup_from.append(len(instr))
    text_ids, text_lens = _pad_token_lists(text)
    return PreparedDataset(
        ids=[rec["id"] for rec in records],
        vision_feats=encode_frozen_vision(stack, records),
        text_ids=text_ids,
        text_lens=text_lens,
        sup_from=torch.tensor(sup_from, dtype=torch.long),
    )


def _scene_prefix_ids(rec: dict, num_patches: int, hint_count: int) -> tuple[list[int], list[int]]:
    """Token ids whose embeddings stand in for the slot-0/image positions.

    Slot 0 hints how much of the scene the text covers (a digit token);
    each image slot gets color+shape tokens of its grid cell in row-major
    order, or 'nothing' for an empty cell. Sequences rendered this way give
    the LM readable prefixes, so the attention pathways the stage-1
    projector must drive stay trained instead of collapsing to zero.
    """
    scene = rec["scene"]
    grid = scene["grid"]
    ids_a = [TOKEN_TO_ID[str(min(hint_count, 9))]] + [TOKEN_TO_ID["nothing"]] * num_patches
    ids_b = [0] * (1 + num_patches)
    if grid * grid == num_patches:
        for obj in scene["objects"]:
            cell = obj["row"] * grid + obj["col"]
            ids_a[1 + cell] = TOKEN_TO_ID[obj["color"]]
            ids_b[1 + cell] = TOKEN_TO_ID[obj["shape"]]
    return ids_a, ids_b


def prepare_lmtext_dataset(stack: MultimodalStack, records: list[dict]) -> PreparedDataset:
    """Text-only warm-start rows laid out like the multimodal sequences.

    Caption records supervise the whole caption; instruction records
    supervise the answer. The prefix slots carry a text rendering of the
    scene, which the two multimodal stages later replace with the level
    embedding and projected vision features.
    """
    num_patches = stack.vision.num_patches
    text: list[list[int]] = []
    sup_from: list[int] = []
    prefix_a: list[list[int]] = []
    prefix_b: list[list[int]] = []
    for rec in records:
        num_objects = len(rec["scene"]["objects"])
        if rec.get("instruction") and rec.get("answer"):
            instr = encode_tokens(rec["instruction"])
            text.append(instr + encode_tokens(rec["answer"]) + [EOS_ID])
            sup_from.append(len(instr))
            hint = num_objects
        else:
            text.append(encode_tokens(rec["caption"]) + [EOS_ID])
            sup_from.append(0)
            hint = int(round(rec.get("coverage", 1.0) * num_objects))
        ids_a, ids_b = _scene_prefix_ids(rec, num_patches, hint)
        prefix_a.append(ids_a)
        prefix_b.append(ids_b)
    text_ids, text_lens = _pad_token_lists(text)
    return PreparedDataset(
        ids=[rec["id"] for rec in records],
        vision_feats=None,
        text_ids=text_ids,
        text_lens=text_lens,
        sup_from=torch.tensor(sup_from, dtype=torch.long),
        prefix_ids_a=torch.tensor(prefix_a, dtype=torch.long),
        prefix_ids_b=torch.tensor(prefix_b, dtype=torch.long),
    )


def batch_loss(
    stack: MultimodalStack,
    data: PreparedDataset,
    idx: np.ndarray,
    stage_cfg: StageConfig,
) -> torch.Tensor:
    """Assemble one padded batch and return its masked next-token loss."""
    index = torch.from_numpy(np.ascontiguousarray(idx))
    lens = data.text_lens[index]
    max_text = int(lens.max())
    ids = data.text_ids[index, :max_text]
    text_embeds = stack.lm.embed_tokens(ids)
    positions = torch.arange(max_text)
    valid = positions[None, :] < lens[:, None]
    sup_from = data.sup_from[index]
    supervised = valid & (positions[None, :] >= sup_from[:, None])

    if stage_cfg.stage == "lmtext":
        ids_a = data.prefix_ids_a[index]
        ids_b = data.prefix_ids_b[index]
        prefix_embeds = stack.lm.embed_tokens(ids_a)
        prefix_embeds = prefix_embeds + stack.lm.embed_tokens(ids_b) * (ids_b != 0).unsqueeze(-1)
        batch, prefix = prefix_embeds.shape[:2]
        embeds = torch.cat([prefix_embeds, text_embeds], dim=1)
    else:
        image_tokens = stack.project(data.vision_feats[index])
        batch, num_image, _ = image_tokens.shape
        prefix = 1 + num_image
        if stage_cfg.stage == "pretrain":
            slot = stack.align_table.weight[data.levels[index] - 1]
        else:
            instr_mask = (positions[None, :] < sup_from[:, None]).unsqueeze(-1)
            h_instruction = (text_embeds * instr_mask).sum(dim=1) / sup_from[:, None]
            h_image = image_tokens.mean(dim=1)
            slot = alignment_slot_embedding(
                stack.align_table, stack.gate, h_instruction, h_image, stage_cfg.gating_mode
            )
        embeds = torch.cat([slot.unsqueeze(1), image_tokens, text_embeds], dim=1)

    token_ids = torch.cat([torch.zeros(batch, prefix, dtype=torch.long), ids], dim=1)
    loss_mask = torch.cat([torch.zeros(batch, prefix, dtype=torch.bool), supervised], dim=1)
    logits = stack.lm(embeds)
    return lm_loss(logits, token_ids, loss_mask)


@dataclass
class TrainResult:
    checkpoint_dir: Path
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)
    stack: MultimodalStack | None = None

    @property
    def losses(self) -> list[float]:
        return [row[3] for row in self.rows]


def write_loss_csv(rows: list[tuple[int, str, float, float]], path: Path) -> None:
    lines = ["step,stage,lr,loss"]
    lines += [f"{step},{stage},{lr!r},{loss!r}" for step, stage, lr, loss in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _save_stage_checkpoint(
    out_dir: Path,
    stack: MultimodalStack,
    optimizer: AdamW,
    meta: dict,
    step: int,
) -> Path:
    tensors: dict[str, np.ndarray] = {}
    frozen: dict[str, bool] = {}
    for name, tensor in stack.named_tensor_map().items():
        tensors[name] = tensor.detach().numpy()
        frozen[name] = not tensor.requires_grad
    tensors.update(optimizer.state_tensors())
    meta = dict(meta)
    meta["step"] = step
    meta["optim_step"] = optimizer.t
    meta["rng_state"] = {"data_seed": meta["config"]["seed"], "next_step": step}
    return save_checkpoint(out_dir, tensors, frozen, meta)


def run_stage(
    stack: MultimodalStack,
    data: PreparedDataset,
    stage_cfg: StageConfig,
    cfg: dict,
    out_dir: str | Path,
    meta_extra: dict | None = None,
    start_step: int = 0,
    optimizer: AdamW | None = None,
    stop_at_step: int | None = None,
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainable = apply_freeze_schedule(stack, stage_cfg)
    if optimizer is None:
        optimizer = AdamW(
            trainable,
            beta1=cfg["adam_beta1"],
            beta2=cfg["adam_beta2"],
            eps=cfg["adam_eps"],
            weight_decay=cfg["weight_decay"],
        )
    stop = stage_cfg.steps if stop_at_step is None else stop_at_step
    if stop > stage_cfg.steps:
        raise ValueError(f"stop_at_step {stop} exceeds configured steps {stage_cfg.steps}")
    if stop < start_step:
        raise ValueError(f"stop_at_step {stop} is before the checkpoint step {start_step}")

    n = len(data)
    steps_per_epoch = max(1, math.ceil(n / stage_cfg.batch_size))
    order: np.ndarray | None = None
    order_epoch = -1
    rows: list[tuple[int, str, float, float]] = []
    for step in range(start_step, stop):
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != order_epoch:
            order = epoch_permutation(stage_cfg.seed, stage_cfg.stage, epoch, n)
            order_epoch = epoch
        idx = order[pos * stage_cfg.batch_size : (pos + 1) * stage_cfg.batch_size]
        lr = cosine_lr(step, stage_cfg.steps, stage_cfg.base_lr, stage_cfg.warmup_fraction)
        optimizer.zero_grad()
        loss = batch_loss(stack, data, idx, stage_cfg)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(trainable.values(), cfg["grad_clip"])
        optimizer.step(lr)
        rows.append((step, stage_cfg.stage, lr, float(loss.detach())))

    meta_extra = dict(meta_extra or {})
    namespaces = {namespace_of(i) for i in data.ids}
    namespaces.update(meta_extra.pop("extra_namespaces", []))
    meta = {
        "stage": stage_cfg.stage,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "total_steps": stage_cfg.steps,
        "train_namespaces": sorted(namespaces),
    }
    meta.update(meta_extra)
    _save_stage_checkpoint(out, stack, optimizer, meta, stop)
    write_loss_csv(rows, out / "losses.csv")
    return TrainResult(checkpoint_dir=out, rows=rows, stack=stack)


def build_stack(
    cfg: dict,
    scorer_ckpt_dir: str | Path | None = None,
    lm_ckpt_dir: str | Path | None = None,
) -> MultimodalStack:
    """Fresh stack from the run seed, with optional frozen-tower warm starts.

    The vision patch embed can be copied from the similarity scorer's image
    tower, and the decoder LM from a text warm-start checkpoint; both stand
    in for the pretrained frozen backbones of the full-scale recipe.
    """
    stack = MultimodalStack(ModelConfig.from_config(cfg), seed=cfg["seed"])
    if scorer_ckpt_dir is not None:
        scorer = load_checkpoint(scorer_ckpt_dir)
        weight = scorer.require("image_tower.fc1.weight")
        bias = scorer.require("image_tower.fc1.bias")
        patch_embed = stack.vision.patch_embed
        if tuple(weight.shape) != tuple(patch_embed.weight.shape):
            raise CheckpointError(
                f"scorer image tower shape {tuple(weight.shape)} does not match "
                f"vision patch embed {tuple(patch_embed.weight.shape)}"
            )
        with torch.no_grad():
            patch_embed.weight.copy_(torch.from_numpy(weight.copy()))
            patch_embed.bias.copy_(torch.from_numpy(bias.copy()))
    if lm_ckpt_dir is not None:
        lm_ckpt = load_checkpoint(lm_ckpt_dir)
        if lm_ckpt.meta.get("stage") != "lmtext":
            raise CheckpointError(
                f"LM warm start requires an lmtext checkpoint, got stage "
                f"{lm_ckpt.meta.get('stage')!r}"
            )
        own = stack.named_tensor_map()
        with torch.no_grad():
            for name, param in own.items():
                if name.startswith("lm."):
                    param.copy_(torch.from_numpy(lm_ckpt.require(name).copy()))
    return stack


def load_stack(ckpt_dir: str | Path) -> tuple[MultimodalStack, Checkpoint]:
    ckpt = load_checkpoint(ckpt_dir)
    if "config" not in ckpt.meta:
        raise CheckpointError(f"checkpoint at {ckpt_dir} has no embedded config")
    stack = MultimodalStack(ModelConfig.from_config(ckpt.meta["config"]), seed=ckpt.meta["config"]["seed"])
    stack.load_named_tensors(ckpt.tensors)
    return stack, ckpt


def warmstart_lm(
    records: list[dict],
    cfg: dict,
    out_dir: str | Path,
    stop_at_step: int | None = None,
) -> TrainResult:
    """Train only the decoder LM on text (stage 0 of the desk-scale recipe)."""
    stack = build_stack(cfg)
    stage_cfg = StageConfig(
        stage="lmtext",
        base_lr=cfg["lm_warmstart_lr"],
        batch_size=cfg["lm_warmstart_batch_size"],
        steps=cfg["lm_warmstart_steps"],
        warmup_fraction=cfg["warmup_fraction"],
        seed=cfg["seed"],
    )
    data = prepare_lmtext_dataset(stack, records)
    return run_stage(stack, data, stage_cfg, cfg, out_dir, stop_at_step=stop_at_step)


def pretrain(
    records: list[dict],
    cfg: dict,
    out_dir: str | Path,
    scorer_ckpt_dir: str | Path | None = None,
    lm_ckpt_dir: str | Path | None = None,
    stop_at_step: int | None = None,
) -> TrainResult:
    stack = build_stack(cfg, scorer_ckpt_dir, lm_ckpt_dir)
    stage_cfg = StageConfig(
        stage="pretrain",
        base_lr=cfg["pretrain_lr"],
        batch_size=cfg["pretrain_batch_size"],
        steps=cfg["pretrain_steps"],
        warmup_fraction=cfg["warmup_fraction"],
        seed=cfg["seed"],
    )
    data = prepare_pretrain_dataset(stack, records)
    meta_extra = {}
    if scorer_ckpt_dir is not None:
        meta_extra["warm_start_from"] = checkpoint_hash(scorer_ckpt_dir)
    if lm_ckpt_dir is not None:
        lm_meta = load_checkpoint(lm_ckpt_dir).meta
        meta_extra["lm_warm_start_from"] = checkpoint_hash(lm_ckpt_dir)
        meta_extra["extra_namespaces"] = lm_meta.get("train_namespaces", [])
    return run_stage(stack, data, stage_cfg, cfg, out_dir, meta_extra, stop_at_step=stop_at_step)


def finetune(
    records: list[dict],
    cfg: dict,
    out_dir: str | Path,
    init_ckpt_dir: str | Path,
    gating_mode: str | None = None,
    reinit_table_seed: int | None = None,
    stop_at_step: int | None = None,
) -> TrainResult:
    stack, ckpt = load_stack(init_ckpt_dir)
    if ckpt.meta.get("stage") != "pretrain":
        raise CheckpointError(
            f"finetune requires a pretrain checkpoint, got stage {ckpt.meta.get('stage')!r}"
        )
    if ModelConfig.from_config(ckpt.meta["config"]) != ModelConfig.from_config(cfg):
        raise CheckpointError("model architecture in config does not match checkpoint")
    if reinit_table_seed is not None:
        # Control experiment: discard the pretrained level embeddings and use
        # a fresh random table with the same parameter count.
        generator = torch.Generator().manual_seed(reinit_table_seed)
        with torch.no_grad():
            stack.align_table.weight.normal_(mean=0.0, std=0.02, generator=generator)
    mode = cfg["gating_mode"] if gating_mode is None else gating_mode
    stage_cfg = StageConfig(
        stage="finetune",
        base_lr=cfg["finetune_lr"],
        batch_size=cfg["finetune_batch_size"],
        steps=cfg["finetune_steps"],
        warmup_fraction=cfg["warmup_fraction"],
        seed=cfg["seed"],
        gating_mode=mode,
    )
    data = prepare_finetune_dataset(stack, records)
    meta_extra = {
        "gating_mode": mode,
        "pretrain_checkpoint": checkpoint_hash(init_ckpt_dir),
        "pretrain_namespaces": ckpt.meta.get("train_namespaces", []),
        "random_table": reinit_table_seed is not None,
    }
    return run_stage(stack, data, stage_cfg, cfg, out_dir, meta_extra, stop_at_step=stop_at_step)


def resume_training(
    ckpt_dir: str | Path,
    records: list[dict],
    cfg: dict,
    out_dir: str | Path,
    stop_at_step: int | None = None,
) -> TrainResult:
    """Continue an interrupted stage from its saved step, bit-exactly."""
    stack, ckpt = load_stack(ckpt_dir)
    if ckpt.meta["config_hash"] != config_hash(cfg):
        raise CheckpointError("config hash mismatch on resume")
    stage = ckpt.meta["stage"]
    if stage == "lmtext":
        stage_cfg = StageConfig(
            stage="lmtext",
            base_lr=cfg["lm_warmstart_lr"],
            batch_size=cfg["lm_warmstart_batch_size"],
            steps=cfg["lm_warmstart_steps"],
            warmup_fraction=cfg["warmup_fraction"],
            seed=cfg["seed"],
        )
        data = prepare_lmtext_dataset(stack, records)
    elif stage == "pretrain":
        stage_cfg = StageConfig(
            stage="pretrain",
            base_lr=cfg["pretrain_lr"],
            batch_size=cfg["pretrain_batch_size"],
            steps=cfg["pretrain_steps"],
            warmup_fraction=cfg["warmup_fraction"],
            seed=cfg["seed"],
        )
        data = prepare_pretrain_dataset(stack, records)
    elif stage == "finetune":
        stage_cfg = StageConfig(
            stage="finetune",
            base_lr=cfg["finetune_lr"],
            batch_size=cfg["finetune_batch_size"],
            steps=cfg["finetune_steps"],
            warmup_fraction=cfg["warmup_fraction"],
            seed=cfg["seed"],
            gating_mode=ckpt.meta.get("gating_mode"),
        )
        data = prepare_finetune_dataset(stack, records)
    else:
        raise CheckpointError(f"cannot resume stage {stage!r}")

    trainable = apply_freeze_schedule(stack, stage_cfg)
    optimizer = AdamW(
        trainable,
        beta1=cfg["adam_beta1"],
        beta2=cfg["adam_beta2"],
        eps=cfg["adam_eps"],
        weight_decay=cfg["weight_decay"],
    )
    optimizer.load_state(ckpt)
    meta_extra = {
        k: v
        for k, v in ckpt.meta.items()
        if k
        in (
            "gating_mode",
            "pretrain_checkpoint",
            "pretrain_namespaces",
            "random_table",
            "warm_start_from",
            "lm_warm_start_from",
        )
    }
    meta_extra["extra_namespaces"] = ckpt.meta.get("train_namespaces", [])
    return run_stage(
        stack,
        data,
        stage_cfg,
        cfg,
        out_dir,
        meta_extra,
        start_step=int(ckpt.meta["step"]),
        optimizer=optimizer,
        stop_at_step=stop_at_step,
    )
