"""Alignment module: level embedding table, gate network, fusion, assembly.

The table holds one embedding per alignment level; the last row is the
global embedding (full-description capability) and the rest are local.
During pretraining a single table row is injected at sequence slot 0.
During instruction tuning the slot-0 vector is computed: the gate maps
pooled instruction/image features to a simplex over the local rows, and
fusion adds the weighted local mix on top of the global row.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

GATING_MODES = ("local", "global", "average", "local+global")
GATE_FEATURES = ("hadamard", "concat")


class AlignmentEmbeddingTable(nn.Module):
    """N learned level embeddings; row N (1-indexed) is the global one."""

    def __init__(self, levels: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if levels < 1:
            raise ValueError(f"levels must be >= 1, got {levels}")
        self.levels = levels
        self.dim = dim
        weight = torch.empty(levels, dim)
        weight.normal_(mean=0.0, std=0.02, generator=generator)
        self.weight = nn.Parameter(weight)

    @property
    def global_index(self) -> int:
        return self.levels

    def lookup(self, level: int) -> torch.Tensor:
        if not 1 <= level <= self.levels:
            raise ValueError(f"level {level} out of range [1, {self.levels}]")
        return self.weight[level - 1]

    def global_embedding(self) -> torch.Tensor:
        return self.weight[self.levels - 1]

    def local_embeddings(self) -> torch.Tensor:
        """Rows 1..N-1, shape (N-1, dim)."""
        return self.weight[: self.levels - 1]


class AlignmentGate(nn.Module):
    """Affine map + softmax producing the local-level weights.

    The instruction/image features are combined element-wise by default
    ('hadamard'); 'concat' stacks them and doubles the input width.
    """

    def __init__(
        self,
        dim: int,
        levels: int,
        feature: str = "hadamard",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if levels < 2:
            raise ValueError(f"gate needs at least 2 levels, got {levels}")
        if feature not in GATE_FEATURES:
            raise ValueError(f"gate feature must be one of {GATE_FEATURES}, got {feature!r}")
        self.dim = dim
        self.levels = levels
        self.feature = feature
        in_dim = dim if feature == "hadamard" else 2 * dim
        W = torch.empty(levels - 1, in_dim)
        W.normal_(mean=0.0, std=0.02, generator=generator)
        self.W = nn.Parameter(W)
        self.b = nn.Parameter(torch.zeros(levels - 1))

    def combine(self, h_instruction: torch.Tensor, h_image: torch.Tensor) -> torch.Tensor:
        if h_instruction.shape[-1] != self.dim or h_image.shape[-1] != self.dim:
            raise ValueError(
                f"gate inputs must have width {self.dim}, got "
                f"{h_instruction.shape[-1]} and {h_image.shape[-1]}"
            )
        if self.feature == "hadamard":
            return h_instruction * h_image
        return torch.cat([h_instruction, h_image], dim=-1)

    def forward(self, h_instruction: torch.Tensor, h_image: torch.Tensor) -> torch.Tensor:
        """Weights over local levels: softmax(W (h_I o h_T) + b), shape (..., N-1)."""
        feat = self.combine(h_instruction, h_image)
        logits = F.linear(feat, self.W, self.b)
        return torch.softmax(logits, dim=-1)


def gate_weights(
    gate: AlignmentGate, h_instruction: torch.Tensor, h_image: torch.Tensor
) -> torch.Tensor:
    return gate(h_instruction, h_image)


def fuse_alignment(table: AlignmentEmbeddingTable, alpha: torch.Tensor) -> torch.Tensor:
    """Global embedding plus alpha-weighted local embeddings, shape (..., dim)."""
    if alpha.shape[-1] != table.levels - 1:
        raise ValueError(
            f"alpha has {alpha.shape[-1]} weights, expected {table.levels - 1}"
        )
    return table.global_embedding() + alpha @ table.local_embeddings()


def alignment_slot_embedding(
    table: AlignmentEmbeddingTable,
    gate: AlignmentGate | None,
    h_instruction: torch.Tensor,
    h_image: torch.Tensor,
    mode: str,
) -> torch.Tensor:
    """Slot-0 vector for one gating mode (mirrors the local/global ablations).

    local        -> weighted local mix only
    global       -> global embedding only (gate unused)
    average      -> global plus uniform local mean (gate unused)
    local+global -> global plus weighted local mix (default fusion rule)
    """
    if mode not in GATING_MODES:
        raise ValueError(f"unknown gating mode {mode!r}")
    batch_shape = h_instruction.shape[:-1]
    if mode == "global":
        return table.global_embedding().expand(*batch_shape, table.dim)
    if mode == "average":
        locals_mean = table.local_embeddings().mean(dim=0)
        return (table.global_embedding() + locals_mean).expand(*batch_shape, table.dim)
    if gate is None:
        raise ValueError(f"gating mode {mode!r} requires a gate")
    alpha = gate(h_instruction, h_image)
    if mode == "local":
        return alpha @ table.local_embeddings()
    return fuse_alignment(table, alpha)


@dataclass
class AssembledSequence:
    """One embedded LM input sequence plus its supervision targets.

    loss_mask marks token positions whose id is a training target; the LM
    predicts the token at position t from logits at position t-1, so slot 0
    and image slots are never masked in.
    """

    embeds: torch.Tensor  # (L, dim)
    token_ids: torch.Tensor  # (L,) long, 0 outside text positions
    loss_mask: torch.Tensor  # (L,) bool


def _check_width(name: str, tensor: torch.Tensor, dim: int) -> None:
    if tensor.shape[-1] != dim:
        raise ValueError(f"{name} has width {tensor.shape[-1]}, expected {dim}")


def assemble_pretrain_sequence(
    level_embedding: torch.Tensor,
    image_tokens: torch.Tensor,
    text_embeds: torch.Tensor,
    text_ids: torch.Tensor,
) -> AssembledSequence:
    """[level] [image tokens] [text tokens]; loss covers the text positions."""
    if text_embeds.shape[0] == 0:
        raise ValueError("text must be nonempty")
    dim = level_embedding.shape[-1]
    _check_width("image_tokens", image_tokens, dim)
    _check_width("text_embeds", text_embeds, dim)
    num_image = image_tokens.shape[0]
    num_text = text_embeds.shape[0]
    embeds = torch.cat([level_embedding.unsqueeze(0), image_tokens, text_embeds], dim=0)
    length = 1 + num_image + num_text
    token_ids = torch.zeros(length, dtype=torch.long)
    token_ids[1 + num_image :] = text_ids
    loss_mask = torch.zeros(length, dtype=torch.bool)
    loss_mask[1 + num_image :] = True
    return AssembledSequence(embeds=embeds, token_ids=token_ids, loss_mask=loss_mask)


def assemble_finetune_sequence(
    alignment_embedding: torch.Tensor,
    image_tokens: torch.Tensor,
    instruction_embeds: torch.Tensor,
    instruction_ids: torch.Tensor,
    answer_embeds: torch.Tensor,
    answer_ids: torch.Tensor,
) -> AssembledSequence:
    """[fused slot] [image] [instruction] [answer]; loss covers answer positions only."""
    if instruction_embeds.shape[0] == 0:
        raise ValueError("instruction must be nonempty")
    if answer_embeds.shape[0] == 0:
        raise ValueError("answer must be nonempty")
    dim = alignment_embedding.shape[-1]
    _check_width("image_tokens", image_tokens, dim)
    _check_width("instruction_embeds", instruction_embeds, dim)
    _check_width("answer_embeds", answer_embeds, dim)
    num_image = image_tokens.shape[0]
    num_instr = instruction_embeds.shape[0]
    num_answer = answer_embeds.shape[0]
    embeds = torch.cat(
        [alignment_embedding.unsqueeze(0), image_tokens, instruction_embeds, answer_embeds],
        dim=0,
    )
    length = 1 + num_image + num_instr + num_answer
    token_ids = torch.zeros(length, dtype=torch.long)
    token_ids[1 + num_image : 1 + num_image + num_instr] = instruction_ids
    token_ids[1 + num_image + num_instr :] = answer_ids
    loss_mask = torch.zeros(length, dtype=torch.bool)
    loss_mask[1 + num_image + num_instr :] = True
    return AssembledSequence(embeds=embeds, token_ids=token_ids, loss_mask=loss_mask)
