"""Toy multimodal stack: patch vision encoder, linear projector, causal LM.

Sized so the full two-stage run finishes in minutes on one CPU core:
width-64 towers, 4 decoder layers, 16 image tokens, a closed ~45-token
vocabulary. The vision backbone is warm-started from the similarity
scorer's image tower and stays frozen through both training stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aligncore import AlignmentEmbeddingTable, AlignmentGate
from .synthdata import EOS_ID, VOCAB


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split (..., res, res, 3) into (..., (res/p)^2, p*p*3), row-major patches."""
    *lead, res, res2, chans = image.shape
    if res != res2:
        raise ValueError(f"expected a square image, got {res}x{res2}")
    if res % patch_size != 0:
        raise ValueError(f"resolution {res} not divisible by patch size {patch_size}")
    g = res // patch_size
    x = image.reshape(*lead, g, patch_size, g, patch_size, chans)
    x = x.movedim(-4, -3)  # (..., g, g, p, p, c)
    return x.reshape(*lead, g * g, patch_size * patch_size * chans)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))


class SelfAttentionBlock(nn.Module):
    """Pre-LN transformer block; causal masking is optional."""

    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(dim, dim=-1)
        q = q.view(batch, length, self.heads, head_dim).transpose(1, 2)
        k = k.view(batch, length, self.heads, head_dim).transpose(1, 2)
        v = v.view(batch, length, self.heads, head_dim).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        att = att.transpose(1, 2).reshape(batch, length, dim)
        x = x + self.attn_out(att)
        return x + self.mlp(self.ln2(x))


class VisionBackbone(nn.Module):
    """Patchify -> linear patch embed -> 2 self-attention blocks -> norm."""

    def __init__(self, resolution: int, patch_size: int, dim: int, layers: int, heads: int):
        super().__init__()
        self.resolution = resolution
        self.patch_size = patch_size
        self.num_patches = (resolution // patch_size) ** 2
        self.patch_embed = nn.Linear(patch_size * patch_size * 3, dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, heads, causal=False) for _ in range(layers)
        )
        self.ln_f = nn.LayerNorm(dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, res, res, 3) images -> (B, num_patches, dim) tokens."""
        if images.shape[-3] != self.resolution or images.shape[-2] != self.resolution:
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} images, got "
                f"{images.shape[-3]}x{images.shape[-2]}"
            )
        x = self.patch_embed(patchify(images, self.patch_size))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


class DecoderLM(nn.Module):
    """Small decoder-only LM over externally assembled embedding sequences.

    The output head is tied to the token embedding. Inputs arrive already
    embedded (the alignment slot and image tokens have no vocabulary ids),
    so forward adds positional embeddings and returns per-position logits.
    """

    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int, max_seq_len: int):
        super().__init__()
        self.dim = dim
        self.max_seq_len = max_seq_len
        self.token_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Embedding(max_seq_len, dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(dim, heads, causal=True) for _ in range(layers)
        )
        self.ln_f = nn.LayerNorm(dim)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_emb(ids)

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """(B, L, dim) embeddings -> (B, L, vocab) logits."""
        if embeds.dim() != 3 or embeds.shape[-1] != self.dim:
            raise ValueError(f"expected (B, L, {self.dim}) embeddings, got {tuple(embeds.shape)}")
        length = embeds.shape[1]
        if length > self.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max {self.max_seq_len}")
        positions = torch.arange(length, device=embeds.device)
        x = embeds + self.pos_emb(positions)
        for block in self.blocks:
            x = block(x)
        x = self.ln_f(x)
        return F.linear(x, self.token_emb.weight)


def lm_loss(logits: torch.Tensor, token_ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over masked token positions.

    loss_mask[b, t] marks the token at position t as supervised; it is
    predicted from logits[b, t-1]. Position 0 can never be masked in.
    """
    if logits.dim() == 2:
        logits, token_ids, loss_mask = logits[None], token_ids[None], loss_mask[None]
    if loss_mask[:, 0].any():
        raise ValueError("position 0 has no preceding logits and cannot be supervised")
    mask = loss_mask[:, 1:]
    if not mask.any():
        raise ValueError("loss mask selects no positions")
    shifted_logits = logits[:, :-1][mask]
    targets = token_ids[:, 1:][mask]
    return F.cross_entropy(shifted_logits, targets)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(VOCAB)
    dim: int = 64
    layers: int = 4
    heads: int = 4
    vision_dim: int = 64
    vision_layers: int = 2
    vision_heads: int = 4
    resolution: int = 32
    patch_size: int = 8
    max_seq_len: int = 128
    levels: int = 8
    gate_feature: str = "hadamard"

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelConfig":
        return cls(
            dim=cfg["model_dim"],
            layers=cfg["model_layers"],
            heads=cfg["model_heads"],
            vision_dim=cfg["vision_dim"],
            vision_layers=cfg["vision_layers"],
            vision_heads=cfg["vision_heads"],
            resolution=cfg["resolution"],
            patch_size=cfg["patch_size"],
            max_seq_len=cfg["max_seq_len"],
            levels=cfg["levels"],
            gate_feature=cfg["gate_feature"],
        )


def init_module_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """GPT-2 style init, deterministic under the given generator."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            m.weight.data.normal_(mean=0.0, std=0.02, generator=generator)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Embedding):
            m.weight.data.normal_(mean=0.0, std=0.02, generator=generator)
        elif isinstance(m, nn.LayerNorm):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


class MultimodalStack(nn.Module):
    """Vision backbone + projector + decoder LM + alignment table + gate."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(seed)
        self.vision = VisionBackbone(
            config.resolution, config.patch_size, config.vision_dim,
            config.vision_layers, config.vision_heads,
        )
        self.projector = nn.Linear(config.vision_dim, config.dim)
        self.lm = DecoderLM(
            config.vocab_size, config.dim, config.layers, config.heads, config.max_seq_len
        )
        init_module_parameters(self, generator)
        self.align_table = AlignmentEmbeddingTable(config.levels, config.dim, generator)
        self.gate = AlignmentGate(config.dim, config.levels, config.gate_feature, generator)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.vision(images)

    def project(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        if patch_tokens.shape[-1] != self.config.vision_dim:
            raise ValueError(
                f"projector expects width {self.config.vision_dim}, got {patch_tokens.shape[-1]}"
            )
        return self.projector(patch_tokens)

    def named_tensor_map(self) -> dict[str, torch.Tensor]:
        """Canonical checkpoint names -> live parameter tensors."""
        out: dict[str, torch.Tensor] = {}
        for key, value in self.vision.state_dict(keep_vars=True).items():
            out[f"vision.{key}"] = value
        out["proj.weight"] = self.projector.weight
        out["proj.bias"] = self.projector.bias
        for key, value in self.lm.state_dict(keep_vars=True).items():
            out[f"lm.{key}"] = value
        out["align.table"] = self.align_table.weight
        out["gate.W"] = self.gate.W
        out["gate.b"] = self.gate.b
        return out

    def load_named_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.named_tensor_map()
        missing = sorted(set(own) - set(tensors))
        if missing:
            raise ValueError(f"checkpoint missing stack tensors: {missing}")
        with torch.no_grad():
            for name, param in own.items():
                arr = torch.from_numpy(np.asarray(tensors[name], dtype=np.float32))
                if tuple(arr.shape) != tuple(param.shape):
                    raise ValueError(
                        f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} "
                        f"vs model {tuple(param.shape)}"
                    )
                param.copy_(arr)

    def parameter_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, tensor in self.named_tensor_map().items():
            group = name.split(".")[0]
            counts[group] = counts.get(group, 0) + tensor.numel()
        counts["total"] = sum(v for k, v in counts.items() if k != "total")
        return counts


@torch.no_grad()
def generate(
    stack: MultimodalStack,
    image: torch.Tensor,
    instruction_ids: torch.Tensor,
    alignment_embedding: torch.Tensor,
    max_len: int,
) -> list[int]:
    """Greedy decode of an answer; stops at <eos> or max_len tokens."""
    if max_len <= 0:
        return []
    image_tokens = stack.project(stack.encode_image(image.unsqueeze(0)))[0]
    prefix = torch.cat(
        [
            alignment_embedding.unsqueeze(0),
            image_tokens,
            stack.lm.embed_tokens(instruction_ids),
        ],
        dim=0,
    )
    out: list[int] = []
    embeds = prefix
    for _ in range(max_len):
        logits = stack.lm(embeds.unsqueeze(0))[0, -1]
        next_id = int(torch.argmax(logits).item())
        if next_id == EOS_ID:
            break
        out.append(next_id)
        next_embed = stack.lm.embed_tokens(torch.tensor([next_id]))
        embeds = torch.cat([embeds, next_embed], dim=0)
    return out
