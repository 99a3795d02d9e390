"""Dual-branch reconstruction trunk: joint-token self-attention encoding, second-order
cross-attention semantic fusion, and semantics-conditioned decoding.

All layer norms are applied after the residual sum (post-norm).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


class NumericError(FloatingPointError):
    """Non-finite activations inside the trunk."""


@dataclass
class AttentionConfig:
    hidden_dim: int = 760
    heads: int = 8
    num_blocks: int = 4
    num_semantic_tokens: int = 40
    share_branch_weights: bool = True
    ffn_expansion: int = 4
    # ablation switches
    dual_stream: bool = True
    semantic_tokens: bool = True
    conditional_decoding: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.num_blocks < 0 or self.num_semantic_tokens < 1:
            raise ValueError("num_blocks must be >= 0 and num_semantic_tokens >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate query and key/value inputs."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, c = query.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(query).view(b, n, h, c // h).transpose(1, 2)
        k = self.k(context).view(b, m, h, c // h).transpose(1, 2)
        v = self.v(context).view(b, m, h, c // h).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out(out)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__(nn.Linear(dim, dim * expansion), nn.GELU(), nn.Linear(dim * expansion, dim))


class AttentionLayer(nn.Module):
    """``z = LN(attn(x, ctx) + x); out = LN(FP(z) + z)``."""

    def __init__(self, dim: int, heads: int, expansion: int = 4):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        z = self.norm1(self.attn(x, x if context is None else context) + x)
        return self.norm2(self.ffn(z) + z)


class SemanticFusion(nn.Module):
    """Second-order cross-attention between prior-branch and self-branch semantics.

    The first attention couples the prior semantics (queries) with the sample
    semantics (keys/values); the second lets the sample semantics query that
    coupled result.  Order matters: swapping the inputs changes the output.
    """

    def __init__(self, dim: int, heads: int, expansion: int = 4):
        super().__init__()
        self.cross1 = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross2 = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, expansion)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, sem_prior: torch.Tensor, sem_self: torch.Tensor) -> torch.Tensor:
        coupled = self.norm1(self.cross1(sem_prior, sem_self) + sem_prior)
        z = self.norm2(self.cross2(sem_self, coupled) + sem_self)
        return self.norm3(self.ffn(z) + z)


def _check_finite(name: str, block: int, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations in {name} of block {block}")


class PNPTBlock(nn.Module):
    """One encoding/fusion/decoding stage."""

    def __init__(self, cfg: AttentionConfig, index: int):
        super().__init__()
        self.cfg = cfg
        self.index = index
        dim, heads, exp = cfg.hidden_dim, cfg.heads, cfg.ffn_expansion
        n_enc = 1 if cfg.share_branch_weights or not cfg.dual_stream else 2
        self.encoders = nn.ModuleList([AttentionLayer(dim, heads, exp) for _ in range(n_enc)])
        self.fusion = SemanticFusion(dim, heads, exp) if cfg.dual_stream else None
        if cfg.conditional_decoding:
            self.decoders = nn.ModuleList([AttentionLayer(dim, heads, exp) for _ in range(n_enc)])
        else:
            self.decoders = None

    def _layer(self, layers: nn.ModuleList, branch: int) -> AttentionLayer:
        return layers[branch if len(layers) > 1 else 0]

    def aggregate(self, tokens: torch.Tensor, semantic: torch.Tensor | None, branch: int):
        """Joint self-attention over ``[patch tokens; semantic tokens]``; returns the split outputs."""
        if semantic is None:
            return self._layer(self.encoders, branch)(tokens), None
        n_patch = tokens.shape[1]
        sem = semantic.expand(tokens.shape[0], -1, -1)
        joint = self._layer(self.encoders, branch)(torch.cat([tokens, sem], dim=1))
        return joint[:, :n_patch], joint[:, n_patch:]

    def decode(self, tokens: torch.Tensor, context: torch.Tensor, branch: int) -> torch.Tensor:
        return self._layer(self.decoders, branch)(tokens, context)

    def forward(self, prior, self_tokens, semantic):
        """Returns ``(next_prior, next_self, next_semantic)``; ``prior`` is None in single-stream mode."""
        cfg = self.cfg
        r_self, s_self = self.aggregate(self_tokens, semantic, branch=1)
        if cfg.dual_stream:
            r_prior, s_prior = self.aggregate(prior, semantic, branch=0)
            if cfg.semantic_tokens:
                fused = self.fusion(s_prior, s_self)
            else:
                # no semantic tokens: fuse the encoded patch tokens themselves
                fused = self.fusion(r_prior, r_self)
        else:
            r_prior = None
            fused = s_self if cfg.semantic_tokens else r_self
        _check_finite("encoding", self.index, r_self, fused)

        if self.decoders is None:
            next_prior, next_self = r_prior, r_self
        else:
            next_self = self.decode(r_self, fused, branch=1)
            next_prior = self.decode(r_prior, fused, branch=0) if cfg.dual_stream else None
        _check_finite("decoding", self.index, next_self)
        next_semantic = fused if cfg.semantic_tokens else None
        return next_prior, next_self, next_semantic


def init_semantic_tokens(n: int, dim: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    if n <= 0 or dim <= 0:
        raise ValueError("semantic token table needs n > 0 and dim > 0")
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, dim, generator=g, dtype=torch.float64) * 0.02).to(dtype)


class PNPTTrunk(nn.Module):
    def __init__(self, cfg: AttentionConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([PNPTBlock(cfg, i) for i in range(cfg.num_blocks)])
        self.semantic = nn.Parameter(init_semantic_tokens(cfg.num_semantic_tokens, cfg.hidden_dim, seed))

    def forward(self, prior: torch.Tensor | None, self_tokens: torch.Tensor):
        semantic = self.semantic[None] if self.cfg.semantic_tokens else None
        if semantic is not None:
            semantic = semantic.to(self_tokens.dtype)
        for block in self.blocks:
            prior, self_tokens, semantic = block(prior, self_tokens, semantic)
        return prior, self_tokens

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, Attention)]
