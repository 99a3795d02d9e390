"""Hierarchical patch embedding between a feature hierarchy and a token sequence."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .features import FeatureSet, Provenance


def split_evenly(total: int, parts: int) -> list[int]:
    """``split_evenly(760, 3) == [254, 253, 253]``."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


@dataclass
class HPEConfig:
    scale_shapes: list[tuple[int, int, int]]
    patch_sizes: list[int] = field(default_factory=lambda: [4, 2, 1])
    hidden_dim: int = 760
    per_scale_dims: list[int] | None = None
    noise_std: float = 0.1
    concat_axis: str = "channel"

    def __post_init__(self):
        self.scale_shapes = [tuple(int(v) for v in s) for s in self.scale_shapes]
        self.patch_sizes = [int(p) for p in self.patch_sizes]
        if len(self.patch_sizes) != len(self.scale_shapes):
            raise ValueError(f"need one patch size per scale: {self.patch_sizes} vs {len(self.scale_shapes)} scales")
        if self.concat_axis not in ("channel", "sequence"):
            raise ValueError(f"concat_axis must be 'channel' or 'sequence', got {self.concat_axis!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        grids = set()
        for (c, h, w), p in zip(self.scale_shapes, self.patch_sizes):
            if h % p or w % p:
                raise ValueError(f"scale {c}x{h}x{w} is not divisible by patch size {p}")
            if h // p != w // p:
                raise ValueError(f"scale {c}x{h}x{w} does not give a square token grid")
            grids.add(h // p)
        if len(grids) != 1:
            raise ValueError(f"patch sizes {self.patch_sizes} give unequal token grids {sorted(grids)}")
        if self.per_scale_dims is None:
            if self.concat_axis == "channel":
                self.per_scale_dims = split_evenly(self.hidden_dim, len(self.scale_shapes))
            else:
                self.per_scale_dims = [self.hidden_dim] * len(self.scale_shapes)
        self.per_scale_dims = [int(d) for d in self.per_scale_dims]
        if self.concat_axis == "channel" and sum(self.per_scale_dims) != self.hidden_dim:
            raise ValueError(f"per_scale_dims {self.per_scale_dims} must sum to hidden_dim {self.hidden_dim}")
        if self.concat_axis == "sequence" and any(d != self.hidden_dim for d in self.per_scale_dims):
            raise ValueError("sequence concatenation projects every scale to hidden_dim")

    @property
    def grid(self) -> int:
        return self.scale_shapes[0][1] // self.patch_sizes[0]

    @property
    def num_scales(self) -> int:
        return len(self.scale_shapes)

    @property
    def seq_len(self) -> int:
        per_scale = self.grid ** 2
        return per_scale * self.num_scales if self.concat_axis == "sequence" else per_scale

    def to_dict(self) -> dict:
        return asdict(self)


class HierarchicalPatchEmbedding(nn.Module):
    """Non-overlapping per-scale patches -> linear projection -> one token per grid cell.

    Patch vectors are flattened channel-major, i.e. index ``(c * p + row) * p + col``
    (the order of ``F.unfold``); grid positions are row-major.
    """

    def __init__(self, cfg: HPEConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.ModuleList()
        self.unembed = nn.ModuleList()
        for (c, _, _), p, d in zip(cfg.scale_shapes, cfg.patch_sizes, cfg.per_scale_dims):
            self.embed.append(nn.Linear(c * p * p, d))
            self.unembed.append(nn.Linear(d, c * p * p))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.seq_len, cfg.hidden_dim))

    def forward(self, features: FeatureSet, training: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        cfg = self.cfg
        if [tuple(s.shape[1:]) for s in features.scales] != cfg.scale_shapes:
            raise ValueError(f"feature shapes {features.shapes} do not match HPE config {cfg.scale_shapes}")
        parts = []
        for x, p, proj in zip(features.scales, cfg.patch_sizes, self.embed):
            patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)  # (B, G*G, C*p*p)
            parts.append(proj(patches))
        dim = 2 if cfg.concat_axis == "channel" else 1
        tokens = torch.cat(parts, dim=dim) + self.pos_embed
        if training and cfg.noise_std > 0:
            # drawn on the CPU so a CPU generator drives runs on any device
            noise = torch.randn(tokens.shape, generator=generator, dtype=tokens.dtype).to(tokens.device)
            tokens = tokens + cfg.noise_std * noise
        return tokens

    def inverse(self, tokens: torch.Tensor, provenance=Provenance.RECONSTRUCTION_SELF) -> FeatureSet:
        cfg = self.cfg
        if tokens.ndim != 3 or tokens.shape[1] != cfg.seq_len or tokens.shape[2] != cfg.hidden_dim:
            raise ValueError(f"expected tokens (B, {cfg.seq_len}, {cfg.hidden_dim}), got {tuple(tokens.shape)}")
        if cfg.concat_axis == "channel":
            slices = torch.split(tokens, cfg.per_scale_dims, dim=2)
        else:
            slices = torch.split(tokens, cfg.grid ** 2, dim=1)
        scales = []
        for t, (c, h, w), p, proj in zip(slices, cfg.scale_shapes, cfg.patch_sizes, self.unembed):
            patches = proj(t).transpose(1, 2)  # (B, C*p*p, G*G)
            scales.append(F.fold(patches, output_size=(h, w), kernel_size=p, stride=p))
        return FeatureSet(scales, provenance)
