"""The reconstruction network: embedding, dual-branch trunk and inverse embedding."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import BackboneSpec
from .config import TrainConfig
from .embedding import HierarchicalPatchEmbedding, HPEConfig
from .features import FeatureSet, Provenance
from .transformer import AttentionConfig, PNPTTrunk


def backbone_spec(cfg: TrainConfig) -> BackboneSpec:
    b = cfg.backbone
    return BackboneSpec.builtin(b.name, b.input_size, weights_path=b.weights_path, seed=b.seed)


def used_scales(cfg: TrainConfig, num_scales: int) -> list[int]:
    """Scale indices the model reconstructs; only the deepest without multi-scale embedding."""
    return [num_scales - 1] if cfg.ablation.disable_hpe_multiscale else list(range(num_scales))


def build_hpe_config(cfg: TrainConfig, spec: BackboneSpec) -> HPEConfig:
    idx = used_scales(cfg, spec.num_scales)
    shapes = [spec.scale_shapes[i] for i in idx]
    patches = [cfg.hpe.patch_sizes[i] for i in idx]
    dims = cfg.hpe.per_scale_dims if len(idx) == spec.num_scales else None
    return HPEConfig(shapes, patches, cfg.model.hidden_dim, dims, cfg.hpe.noise_std, cfg.hpe.concat_axis)


def build_attention_config(cfg: TrainConfig) -> AttentionConfig:
    m, a = cfg.model, cfg.ablation
    return AttentionConfig(
        hidden_dim=m.hidden_dim,
        heads=m.heads,
        num_blocks=m.num_blocks,
        num_semantic_tokens=m.num_semantic_tokens,
        share_branch_weights=m.share_branch_weights,
        ffn_expansion=m.ffn_expansion,
        dual_stream=not a.disable_pool,
        semantic_tokens=not a.disable_semantic_tokens,
        conditional_decoding=not a.disable_cscd,
    )


class PNPTModel(nn.Module):
    """Reconstructs input features from a (prior, self) feature pair.

    With ``disable_pool`` the prior branch is absent and only the self branch
    is reconstructed.
    """

    def __init__(self, cfg: TrainConfig, spec: BackboneSpec | None = None):
        super().__init__()
        spec = spec or backbone_spec(cfg)
        self.scale_index = used_scales(cfg, spec.num_scales)
        self.dual_stream = not cfg.ablation.disable_pool
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.train.seed)
            self.hpe = HierarchicalPatchEmbedding(build_hpe_config(cfg, spec))
            self.trunk = PNPTTrunk(build_attention_config(cfg), seed=cfg.train.seed)

    def select(self, features: FeatureSet) -> FeatureSet:
        if len(self.scale_index) == len(features):
            return features
        return FeatureSet([features[i] for i in self.scale_index], features.provenance)

    def forward(self, f_self: FeatureSet, f_prior: FeatureSet | None = None, training: bool = False,
                generator: torch.Generator | None = None):
        """Returns ``(recon_prior or None, recon_self)`` over the scales in ``scale_index``."""
        f_self = self.select(f_self)
        e_self = self.hpe(f_self, training=training, generator=generator)
        e_prior = None
        if self.dual_stream:
            if f_prior is None:
                raise ValueError("the dual-stream model needs prior features")
            e_prior = self.hpe(self.select(f_prior), training=training, generator=generator)
        out_prior, out_self = self.trunk(e_prior, e_self)
        recon_self = self.hpe.inverse(out_self, Provenance.RECONSTRUCTION_SELF)
        recon_prior = None if out_prior is None else self.hpe.inverse(out_prior, Provenance.RECONSTRUCTION_PRIOR)
        return recon_prior, recon_self
