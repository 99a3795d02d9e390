"""Inference path: features -> prior retrieval -> dual reconstruction -> anomaly maps."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import Backbone, extract_features, load_backbone
from .features import FeatureSet
from .model import backbone_spec
from .objective import AnomalyResult, FusionWeights, anomaly_score, fuse_reconstructions
from .pool import NormalityPool, compute_global_coding, retrieve_indices
from .training import Checkpoint


@dataclass
class Reconstruction:
    inputs: FeatureSet  # the scales the model reconstructs
    recon_prior: FeatureSet | None
    recon_self: FeatureSet
    prior_index: torch.Tensor | None
    retrieved_index: torch.Tensor | None


class Detector:
    """A trained model plus its pool and backbone, ready to score images."""

    def __init__(self, checkpoint: Checkpoint, pool: NormalityPool | None, backbone: Backbone | None = None,
                 device: str | torch.device = "cpu"):
        cfg = checkpoint.config
        self.config = cfg
        self.device = torch.device(device)
        self.backbone = backbone or load_backbone(backbone_spec(cfg))
        if checkpoint.backbone_state:
            self.backbone.trunk.load_state_dict(checkpoint.backbone_state)
        self.backbone.to(self.device)
        self.model = checkpoint.build_model().to(self.device)
        self.dual = not cfg.ablation.disable_pool
        if self.dual and pool is None:
            raise ValueError("this model needs a normality pool")
        self.pool = pool
        self.weights = FusionWeights(cfg.fusion.w_prior, cfg.fusion.w_self)

    @property
    def classes(self) -> list[str]:
        return self.pool.classes if self.pool is not None else []

    def features(self, images: torch.Tensor) -> FeatureSet:
        return extract_features(self.backbone, images.to(self.device))

    @torch.no_grad()
    def reconstruct(self, features: FeatureSet, forced_class: str | None = None) -> Reconstruction:
        retrieved = prior_idx = None
        f_prior = None
        if self.pool is not None:
            retrieved = retrieve_indices(compute_global_coding(features), self.pool)
            prior_idx = retrieved
            if forced_class is not None:
                prior_idx = torch.full_like(retrieved, self.pool.index(forced_class))
        if self.dual:
            f_prior = self.pool.prior(prior_idx)
        rp, rs = self.model(features, f_prior, training=False)
        return Reconstruction(self.model.select(features), rp, rs, prior_idx, retrieved)

    def score_features(self, features: FeatureSet, forced_class: str | None = None) -> list[AnomalyResult]:
        rec = self.reconstruct(features, forced_class)
        fused = fuse_reconstructions(rec.recon_prior, rec.recon_self, self.weights)
        sc = self.config.score
        results = anomaly_score(rec.inputs, fused, self.config.backbone.input_size,
                                reduction=sc.reduction, sigma=sc.sigma, top_k=sc.top_k,
                                border=sc.border)
        if rec.retrieved_index is not None:
            for r, i in zip(results, rec.retrieved_index.tolist()):
                r.class_id = self.pool.classes[i]
        return results

    def score_images(self, images: torch.Tensor, batch_size: int = 8, forced_class: str | None = None
                     ) -> list[AnomalyResult]:
        out = []
        for i in range(0, len(images), batch_size):
            out.extend(self.score_features(self.features(images[i:i + batch_size]), forced_class))
        return out
