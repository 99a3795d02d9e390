"""Reconstruction loss, branch fusion and anomaly scoring."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .features import FeatureSet, Provenance, check_same_shapes

EPS = 1e-8


@dataclass(frozen=True)
class FusionWeights:
    w_prior: float = 0.5
    w_self: float = 0.5

    def __post_init__(self):
        if self.w_prior < 0 or self.w_self < 0 or abs(self.w_prior + self.w_self - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must be >= 0 and sum to 1, got {self.w_prior}, {self.w_self}")


def _flat_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.flatten(1)
    b = b.flatten(1)
    return (a * b).sum(1) / ((a.norm(dim=1) + EPS) * (b.norm(dim=1) + EPS))


def branch_loss(inputs: FeatureSet, recon: FeatureSet) -> torch.Tensor:
    """Sum over scales of ``1 - cos`` between whole flattened tensors, averaged over the batch."""
    check_same_shapes(inputs, recon)
    per_sample = sum(1.0 - _flat_cosine(x, y) for x, y in zip(inputs.scales, recon.scales))
    return per_sample.mean()


def reconstruction_loss(inputs: FeatureSet, recon_prior: FeatureSet | None, recon_self: FeatureSet) -> torch.Tensor:
    """Prior-branch plus self-branch loss; single-stream models count the self branch twice."""
    self_term = branch_loss(inputs, recon_self)
    if recon_prior is None:
        return 2.0 * self_term
    return branch_loss(inputs, recon_prior) + self_term


def fuse_reconstructions(recon_prior: FeatureSet | None, recon_self: FeatureSet,
                         weights: FusionWeights = FusionWeights()) -> FeatureSet:
    if recon_prior is None:
        return recon_self.with_provenance(Provenance.FUSED)
    check_same_shapes(recon_prior, recon_self)
    return FeatureSet(
        [weights.w_prior * p + weights.w_self * s for p, s in zip(recon_prior.scales, recon_self.scales)],
        Provenance.FUSED,
    )


@dataclass
class AnomalyResult:
    pixel_map: np.ndarray  # (S, S)
    image_score: float
    per_scale_maps: list[np.ndarray]
    class_id: str | None = None
    extra: dict = field(default_factory=dict)


def location_distance(inputs: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """``1 - cos`` along channels at every location: ``(B, C, H, W) -> (B, H, W)``."""
    dot = (inputs * recon).sum(1)
    norms = (inputs.norm(dim=1) + EPS) * (recon.norm(dim=1) + EPS)
    return 1.0 - dot / norms


def image_score_from_map(pixel_map: np.ndarray, reduction: str = "max", sigma: float = 4.0,
                         top_k: int = 100, border: int = 0) -> float:
    """Reduce a pixel map to one image score.

    ``border`` pixels along each edge are left out of the reduction (after
    smoothing): features there come from padded convolutions and are less
    reliable than interior ones. The pixel map itself is not cropped.
    """
    smoothed = gaussian_filter(pixel_map.astype(np.float64), sigma=sigma, mode="reflect") if sigma > 0 else pixel_map
    if border > 0:
        if 2 * border >= min(smoothed.shape):
            raise ValueError(f"score border {border} leaves nothing of a {smoothed.shape} map")
        smoothed = smoothed[border:-border, border:-border]
    if reduction == "max":
        return float(smoothed.max())
    if reduction == "mean-top-k":
        flat = np.sort(smoothed.ravel())[::-1]
        return float(flat[:top_k].mean())
    raise ValueError(f"unknown image score reduction {reduction!r}")


def anomaly_maps(inputs: FeatureSet, fused: FeatureSet, output_size: int) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Per-scale distance maps upsampled bilinearly to ``output_size`` and summed -> ``(B, S, S)``."""
    check_same_shapes(inputs, fused)
    native = [location_distance(x, y) for x, y in zip(inputs.scales, fused.scales)]
    total = None
    for m in native:
        up = F.interpolate(m[:, None], size=(output_size, output_size), mode="bilinear", align_corners=False)[:, 0]
        total = up if total is None else total + up
    return total.clamp_min(0.0), native


def anomaly_score(inputs: FeatureSet, fused: FeatureSet, output_size: int, *, reduction: str = "max",
                  sigma: float = 4.0, top_k: int = 100, border: int = 0) -> list[AnomalyResult]:
    with torch.no_grad():
        total, native = anomaly_maps(inputs, fused, output_size)
    results = []
    for b in range(total.shape[0]):
        pm = total[b].double().cpu().numpy()
        results.append(AnomalyResult(
            pixel_map=pm,
            image_score=image_score_from_map(pm, reduction, sigma, top_k, border),
            per_scale_maps=[m[b].double().cpu().numpy() for m in native],
        ))
    return results


def map_to_uint16(pixel_map: np.ndarray, num_scales: int) -> np.ndarray:
    """Affine export rule: ``round(clip(v / (2 * num_scales), 0, 1) * 65535)``."""
    return np.round(np.clip(pixel_map / (2.0 * num_scales), 0.0, 1.0) * 65535).astype(np.uint16)


def export_result(result: AnomalyResult, out_stem, num_scales: int, class_id: str | None = None) -> dict:
    """Write ``<stem>.png`` (16-bit map), ``<stem>.npy`` (raw float map) and ``<stem>.json``."""
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(map_to_uint16(result.pixel_map, num_scales)).save(stem.with_suffix(".png"))
    np.save(stem.with_suffix(".npy"), result.pixel_map.astype(np.float32))
    record = {"image_score": result.image_score, "class_id_retrieved": class_id or result.class_id}
    stem.with_suffix(".json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record
