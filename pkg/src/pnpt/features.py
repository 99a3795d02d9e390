"""Multi-scale feature containers."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch


class Provenance(str, Enum):
    INPUT = "input"
    PRIOR = "prior"
    RECONSTRUCTION_PRIOR = "reconstruction_prior"
    RECONSTRUCTION_SELF = "reconstruction_self"
    FUSED = "fused"


@dataclass
class FeatureSet:
    """A feature hierarchy: one ``(B, C_i, H_i, W_i)`` tensor per scale."""

    scales: list[torch.Tensor]
    provenance: Provenance = Provenance.INPUT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scales = list(self.scales)
        if not self.scales:
            raise ValueError("a FeatureSet needs at least one scale")
        batch = self.scales[0].shape[0]
        for s in self.scales:
            if s.ndim != 4:
                raise ValueError(f"scale tensors must be (B, C, H, W), got {tuple(s.shape)}")
            if s.shape[0] != batch:
                raise ValueError("all scales must share the batch dimension")

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.scales[i]

    @property
    def batch_size(self) -> int:
        return self.scales[0].shape[0]

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(s.shape[1:]) for s in self.scales]

    def select(self, index) -> "FeatureSet":
        return FeatureSet([s[index] for s in self.scales], self.provenance)

    def with_provenance(self, provenance: Provenance) -> "FeatureSet":
        return FeatureSet(self.scales, Provenance(provenance))

    def to(self, device) -> "FeatureSet":
        return FeatureSet([s.to(device) for s in self.scales], self.provenance, dict(self.meta))

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(s).all()) for s in self.scales)

    def detach(self) -> "FeatureSet":
        return FeatureSet([s.detach() for s in self.scales], self.provenance)

    @staticmethod
    def cat(sets: list["FeatureSet"]) -> "FeatureSet":
        n = len(sets[0])
        return FeatureSet([torch.cat([fs[i] for fs in sets]) for i in range(n)], sets[0].provenance)


def check_same_shapes(*sets: FeatureSet) -> None:
    ref = sets[0]
    for other in sets[1:]:
        if len(other) != len(ref) or any(a.shape != b.shape for a, b in zip(ref.scales, other.scales)):
            raise ValueError(
                f"feature sets differ in shape: {[tuple(s.shape) for s in ref.scales]} vs "
                f"{[tuple(s.shape) for s in other.scales]}"
            )
