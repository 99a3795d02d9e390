"""Class-specific normality pool: per-class prototype features and global codings."""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .archive import ArchiveError, load_archive, save_archive
from .backbone import Backbone, extract_features
from .features import FeatureSet, Provenance

METRICS = ("euclidean", "cosine")


def compute_global_coding(features: FeatureSet) -> torch.Tensor:
    """Spatial mean per channel at every scale, concatenated in scale order -> ``(B, sum C_i)``."""
    return torch.cat([s.mean(dim=(2, 3)) for s in features.scales], dim=1)


@dataclass
class NormalityPool:
    classes: list[str]
    prototype_features: FeatureSet  # scale tensors stacked over classes: (K, C_i, H_i, W_i)
    prototype_codings: torch.Tensor  # (K, D)
    sample_counts: list[int]
    metric: str = "euclidean"
    normalize_codings: bool = False
    backbone_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        k = len(self.classes)
        if self.prototype_codings.shape[0] != k or self.prototype_features.batch_size != k:
            raise ValueError("pool tensors must have one row per class")
        self.prototype_features = self.prototype_features.with_provenance(Provenance.PRIOR)

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, class_id: str) -> int:
        try:
            return self.classes.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id!r} not in pool {self.classes}") from None

    def prior(self, indices) -> FeatureSet:
        """Prototype features for a sequence of class indices, batched."""
        idx = torch.as_tensor(indices, dtype=torch.long)
        return self.prototype_features.select(idx)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.classes, self.sample_counts, self.metric, self.normalize_codings,
                       self.backbone_hash)).encode())
        for t in [*self.prototype_features.scales, self.prototype_codings]:
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def _prepare(codings: torch.Tensor, normalize: bool) -> torch.Tensor:
    if normalize:
        return codings / codings.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return codings


def coding_distances(queries: torch.Tensor, keys: torch.Tensor, metric: str = "euclidean",
                     normalize: bool = False) -> torch.Tensor:
    """Distance matrix ``(Q, K)`` between query codings and key codings."""
    q = _prepare(queries, normalize)
    k = _prepare(keys.to(q.dtype), normalize)
    if metric == "euclidean":
        return torch.cdist(q, k, compute_mode="donot_use_mm_for_euclid_dist")
    if metric == "cosine":
        qn = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        kn = k / k.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return 1.0 - qn @ kn.T
    raise ValueError(f"unknown metric {metric!r}")


def retrieve_indices(codings: torch.Tensor, pool: NormalityPool) -> torch.Tensor:
    """Nearest prototype index per query; ``argmin`` keeps the lowest index on ties."""
    if len(pool) == 0:
        raise ValueError("cannot retrieve from an empty pool")
    if codings.ndim == 1:
        codings = codings[None]
    d = coding_distances(codings, pool.prototype_codings, pool.metric, pool.normalize_codings)
    return d.argmin(dim=1)


def retrieve_prior(coding: torch.Tensor, pool: NormalityPool) -> tuple[str, FeatureSet]:
    idx = int(retrieve_indices(coding, pool)[0])
    return pool.classes[idx], pool.prior([idx])


class _RunningMean:
    __slots__ = ("count", "mean")

    def __init__(self):
        self.count = 0
        self.mean = None

    def update(self, x: torch.Tensor) -> None:
        x = x.to(torch.float64)
        self.count += 1
        if self.mean is None:
            self.mean = x.clone()
        else:
            self.mean += (x - self.mean) / self.count


def build_pool(dataset: Iterable[tuple[str, torch.Tensor]], backbone: Backbone, *,
               classes: list[str] | None = None, metric: str = "euclidean",
               normalize_codings: bool = False) -> NormalityPool:
    """Stream ``(class_id, normalized image)`` pairs into per-class running means.

    Memory is one accumulator per class, independent of the number of images.
    """
    stats: dict[str, tuple[list[_RunningMean], _RunningMean]] = {}
    shapes = None
    for class_id, image in dataset:
        feats = extract_features(backbone, image)
        for b in range(feats.batch_size):
            one = feats.select(slice(b, b + 1))
            if shapes is None:
                shapes = one.shapes
            elif one.shapes != shapes:
                raise ValueError(f"inconsistent feature shapes {one.shapes} vs {shapes} (class {class_id!r})")
            if class_id not in stats:
                stats[class_id] = ([_RunningMean() for _ in one.scales], _RunningMean())
            scale_means, coding_mean = stats[class_id]
            for acc, s in zip(scale_means, one.scales):
                acc.update(s[0])
            coding_mean.update(compute_global_coding(one)[0])

    order = list(classes) if classes is not None else sorted(stats)
    for c in order:
        if c not in stats:
            raise ValueError(f"class {c!r} has no training images")
    if not order:
        raise ValueError("cannot build a pool from an empty dataset")

    dtype = next(backbone.parameters()).dtype
    n_scales = len(stats[order[0]][0])
    scales = [torch.stack([stats[c][0][i].mean for c in order]).to(dtype) for i in range(n_scales)]
    codings = torch.stack([stats[c][1].mean for c in order]).to(dtype)
    return NormalityPool(
        classes=order,
        prototype_features=FeatureSet(scales, Provenance.PRIOR),
        prototype_codings=codings,
        sample_counts=[stats[c][1].count for c in order],
        metric=metric,
        normalize_codings=normalize_codings,
        backbone_hash=backbone.spec.digest(),
    )


def save_pool(pool: NormalityPool, path) -> None:
    tensors = {f"prototype_features.scale{i}": s for i, s in enumerate(pool.prototype_features.scales)}
    tensors["prototype_codings"] = pool.prototype_codings
    meta = {
        "classes": pool.classes,
        "sample_counts": pool.sample_counts,
        "metric": pool.metric,
        "normalize_codings": pool.normalize_codings,
        "backbone_hash": pool.backbone_hash,
        "num_scales": len(pool.prototype_features),
    }
    save_archive(path, tensors, kind="normality_pool", meta=meta)


def load_pool(path) -> NormalityPool:
    tensors, meta = load_archive(path, kind="normality_pool")
    try:
        scales = [tensors[f"prototype_features.scale{i}"] for i in range(meta["num_scales"])]
        return NormalityPool(
            classes=list(meta["classes"]),
            prototype_features=FeatureSet(scales, Provenance.PRIOR),
            prototype_codings=tensors["prototype_codings"],
            sample_counts=list(meta["sample_counts"]),
            metric=meta["metric"],
            normalize_codings=bool(meta["normalize_codings"]),
            backbone_hash=meta["backbone_hash"],
        )
    except KeyError as exc:
        raise ArchiveError(f"{path}: pool archive is missing {exc}") from exc


def _median_latency(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_retrieval(pool_sizes, image_counts, *, coding_dim: int = 1792, queries: int = 64,
                    repeats: int = 9, seed: int = 0, out_csv=None) -> list[dict]:
    """Time class-level retrieval against a per-sample linear scan.

    For every ``(K, N)`` a synthetic training set of ``N`` codings over ``K``
    classes is averaged into ``K`` prototypes.  ``pool_latency_us`` times a
    batch of nearest-prototype queries; ``sample_scan_latency_us`` times the
    same queries against all ``N`` sample codings.  Both are per query.
    """
    rng = np.random.default_rng(seed)
    rows = []
    with torch.no_grad():
        for k in pool_sizes:
            for n in image_counts:
                centers = rng.normal(size=(k, coding_dim)).astype(np.float32)
                labels = np.arange(n) % k
                samples = centers[labels] + 0.1 * rng.normal(size=(n, coding_dim)).astype(np.float32)
                protos = np.stack([samples[labels == c].mean(0) if np.any(labels == c) else centers[c]
                                   for c in range(k)])
                q = torch.from_numpy(centers[rng.integers(0, k, queries)]
                                     + 0.1 * rng.normal(size=(queries, coding_dim)).astype(np.float32))
                p = torch.from_numpy(protos)
                s = torch.from_numpy(samples)
                pool_t = _median_latency(lambda: coding_distances(q, p).argmin(1), repeats)
                scan_t = _median_latency(lambda: coding_distances(q, s).argmin(1), repeats)
                rows.append({
                    "num_classes": k,
                    "num_images": n,
                    "coding_dim": coding_dim,
                    "pool_latency_us": pool_t / queries * 1e6,
                    "sample_scan_latency_us": scan_t / queries * 1e6,
                })
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
