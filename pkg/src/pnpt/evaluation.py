"""AUROC metrics, dataset-wide evaluation and the prompt-swap diagnostic."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Sample, load_mask, test_samples
from .features import FeatureSet
from .inference import Detector
from .training import extract_all, load_images


class UndefinedAUROCError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores share their mid-rank (a tie counts one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUROCError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ImageRecord:
    path: str
    class_id: str
    defect_type: str
    label: int
    retrieved_class: str
    image_score: float


@dataclass
class EvalReport:
    class_image_auroc: dict[str, float]
    class_pixel_auroc: dict[str, float]
    records: list[ImageRecord]
    retrieval_accuracy: float
    normal_retrieval_accuracy: float
    runtime: dict = field(default_factory=dict)
    defect_pixel_mean: float = float("nan")
    normal_pixel_mean: float = float("nan")

    @property
    def mean_image_auroc(self) -> float:
        return float(np.mean(list(self.class_image_auroc.values())))

    @property
    def mean_pixel_auroc(self) -> float:
        return float(np.mean(list(self.class_pixel_auroc.values())))

    def summary(self) -> dict:
        return {
            "mean_image_auroc": self.mean_image_auroc,
            "mean_pixel_auroc": self.mean_pixel_auroc,
            "class_image_auroc": self.class_image_auroc,
            "class_pixel_auroc": self.class_pixel_auroc,
            "retrieval_accuracy": self.retrieval_accuracy,
            "normal_retrieval_accuracy": self.normal_retrieval_accuracy,
            "defect_pixel_mean": self.defect_pixel_mean,
            "normal_pixel_mean": self.normal_pixel_mean,
            "num_images": len(self.records),
            "runtime": self.runtime,
        }

    def write(self, out_dir) -> None:
        """``images.csv``: path, class_id, defect_type, label, retrieved_class, image_score.
        ``classes.csv``: class_id, image_auroc, pixel_auroc, then a ``mean`` row."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "images.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "class_id", "defect_type", "label", "retrieved_class", "image_score"])
            for r in self.records:
                w.writerow([r.path, r.class_id, r.defect_type, r.label, r.retrieved_class, f"{r.image_score:.8g}"])
        with open(out / "classes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "image_auroc", "pixel_auroc"])
            for c in self.class_image_auroc:
                w.writerow([c, f"{self.class_image_auroc[c]:.6f}", f"{self.class_pixel_auroc[c]:.6f}"])
            w.writerow(["mean", f"{self.mean_image_auroc:.6f}", f"{self.mean_pixel_auroc:.6f}"])


def evaluate_dataset(detector: Detector | None, dataset_root, *, out_dir=None, save_maps: bool = False,
                     map_override: Callable[[Sample, np.ndarray], np.ndarray] | None = None,
                     input_size: int | None = None, batch_size: int = 8) -> EvalReport:
    """Score every test image and aggregate per-class image and pixel AUROC.

    ``map_override(sample, mask)`` replaces the model output with an injected
    anomaly map (harness testing); with it ``detector`` may be None.
    """
    samples = test_samples(dataset_root)
    size = input_size or detector.config.backbone.input_size
    t0 = time.perf_counter()
    maps, scores, retrieved = [], [], []
    if map_override is None:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            for r in detector.score_images(load_images(chunk, size), batch_size=batch_size):
                maps.append(r.pixel_map.astype(np.float32))
                scores.append(r.image_score)
                retrieved.append(r.class_id or "")
    else:
        from .objective import image_score_from_map

        for s in samples:
            m = np.asarray(map_override(s, load_mask(s, size)), dtype=np.float32)
            maps.append(m)
            scores.append(image_score_from_map(m))
            retrieved.append(s.class_id)
    elapsed = time.perf_counter() - t0

    root = Path(dataset_root)
    records = [ImageRecord(str(s.path.relative_to(root)), s.class_id, s.defect_type, s.label, rc, float(sc))
               for s, sc, rc in zip(samples, scores, retrieved)]
    class_img, class_pix = {}, {}
    defect_sum = normal_sum = 0.0
    defect_n = normal_n = 0
    for c in sorted({s.class_id for s in samples}):
        idx = [i for i, s in enumerate(samples) if s.class_id == c]
        class_img[c] = auroc([scores[i] for i in idx], [samples[i].label for i in idx])
        masks = np.stack([load_mask(samples[i], size) for i in idx])
        pix = np.stack([maps[i] for i in idx])
        class_pix[c] = auroc(pix.ravel(), masks.ravel())
        defect_sum += float(pix[masks].sum())
        defect_n += int(masks.sum())
        normal_sum += float(pix[~masks].sum())
        normal_n += int((~masks).sum())

    correct = [r.retrieved_class == r.class_id for r in records]
    normal_correct = [ok for ok, r in zip(correct, records) if r.label == 0]
    report = EvalReport(
        class_image_auroc=class_img,
        class_pixel_auroc=class_pix,
        records=records,
        retrieval_accuracy=float(np.mean(correct)),
        normal_retrieval_accuracy=float(np.mean(normal_correct)) if normal_correct else float("nan"),
        runtime={"seconds": elapsed, "seconds_per_image": elapsed / len(samples)},
        defect_pixel_mean=defect_sum / max(defect_n, 1),
        normal_pixel_mean=normal_sum / max(normal_n, 1),
    )
    if out_dir is not None:
        report.write(out_dir)
        if save_maps:
            for rec, m in zip(records, maps):
                dest = Path(out_dir) / "maps" / Path(rec.path).with_suffix(".npy")
                dest.parent.mkdir(parents=True, exist_ok=True)
                np.save(dest, m)
    return report


def featureset_distance(a: FeatureSet, b: FeatureSet) -> torch.Tensor:
    """Per-sample mean over scales of ``1 - cos`` between whole flattened tensors -> ``(B,)``."""
    total = 0.0
    for x, y in zip(a.scales, b.scales):
        x = x.flatten(1).double()
        y = y.flatten(1).double()
        total = total + 1.0 - (x * y).sum(1) / (x.norm(dim=1) * y.norm(dim=1)).clamp_min(1e-12)
    return total / len(a)


@dataclass
class PromptSwapReport:
    forced_class: str
    d_correct: np.ndarray  # prior reconstruction vs. true-class prototype, retrieved prompting
    d_forced: np.ndarray  # same, under forced prompting
    prior_change: np.ndarray  # prior reconstruction, retrieved vs. forced
    self_drift: np.ndarray  # self reconstruction, retrieved vs. forced
    true_class: list[str]

    def summary(self) -> dict:
        return {
            "forced_class": self.forced_class,
            "mean_d_correct": float(self.d_correct.mean()),
            "mean_d_forced": float(self.d_forced.mean()),
            "fraction_forced_farther": float(np.mean(self.d_forced > self.d_correct)),
            "mean_prior_change": float(self.prior_change.mean()),
            "mean_self_drift": float(self.self_drift.mean()),
        }


@torch.no_grad()
def prompt_swap_diagnostic(detector: Detector, features: FeatureSet, true_class: list[str],
                           forced_class: str) -> PromptSwapReport:
    """Reconstruct with the retrieved prior and again with ``forced_class``'s prior."""
    if detector.pool is None or not detector.dual:
        raise ValueError("the prompt-swap diagnostic needs a dual-stream model with a pool")
    pool = detector.pool
    pool.index(forced_class)
    base = detector.reconstruct(features)
    forced = detector.reconstruct(features, forced_class=forced_class)
    protos = detector.model.select(pool.prior([pool.index(c) for c in true_class]))
    return PromptSwapReport(
        forced_class=forced_class,
        d_correct=featureset_distance(base.recon_prior, protos).numpy(),
        d_forced=featureset_distance(forced.recon_prior, protos).numpy(),
        prior_change=featureset_distance(base.recon_prior, forced.recon_prior).numpy(),
        self_drift=featureset_distance(base.recon_self, forced.recon_self).numpy(),
        true_class=list(true_class),
    )


def load_test_features(detector: Detector, dataset_root, normal_only: bool = False):
    samples = [s for s in test_samples(dataset_root) if not (normal_only and s.label)]
    images = load_images(samples, detector.config.backbone.input_size)
    return samples, extract_all(detector.backbone, images)
