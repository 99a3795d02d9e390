"""scikit-learn style wrappers around pool building, training and scoring.

``X`` is a sequence of RGB images: file paths, PIL images, or ``HxWx3``
uint8 arrays (a 4-d ``NxHxWx3`` array also works).  ``y`` holds the class
label of each (normal) training image.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import extract_features, load_backbone, preprocess
from .config import load_config
from .inference import Detector
from .model import backbone_spec
from .pool import build_pool, compute_global_coding, retrieve_indices
from .training import TrainingData, extract_all, train


def check_images(X, input_size: int) -> torch.Tensor:
    """Validate ``X`` and return a normalized ``(N, 3, S, S)`` batch."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if isinstance(X, (str, Path, Image.Image)) or (isinstance(X, np.ndarray) and X.ndim != 4):
        raise ValueError("expected a sequence of images, got a single image; wrap it in a list")
    items = list(X)
    if not items:
        raise ValueError("expected at least one image")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, np.ndarray):
            if item.ndim != 3 or item.shape[-1] != 3:
                raise ValueError(f"image {i}: expected HxWx3, got shape {item.shape}")
            if item.dtype != np.uint8:
                raise ValueError(f"image {i}: expected uint8 pixels, got {item.dtype}")
        elif not isinstance(item, (str, Path, Image.Image)):
            raise TypeError(f"image {i}: unsupported type {type(item).__name__}")
        out.append(preprocess(item, input_size))
    return torch.stack(out)


def check_labels(y, n: int) -> list[str]:
    if y is None:
        raise ValueError("class labels are required: one per training image")
    labels = [str(v) for v in np.asarray(y).ravel()]
    if len(labels) != n:
        raise ValueError(f"got {len(labels)} labels for {n} images")
    return labels


class GlobalCodingTransformer(TransformerMixin, BaseEstimator):
    """Maps images to their global codings: per-scale average-pooled frozen features."""

    def __init__(self, backbone: str = "tiny", input_size: int = 256, seed: int = 0):
        self.backbone = backbone
        self.input_size = input_size
        self.seed = seed

    def fit(self, X=None, y=None):
        cfg = load_config(None, [f"backbone.name={self.backbone}", f"backbone.input_size={self.input_size}",
                                 f"backbone.seed={self.seed}"])
        self.backbone_ = load_backbone(backbone_spec(cfg))
        self.n_features_out_ = self.backbone_.spec.coding_dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "backbone_")
        images = check_images(X, self.input_size)
        return compute_global_coding(extract_all(self.backbone_, images)).numpy()


class PNPTDetector(OutlierMixin, BaseEstimator):
    """Unified multi-class anomaly detector.

    ``fit`` builds the class prototype pool and trains the reconstruction model
    on normal images. ``decision_function`` returns image anomaly scores, with
    higher meaning more anomalous. ``predict`` follows the outlier convention:
    -1 for anomalous and 1 for normal. The cut-off is the ``threshold_quantile``
    of the training-image scores.

    ``overrides`` takes ``section.key=value`` strings or a dict, exactly like
    the config file.
    """

    def __init__(self, overrides=None, variant: str = "full", seed: int = 0, threshold_quantile: float = 0.99):
        self.overrides = overrides
        self.variant = variant
        self.seed = seed
        self.threshold_quantile = threshold_quantile

    def _config(self):
        over = self.overrides or []
        if isinstance(over, dict):
            over = [f"{k}={v}" for k, v in over.items()]
        return load_config(None, list(over) + [f"train.seed={self.seed}"]).with_variant(self.variant)

    def fit(self, X, y):
        if not 0.0 < self.threshold_quantile <= 1.0:
            raise ValueError("threshold_quantile must be in (0, 1]")
        cfg = self._config()
        backbone = load_backbone(backbone_spec(cfg))
        images = check_images(X, cfg.backbone.input_size)
        labels = check_labels(y, len(images))
        pool = None
        if not cfg.ablation.disable_pool:
            pool = build_pool(zip(labels, images), backbone, metric=cfg.pool.metric,
                              normalize_codings=cfg.pool.normalize_codings)
        data = TrainingData(images, labels, pool, backbone)
        self.checkpoint_ = train(cfg, None, pool, data=data)
        self.pool_ = pool
        self.detector_ = Detector(self.checkpoint_, pool, backbone)
        self.classes_ = sorted(set(labels))
        train_scores = self._scores(images)
        self.threshold_ = float(np.quantile(train_scores, self.threshold_quantile))
        return self

    def _scores(self, images: torch.Tensor) -> np.ndarray:
        return np.array([r.image_score for r in self.detector_.score_images(images)])

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "detector_")
        return self._scores(check_images(X, self.detector_.config.backbone.input_size))

    def score_samples(self, X) -> np.ndarray:
        # sklearn convention: lower means more abnormal
        return -self.decision_function(X)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) > self.threshold_, -1, 1)

    def anomaly_maps(self, X) -> np.ndarray:
        """Pixel-level maps, ``(N, S, S)``."""
        check_is_fitted(self, "detector_")
        images = check_images(X, self.detector_.config.backbone.input_size)
        return np.stack([r.pixel_map for r in self.detector_.score_images(images)])

    def predict_class(self, X) -> np.ndarray:
        """Class whose prototype coding is nearest to each image."""
        check_is_fitted(self, "detector_")
        if self.pool_ is None:
            raise ValueError("class retrieval needs the prototype pool; this variant trains without one")
        images = check_images(X, self.detector_.config.backbone.input_size)
        codings = compute_global_coding(extract_features(self.detector_.backbone, images))
        return np.array([self.pool_.classes[i] for i in retrieve_indices(codings, self.pool_).tolist()])
