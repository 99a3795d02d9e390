"""MVTec-style dataset layout.

    root/<class>/train/good/*.png
    root/<class>/test/<defect_type>/*.png          (defect_type "good" = normal)
    root/<class>/ground_truth/<defect_type>/<stem>_mask.png
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: Path
    class_id: str
    defect_type: str = "good"
    mask_path: Path | None = None

    @property
    def label(self) -> int:
        return int(self.defect_type != "good")


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if folder.is_dir() else []


def list_classes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if (p / "train").is_dir() or (p / "test").is_dir())
    if not classes:
        raise DatasetError(f"no class directories under {root}")
    return classes


def train_samples(root, classes: list[str] | None = None) -> list[Sample]:
    root = Path(root)
    out = []
    for c in classes or list_classes(root):
        imgs = _images(root / c / "train" / "good")
        if not imgs:
            raise DatasetError(f"class {c!r} has no images in {root / c / 'train' / 'good'}")
        out.extend(Sample(p, c) for p in imgs)
    return out


def test_samples(root, classes: list[str] | None = None) -> list[Sample]:
    root = Path(root)
    out = []
    for c in classes or list_classes(root):
        test_dir = root / c / "test"
        if not test_dir.is_dir():
            continue
        for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            for p in _images(defect_dir):
                mask = None
                if defect_dir.name != "good":
                    mask = root / c / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
                    if not mask.is_file():
                        raise DatasetError(f"missing ground-truth mask for anomalous image {p}: {mask}")
                out.append(Sample(p, c, defect_dir.name, mask))
    if not out:
        raise DatasetError(f"no test images under {root}")
    return out


def load_mask(sample: Sample, size: int) -> np.ndarray:
    """Binary ``(size, size)`` mask; normal images get all zeros.  8-bit masks split at 127."""
    if sample.mask_path is None:
        return np.zeros((size, size), dtype=bool)
    mask = Image.open(sample.mask_path).convert("L")
    if mask.size != (size, size):
        mask = mask.resize((size, size), Image.NEAREST)
    return np.asarray(mask) > 127
