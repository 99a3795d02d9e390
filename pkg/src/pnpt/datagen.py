"""Deterministic synthetic multi-class texture corpus in the MVTec directory layout."""
from __future__ import annotations

import colorsys
import json
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

RECIPES = ("checkerboard", "stripes", "dots", "gradient")
DEFECTS = ("swap", "blotch", "missing")


@dataclass
class TextureRecipe:
    kind: str
    period: float
    angle: float = 0.0  # degrees
    radius: float = 0.0
    palette: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def _palette(hue: float, light_fg: bool) -> tuple[tuple[float, ...], tuple[float, ...]]:
    dark = colorsys.hsv_to_rgb(hue % 1.0, 0.75, 0.35)
    light = colorsys.hsv_to_rgb((hue + 0.08) % 1.0, 0.35, 0.9)
    return (dark, light) if light_fg else (light, dark)


def default_recipes(num_classes: int, image_size: int = 256) -> list[TextureRecipe]:
    """Pairwise-distinct recipes: kind cycles, period/orientation/palette shift per class.

    Lengths are tuned for 256 px images and scale with ``image_size``.
    """
    k = image_size / 256
    out = []
    for i in range(num_classes):
        kind = RECIPES[i % len(RECIPES)]
        cycle = i // len(RECIPES)
        hue = (i * 0.618034) % 1.0
        if kind == "checkerboard":
            r = TextureRecipe(kind, period=k * (32 + 6 * cycle), angle=0.0 + 10 * cycle)
        elif kind == "stripes":
            r = TextureRecipe(kind, period=k * (24 + 5 * cycle), angle=30.0 + 25 * cycle)
        elif kind == "dots":
            r = TextureRecipe(kind, period=k * (28 + 6 * cycle), radius=k * (7 + cycle), angle=15.0 * cycle)
        else:
            r = TextureRecipe(kind, period=k * (40 + 8 * cycle), angle=45.0 + 20 * cycle)
        r.palette = _palette(hue, light_fg=kind != "dots")
        out.append(r)
    return out


@dataclass
class SynthSpec:
    num_classes: int = 3
    image_size: int = 256
    n_train: int = 30
    n_test_normal: int = 10
    n_test_anomalous: int = 12
    defects: tuple[str, ...] = DEFECTS
    illumination_jitter: float = 0.05
    phase_jitter: float = 2.0  # pixels
    seed: int = 0
    recipes: list[TextureRecipe] = field(default_factory=list)

    def __post_init__(self):
        if not self.recipes:
            self.recipes = default_recipes(self.num_classes, self.image_size)
        if len(self.recipes) != self.num_classes:
            raise ValueError("need exactly one recipe per class")
        unknown = set(self.defects) - set(DEFECTS)
        if unknown:
            raise ValueError(f"unknown defect recipes {sorted(unknown)}")

    @property
    def class_names(self) -> list[str]:
        return [f"{r.kind}_{i}" for i, r in enumerate(self.recipes)]


def image_rng(seed: int, rel_path: str) -> np.random.Generator:
    """Independent stream per output file, so generation order does not matter."""
    return np.random.default_rng([seed, zlib.crc32(rel_path.encode())])


def render(recipe: TextureRecipe, size: int, phase: tuple[float, float], gain: float = 1.0):
    """Render a texture; returns ``(image HxWx3 in [0,1], foreground mask, background image)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(recipe.angle)
    u = np.cos(theta) * xx + np.sin(theta) * yy + phase[0]
    v = -np.sin(theta) * xx + np.cos(theta) * yy + phase[1]
    p = recipe.period
    fg_col = np.array(recipe.palette[0])
    bg_col = np.array(recipe.palette[1])
    background = np.broadcast_to(bg_col, (size, size, 3)).copy()

    if recipe.kind == "checkerboard":
        fg = ((np.floor(u / p) + np.floor(v / p)) % 2) == 0
    elif recipe.kind == "stripes":
        fg = (u % p) < (p / 2)
    elif recipe.kind == "dots":
        du = (u % p) - p / 2
        dv = (v % p) - p / 2
        fg = du ** 2 + dv ** 2 <= recipe.radius ** 2
    elif recipe.kind == "gradient":
        t = (xx + yy) / (2 * (size - 1))
        background = (1 - t)[..., None] * bg_col + t[..., None] * (1 - bg_col * 0.6)
        fg = ((u % p) < 3) | ((v % p) < 3)
    else:
        raise ValueError(f"unknown recipe kind {recipe.kind!r}")

    img = np.where(fg[..., None], fg_col, background)
    img = np.clip(img * gain, 0, 1)
    return img, fg, np.clip(background * gain, 0, 1)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def _random_phase(recipe: TextureRecipe, rng) -> tuple[float, float]:
    return (float(rng.uniform(0, recipe.period * 2)), float(rng.uniform(0, recipe.period * 2)))


def _jittered_phase(spec: SynthSpec, rng) -> tuple[float, float]:
    j = spec.phase_jitter
    return (float(rng.uniform(-j, j)), float(rng.uniform(-j, j)))


def _normal_image(spec: SynthSpec, cls: int, rng):
    recipe = spec.recipes[cls]
    gain = 1.0 + float(rng.uniform(-spec.illumination_jitter, spec.illumination_jitter))
    phase = _jittered_phase(spec, rng)
    img, fg, bg = render(recipe, spec.image_size, phase, gain)
    return img, fg, bg, gain


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def apply_defect(kind: str, spec: SynthSpec, cls: int, clean: np.ndarray, fg: np.ndarray, bg: np.ndarray,
                 gain: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(defective image, mask)``; pixels outside the mask are left untouched."""
    size = spec.image_size
    margin = size // 8
    if kind == "swap":
        others = [i for i in range(spec.num_classes) if i != cls] or [cls]
        foreign = spec.recipes[int(rng.choice(others))]
        if foreign is spec.recipes[cls]:
            foreign = TextureRecipe(foreign.kind, foreign.period * 0.5, foreign.angle + 45, foreign.radius * 0.5,
                                    foreign.palette[::-1])
        h, w = rng.integers(size // 10, size // 5, size=2)
        y0 = int(rng.integers(margin, size - margin - h))
        x0 = int(rng.integers(margin, size - margin - w))
        mask = np.zeros((size, size), bool)
        mask[y0:y0 + h, x0:x0 + w] = True
        patch, _, _ = render(foreign, size, _random_phase(foreign, rng), gain)
        defect = np.where(mask[..., None], patch, clean)
    elif kind == "blotch":
        cy, cx = rng.integers(margin, size - margin, size=2)
        ry, rx = rng.uniform(size / 24, size / 11, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = d2 <= 1.0
        strength = float(rng.uniform(0.45, 0.7)) * (1 if rng.random() < 0.5 else -1)
        weight = np.clip(1.0 - 0.5 * d2, 0, 1)[..., None]
        shifted = clean + strength * weight * (1.0 - clean if strength > 0 else clean)
        defect = np.where(mask[..., None], np.clip(shifted, 0, 1), clean)
    elif kind == "missing":
        recipe = spec.recipes[cls]
        inside = []
        if recipe.kind in ("dots", "checkerboard"):
            # drop one whole element (a dot or a foreground square) away from the border
            labels, _ = ndimage.label(fg)
            boxes = ndimage.find_objects(labels)
            inside = [i + 1 for i, b in enumerate(boxes)
                      if b[0].start >= margin and b[0].stop <= size - margin
                      and b[1].start >= margin and b[1].stop <= size - margin]
        if inside:
            mask = labels == int(rng.choice(inside))
        else:
            # cut a piece out of a stripe or grid line, centred on a foreground pixel
            ys, xs = np.nonzero(fg[margin:size - margin, margin:size - margin])
            pick = int(rng.integers(len(ys)))
            mask = _disk(size, ys[pick] + margin, xs[pick] + margin, size / 20) & fg
        defect = np.where(mask[..., None], bg, clean)
    else:
        raise ValueError(f"unknown defect {kind!r}")
    return defect, mask


def _check_out_root(out_root: Path, force: bool) -> None:
    if out_root.exists() and any(out_root.iterdir()):
        if not force:
            raise FileExistsError(f"{out_root} is not empty; pass force=True (--force) to regenerate")
        if not (out_root / "manifest.json").is_file():
            raise FileExistsError(f"refusing to clear {out_root}: it has no manifest.json from a previous run")
        shutil.rmtree(out_root)


def generate_dataset(spec: SynthSpec, out_root, force: bool = False) -> dict:
    out_root = Path(out_root)
    _check_out_root(out_root, force)
    files = []

    def write(rel: str, arr: np.ndarray) -> None:
        path = out_root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)

    for cls, name in enumerate(spec.class_names):
        for i in range(spec.n_train):
            rel = f"{name}/train/good/{i:03d}.png"
            img, *_ = _normal_image(spec, cls, image_rng(spec.seed, rel))
            write(rel, _to_uint8(img))
            files.append({"path": rel, "class": name, "split": "train", "defect": "good", "mask": None})
        for i in range(spec.n_test_normal):
            rel = f"{name}/test/good/{i:03d}.png"
            img, *_ = _normal_image(spec, cls, image_rng(spec.seed, rel))
            write(rel, _to_uint8(img))
            files.append({"path": rel, "class": name, "split": "test", "defect": "good", "mask": None})
        for i in range(spec.n_test_anomalous):
            kind = spec.defects[i % len(spec.defects)]
            rel = f"{name}/test/{kind}/{i:03d}.png"
            mask_rel = f"{name}/ground_truth/{kind}/{i:03d}_mask.png"
            rng = image_rng(spec.seed, rel)
            clean, fg, bg, gain = _normal_image(spec, cls, rng)
            defect, mask = apply_defect(kind, spec, cls, clean, fg, bg, gain, rng)
            write(rel, _to_uint8(defect))
            write(mask_rel, mask.astype(np.uint8) * 255)
            files.append({"path": rel, "class": name, "split": "test", "defect": kind, "mask": mask_rel})

    text = json.dumps({"format_version": 1, "spec": _spec_dict(spec), "files": files}, indent=2, sort_keys=True)
    (out_root / "manifest.json").write_text(text + "\n")
    return json.loads(text)


def render_pair(spec: SynthSpec, rel_path: str):
    """Regenerate ``(defect-free twin, defective image, mask)`` as uint8 for a test file path."""
    name, _, kind, _ = rel_path.split("/")
    cls = spec.class_names.index(name)
    rng = image_rng(spec.seed, rel_path)
    clean, fg, bg, gain = _normal_image(spec, cls, rng)
    if kind == "good":
        return _to_uint8(clean), _to_uint8(clean), np.zeros(clean.shape[:2], bool)
    defect, mask = apply_defect(kind, spec, cls, clean, fg, bg, gain, rng)
    return _to_uint8(clean), _to_uint8(defect), mask


def _spec_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["defects"] = list(spec.defects)
    d["class_names"] = spec.class_names
    return d
