import json

import numpy as np
import pytest
import torch
from PIL import Image

from pnpt.backbone import BackboneSpec, extract_features, load_backbone, preprocess
from pnpt.datagen import SynthSpec, TextureRecipe, default_recipes, generate_dataset, render_pair
from pnpt.pool import build_pool, compute_global_coding, retrieve_indices

SMALL = dict(image_size=64, n_train=3, n_test_normal=2, n_test_anomalous=6)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_byte_identical_regeneration(tmp_path):
    spec = SynthSpec(**SMALL)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_seed_changes_output(tmp_path):
    generate_dataset(SynthSpec(**SMALL, seed=0), tmp_path / "a")
    generate_dataset(SynthSpec(**SMALL, seed=1), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_train_counts(tmp_path):
    spec = SynthSpec(num_classes=3, image_size=64, n_train=20, n_test_normal=1, n_test_anomalous=3)
    generate_dataset(spec, tmp_path)
    assert len(list(tmp_path.glob("*/train/good/*.png"))) == 60
    for name in spec.class_names:
        assert len(list((tmp_path / name / "train" / "good").glob("*.png"))) == 20


def test_layout_and_manifest(tmp_path):
    spec = SynthSpec(**SMALL)
    manifest = generate_dataset(spec, tmp_path)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    assert on_disk["spec"]["class_names"] == spec.class_names
    for entry in manifest["files"]:
        assert (tmp_path / entry["path"]).is_file()
        if entry["defect"] == "good":
            assert entry["mask"] is None
        else:
            assert entry["mask"] == entry["path"].replace("/test/", "/ground_truth/").replace(".png", "_mask.png")
    defects = {e["defect"] for e in manifest["files"] if e["split"] == "test"}
    assert defects == {"good", "swap", "blotch", "missing"}


def test_defects_confined_to_mask(tmp_path):
    spec = SynthSpec(num_classes=4, image_size=128, n_train=1, n_test_normal=1, n_test_anomalous=9)
    manifest = generate_dataset(spec, tmp_path)
    for entry in manifest["files"]:
        if entry["mask"] is None:
            continue
        clean, defect, mask = render_pair(spec, entry["path"])
        on_disk = np.array(Image.open(tmp_path / entry["path"]))
        stored_mask = np.array(Image.open(tmp_path / entry["mask"])) > 127
        assert np.array_equal(on_disk, defect)
        assert np.array_equal(stored_mask, mask)
        assert mask.any(), entry["path"]
        changed = (clean != defect).any(-1)
        assert not changed[~mask].any(), entry["path"]
        assert changed[mask].mean() > 0.9, entry["path"]


def test_refuses_non_empty_dir(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        generate_dataset(SynthSpec(**SMALL), tmp_path)
    with pytest.raises(FileExistsError, match="manifest"):
        generate_dataset(SynthSpec(**SMALL), tmp_path, force=True)
    assert (tmp_path / "keep.txt").exists()


def test_force_regenerates(tmp_path):
    generate_dataset(SynthSpec(**SMALL, seed=0), tmp_path)
    generate_dataset(SynthSpec(**SMALL, seed=3), tmp_path, force=True)
    assert json.loads((tmp_path / "manifest.json").read_text())["spec"]["seed"] == 3


def test_recipes_pairwise_distinct():
    recipes = default_recipes(8)
    keys = {(r.kind, r.period, r.angle) for r in recipes}
    assert len(keys) == 8
    with pytest.raises(ValueError):
        SynthSpec(num_classes=2, recipes=[TextureRecipe("dots", 10)])
    with pytest.raises(ValueError):
        SynthSpec(defects=("scratch",))


def test_class_separability(tmp_path):
    spec = SynthSpec(num_classes=4, n_train=4, n_test_normal=10, n_test_anomalous=0)
    generate_dataset(spec, tmp_path)
    bb = load_backbone(BackboneSpec.builtin("tiny", 256))
    train = [(p.parts[-4], preprocess(p, 256)) for p in sorted(tmp_path.glob("*/train/good/*.png"))]
    pool = build_pool(train, bb)
    tests = sorted(tmp_path.glob("*/test/good/*.png"))
    images = torch.stack([preprocess(p, 256) for p in tests])
    idx = retrieve_indices(compute_global_coding(extract_features(bb, images)), pool)
    got = [pool.classes[i] for i in idx.tolist()]
    truth = [p.parts[-4] for p in tests]
    assert np.mean([a == b for a, b in zip(got, truth)]) >= 0.99
