import numpy as np
import pytest
import torch

from pnpt.data import DatasetError
from pnpt.data import test_samples as split_test_samples
from pnpt.evaluation import (
    UndefinedAUROCError,
    auroc,
    evaluate_dataset,
    load_test_features,
    prompt_swap_diagnostic,
)
from pnpt.inference import Detector


def pairwise_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auroc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0


def test_auroc_seed_29():
    rng = np.random.default_rng(29)
    scores = rng.normal(size=20)
    labels = rng.integers(0, 2, size=20)
    assert auroc(scores, labels) == pairwise_auroc(scores, labels)


def test_auroc_matches_pairwise_200_instances():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, 5, size=n).astype(float) if trial % 2 else rng.normal(size=n)
        assert auroc(scores, labels) == pairwise_auroc(scores, labels)


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)
    base = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == base
    assert auroc(3 * scores + 7, labels) == base


def test_auroc_errors():
    with pytest.raises(UndefinedAUROCError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2, 0.3], [0, 1])


def test_zero_map_pixel_auroc_is_half(small_corpus):
    report = evaluate_dataset(None, small_corpus, input_size=64, map_override=lambda s, m: np.zeros(m.shape))
    assert all(v == 0.5 for v in report.class_pixel_auroc.values())


def test_ground_truth_maps_score_perfectly(small_corpus, tmp_path):
    report = evaluate_dataset(None, small_corpus, input_size=64, out_dir=tmp_path,
                              map_override=lambda s, m: m.astype(float))
    assert report.mean_pixel_auroc == 1.0
    assert report.mean_image_auroc == 1.0
    lines = (tmp_path / "classes.csv").read_text().splitlines()
    assert lines[0] == "class_id,image_auroc,pixel_auroc"
    assert lines[-1] == "mean,1.000000,1.000000"
    header = (tmp_path / "images.csv").read_text().splitlines()[0]
    assert header == "path,class_id,defect_type,label,retrieved_class,image_score"


def test_empty_test_dir(tmp_path):
    (tmp_path / "a" / "train" / "good").mkdir(parents=True)
    (tmp_path / "a" / "test").mkdir()
    with pytest.raises(DatasetError):
        evaluate_dataset(None, tmp_path, input_size=64, map_override=lambda s, m: m)


def test_missing_mask(small_corpus, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(small_corpus, root)
    victim = next((root).glob("*/ground_truth/*/*_mask.png"))
    victim.unlink()
    with pytest.raises(DatasetError, match="mask"):
        split_test_samples(root)


def test_reports_are_deterministic(small_corpus, small_checkpoint, small_pool, tmp_path):
    det = Detector(small_checkpoint, small_pool)
    a = evaluate_dataset(det, small_corpus, out_dir=tmp_path / "a", save_maps=True)
    b = evaluate_dataset(det, small_corpus, out_dir=tmp_path / "b", save_maps=True)
    for name in ("images.csv", "classes.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.summary()["num_images"] == len(split_test_samples(small_corpus))
    maps = sorted((tmp_path / "a" / "maps").rglob("*.npy"))
    assert len(maps) == len(a.records)
    assert np.load(maps[0]).shape == (64, 64)


def test_prompt_swap_same_class_has_no_drift(small_corpus, small_checkpoint, small_pool):
    det = Detector(small_checkpoint, small_pool)
    samples, feats = load_test_features(det, small_corpus, normal_only=True)
    cls = samples[0].class_id
    idx = [i for i, s in enumerate(samples) if s.class_id == cls]
    report = prompt_swap_diagnostic(det, feats.select(torch.tensor(idx)), [cls] * len(idx), cls)
    assert np.abs(report.self_drift).max() < 1e-9
    assert np.abs(report.prior_change).max() < 1e-9
    assert np.array_equal(report.d_correct, report.d_forced)


def test_prompt_swap_unknown_class(small_corpus, small_checkpoint, small_pool):
    det = Detector(small_checkpoint, small_pool)
    samples, feats = load_test_features(det, small_corpus, normal_only=True)
    with pytest.raises(KeyError):
        prompt_swap_diagnostic(det, feats, [s.class_id for s in samples], "no_such_class")
