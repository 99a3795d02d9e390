import pytest
import torch

from helpers import ACCEPTANCE_LINES
from pnpt.config import load_config
from pnpt.datagen import SynthSpec, generate_dataset
from pnpt.training import build_dataset_pool, train

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))

SMALL_OVERRIDES = [
    "backbone.input_size=64",
    "model.hidden_dim=24",
    "model.heads=4",
    "model.num_blocks=1",
    "model.num_semantic_tokens=4",
    "train.epochs=2",
    "train.batch_size=2",
    "train.learning_rate=1e-3",
]


def small_config(*extra):
    return load_config(None, SMALL_OVERRIDES + list(extra))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = SynthSpec(num_classes=2, image_size=64, n_train=4, n_test_normal=2, n_test_anomalous=3, seed=5)
    generate_dataset(spec, root, force=True)
    return root


@pytest.fixture(scope="session")
def small_pool(small_corpus):
    return build_dataset_pool(small_config(), small_corpus)


@pytest.fixture(scope="session")
def small_checkpoint(small_corpus, small_pool):
    return train(small_config(), small_corpus, small_pool)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
