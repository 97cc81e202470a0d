import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ratgan import data as data_mod


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small deterministic shapes corpus shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    spec = data_mod.SyntheticCorpusSpec(count=64, image_size=32)
    data_mod.generate_synthetic_corpus(spec, seed=7, root=root)
    return root


@pytest.fixture(scope="session")
def tiny_records(tiny_corpus):
    return data_mod.load_corpus(tiny_corpus, split=None)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
