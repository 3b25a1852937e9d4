import numpy as np
import pytest
import torch

from vidlkit.data import build_vocabulary, gen_spatial_corpus, gen_temporal_corpus, make_batch, merge
from vidlkit.pipeline import tiny_config

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_corpus():
    return merge(gen_spatial_corpus(4, seed=0, frames=2), gen_temporal_corpus(4, seed=0))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocabulary(small_corpus)


@pytest.fixture
def tiny_cfg(small_vocab):
    return tiny_config(vocab_size=len(small_vocab), objectives=("VTC", "VTM", "MLM"))


@pytest.fixture
def small_batch(small_corpus, small_vocab):
    return make_batch(list(small_corpus)[:4], small_vocab, frames=2)
