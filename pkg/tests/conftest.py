from __future__ import annotations

import pytest
import torch

from clawsat import corpus
from clawsat.model import ModelConfig, init_model

torch.set_num_threads(1)

TINY = dict(d_embed=12, d_hidden=16, d_proj=10, d_dec=16)


@pytest.fixture(scope="session")
def toy_programs():
    return corpus.generate_toy_corpus(60, seed=11)


@pytest.fixture(scope="session")
def toy_vocab(toy_programs):
    return corpus.build_vocabulary(toy_programs, max_size=2000)


@pytest.fixture(scope="session")
def tiny_model(toy_vocab):
    return init_model(ModelConfig(vocab_size=len(toy_vocab), **TINY), seed=5)


@pytest.fixture()
def fig_program():
    # The running example: a summation loop with a renameable local `sum`,
    # a renameable parameter, and statement boundaries for inserts.
    src = (
        "def calc ( lst ) :\n"
        "    sum = 0\n"
        "    for i in lst :\n"
        "        sum += i\n"
        "    return sum"
    )
    return corpus.Program(
        id="fig-sum",
        tokens=corpus.tokenize(src),
        source=src,
        summary="add up every value in the list".split(),
    )
