import numpy as np
import pytest

from capalign.tokenizer import Vocabulary

from helpers import WORDS


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary.from_tokens(WORDS)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
