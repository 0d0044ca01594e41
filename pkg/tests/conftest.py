import numpy as np
import pytest

from bimark import ProbabilityDistribution, VocabularyBipartition


def random_distribution(rng: np.random.Generator, n: int) -> ProbabilityDistribution:
    weights = rng.random(n) + 1e-9
    return ProbabilityDistribution(weights / weights.sum())


def random_partition(rng: np.random.Generator, n: int) -> VocabularyBipartition:
    membership = np.zeros(n, dtype=np.uint8)
    membership[rng.permutation(n)[: n // 2]] = 1
    return VocabularyBipartition(membership)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
