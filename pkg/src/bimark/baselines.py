"""Reference baselines: logit-bias green-listing, with and without messages.

Both baselines share the detector's voting/z machinery. Unlike the bit-flip
scheme they re-partition the vocabulary per window and bias logits
additively, which is what makes them biased: averaging the transform over
green-list draws does not return the original distribution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detect import VotingMatrix, extract_message, green_count, p_value, z_score
from .embed import Message
from .errors import DomainError
from .prf import (
    ContextWindow,
    CounterRng,
    SeedDomain,
    WatermarkKey,
    derive_seed,
    prf_position,
)
from .reweight import ProbabilityDistribution


@dataclass(frozen=True)
class SoftRedListParams:
    """Green proportion and additive logit bias for the zero-bit baseline."""

    gamma: float = 0.5
    delta_logit: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise DomainError("gamma must lie in (0, 1)")
        if self.delta_logit < 0.0:
            raise DomainError("delta_logit must be nonnegative")


@dataclass(frozen=True)
class MPACParams:
    """Position-allocation baseline; bipartition only (gamma fixed at 0.5)."""

    ell: int
    delta_logit: float = 1.0
    h: int = 2

    def __post_init__(self) -> None:
        if self.ell < 1:
            raise DomainError("ell must be >= 1")
        if self.delta_logit < 0.0:
            raise DomainError("delta_logit must be nonnegative")
        if self.h < 1:
            raise DomainError("h must be >= 1")

    @property
    def gamma(self) -> float:
        return 0.5


def srl_reweight(
    dist: ProbabilityDistribution,
    greenlist: Sequence[int],
    delta_logit: float,
) -> ProbabilityDistribution:
    """Add delta to green logits and renormalize.

    Equivalent to softmax(log p + delta * green): green entries are scaled by
    exp(delta) before renormalizing. Zero probabilities stay exactly zero,
    which is the same outcome the conventional clamp-at-1e-300 log-space
    route produces, without manufacturing infinities.
    """
    if delta_logit < 0.0:
        raise DomainError("delta_logit must be nonnegative")
    scale = np.ones(dist.vocab_size)
    idx = np.asarray(list(greenlist), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= dist.vocab_size:
            raise DomainError("greenlist token outside vocabulary")
        scale[idx] = np.exp(delta_logit)
    weights = dist.probs * scale
    return ProbabilityDistribution(weights / weights.sum())


def srl_greenlist(
    key: WatermarkKey,
    window: ContextWindow,
    gamma: float,
    vocab_size: int,
) -> np.ndarray:
    """Per-window green list: seeded shuffle, first floor(gamma*|V|) ids."""
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma must lie in (0, 1)")
    seed = derive_seed(key, SeedDomain.GREENLIST, window.payload())
    perm = list(range(vocab_size))
    CounterRng(seed).shuffle(perm)
    return np.asarray(perm[: int(gamma * vocab_size)], dtype=np.int64)


def srl_step(
    dist: ProbabilityDistribution,
    key: WatermarkKey,
    window: ContextWindow,
    params: SoftRedListParams,
) -> ProbabilityDistribution:
    green = srl_greenlist(key, window, params.gamma, dist.vocab_size)
    return srl_reweight(dist, green, params.delta_logit)


def _window_bipartition(
    key: WatermarkKey, window: ContextWindow, vocab_size: int
) -> np.ndarray:
    """Balanced per-window membership vector for the position-allocation baseline."""
    if vocab_size % 2 != 0:
        raise DomainError("per-window bipartition needs an even vocabulary")
    seed = derive_seed(key, SeedDomain.GREENLIST, window.payload())
    perm = list(range(vocab_size))
    CounterRng(seed).shuffle(perm)
    membership = np.zeros(vocab_size, dtype=np.uint8)
    membership[perm[vocab_size // 2:]] = 1
    return membership


def mpac_step(
    dist: ProbabilityDistribution,
    key: WatermarkKey,
    window: ContextWindow,
    message: Message,
    params: MPACParams,
) -> ProbabilityDistribution:
    """Boost the half selected by the current message bit."""
    if message.ell != params.ell:
        raise DomainError(
            f"message has {message.ell} bits, params expect {params.ell}"
        )
    membership = _window_bipartition(key, window, dist.vocab_size)
    position = prf_position(key, window, params.ell)
    bit = message.bits[position - 1]
    greenlist = np.nonzero(membership == bit)[0]
    return srl_reweight(dist, greenlist, params.delta_logit)


def mpac_extract(
    tokens: Sequence[int],
    key: WatermarkKey,
    params: MPACParams,
    vocab_size: int,
) -> tuple[Message, float, float, VotingMatrix]:
    """Single-vote-per-token extraction through the shared voting machinery.

    Every token votes; the per-window re-partitioning baselines have no
    repeated-context skip rule.
    """
    counts = np.zeros((params.ell, 2), dtype=np.int64)
    seq = [int(t) for t in tokens]
    sentinel = vocab_size
    for t, token in enumerate(seq):
        if not 0 <= token < vocab_size:
            raise DomainError(f"token {token} outside vocabulary of {vocab_size}")
        window = ContextWindow.at(seq, t, params.h, sentinel)
        membership = _window_bipartition(key, window, vocab_size)
        position = prf_position(key, window, params.ell)
        counts[position - 1, int(membership[token])] += 1
    matrix = VotingMatrix(counts)
    extracted, _ = extract_message(matrix)
    green, total = green_count(matrix)
    if total == 0:
        return extracted, 0.0, 1.0, matrix
    z = z_score(green, total)
    return extracted, z, p_value(z), matrix


def srl_detect(
    tokens: Sequence[int],
    key: WatermarkKey,
    params: SoftRedListParams,
    vocab_size: int,
    h: int = 2,
) -> tuple[float, float, int, int]:
    """Zero-bit z-test: count tokens on their window's green list."""
    seq = [int(t) for t in tokens]
    green = 0
    for t, token in enumerate(seq):
        if not 0 <= token < vocab_size:
            raise DomainError(f"token {token} outside vocabulary of {vocab_size}")
        window = ContextWindow.at(seq, t, h, vocab_size)
        greenlist = srl_greenlist(key, window, params.gamma, vocab_size)
        if token in set(int(g) for g in greenlist):
            green += 1
    total = len(seq)
    z = z_score(green, total, gamma=params.gamma)
    return z, p_value(z), green, total


def _sampled_loop(lm, prompt, step, max_new_tokens: int, sampler_seed: int):
    from .embed import sample_token

    rng = np.random.default_rng(sampler_seed)
    sequence = [int(t) for t in prompt]
    for _ in range(max_new_tokens):
        dist = lm.next_distribution(sequence)
        window = ContextWindow.at(sequence, len(sequence), step.h, dist.vocab_size)
        reweighted = step(dist, window)
        sequence.append(sample_token(reweighted, float(rng.random())))
    return sequence[len(prompt):]


class _SrlStep:
    def __init__(self, key, params, h):
        self.key, self.params, self.h = key, params, h

    def __call__(self, dist, window):
        return srl_step(dist, self.key, window, self.params)


class _MpacStep:
    def __init__(self, key, params, message):
        self.key, self.params, self.message = key, params, message
        self.h = params.h

    def __call__(self, dist, window):
        return mpac_step(dist, self.key, window, self.message, self.params)


def srl_generate(
    lm, prompt, key: WatermarkKey, params: SoftRedListParams,
    max_new_tokens: int, sampler_seed: int, h: int = 2,
) -> list[int]:
    return _sampled_loop(lm, prompt, _SrlStep(key, params, h), max_new_tokens, sampler_seed)


def mpac_generate(
    lm, prompt, message: Message, key: WatermarkKey, params: MPACParams,
    max_new_tokens: int, sampler_seed: int,
) -> list[int]:
    return _sampled_loop(lm, prompt, _MpacStep(key, params, message), max_new_tokens, sampler_seed)
