"""Watermarked generation: position selection, XOR coding, reweighted sampling.

The generation loop is model-agnostic: anything exposing
``next_distribution(prefix) -> ProbabilityDistribution`` can be watermarked.
The transform is applied to the final sampling distribution (after whatever
temperature or truncation the provider already did), so the unbiasedness
guarantee is about the process actually sampled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ContractViolationError, DimensionError, DomainError
from .prf import (
    ContextWindow,
    SeenContextLog,
    WatermarkKey,
    derive_partitions,
    prf_mask,
    prf_position,
)
from .reweight import PartitionStack, ProbabilityDistribution, multilayer_reweight


@dataclass(frozen=True)
class Message:
    """An ell-bit payload; ell = 1 with bit 1 is the zero-bit convention."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise DomainError("message must have at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise DomainError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def ell(self) -> int:
        return len(self.bits)

    @classmethod
    def from_bitstring(cls, text: str) -> "Message":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise DomainError(f"not a bit string: {text!r}")
        return cls(tuple(int(c) for c in text))

    @classmethod
    def zero_bit(cls) -> "Message":
        return cls((1,))

    def to_bitstring(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass(frozen=True)
class EmbedParams:
    """Shared embedding/detection parameters.

    Defaults follow the reference operating point: 10 layers, base scaling
    factor 1.0, 2-token context window.
    """

    vocab_size: int
    ell: int = 1
    d: int = 10
    delta_base: float = 1.0
    h: int = 2
    max_new_tokens: int = 200

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise DomainError("vocab_size must be >= 2")
        if self.ell < 1:
            raise DomainError("ell must be >= 1")
        if self.d < 1:
            raise DomainError("d must be >= 1")
        if not 0.0 <= self.delta_base <= 1.0:
            raise DomainError("delta_base must lie in [0, 1]")
        if self.h < 1:
            raise DomainError("h must be >= 1")
        if self.max_new_tokens < 0:
            raise DomainError("max_new_tokens must be >= 0")

    @property
    def sentinel(self) -> int:
        # Window padding id; sits just outside the real vocabulary.
        return self.vocab_size


class LanguageModel(Protocol):
    """Behavioral contract for next-token distribution providers."""

    def next_distribution(self, prefix: Sequence[int]) -> ProbabilityDistribution:
        ...


@dataclass(frozen=True)
class StepRecord:
    """Per-token trace: what the watermark did at one generation step."""

    window: tuple[int, ...]
    seeded: bool
    position: Optional[int]
    mask: Optional[tuple[int, ...]]
    flips: Optional[tuple[int, ...]]
    token: int


@dataclass
class GenerationTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def coin_flips(message_bit: int, mask: Sequence[int]) -> tuple[int, ...]:
    """XOR the selected message bit with the one-time-pad mask, per layer.

    The XOR of a fixed bit with a Bernoulli(0.5) mask bit is Bernoulli(0.5)
    whatever the message says, which is exactly what keeps the reweighting
    coin flips fair; XOR again with the mask and the message bit comes back.
    """
    if message_bit not in (0, 1):
        raise DomainError(f"message_bit must be 0 or 1, got {message_bit!r}")
    flips = []
    for b in mask:
        if b not in (0, 1):
            raise DomainError(f"mask bits must be 0 or 1, got {b!r}")
        flips.append(message_bit ^ b)
    return tuple(flips)


def watermark_step(
    dist: ProbabilityDistribution,
    key: WatermarkKey,
    window: ContextWindow,
    message: Message,
    params: EmbedParams,
    stack: PartitionStack,
    log: SeenContextLog,
) -> tuple[ProbabilityDistribution, StepRecord]:
    """One step of the embedding algorithm, sans sampling.

    A window already in the log means its pseudorandom choices were consumed
    by an earlier token; reusing them would correlate flips, so the step
    returns the input distribution untouched (object identity preserved).
    """
    if message.ell != params.ell:
        raise DimensionError(
            f"message has {message.ell} bits, params expect {params.ell}"
        )
    if stack.d != params.d:
        raise DimensionError(f"stack has {stack.d} layers, params expect {params.d}")
    work = (
        dist if dist.vocab_size == stack.vocab_size
        else dist.padded(stack.vocab_size)
    )
    if log.check_and_record(window):
        return dist, StepRecord(
            window=window.tokens, seeded=False,
            position=None, mask=None, flips=None, token=-1,
        )
    position = prf_position(key, window, params.ell)
    mask = prf_mask(key, window, params.d)
    flips = coin_flips(message.bits[position - 1], mask)
    out = multilayer_reweight(work, stack, flips, params.delta_base)
    record = StepRecord(
        window=window.tokens, seeded=True,
        position=position, mask=mask, flips=flips, token=-1,
    )
    return out, record


def sample_token(dist: ProbabilityDistribution, u: float) -> int:
    """Inverse-CDF draw; consumes exactly one uniform.

    Zero-probability tokens occupy zero-width CDF intervals and can never be
    selected, so dummy padding tokens stay out of the stream.
    """
    cdf = np.cumsum(dist.probs)
    token = int(np.searchsorted(cdf, u, side="right"))
    return min(token, dist.vocab_size - 1)


def generate(
    lm: LanguageModel,
    prompt: Sequence[int],
    message: Message,
    key: WatermarkKey,
    params: EmbedParams,
    sampler_seed: int,
    stack: Optional[PartitionStack] = None,
    log: Optional[SeenContextLog] = None,
) -> tuple[list[int], GenerationTrace]:
    """Autoregressive watermarked generation.

    The sampler draws one uniform per emitted token from its own seeded
    generator, independent of the watermark PRFs, so runs are reproducible
    without coupling sampling noise to the key.
    """
    if stack is None:
        stack = derive_partitions(key, params.vocab_size, params.d)
    if log is None:
        log = SeenContextLog()
    rng = np.random.default_rng(sampler_seed)
    sequence = [int(t) for t in prompt]
    trace = GenerationTrace()
    for _ in range(params.max_new_tokens):
        dist = lm.next_distribution(sequence)
        if not isinstance(dist, ProbabilityDistribution):
            raise ContractViolationError(
                "language model returned a non-distribution"
            )
        if dist.vocab_size != params.vocab_size:
            raise ContractViolationError(
                f"language model returned {dist.vocab_size} probabilities, "
                f"expected {params.vocab_size}"
            )
        window = ContextWindow.at(sequence, len(sequence), params.h, params.sentinel)
        reweighted, record = watermark_step(
            dist, key, window, message, params, stack, log
        )
        token = sample_token(reweighted, float(rng.random()))
        sequence.append(token)
        trace.records.append(
            StepRecord(
                window=record.window, seeded=record.seeded,
                position=record.position, mask=record.mask,
                flips=record.flips, token=token,
            )
        )
    return sequence[len(prompt):], trace
