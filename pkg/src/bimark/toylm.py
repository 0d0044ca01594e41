"""Synthetic language models with tunable entropy, plus distribution traces.

The Markov-order-k model draws a symmetric Dirichlet(alpha) conditional for
every distinct context, deterministically: the context seeds the shared
keyed-hash machinery, uniforms come from the counter stream, and gamma
variates are produced by inverse CDF. That makes every model reproducible
from (seed, context) alone, on any implementation of the same primitives.

Trace files replay externally produced distributions step by step:

    vocab_size=N
    p0 p1 ... p(N-1)      # one distribution per line, whitespace-separated
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaincinv

from .errors import DimensionError, DomainError, ParseError
from .prf import SeedDomain, WatermarkKey, derive_seed, uniform_block, _encode_u32
from .reweight import ProbabilityDistribution

TRACE_ROW_TOLERANCE = 1e-6


@dataclass
class SyntheticLM:
    """Order-k Markov model with Dirichlet(alpha) conditionals.

    Small alpha concentrates each conditional on a few tokens (low entropy);
    large alpha approaches uniform. Conditionals are cached per context for
    the lifetime of the instance.
    """

    vocab_size: int
    order: int = 1
    alpha: float = 1.0
    seed: int = 0
    _key: WatermarkKey = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise DomainError("vocab_size must be >= 2")
        if self.order < 0:
            raise DomainError("order must be >= 0")
        if self.alpha <= 0.0:
            raise DomainError("alpha must be positive")
        self._key = WatermarkKey.from_int(int(self.seed))

    @property
    def sentinel(self) -> int:
        return self.vocab_size

    def next_distribution(self, prefix: Sequence[int]) -> ProbabilityDistribution:
        context = tuple(int(t) for t in prefix[max(0, len(prefix) - self.order):])
        context = (self.sentinel,) * (self.order - len(context)) + context
        cached = self._cache.get(context)
        if cached is not None:
            return cached
        seed = derive_seed(self._key, SeedDomain.TOYLM, _encode_u32(context))
        u = uniform_block(seed, self.vocab_size)
        if self.alpha == 1.0:
            # Gamma(1) is exponential; identical to gammaincinv(1, u).
            weights = -np.log1p(-u)
        else:
            weights = gammaincinv(self.alpha, u)
        total = weights.sum()
        if not np.isfinite(total) or total <= 0.0:
            weights = np.ones(self.vocab_size)
            total = float(self.vocab_size)
        dist = ProbabilityDistribution(weights / total)
        self._cache[context] = dist
        return dist


def entropy(dist: ProbabilityDistribution) -> float:
    """Shannon entropy in bits, with 0*log(0) = 0."""
    p = dist.probs[dist.probs > 0.0]
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True)
class DistributionTrace:
    """An ordered sequence of stored distributions, replayed by step index."""

    steps: tuple[ProbabilityDistribution, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise DomainError("a trace needs at least one distribution")
        sizes = {d.vocab_size for d in self.steps}
        if len(sizes) != 1:
            raise DimensionError(f"trace rows disagree on vocab_size: {sorted(sizes)}")

    @property
    def vocab_size(self) -> int:
        return self.steps[0].vocab_size

    def replay(self, step: int) -> ProbabilityDistribution:
        if not 0 <= step < len(self.steps):
            raise DomainError(
                f"step {step} outside trace of length {len(self.steps)}"
            )
        return self.steps[step]

    def __len__(self) -> int:
        return len(self.steps)


class TraceLM:
    """Adapts a trace to the distribution-provider interface.

    The replay index is the number of tokens generated so far, i.e. the
    prefix length minus the prompt length, so the mapping is a pure function
    of the prefix.
    """

    def __init__(self, trace: DistributionTrace, prompt_length: int):
        self.trace = trace
        self.prompt_length = int(prompt_length)

    def next_distribution(self, prefix: Sequence[int]) -> ProbabilityDistribution:
        return self.trace.replay(len(prefix) - self.prompt_length)


def save_trace(trace: DistributionTrace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"vocab_size={trace.vocab_size}\n")
        for dist in trace.steps:
            fh.write(" ".join(repr(float(p)) for p in dist.probs) + "\n")


def load_trace(path) -> DistributionTrace:
    """Parse a trace file; malformed rows report their line number."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("vocab_size="):
            raise ParseError(f"missing vocab_size header, got {header!r}")
        try:
            vocab_size = int(header.split("=", 1)[1])
        except ValueError as exc:
            raise ParseError(f"bad vocab_size header: {header!r}") from exc
        if vocab_size < 1:
            raise ParseError(f"vocab_size must be positive, got {vocab_size}")
        steps = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != vocab_size:
                raise ParseError(
                    f"row {lineno}: expected {vocab_size} entries, got {len(fields)}"
                )
            try:
                values = np.array([float(x) for x in fields])
            except ValueError as exc:
                raise ParseError(f"row {lineno}: {exc}") from exc
            if np.any(values < 0.0):
                raise ParseError(f"row {lineno}: negative probability")
            total = float(values.sum())
            if abs(total - 1.0) > TRACE_ROW_TOLERANCE:
                raise ParseError(
                    f"row {lineno}: probabilities sum to {total!r}, expected 1 "
                    f"within {TRACE_ROW_TOLERANCE}"
                )
            steps.append(ProbabilityDistribution(values / total))
        if not steps:
            raise ParseError("trace file has no distribution rows")
    return DistributionTrace(tuple(steps))
