"""Pure distribution mathematics for bit-flip reweighting.

Everything here is probability-space and side-effect free: partition mass,
adaptive scaling factors, the single-layer bit-flip transform, and its
multilayer composition. No keys, no context windows — those live in
:mod:`bimark.prf` and :mod:`bimark.embed`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError

# Renormalize when accumulated float drift exceeds this; anything past
# HARD_DRIFT is a logic bug, not drift, and raises.
DRIFT_TOLERANCE = 1e-12
HARD_DRIFT = 1e-6

SUM_TOLERANCE = 1e-9


def _as_bit(value: int, name: str) -> int:
    if value not in (0, 1):
        raise DomainError(f"{name} must be 0 or 1, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ProbabilityDistribution:
    """A normalized next-token distribution over a fixed vocabulary.

    Entries are validated to lie in [0, 1] and sum to 1 within 1e-9. The
    backing array is made read-only so instances are safe to share across
    threads.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise DomainError("probs must be a non-empty 1-D array")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise DomainError("probability entries must lie in [0, 1]")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise DomainError(f"probabilities sum to {total!r}, expected 1")
        probs = probs.copy()
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)

    @classmethod
    def from_weights(cls, weights) -> "ProbabilityDistribution":
        """Normalize nonnegative weights into a distribution."""
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0.0 or np.any(w < 0.0):
            raise DomainError("weights must be nonnegative with positive sum")
        return cls(w / total)

    def padded(self, vocab_size: int) -> "ProbabilityDistribution":
        """Extend with zero-probability dummy tokens up to vocab_size."""
        if vocab_size < self.vocab_size:
            raise DimensionError("cannot pad to a smaller vocabulary")
        if vocab_size == self.vocab_size:
            return self
        out = np.zeros(vocab_size)
        out[: self.vocab_size] = self.probs
        return ProbabilityDistribution(out)


@dataclass(frozen=True)
class VocabularyBipartition:
    """A balanced two-way split of token ids.

    ``membership[token]`` is 0 for the V0 half and 1 for the V1 half. Both
    halves have exactly vocab_size/2 tokens, which is what makes the 0.5
    green proportion of the detector's z-test exact.
    """

    membership: np.ndarray

    def __post_init__(self) -> None:
        memb = np.asarray(self.membership, dtype=np.uint8)
        if memb.ndim != 1 or memb.size == 0:
            raise DomainError("membership must be a non-empty 1-D array")
        if memb.size % 2 != 0:
            raise DomainError("vocab_size must be even for a balanced split")
        if np.any(memb > 1):
            raise DomainError("membership bits must be 0 or 1")
        ones = int(memb.sum())
        if ones * 2 != memb.size:
            raise DomainError(
                f"unbalanced bipartition: |V1|={ones} of {memb.size}"
            )
        memb = memb.copy()
        memb.flags.writeable = False
        object.__setattr__(self, "membership", memb)

    @property
    def vocab_size(self) -> int:
        return int(self.membership.size)


@dataclass(frozen=True)
class PartitionStack:
    """One bipartition per reweighting layer, all over the same vocabulary."""

    layers: tuple[VocabularyBipartition, ...]
    membership_matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            object.__setattr__(self, "layers", layers)
            object.__setattr__(
                self, "membership_matrix", np.zeros((0, 0), dtype=np.uint8)
            )
            return
        sizes = {p.vocab_size for p in layers}
        if len(sizes) != 1:
            raise DimensionError(f"layers disagree on vocab_size: {sorted(sizes)}")
        matrix = np.stack([p.membership for p in layers])
        matrix.flags.writeable = False
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "membership_matrix", matrix)

    @property
    def d(self) -> int:
        return len(self.layers)

    @property
    def vocab_size(self) -> int:
        if not self.layers:
            raise DimensionError("empty stack has no vocab_size")
        return self.layers[0].vocab_size


@dataclass(frozen=True)
class ScalingFactors:
    """Per-step scaling factors derived from the V1 mass tau.

    delta1 caps the V1 boost so the boosted half never exceeds total mass 1;
    delta0 follows from the mass-balance identity delta0*(1-tau) = delta1*tau,
    so whatever one half gains the other loses exactly.
    """

    tau: float
    delta0: float
    delta1: float
    delta_base: float


def partition_mass(
    dist: ProbabilityDistribution, part: VocabularyBipartition
) -> float:
    """Total probability currently sitting on the V1 half."""
    if dist.vocab_size != part.vocab_size:
        raise DimensionError(
            f"distribution over {dist.vocab_size} tokens vs partition over "
            f"{part.vocab_size}"
        )
    return float(dist.probs @ part.membership)


def scaling_factors(tau: float, delta_base: float) -> ScalingFactors:
    """Derive (delta0, delta1) from the V1 mass and the base scaling factor.

    The V1 factor is the base value, capped at (1-tau)/tau when boosting
    would push the V1 mass past 1 (the boosted half then absorbs everything),
    and 0 when tau is 0 (nothing to boost, and a nonzero factor would break
    the two-flip symmetry). tau = 1 mirrors tau = 0: no mass exists outside
    V1 to trade, so both factors are 0 and the transform is the identity.

    The symmetric overflow on V0 cannot occur for delta_base in [0, 1]:
    delta1 <= 1 always holds, so the V0 mass after a boost is
    1 - tau*(1 - delta1) <= 1.
    """
    # Masses computed by summation carry drift of a few ulp; absorb it.
    if -SUM_TOLERANCE <= tau < 0.0:
        tau = 0.0
    elif 1.0 < tau <= 1.0 + SUM_TOLERANCE:
        tau = 1.0
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    if not 0.0 <= delta_base <= 1.0:
        raise DomainError(f"delta_base must lie in [0, 1], got {delta_base}")
    if tau == 0.0 or tau == 1.0:
        return ScalingFactors(tau=tau, delta0=0.0, delta1=0.0, delta_base=delta_base)
    if (1.0 + delta_base) * tau > 1.0:
        delta1 = (1.0 - tau) / tau
    else:
        delta1 = delta_base
    # delta0 <= 1 mathematically; min() only absorbs float round-off.
    delta0 = min(delta1 * tau / (1.0 - tau), 1.0)
    return ScalingFactors(tau=tau, delta0=delta0, delta1=delta1, delta_base=delta_base)


def _apply_factors(
    probs: np.ndarray, membership: np.ndarray, e: int, factors: ScalingFactors
) -> np.ndarray:
    if e == 1:
        up, down = 1.0 + factors.delta1, 1.0 - factors.delta0
    else:
        up, down = 1.0 - factors.delta1, 1.0 + factors.delta0
    v1 = membership.astype(bool)
    out = np.where(v1, probs * up, probs * down)
    return out


def bit_flip_reweight(
    dist: ProbabilityDistribution,
    part: VocabularyBipartition,
    e: int,
    delta_base: float,
) -> ProbabilityDistribution:
    """Apply one bit-flip reweighting layer.

    Heads (e=1) scales V1 up by (1+delta1) and V0 down by (1-delta0); tails
    does the reverse. Averaging the two outcomes of a fair flip returns the
    input exactly, for any valid factor pair — that identity is what makes
    the watermark unbiased.
    """
    e = _as_bit(e, "e")
    tau = partition_mass(dist, part)
    factors = scaling_factors(tau, delta_base)
    out = _apply_factors(dist.probs, part.membership, e, factors)
    total = float(out.sum())
    drift = abs(total - 1.0)
    if drift > HARD_DRIFT:
        raise DomainError(
            f"reweighted mass {total!r} is too far from 1; inputs corrupt"
        )
    if drift > DRIFT_TOLERANCE:
        out = out / total
    np.clip(out, 0.0, 1.0, out=out)
    return ProbabilityDistribution(out)


def multilayer_reweight(
    dist: ProbabilityDistribution,
    stack: PartitionStack,
    flips,
    delta_base: float,
) -> ProbabilityDistribution:
    """Compose bit-flip layers 1..d in order, one fair coin flip per layer."""
    flips = [_as_bit(e, "flip") for e in flips]
    if len(flips) != stack.d:
        raise DimensionError(
            f"{len(flips)} flips for a {stack.d}-layer stack"
        )
    out = dist
    for part, e in zip(stack.layers, flips):
        out = bit_flip_reweight(out, part, e, delta_base)
    return out


def green_indicator(token: int, part: VocabularyBipartition, e: int) -> int:
    """1 iff the token landed in the half the coin flip favored."""
    e = _as_bit(e, "e")
    if not 0 <= token < part.vocab_size:
        raise DomainError(
            f"token {token} outside vocabulary of {part.vocab_size}"
        )
    return int(int(part.membership[token]) == e)
