"""Model-agnostic detection: vote gathering, majority extraction, z-test.

Detection never touches a language model. It reconstructs each token's
pseudorandom position and mask from the key, reads the token's partition
membership per layer, undoes the XOR, and accumulates the result as a vote
for one message bit. Statistics come in two flavors:

* the majority-vote green count ``G = sum_p max(M[p][:])`` that the report
  carries (it is a max over messages, so it sits above N/2 by construction
  and its null distribution is right-shifted);
* the reference green count against a fixed message, whose null is exactly
  Binomial(N, 1/2) — use this one wherever a calibrated z threshold or a
  normal null is needed (TPR at fixed z, false-positive audits).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .embed import EmbedParams, Message
from .errors import (
    DimensionError,
    DomainError,
    StatisticUndefinedError,
)
from .prf import (
    ContextWindow,
    SeenContextLog,
    WatermarkKey,
    prf_mask,
    prf_position,
)
from .reweight import PartitionStack

_STD_NORMAL = NormalDist()


@dataclass(frozen=True)
class VotingMatrix:
    """ell x 2 evidence counter; one vote per (fresh token, layer)."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[1] != 2 or counts.shape[0] < 1:
            raise DimensionError("counts must have shape (ell, 2)")
        if np.any(counts < 0):
            raise DomainError("vote counts must be nonnegative")
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def ell(self) -> int:
        return int(self.counts.shape[0])

    @classmethod
    def zeros(cls, ell: int) -> "VotingMatrix":
        return cls(np.zeros((ell, 2), dtype=np.int64))


@dataclass(frozen=True)
class GreenStats:
    """Closed-form per-vote green statistics for one reweighting layer."""

    tau: float
    delta_base: float
    expectation: float
    variance: float


@dataclass(frozen=True)
class DetectionReport:
    z: float
    p_value: float
    extracted: Message
    green: int
    total: int
    ambiguous_bits: tuple[int, ...]
    skipped_tokens: int
    decision: bool
    threshold: float

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "p_value": self.p_value,
            "message": self.extracted.to_bitstring(),
            "G": self.green,
            "N": self.total,
            "ambiguous": list(self.ambiguous_bits),
            "skipped": self.skipped_tokens,
            "decision": self.decision,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def gather_votes(
    tokens: Sequence[int],
    key: WatermarkKey,
    params: EmbedParams,
    stack: PartitionStack,
) -> tuple[VotingMatrix, int]:
    """Accumulate per-layer message-bit votes over a token stream.

    Tokens whose context window already seeded an earlier step are skipped,
    mirroring the embedding side; each remaining token contributes exactly d
    votes. The skip-set pass is sequential (first occurrence wins); the
    per-token vote math itself is order-free, so disjoint ranges could be
    merged by matrix addition after a shared pre-pass.
    """
    counts = np.zeros((params.ell, 2), dtype=np.int64)
    membership = stack.membership_matrix
    log = SeenContextLog()
    skipped = 0
    seq = [int(t) for t in tokens]
    for t, token in enumerate(seq):
        if not 0 <= token < params.vocab_size:
            raise DomainError(
                f"token {token} at index {t} outside vocabulary of "
                f"{params.vocab_size}"
            )
        window = ContextWindow.at(seq, t, params.h, params.sentinel)
        if log.check_and_record(window):
            skipped += 1
            continue
        position = prf_position(key, window, params.ell)
        mask = np.asarray(prf_mask(key, window, params.d), dtype=np.int64)
        estimated_flips = membership[:, token].astype(np.int64)
        votes_for_one = int(np.sum(estimated_flips ^ mask))
        counts[position - 1, 1] += votes_for_one
        counts[position - 1, 0] += params.d - votes_for_one
    return VotingMatrix(counts), skipped


def extract_message(matrix: VotingMatrix) -> tuple[Message, tuple[int, ...]]:
    """Row-wise majority vote; ties resolve to 0 and are flagged ambiguous.

    Ambiguous positions (ties, including empty rows) are erasures: the caller
    can't distinguish them from confident zeros without the flag.
    """
    bits = []
    ambiguous = []
    for p in range(matrix.ell):
        zero, one = int(matrix.counts[p, 0]), int(matrix.counts[p, 1])
        bits.append(1 if one > zero else 0)
        if one == zero:
            ambiguous.append(p)
    return Message(tuple(bits)), tuple(ambiguous)


def green_count(matrix: VotingMatrix) -> tuple[int, int]:
    """Majority green count: (sum of row maxima, total votes)."""
    counts = matrix.counts
    return int(counts.max(axis=1).sum()), int(counts.sum())


def reference_green_count(matrix: VotingMatrix, message: Message) -> tuple[int, int]:
    """Votes agreeing with a fixed message: (agreeing, total).

    For unwatermarked text every vote is an independent fair coin, so the
    agreeing count is Binomial(N, 1/2) and the z statistic below is standard
    normal — unlike the majority count, which maximizes over messages.
    """
    if message.ell != matrix.ell:
        raise DimensionError(
            f"message has {message.ell} bits, matrix has {matrix.ell} rows"
        )
    idx = np.asarray(message.bits, dtype=np.int64)
    agreeing = int(matrix.counts[np.arange(matrix.ell), idx].sum())
    return agreeing, int(matrix.counts.sum())


def z_score(green: int, total: int, gamma: float = 0.5) -> float:
    """One-proportion z statistic for a green fraction against gamma."""
    if total < 1:
        raise StatisticUndefinedError("z-score undefined with zero votes")
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    return (green / total - gamma) / math.sqrt(gamma * (1.0 - gamma) / total)


def p_value(z: float) -> float:
    """One-sided upper-tail probability of a standard normal.

    Computed via erfc rather than 1 - cdf so the far tail keeps full relative
    precision (z around 17 corresponds to p around 1e-69, where naive
    subtraction returns 0). Underflows to 0 only past z of roughly 38.
    """
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def detect(
    tokens: Sequence[int],
    key: WatermarkKey,
    params: EmbedParams,
    stack: PartitionStack,
    threshold: float = 4.0,
) -> DetectionReport:
    """Full detection pass: votes -> message -> majority z -> p-value."""
    matrix, skipped = gather_votes(tokens, key, params, stack)
    extracted, ambiguous = extract_message(matrix)
    green, total = green_count(matrix)
    z = z_score(green, total)
    return DetectionReport(
        z=z,
        p_value=p_value(z),
        extracted=extracted,
        green=green,
        total=total,
        ambiguous_bits=ambiguous,
        skipped_tokens=skipped,
        decision=bool(z > threshold),
        threshold=threshold,
    )


def extraction_rate(extracted: Message, reference: Message) -> float:
    """Fraction of matching bits between two equal-length messages."""
    if extracted.ell != reference.ell:
        raise DimensionError(
            f"messages differ in length: {extracted.ell} vs {reference.ell}"
        )
    matches = sum(a == b for a, b in zip(extracted.bits, reference.bits))
    return matches / extracted.ell


def layer_green_excess(
    tokens: Sequence[int],
    key: WatermarkKey,
    params: EmbedParams,
    stack: PartitionStack,
    reference: Message,
) -> list[float]:
    """Per-layer green-vote fraction minus 0.5 against a reference message.

    An ablation diagnostic: layer i's excess measures how much signal that
    layer alone contributes to detection.
    """
    membership = stack.membership_matrix
    log = SeenContextLog()
    agree = np.zeros(params.d, dtype=np.int64)
    fresh = 0
    seq = [int(t) for t in tokens]
    for t, token in enumerate(seq):
        window = ContextWindow.at(seq, t, params.h, params.sentinel)
        if log.check_and_record(window):
            continue
        position = prf_position(key, window, params.ell)
        mask = np.asarray(prf_mask(key, window, params.d), dtype=np.int64)
        votes = membership[:, token].astype(np.int64) ^ mask
        agree += votes == reference.bits[position - 1]
        fresh += 1
    if fresh == 0:
        raise StatisticUndefinedError("no fresh tokens to score")
    return [float(a / fresh - 0.5) for a in agree]


def expected_green_stats(tau: float, delta_base: float) -> GreenStats:
    """Closed-form E and Var of the per-vote green indicator.

    Below the saturation breakpoint 1/(1+delta_base) the boost is the full
    base factor and the green probability is 0.5 + delta_base*tau; above it
    the boosted half absorbs all mass and the expectation decays as
    1.5 - tau. Variance follows from the indicator being Bernoulli.
    """
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    if not 0.0 <= delta_base <= 1.0:
        raise DomainError(f"delta_base must lie in [0, 1], got {delta_base}")
    breakpoint_ = 1.0 / (1.0 + delta_base)
    if tau <= breakpoint_:
        expectation = 0.5 + delta_base * tau
        variance = 0.25 - (delta_base * tau) ** 2
    else:
        expectation = 1.5 - tau
        variance = -0.75 + 2.0 * tau - tau * tau
    return GreenStats(
        tau=tau, delta_base=delta_base,
        expectation=expectation, variance=max(variance, 0.0),
    )


def type2_error(tau: float, delta_base: float, T: int, alpha: float) -> float:
    """Probability of missing a single-layer watermark at significance alpha.

    beta = Phi((z_{1-alpha} - 2(E-0.5)sqrt(T)) / (2 sqrt(Var))); the
    variance-zero limit with E above 0.5 is a certain detection (beta = 0).
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    stats = expected_green_stats(tau, delta_base)
    critical = _STD_NORMAL.inv_cdf(1.0 - alpha)
    if stats.variance == 0.0:
        if stats.expectation > 0.5:
            return 0.0
        raise StatisticUndefinedError(
            "Type-II error undefined: zero variance with no watermark effect"
        )
    arg = (critical - 2.0 * (stats.expectation - 0.5) * math.sqrt(T)) / (
        2.0 * math.sqrt(stats.variance)
    )
    return _STD_NORMAL.cdf(arg)
