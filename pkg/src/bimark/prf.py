"""Keyed pseudorandomness: partitions, positions, masks, context tracking.

Detection has to reproduce every pseudorandom choice from the key and the
token stream alone, on any implementation, so the constructions here are
normative down to the byte:

* ``derive_seed`` — SipHash-2-4 over ``domain_tag_byte || payload``, keyed by
  the first 128 bits of the secret (k0 = LE64(secret[0:8]),
  k1 = LE64(secret[8:16])). Payload token ids and layer indices are 4-byte
  big-endian unsigned integers.
* ``CounterRng`` — counter-based splitmix64 stream:
  ``out_j = mix64((seed + (j+1) * 0x9E3779B97F4A7C15) mod 2^64)`` with the
  standard mix (xor-shift 30 / mul 0xBF58476D1CE4E5B9 / xor-shift 27 /
  mul 0x94D049BB133111EB / xor-shift 31).
* bounded draws use rejection below ``2^64 - (2^64 mod n)`` then ``mod n``;
  shuffles are Fisher-Yates from the top index downward.
* uniform floats are ``(out_j >> 11) * 2^-53``.
"""
from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError
from .reweight import PartitionStack, VocabularyBipartition

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


class SeedDomain(enum.IntEnum):
    """Domain-separation tags; one byte, prefixed to every PRF payload."""

    PARTITION = 0x01
    POSITION = 0x02
    MASK = 0x03
    GREENLIST = 0x04  # per-window lists of the logit-bias baselines
    TOYLM = 0x05      # synthetic language model conditionals


@dataclass(frozen=True)
class WatermarkKey:
    """A 256-bit secret, serializable as 64 hex characters."""

    secret: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.secret, bytes) or len(self.secret) != 32:
            raise DomainError("secret must be exactly 32 bytes")

    @classmethod
    def generate(cls) -> "WatermarkKey":
        return cls(os.urandom(32))

    @classmethod
    def from_hex(cls, text: str) -> "WatermarkKey":
        text = text.strip()
        if len(text) != 64:
            raise ParseError(f"key must be 64 hex chars, got {len(text)}")
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise ParseError(f"invalid hex key: {exc}") from exc

    @classmethod
    def from_int(cls, value: int) -> "WatermarkKey":
        """Canonical full-entropy key for a nonnegative integer.

        SHA-256 of the 32-byte big-endian encoding. The PRF is keyed by the
        first 128 bits of the secret, so a raw big-endian encoding of a small
        integer would leave every derived key identical; hashing spreads the
        integer over the whole secret.
        """
        if value < 0:
            raise DomainError("key integer must be nonnegative")
        return cls(hashlib.sha256(value.to_bytes(32, "big")).digest())

    def to_hex(self) -> str:
        return self.secret.hex()


def write_key_file(key: WatermarkKey, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(key.to_hex() + "\n")


def read_key_file(path) -> WatermarkKey:
    with open(path, "r", encoding="utf-8") as fh:
        return WatermarkKey.from_hex(fh.read())


def _rotl(x: int, b: int) -> int:
    return ((x << b) | (x >> (64 - b))) & _MASK64


def siphash24(key16: bytes, message: bytes) -> int:
    """SipHash-2-4 producing a 64-bit integer (reference semantics)."""
    k0 = int.from_bytes(key16[0:8], "little")
    k1 = int.from_bytes(key16[8:16], "little")
    v0 = k0 ^ 0x736F6D6570736575
    v1 = k1 ^ 0x646F72616E646F6D
    v2 = k0 ^ 0x6C7967656E657261
    v3 = k1 ^ 0x7465646279746573

    def sipround(v0, v1, v2, v3):
        v0 = (v0 + v1) & _MASK64
        v1 = _rotl(v1, 13) ^ v0
        v0 = _rotl(v0, 32)
        v2 = (v2 + v3) & _MASK64
        v3 = _rotl(v3, 16) ^ v2
        v0 = (v0 + v3) & _MASK64
        v3 = _rotl(v3, 21) ^ v0
        v2 = (v2 + v1) & _MASK64
        v1 = _rotl(v1, 17) ^ v2
        v2 = _rotl(v2, 32)
        return v0, v1, v2, v3

    length = len(message)
    # Final block carries the message length in its top byte.
    tail = message[length - (length % 8):]
    b = (length & 0xFF) << 56
    b |= int.from_bytes(tail, "little")

    for offset in range(0, length - (length % 8), 8):
        m = int.from_bytes(message[offset:offset + 8], "little")
        v3 ^= m
        v0, v1, v2, v3 = sipround(v0, v1, v2, v3)
        v0, v1, v2, v3 = sipround(v0, v1, v2, v3)
        v0 ^= m

    v3 ^= b
    v0, v1, v2, v3 = sipround(v0, v1, v2, v3)
    v0, v1, v2, v3 = sipround(v0, v1, v2, v3)
    v0 ^= b
    v2 ^= 0xFF
    for _ in range(4):
        v0, v1, v2, v3 = sipround(v0, v1, v2, v3)
    return (v0 ^ v1 ^ v2 ^ v3) & _MASK64


def derive_seed(key: WatermarkKey, domain: SeedDomain, payload: bytes) -> int:
    """Keyed 64-bit seed for (domain, payload); deterministic and avalanching."""
    return siphash24(key.secret[:16], bytes([int(domain)]) + payload)


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


class CounterRng:
    """Deterministic counter-based splitmix64 stream over a 64-bit seed."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def next64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * _GOLDEN) & _MASK64)

    def next_bits(self, n: int) -> tuple[int, ...]:
        """n bits, each the low bit of one stream word."""
        return tuple(self.next64() & 1 for _ in range(n))

    def next_below(self, bound: int) -> int:
        """Uniform integer in [0, bound) via rejection (no modulo bias)."""
        if bound <= 0:
            raise DomainError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next64()
            if x < limit:
                return x % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, top index downward. Normative order."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]


def uniform_block(seed: int, n: int) -> np.ndarray:
    """First n uniforms of the counter stream, vectorized.

    Bit-identical to calling ``CounterRng(seed).next64() >> 11`` n times and
    scaling by 2^-53.
    """
    counters = np.arange(1, n + 1, dtype=np.uint64)
    z = (np.uint64(seed & _MASK64) + counters * np.uint64(_GOLDEN))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _encode_u32(values) -> bytes:
    out = bytearray()
    for v in values:
        v = int(v)
        if not 0 <= v < 2**32:
            raise DomainError(f"id {v} does not fit in 32 bits")
        out += v.to_bytes(4, "big")
    return bytes(out)


@dataclass(frozen=True)
class ContextWindow:
    """The last h token ids, oldest first, sentinel-padded at sequence start.

    The sentinel id equals the (unpadded) vocab_size, which no real token can
    take, so padded and unpadded prefixes never collide.
    """

    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise DomainError("a context window holds at least one token")

    @property
    def h(self) -> int:
        return len(self.tokens)

    def payload(self) -> bytes:
        return _encode_u32(self.tokens)

    @classmethod
    def at(cls, tokens, t: int, h: int, sentinel: int) -> "ContextWindow":
        """Window of the h tokens strictly before position t."""
        start = max(0, t - h)
        body = tuple(int(x) for x in tokens[start:t])
        pad = (sentinel,) * (h - len(body))
        return cls(pad + body)


class SeenContextLog:
    """Insert-once record of context windows already used as PRF seeds.

    Single writer per generation/detection session; concurrent sessions keep
    separate logs.
    """

    def __init__(self):
        self._seen: set[tuple[int, ...]] = set()

    def __len__(self) -> int:
        return len(self._seen)

    def check_and_record(self, window: ContextWindow) -> int:
        """1 if the window was seen before; records it either way."""
        key = window.tokens
        if key in self._seen:
            return 1
        self._seen.add(key)
        return 0


def derive_partitions(
    key: WatermarkKey, vocab_size: int, d: int
) -> PartitionStack:
    """Build d independent balanced bipartitions, one seeded shuffle each.

    Odd vocabularies get one zero-probability dummy token (id = vocab_size)
    so the halves split exactly; the dummy is never sampled and never votes.
    """
    if vocab_size < 2:
        raise DomainError(f"vocab_size must be >= 2, got {vocab_size}")
    if d < 1:
        raise DomainError(f"d must be >= 1, got {d}")
    padded = vocab_size + (vocab_size % 2)
    layers = []
    for layer in range(d):
        seed = derive_seed(key, SeedDomain.PARTITION, _encode_u32([layer]))
        perm = list(range(padded))
        CounterRng(seed).shuffle(perm)
        membership = np.zeros(padded, dtype=np.uint8)
        membership[perm[padded // 2:]] = 1
        layers.append(VocabularyBipartition(membership))
    return PartitionStack(tuple(layers))


def prf_position(key: WatermarkKey, window: ContextWindow, ell: int) -> int:
    """Message-bit position in {1..ell} for this window; 1-based."""
    if ell < 1:
        raise DomainError(f"ell must be >= 1, got {ell}")
    seed = derive_seed(key, SeedDomain.POSITION, window.payload())
    return 1 + CounterRng(seed).next_below(ell)


def prf_mask(key: WatermarkKey, window: ContextWindow, d: int) -> tuple[int, ...]:
    """One-time-pad mask of d balanced bits for this window."""
    if d < 1:
        raise DomainError(f"d must be >= 1, got {d}")
    seed = derive_seed(key, SeedDomain.MASK, window.payload())
    return CounterRng(seed).next_bits(d)
