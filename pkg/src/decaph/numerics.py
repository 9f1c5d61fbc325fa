"""Deterministic randomness and fixed-point ring encoding.

All randomness in the simulator flows from :class:`Prng`, a thin wrapper
around numpy's counter-based Philox generator keyed by ``(seed, stream_id)``.
Distinct stream ids give statistically independent streams, so every actor
(participant, noise source, sampler, mask generator) derives its own stream
from one master seed and the whole run replays bit-identically.

Gaussian draws use numpy's ziggurat implementation on top of Philox; the
algorithm is fixed here once so that identical ``(seed, stream_id)`` pairs
reproduce identical vectors across runs and platforms.

:class:`FixedPointCodec` maps reals onto the 2**modulus_bits integer ring
(``round(v * 2**scale_bits) mod 2**modulus_bits``), which is what the secure
aggregation layer sums. Addition in the ring commutes with addition of the
underlying reals up to quantization, provided nothing overflows the
representable range.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = ["Prng", "FixedPointCodec", "gaussian"]

_U64 = np.uint64
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Prng:
    """Counter-based deterministic random stream identified by (seed, stream_id).

    The same (seed, stream_id) always yields the same sequence. Use
    :meth:`derive` to split off independent sub-streams by label; labels are
    hashed into the 64-bit stream id, so e.g. ``root.derive("noise", 3, 7)``
    is stable across runs and disjoint from any other label path.
    """

    seed: int
    stream_id: int = 0

    def derive(self, *labels: object) -> "Prng":
        """Return an independent child stream for the given label path."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little", signed=False))
        for label in labels:
            h.update(repr(label).encode("utf-8"))
            h.update(b"\x1f")
        return Prng(self.seed, int.from_bytes(h.digest(), "little"))

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator at counter zero for this stream.

        Calling twice returns generators that replay the same sequence;
        callers that need successive fresh draws should either hold one
        generator or derive labelled sub-streams.
        """
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def raw_uint64(self, n: int) -> np.ndarray:
        """n raw 64-bit words from the stream (used as ring-mask PRG)."""
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        return np.asarray(np.random.Philox(key=key).random_raw(n), dtype=_U64)


def gaussian(prng: Prng, mean: float, std: float, n: int) -> np.ndarray:
    """n i.i.d. draws from N(mean, std^2), deterministic in the stream.

    std == 0 returns n copies of mean exactly.
    """
    if not np.isfinite(std) or std < 0:
        raise ValueError(f"std must be finite and >= 0, got {std}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if std == 0.0:
        return np.full(n, float(mean))
    return mean + std * prng.generator().standard_normal(n)


class FixedPointCodec:
    """Maps real vectors onto the integer ring Z_{2^modulus_bits}.

    encode(v) = round(v * 2**scale_bits) mod 2**modulus_bits, with negatives
    wrapped two's-complement style; decode centers back into
    [-2**(modulus_bits-1), 2**(modulus_bits-1)) before rescaling.

    Values with |v| <= 2**(modulus_bits - scale_bits - 2) round-trip with
    error <= 2**-scale_bits; the spare two bits leave headroom so sums of
    many encodings stay decodable.
    """

    def __init__(self, scale_bits: int = 16, modulus_bits: int = 64):
        if modulus_bits != 64:
            raise ValueError("only the 64-bit ring is supported")
        if not 0 < scale_bits < modulus_bits - 2:
            raise ValueError(f"scale_bits out of range: {scale_bits}")
        self.scale_bits = scale_bits
        self.modulus_bits = modulus_bits
        self.scale = float(1 << scale_bits)
        self.max_abs = float(1 << (modulus_bits - scale_bits - 2))

    def encode(self, v: np.ndarray) -> np.ndarray:
        """Encode reals to uint64 ring words; range-errors name the bad index."""
        v = np.asarray(v, dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(v) | (np.abs(v) > self.max_abs))
        if bad.size:
            raise ValueError(
                f"value {v.flat[bad[0]]!r} at index {int(bad[0])} outside "
                f"representable range +/-{self.max_abs}"
            )
        scaled = np.round(v * self.scale).astype(np.int64)
        return scaled.astype(_U64)

    def decode(self, enc: np.ndarray) -> np.ndarray:
        """Decode ring words back to reals (centered signed interpretation)."""
        enc = np.asarray(enc, dtype=_U64)
        return enc.astype(np.int64).astype(np.float64) / self.scale

    def add(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Ring addition mod 2**modulus_bits."""
        return np.asarray(a, dtype=_U64) + np.asarray(b, dtype=_U64)
