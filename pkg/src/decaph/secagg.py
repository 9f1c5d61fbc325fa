"""Pairwise-masking secure aggregation over the 64-bit integer ring.

Every unordered participant pair (i, j) shares a seed; participant i adds the
pair's PRG stream to its fixed-point-encoded vector when the peer id is
larger and subtracts it when smaller, so the masks cancel exactly in the ring
sum and the aggregator recovers only the total. Any single masked share is
uniform on the ring and carries no information about its plaintext.

Key agreement is simulated: pair seeds are derived from the session seed and
the sorted pair ids. The aggregation arithmetic and the message/byte
structure are faithful; the cryptography (Diffie-Hellman, dropout recovery)
is deliberately out of scope -- a missing or duplicated share is a protocol
error, not a recoverable event.

Wire format of one share (documented for interop, little-endian throughout):

    uint64 session_id | uint64 participant_id | uint64 vector_len
    | vector_len * uint64 ring words
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import FixedPointCodec, Prng

__all__ = ["SecAggSession", "MaskedShare", "CommCost", "mask", "aggregate", "comm_cost"]

_HEADER = struct.Struct("<QQQ")
KEY_SHARE_BYTES = 32  # simulated key-agreement message size per peer


@dataclass(frozen=True)
class MaskedShare:
    participant_id: int
    masked_vector: np.ndarray  # uint64 ring words
    session_id: int

    def to_bytes(self) -> bytes:
        vec = np.ascontiguousarray(self.masked_vector, dtype="<u8")
        return _HEADER.pack(self.session_id, self.participant_id, len(vec)) + vec.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MaskedShare":
        session_id, participant_id, vector_len = _HEADER.unpack_from(raw)
        vec = np.frombuffer(raw, dtype="<u8", offset=_HEADER.size, count=vector_len)
        return cls(participant_id, vec.astype(np.uint64), session_id)

    @property
    def n_bytes(self) -> int:
        return _HEADER.size + 8 * len(self.masked_vector)


class SecAggSession:
    """One aggregation session: fixed participant set, vector length, codec."""

    def __init__(
        self,
        session_id: int,
        participant_ids: list[int],
        vector_len: int,
        codec: FixedPointCodec | None = None,
        seed: int = 0,
    ):
        if len(set(participant_ids)) != len(participant_ids) or not participant_ids:
            raise ValueError("participant ids must be non-empty and unique")
        if vector_len < 1:
            raise ValueError("vector_len must be >= 1")
        self.session_id = session_id
        self.participant_ids = list(participant_ids)
        self.vector_len = vector_len
        self.codec = codec or FixedPointCodec()
        self._seed_root = Prng(seed, 0).derive("secagg-session", session_id)

    @property
    def n_participants(self) -> int:
        return len(self.participant_ids)

    def _pair_stream(self, a: int, b: int) -> Prng:
        lo, hi = (a, b) if a < b else (b, a)
        return self._seed_root.derive("pair", lo, hi)

    def _net_mask(self, participant_id: int) -> np.ndarray:
        """Sum of +PRG(seed_ij) for peers j > i minus PRG for peers j < i."""
        total = np.zeros(self.vector_len, dtype=np.uint64)
        for peer in self.participant_ids:
            if peer == participant_id:
                continue
            words = self._pair_stream(participant_id, peer).raw_uint64(self.vector_len)
            if peer > participant_id:
                total = total + words
            else:
                total = total - words
        return total


def mask(session: SecAggSession, participant_id: int, plain_vector: np.ndarray) -> MaskedShare:
    """Encode a real vector and blind it with this participant's net mask."""
    if participant_id not in session.participant_ids:
        raise ValueError(f"participant {participant_id} not in session")
    plain = np.asarray(plain_vector, dtype=np.float64)
    if plain.shape != (session.vector_len,):
        raise ValueError(
            f"vector shape {plain.shape} != session length ({session.vector_len},)"
        )
    encoded = session.codec.encode(plain)
    return MaskedShare(
        participant_id=participant_id,
        masked_vector=encoded + session._net_mask(participant_id),
        session_id=session.session_id,
    )


def aggregate(session: SecAggSession, shares: list[MaskedShare]) -> np.ndarray:
    """Decode the ring sum of all shares; masks cancel, leaving the plain sum.

    Requires exactly one share per session participant (no dropout recovery).
    """
    seen = [s.participant_id for s in shares]
    if sorted(seen) != sorted(session.participant_ids):
        raise ValueError(
            f"protocol error: expected one share from each of "
            f"{sorted(session.participant_ids)}, got {sorted(seen)}"
        )
    for s in shares:
        if s.session_id != session.session_id:
            raise ValueError(f"share for session {s.session_id} != {session.session_id}")
        if len(s.masked_vector) != session.vector_len:
            raise ValueError("share length does not match session")
    total = np.zeros(session.vector_len, dtype=np.uint64)
    for s in sorted(shares, key=lambda s: s.participant_id):
        total = total + np.asarray(s.masked_vector, dtype=np.uint64)
    return session.codec.decode(total)


@dataclass(frozen=True)
class CommCost:
    """Deterministic per-round byte accounting for one aggregation.

    participant_bytes counts what one participant sends; aggregator_bytes
    counts what the aggregator receives.
    """

    participant_bytes: int
    aggregator_bytes: int


def comm_cost(session: SecAggSession, with_secagg: bool) -> CommCost:
    """Bytes moved per aggregation round.

    Without SecAgg each participant uploads its raw float64 vector. With
    SecAgg it uploads the same-length ring words plus the share header, and
    the simulated key agreement costs one 32-byte key share per peer
    (relayed through the aggregator).
    """
    h = session.n_participants
    payload = 8 * session.vector_len
    if not with_secagg:
        return CommCost(participant_bytes=payload, aggregator_bytes=h * payload)
    share = _HEADER.size + payload
    keys_per_participant = KEY_SHARE_BYTES * (h - 1)
    return CommCost(
        participant_bytes=share + keys_per_participant,
        aggregator_bytes=h * share + h * keys_per_participant,
    )
