"""Protocol values, vectors, message kinds, and their canonical byte encoding.

Values are opaque byte strings; the binary specialization uses b"0"/b"1".
A value vector is a fixed-length tuple with None marking an empty slot.
Process ids are 1-based throughout, matching the operator-facing display.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum

from .errors import ConflictingValue, EmptyVector

Value = bytes
ValueVector = tuple  # tuple[Value | None, ...]


class Kind(IntEnum):
    """The four message kinds a process originates, in per-originator handling order."""

    INITIAL_VALUE = 0
    FIRST_PROPOSAL = 1
    SECOND_PROPOSAL = 2
    DECISION_SEED = 3


class Phase(IntEnum):
    INITIAL = 0
    PROPOSALS = 1
    DECISION = 2
    DECIDED = 3


# Earliest phase in which a kind may be handled (receipt is phase-independent).
HANDLING_PHASE = {
    Kind.INITIAL_VALUE: Phase.INITIAL,
    Kind.FIRST_PROPOSAL: Phase.PROPOSALS,
    Kind.SECOND_PROPOSAL: Phase.PROPOSALS,
    Kind.DECISION_SEED: Phase.DECISION,
}


def bit(v: int) -> Value:
    return b"1" if v else b"0"


def as_bit(value: Value) -> int:
    if value == b"0":
        return 0
    if value == b"1":
        return 1
    raise ValueError(f"not a binary value: {value!r}")


def empty_slots(vector: ValueVector) -> list[int]:
    """0-based indices of empty slots."""
    return [i for i, v in enumerate(vector) if v is None]


def is_full(vector: ValueVector) -> bool:
    return all(v is not None for v in vector)


def check_role(vector: ValueVector, kind: Kind) -> None:
    """Enforce the slot-count invariant each vector-bearing kind carries."""
    empties = len(empty_slots(vector))
    if kind == Kind.FIRST_PROPOSAL and empties != 1:
        raise ValueError(f"first proposal must have exactly one empty slot, got {empties}")
    if kind == Kind.SECOND_PROPOSAL and empties != 0:
        raise ValueError(f"second proposal must be full, got {empties} empty slots")
    if kind == Kind.DECISION_SEED and empties > 1:
        raise ValueError(f"decision seed may have at most one empty slot, got {empties}")


def merge_vectors(a: ValueVector, b: ValueVector) -> ValueVector:
    """Slot-wise union of two vectors; empty slots are filled by the other side."""
    if len(a) != len(b):
        raise ValueError("vector length mismatch")
    out = []
    for i, (x, y) in enumerate(zip(a, b)):
        if x is not None and y is not None and x != y:
            raise ConflictingValue(f"slot {i + 1} holds both {x!r} and {y!r}")
        out.append(x if x is not None else y)
    return tuple(out)


@dataclass(frozen=True, slots=True)
class Envelope:
    """One message in flight.

    sender == originator for direct copies; retransmitted copies carry the
    retransmitter as sender with a byte-identical payload.
    """

    originator: int
    sender: int
    destination: int
    round: int
    kind: Kind
    payload: object  # Value for INITIAL_VALUE, ValueVector otherwise

    @property
    def direct(self) -> bool:
        return self.sender == self.originator

    def identity(self) -> tuple:
        return (self.round, self.originator, self.kind)


def encode_value(value: Value | None) -> bytes:
    if value is None:
        return b"\x00"
    return b"\x01" + len(value).to_bytes(4, "big") + value


def encode_payload(kind: Kind, payload) -> bytes:
    if kind == Kind.INITIAL_VALUE:
        return encode_value(payload)
    return b"".join(encode_value(v) for v in payload)


def encode_message(round_: int, originator: int, kind: Kind, payload) -> bytes:
    """Canonical wire form: round, originator, kind tag, then slot values."""
    head = round_.to_bytes(4, "big") + originator.to_bytes(2, "big") + bytes([kind])
    return head + encode_payload(kind, payload)


def message_digest(round_: int, originator: int, kind: Kind, payload) -> str:
    return hashlib.sha256(encode_message(round_, originator, kind, payload)).hexdigest()[:12]


def vector_of_bits(bits) -> ValueVector:
    return tuple(None if b is None else bit(b) for b in bits)


def format_vector(vector: ValueVector) -> str:
    return "(" + ",".join("_" if v is None else v.decode("latin1") for v in vector) + ")"


def majority_bit(vector: ValueVector) -> int | None:
    """Strict majority over the non-empty binary slots; None on an exact tie."""
    ones = zeros = 0
    for v in vector:
        if v is None:
            continue
        if as_bit(v):
            ones += 1
        else:
            zeros += 1
    if ones + zeros == 0:
        raise EmptyVector("vector has no non-empty slots")
    if ones == zeros:
        return None
    return 1 if ones > zeros else 0
