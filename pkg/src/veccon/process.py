"""One process's consensus logic as a deterministic, scheduler-agnostic state machine.

A process advances only inside :meth:`ProcessState.handle_delivery` (and the
initial :meth:`ProcessState.start_round`). Both return the envelopes the step
emits; the surrounding harness owns all message transport.

Handling discipline for received messages:

* a copy is identified by (round, originator, kind); the first copy is
  recorded for handling, later copies only extend the distinct-sender set
  used by the differing-proposal trigger gate;
* per originator, kinds are handled in origination order (initial value,
  first proposal, second proposal, decision seed); a kind whose predecessor
  was certainly sent but has not yet arrived waits for it;
* a message is handled no earlier than the phase it belongs to, and nothing
  is handled before the process has broadcast its own initial value.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .errors import ConflictingValue, DuplicateOrigination, InvalidSystemSize
from .messages import (
    HANDLING_PHASE,
    Envelope,
    Kind,
    Phase,
    Value,
    ValueVector,
    check_role,
    empty_slots,
    encode_message,
    encode_value,
    is_full,
    merge_vectors,
)

MIN_PROCESSES = 5


@dataclass(slots=True)
class _Record:
    """Everything known about one (originator, kind) message."""

    payload: object
    senders: set = field(default_factory=set)
    handled: bool = False
    retransmitted: bool = False

    def clone(self) -> "_Record":
        return _Record(self.payload, set(self.senders), self.handled, self.retransmitted)


class ProcessState:
    """Registers, counters and buffers of a single process for one round."""

    __slots__ = (
        "id", "n", "round", "input", "phase", "started",
        "known_values", "slot_values", "records", "pending",
        "own_first", "current_v", "second_sent",
        "first_groups", "second_origins", "second_vector",
        "seed_origins", "seen_full_seed", "decision_entry",
        "output", "future",
    )

    def __init__(self, pid: int, n: int, input_value: Value, round_: int = 0):
        if n < MIN_PROCESSES:
            raise InvalidSystemSize(f"need at least {MIN_PROCESSES} processes, got {n}")
        if not 1 <= pid <= n:
            raise InvalidSystemSize(f"process id {pid} out of range 1..{n}")
        if not isinstance(input_value, bytes) or len(input_value) == 0:
            raise ValueError("input value must be a non-empty byte string")
        self.id = pid
        self.n = n
        self.round = round_
        self.input = input_value
        self.phase = Phase.INITIAL
        self.started = False
        # values learned from initial-value messages (plus our own input)
        self.known_values: dict[int, Value] = {pid: input_value}
        # every slot value learned from any message, for conflict detection
        self.slot_values: dict[int, Value] = {pid: input_value}
        self.records: dict[tuple, _Record] = {}
        # (originator, kind) keys of received-but-unhandled messages, arrival order
        self.pending: list[tuple] = []
        self.own_first: ValueVector | None = None
        self.current_v: ValueVector | None = None
        self.second_sent = False
        # empty-slot index (0-based) -> originators whose first proposal has it
        self.first_groups: dict[int, set] = {}
        self.second_origins: set = set()
        self.second_vector: ValueVector | None = None
        self.seed_origins: set = set()
        self.seen_full_seed = False
        # set on proposals completion: ("partial", empty slot) or ("full", None)
        self.decision_entry: tuple | None = None
        self.output: ValueVector | None = None
        self.future: list[Envelope] = []

    # ------------------------------------------------------------------ util

    def clone(self) -> "ProcessState":
        c = ProcessState.__new__(ProcessState)
        c.id = self.id
        c.n = self.n
        c.round = self.round
        c.input = self.input
        c.phase = self.phase
        c.started = self.started
        c.known_values = dict(self.known_values)
        c.slot_values = dict(self.slot_values)
        c.records = {k: r.clone() for k, r in self.records.items()}
        c.pending = list(self.pending)
        c.own_first = self.own_first
        c.current_v = self.current_v
        c.second_sent = self.second_sent
        c.first_groups = {k: set(v) for k, v in self.first_groups.items()}
        c.second_origins = set(self.second_origins)
        c.second_vector = self.second_vector
        c.seed_origins = set(self.seed_origins)
        c.seen_full_seed = self.seen_full_seed
        c.decision_entry = self.decision_entry
        c.output = self.output
        c.future = list(self.future)
        return c

    def state_key(self) -> bytes:
        """Canonical byte digest of the state, for dedup and replay checks."""
        h = hashlib.blake2b(digest_size=16)
        h.update(bytes([self.id, self.phase, self.started, self.second_sent,
                        self.seen_full_seed]))
        h.update(self.round.to_bytes(4, "big"))
        for o in sorted(self.known_values):
            h.update(bytes([o]) + encode_value(self.known_values[o]))
        for key in sorted(self.records):
            rec = self.records[key]
            o, k = key
            h.update(bytes([o, k, rec.handled]))
            h.update(bytes(sorted(rec.senders)))
        h.update(b"P" + b"".join(bytes([o, k]) for o, k in self.pending))
        for vec in (self.own_first, self.current_v, self.output):
            h.update(b"\xfe" if vec is None else b"".join(encode_value(v) for v in vec))
        if self.decision_entry is not None:
            tag, slot = self.decision_entry
            h.update(tag.encode() + bytes([0 if slot is None else slot]))
        return h.digest()

    @property
    def decided(self) -> bool:
        return self.phase == Phase.DECIDED

    def _broadcast(self, kind: Kind, payload) -> list[Envelope]:
        key = (self.id, kind)
        if key in self.records:
            raise DuplicateOrigination(
                f"P{self.id} already originated {kind.name} this round")
        if kind != Kind.INITIAL_VALUE:
            check_role(payload, kind)
            if len(payload) != self.n:
                raise ValueError("vector length must equal the system size")
        rec = _Record(payload)
        rec.handled = True
        self.records[key] = rec
        return [
            Envelope(self.id, self.id, d, self.round, kind, payload)
            for d in range(1, self.n + 1) if d != self.id
        ]

    # ------------------------------------------------------------ public ops

    def start_round(self) -> list[Envelope]:
        """Broadcast the initial value; the one step a process takes unprompted."""
        if self.started:
            raise DuplicateOrigination(f"P{self.id} already broadcast its initial value")
        self.started = True
        out = self._broadcast(Kind.INITIAL_VALUE, self.input)
        out.extend(self._react())
        return out

    def handle_delivery(self, env: Envelope) -> list[Envelope]:
        """The single entry point of the transition function.

        Records the copy, retransmits direct receipts, then drains every
        handleable message and applies the phase rules to quiescence.
        """
        if env.destination != self.id:
            raise ValueError(f"envelope for P{env.destination} delivered to P{self.id}")
        if env.round < self.round:
            return []  # stale round: ignored entirely
        if env.round > self.round:
            self.future.append(env)
            return []

        out: list[Envelope] = []
        key = (env.originator, env.kind)
        rec = self.records.get(key)
        if rec is None:
            rec = _Record(env.payload)
            rec.senders.add(env.sender)
            self.records[key] = rec
            self.pending.append(key)
        else:
            if rec.payload != env.payload:
                raise DuplicateOrigination(
                    f"P{env.originator} originated two different {env.kind.name} messages")
            rec.senders.add(env.sender)

        if env.direct and not rec.retransmitted:
            rec.retransmitted = True
            out.extend(
                Envelope(env.originator, self.id, d, self.round, env.kind, env.payload)
                for d in range(1, self.n + 1)
                if d != self.id and d != env.originator
            )

        out.extend(self._react())
        return out

    def make_first_proposal(self) -> list[Envelope]:
        """Enter the proposals phase, broadcasting the known values with one gap."""
        vector = tuple(self.known_values.get(o) for o in range(1, self.n + 1))
        out = self._broadcast(Kind.FIRST_PROPOSAL, vector)
        self.own_first = vector
        self.current_v = vector
        self.phase = Phase.PROPOSALS
        return out

    def try_complete_proposals(self) -> list[Envelope] | None:
        """Fire whichever completion threshold is met, if any.

        Equal-proposal completion: n-2 handled foreign first proposals with the
        same empty slot fix that common vector. Full-vector completion: n-2
        handled foreign second proposals fix the full vector. Completion enters
        the decision phase and broadcasts a decision seed.
        """
        if self.phase != Phase.PROPOSALS:
            return None
        for slot, origins in self.first_groups.items():
            if len(origins - {self.id}) >= self.n - 2:
                vector = tuple(
                    None if o - 1 == slot else self.slot_values[o]
                    for o in range(1, self.n + 1)
                )
                return self._complete(vector, ("partial", slot))
        if len(self.second_origins - {self.id}) >= self.n - 2:
            return self._complete(self.second_vector, ("full", None))
        return None

    def try_blend(self) -> list[Envelope] | None:
        """Broadcast our one second proposal if a blend trigger is armed.

        Handled second proposal: adopt its full vector. Handled differing
        first proposal: requires copies from at least n-2 distinct senders,
        and while still in the proposals phase an equal-proposal completion
        reachable from the copies received so far takes precedence.
        """
        if self.second_sent or self.own_first is None or self.phase < Phase.PROPOSALS:
            return None
        vector = None
        if self.second_vector is not None:
            vector = self.second_vector
        else:
            own_slot = empty_slots(self.own_first)[0]
            for slot, origins in self.first_groups.items():
                if slot == own_slot:
                    continue
                for o in sorted(origins - {self.id}):
                    rec = self.records[(o, Kind.FIRST_PROPOSAL)]
                    if len(rec.senders) < self.n - 2:
                        continue
                    if self.phase == Phase.PROPOSALS and self._equal_completion_in_sight():
                        return None
                    vector = merge_vectors(self.own_first, rec.payload)
                    break
                if vector is not None:
                    break
        if vector is None:
            return None
        self.second_sent = True
        return self._broadcast(Kind.SECOND_PROPOSAL, vector)

    def try_decide(self) -> bool:
        """Write the output register once n-2 foreign decision seeds are handled."""
        if self.phase != Phase.DECISION:
            return False
        if len(self.seed_origins - {self.id}) < self.n - 2:
            return False
        assert self.output is None, "output register is write-once"
        self.output = self.current_v
        self.phase = Phase.DECIDED
        return True

    # ------------------------------------------------------- handling rules

    def _complete(self, vector: ValueVector, entry: tuple) -> list[Envelope]:
        self.current_v = vector
        self.decision_entry = entry
        self.phase = Phase.DECISION
        return self._broadcast(Kind.DECISION_SEED, vector)

    def _handled(self, originator: int, kind: Kind) -> bool:
        rec = self.records.get((originator, kind))
        return rec is not None and rec.handled

    def _admissible(self, key: tuple) -> bool:
        o, kind = key
        if self.phase < HANDLING_PHASE[kind]:
            return False
        if kind == Kind.FIRST_PROPOSAL:
            return self._handled(o, Kind.INITIAL_VALUE)
        if kind == Kind.SECOND_PROPOSAL:
            return self._handled(o, Kind.FIRST_PROPOSAL)
        if kind == Kind.DECISION_SEED:
            if not self._handled(o, Kind.FIRST_PROPOSAL):
                return False
            rec = self.records.get((o, Kind.SECOND_PROPOSAL))
            return rec is None or rec.handled
        return True

    def _learn_slots(self, vector: ValueVector) -> None:
        for i, v in enumerate(vector):
            if v is None:
                continue
            o = i + 1
            seen = self.slot_values.get(o)
            if seen is None:
                self.slot_values[o] = v
            elif seen != v:
                raise ConflictingValue(f"slot {o} reported as {seen!r} and {v!r}")

    def _handle_one(self, key: tuple) -> None:
        o, kind = key
        rec = self.records[key]
        rec.handled = True
        payload = rec.payload
        if kind == Kind.INITIAL_VALUE:
            seen = self.slot_values.get(o)
            if seen is not None and seen != payload:
                raise ConflictingValue(f"slot {o} reported as {seen!r} and {payload!r}")
            self.slot_values[o] = payload
            # a late initial value is recorded but changes nothing further
            self.known_values[o] = payload
            return
        check_role(payload, kind)
        if len(payload) != self.n:
            raise ConflictingValue(f"vector length {len(payload)} in a system of {self.n}")
        self._learn_slots(payload)
        if kind == Kind.FIRST_PROPOSAL:
            slot = empty_slots(payload)[0]
            self.first_groups.setdefault(slot, set()).add(o)
        elif kind == Kind.SECOND_PROPOSAL:
            if self.second_vector is None:
                self.second_vector = payload
            elif self.second_vector != payload:
                raise ConflictingValue("two distinct full vectors in circulation")
            self.second_origins.add(o)
        else:  # DECISION_SEED
            self.seed_origins.add(o)
            if is_full(payload):
                self.seen_full_seed = True
                if self.phase == Phase.DECISION and not is_full(self.current_v):
                    # a full seed upgrades a partial vector before deciding
                    self.current_v = payload

    def _foreign_initials(self) -> int:
        return sum(1 for o in self.known_values if o != self.id)

    def _equal_completion_in_sight(self) -> bool:
        """Equal-proposal completion reachable from copies received so far.

        Counts received (handled or still pending) foreign first proposals by
        empty-slot position.
        """
        groups: dict[int, int] = {}
        for (o, kind), rec in self.records.items():
            if kind != Kind.FIRST_PROPOSAL or o == self.id:
                continue
            slot = empty_slots(rec.payload)[0]
            groups[slot] = groups.get(slot, 0) + 1
            if groups[slot] >= self.n - 2:
                return True
        return False

    def _react(self) -> list[Envelope]:
        """Apply phase transitions, completions and blend triggers to quiescence."""
        out: list[Envelope] = []
        if not self.started:
            return out
        while True:
            if self.phase == Phase.INITIAL and self._foreign_initials() >= self.n - 2:
                out.extend(self.make_first_proposal())
                continue
            emitted = self.try_complete_proposals()
            if emitted:
                out.extend(emitted)
                continue
            if self.try_decide():
                continue
            emitted = self.try_blend()
            if emitted:
                out.extend(emitted)
                continue
            advanced = False
            for key in self.pending:
                if self._admissible(key):
                    self.pending.remove(key)
                    self._handle_one(key)
                    advanced = True
                    break
            if not advanced:
                return out


def new_process(pid: int, n: int, input_value: Value, round_: int = 0) -> ProcessState:
    """Fresh process in the initial phase, knowing only its own input."""
    return ProcessState(pid, n, input_value, round_)


def encode_emission(env: Envelope) -> bytes:
    return encode_message(env.round, env.originator, env.kind, env.payload)
