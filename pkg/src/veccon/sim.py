"""Asynchronous execution environment: message buffer, crash injection, schedulers.

A simulation owns the process states and a multiset of in-flight envelopes.
Each scheduling decision either delivers one envelope (an atomic step of the
destination process) or lets a destination's receive return nothing. A run is
complete when every non-crashed process has decided and no envelope addressed
to a live process remains undelivered.

Crash points count the victim's own atomic steps: 0 halts it before its
initial broadcast, 1 right after it, k after k-1 further deliveries. A step
is all-or-nothing, so a broadcast is never split by a crash.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .errors import InvalidSystemSize, MultipleCrashes, NoSuchMessage, ScriptDesync, StalledRun
from .messages import Envelope, Kind, Phase, Value, message_digest
from .process import ProcessState, new_process


@dataclass(frozen=True, slots=True)
class CrashSpec:
    """At most one crashing process per run."""

    process: int | None = None
    crash_point: int = 0

    @staticmethod
    def none() -> "CrashSpec":
        return CrashSpec(None, 0)


@dataclass(slots=True)
class _Entry:
    seq: int
    born: int  # scheduling-decision index at enqueue time, for fairness ages
    env: Envelope


@dataclass(slots=True)
class RunResult:
    decisions: dict  # pid -> ValueVector | None
    crashed: int | None
    steps: int
    digest: str
    phase_snapshots: dict  # pid -> ("partial", slot) | ("full", None) | None
    trace: list | None = None
    leftover: int = 0


class SimState:
    """One simulation: processes, buffer, crash bookkeeping, trace digest."""

    def __init__(self, n: int, inputs: list, crash: CrashSpec, round_: int = 0,
                 capture_trace: bool = False):
        if len(inputs) != n:
            raise InvalidSystemSize(f"{len(inputs)} inputs for {n} processes")
        if crash.process is not None and not 1 <= crash.process <= n:
            raise MultipleCrashes(f"crash names P{crash.process}, outside 1..{n}")
        self.n = n
        self.round = round_
        self.crash = crash
        self.procs: dict[int, ProcessState] = {
            pid: new_process(pid, n, inputs[pid - 1], round_) for pid in range(1, n + 1)
        }
        self.steps_taken = {pid: 0 for pid in self.procs}
        self.halted = {pid: False for pid in self.procs}
        self.buffer: list[_Entry] = []
        self.seq = 0
        self.decision_count = 0
        self.events = 0
        self._hash = hashlib.sha256()
        self.trace: list | None = [] if capture_trace else None
        self._digest_cache: dict[tuple, str] = {}

        for pid in range(1, n + 1):
            if crash.process == pid and crash.crash_point == 0:
                self.halted[pid] = True
                continue
            self._absorb(pid, self.procs[pid].start_round())

    # ----------------------------------------------------------------- plumbing

    def _absorb(self, pid: int, emissions: list[Envelope]) -> None:
        self.steps_taken[pid] += 1
        for env in emissions:
            self.buffer.append(_Entry(self.seq, self.decision_count, env))
            self.seq += 1
        if self.crash.process == pid and self.steps_taken[pid] >= self.crash.crash_point:
            self.halted[pid] = True

    def _payload_digest(self, env: Envelope) -> str:
        key = (env.round, env.originator, env.kind)
        d = self._digest_cache.get(key)
        if d is None:
            d = message_digest(env.round, env.originator, env.kind, env.payload)
            self._digest_cache[key] = d
        return d

    def _log(self, record: tuple) -> None:
        self.events += 1
        self._hash.update(repr(record).encode())
        if self.trace is not None:
            self.trace.append(record)

    def clone(self) -> "SimState":
        c = SimState.__new__(SimState)
        c.n = self.n
        c.round = self.round
        c.crash = self.crash
        c.procs = {pid: p.clone() for pid, p in self.procs.items()}
        c.steps_taken = dict(self.steps_taken)
        c.halted = dict(self.halted)
        c.buffer = [_Entry(e.seq, e.born, e.env) for e in self.buffer]
        c.seq = self.seq
        c.decision_count = self.decision_count
        c.events = self.events
        c._hash = self._hash.copy()
        c.trace = None if self.trace is None else list(self.trace)
        c._digest_cache = self._digest_cache  # read-mostly cache, content-keyed
        return c

    def state_key(self) -> bytes:
        """Configuration digest: every process state plus the ordered buffer."""
        h = hashlib.blake2b(digest_size=16)
        for pid in range(1, self.n + 1):
            h.update(self.procs[pid].state_key())
            h.update(bytes([self.halted[pid]]))
        for e in self.buffer:
            env = e.env
            h.update(bytes([env.originator, env.sender, env.destination, env.kind]))
        return h.digest()

    # ----------------------------------------------------------------- queries

    def live(self, pid: int) -> bool:
        return not self.halted[pid]

    def all_live_decided(self) -> bool:
        return all(self.procs[pid].decided for pid in self.procs if self.live(pid))

    def deliverable(self) -> list[int]:
        """Buffer positions addressed to live processes, FIFO order."""
        return [i for i, e in enumerate(self.buffer) if self.live(e.env.destination)]

    def find(self, destination: int, originator: int, kind: Kind,
             sender: int | None = None) -> int | None:
        """Position of the matching envelope; direct copies win when sender is free."""
        best = None
        for i, e in enumerate(self.buffer):
            env = e.env
            if env.destination != destination or env.originator != originator \
                    or env.kind != kind:
                continue
            if sender is not None:
                if env.sender == sender:
                    return i
                continue
            if env.direct:
                return i
            if best is None:
                best = i
        return best

    # ------------------------------------------------------------------- steps

    def deliver(self, index: int) -> None:
        """Remove one envelope and take the destination's atomic step."""
        if not 0 <= index < len(self.buffer):
            raise NoSuchMessage(f"buffer has no entry {index}")
        entry = self.buffer.pop(index)
        env = entry.env
        self.decision_count += 1
        self._log(("d", env.sender, env.destination, env.originator,
                   env.round, int(env.kind), self._payload_digest(env)))
        pid = env.destination
        if self.halted[pid]:
            return  # a crashed process takes no steps; the message is consumed
        self._absorb(pid, self.procs[pid].handle_delivery(env))

    def idle(self, destination: int) -> None:
        """A receive that returned nothing: the trace grows, nothing else changes."""
        self.decision_count += 1
        self._log(("i", destination))

    # ------------------------------------------------------------------ result

    def result(self) -> RunResult:
        decisions = {pid: self.procs[pid].output for pid in self.procs}
        snapshots = {pid: self.procs[pid].decision_entry for pid in self.procs}
        h = self._hash.copy()
        for pid in range(1, self.n + 1):
            h.update(repr((pid, decisions[pid])).encode())
        leftover = len(self.buffer)
        return RunResult(
            decisions=decisions,
            crashed=self.crash.process,
            steps=self.events,
            digest=h.hexdigest(),
            phase_snapshots=snapshots,
            trace=self.trace,
            leftover=leftover,
        )


def init_sim(n: int, inputs: list, crash: CrashSpec = CrashSpec.none(),
             round_: int = 0, capture_trace: bool = False) -> SimState:
    """Fresh configuration with every surviving process's initial broadcast enqueued."""
    return SimState(n, inputs, crash, round_, capture_trace)


# ---------------------------------------------------------------- schedulers


class RandomScheduler:
    """Uniform choice over in-flight envelopes with an age-based fairness forcer.

    Any envelope older than `fairness_bound` scheduling decisions is delivered
    before further random picks, so every message to a live process lands
    eventually. A small fraction of decisions are empty receives, limited by a
    per-destination budget.
    """

    def __init__(self, seed: int, fairness_bound: int = 64,
                 idle_budget: int = 16, idle_rate: float = 0.05):
        self.rng = random.Random(seed)
        self.fairness_bound = fairness_bound
        self.idle_budget = idle_budget
        self.idle_rate = idle_rate
        self._idles_used: dict[int, int] = {}

    def step(self, sim: SimState) -> bool:
        """Take one scheduling decision; False when the run is complete."""
        choices = sim.deliverable()
        if not choices:
            if sim.all_live_decided():
                return False
            raise StalledRun("undecided live process with an empty buffer")
        if self.idle_rate > 0 and self.rng.random() < self.idle_rate:
            dest = self.rng.randint(1, sim.n)
            if self._idles_used.get(dest, 0) < self.idle_budget:
                self._idles_used[dest] = self._idles_used.get(dest, 0) + 1
                sim.idle(dest)
                return True
        oldest = min(choices, key=lambda i: sim.buffer[i].born)
        if sim.decision_count - sim.buffer[oldest].born > self.fairness_bound:
            sim.deliver(oldest)
            return True
        sim.deliver(self.rng.choice(choices))
        return True


class ScriptedScheduler:
    """Replays an explicit event list, then falls back to seeded-random play.

    Events are ("deliver", destination, originator, kind, sender-or-None) or
    ("idle", destination). A deliver event that matches nothing in the buffer
    raises ScriptDesync.
    """

    def __init__(self, events: list, fallback_seed: int = 0, **random_opts):
        self.events = list(events)
        self._pos = 0
        self._fallback = RandomScheduler(fallback_seed, **random_opts)

    def step(self, sim: SimState) -> bool:
        if self._pos < len(self.events):
            event = self.events[self._pos]
            self._pos += 1
            if event[0] == "idle":
                sim.idle(event[1])
                return True
            _, dest, originator, kind, sender = event
            index = sim.find(dest, originator, Kind(kind), sender)
            if index is None:
                raise ScriptDesync(
                    f"no envelope ({originator}->{dest}, {Kind(kind).name}) in the buffer")
            sim.deliver(index)
            return True
        return self._fallback.step(sim)


def run_to_completion(sim: SimState, scheduler, max_decisions: int | None = None) -> RunResult:
    """Drive the simulation until every live process decided and its mail is drained."""
    if max_decisions is None:
        # every origination is retransmitted at most once per recipient, so the
        # total envelope count is bounded; leave generous headroom for idles
        max_decisions = 64 * sim.n ** 3 + 4096
    while scheduler.step(sim):
        if sim.decision_count > max_decisions:
            raise StalledRun(f"no completion within {max_decisions} scheduling decisions")
    for entry in sim.buffer:
        if sim.live(entry.env.destination):  # pragma: no cover - conservation guard
            raise StalledRun("run ended with undelivered mail for a live process")
    return sim.result()


def run_digest(result: RunResult) -> str:
    """Stable content hash of a completed run; equal configs and seeds reproduce it."""
    return result.digest
