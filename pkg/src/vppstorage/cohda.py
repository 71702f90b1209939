"""Fully distributed schedule negotiation.

Each agent keeps a working memory consisting of its believed system
configuration (who currently picked which operational schedule, with a
per-agent recency counter) and the best cluster candidate known so far.
Every event - an incoming message or a growth of the agent's own feasible
schedule set - runs the same update / choose / send chain: merge the
received knowledge, re-pick the own schedule that best serves the believed
configuration, adopt the result as the new best candidate if it wins, and
gossip the memory to all neighbours iff something changed.

The feasible schedule set is append-only during a negotiation; an entry is
admitted by the decider only while its local fitness lies strictly above the
absolute threshold established by pre-optimization.

Message wire format (little-endian, fixed so logs replay bit-exactly)::

    frame    := u32 payload_length, payload
    payload  := u32 sender_id (0xFFFFFFFF = controller),
                u32 n_choices, choice*,
                u8  has_candidate, candidate?
    choice   := u32 agent_id, u64 counter, u32 n_intervals,
                f64*n_intervals power, f64 local_fitness
    candidate:= u32 creator_id, f64 global_fitness, u32 n_entries, entry*
    entry    := u32 agent_id, u32 n_intervals, f64*n_intervals power,
                f64 local_fitness
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import gabhyme
from .objectives import AgentEnv, FitnessPair
from .schedule import OperationalSchedule, operational_power, to_power

CONTROLLER_ID = 0xFFFFFFFF


class ScheduleSet:
    """Append-only, versioned collection of operational schedules."""

    def __init__(self, schedules=()):
        self._schedules: list[OperationalSchedule] = list(schedules)
        self.version = len(self._schedules)
        self._matrix: np.ndarray | None = None

    def add(self, schedule: OperationalSchedule) -> None:
        self._schedules.append(schedule)
        self.version += 1
        self._matrix = None

    def __len__(self) -> int:
        return len(self._schedules)

    def __iter__(self):
        return iter(self._schedules)

    def __getitem__(self, idx: int) -> OperationalSchedule:
        return self._schedules[idx]

    def matrix(self) -> np.ndarray:
        """(n_schedules, horizon) power matrix for vectorized scans."""
        if self._matrix is None:
            self._matrix = np.vstack([s.power_kw for s in self._schedules])
        return self._matrix

    def local_fitnesses(self) -> list[float]:
        return [s.local_fitness for s in self._schedules]


@dataclass
class ScheduleChoice:
    """An agent's current pick with its monotone selection counter."""

    schedule: OperationalSchedule
    counter: int


@dataclass
class Candidate:
    """A believed cluster solution: one schedule per covered agent."""

    schedules: dict[int, OperationalSchedule]
    global_fitness: float
    creator: int

    def coverage(self) -> frozenset[int]:
        return frozenset(self.schedules)


@dataclass
class WorkingMemory:
    target: np.ndarray
    system_config: dict[int, ScheduleChoice] = field(default_factory=dict)
    best_candidate: Candidate | None = None


@dataclass
class NegotiationMessage:
    sender: int
    system_config: dict[int, ScheduleChoice]
    best_candidate: Candidate | None


@dataclass(frozen=True)
class MessageEvent:
    message: NegotiationMessage


@dataclass(frozen=True)
class SchedulesChangedEvent:
    pass


@dataclass
class Decider:
    """Admission gate for new operational schedules.

    ``phi`` is the absolute threshold; once pre-optimization finished it
    equals ``phi_relative`` times the best pre-optimized local fitness.
    """

    phi: float
    phi_relative: float = 1.0

    def accept(self, candidate: OperationalSchedule) -> bool:
        return candidate.local_fitness > self.phi


def decider_accept(d: Decider, candidate: OperationalSchedule) -> bool:
    return d.accept(candidate)


# ---------------------------------------------------------------------------
# wire format

def _encode_schedule(agent_id: int, schedule: OperationalSchedule) -> bytes:
    power = np.ascontiguousarray(schedule.power_kw, dtype="<f8")
    return (struct.pack("<II", agent_id, power.shape[0]) + power.tobytes()
            + struct.pack("<d", schedule.local_fitness))


def _decode_schedule(buf: bytes, off: int) -> tuple[int, OperationalSchedule, int]:
    agent_id, n = struct.unpack_from("<II", buf, off)
    off += 8
    power = np.frombuffer(buf, dtype="<f8", count=n, offset=off).copy()
    off += 8 * n
    (fitness,) = struct.unpack_from("<d", buf, off)
    return agent_id, OperationalSchedule(power, fitness), off + 8


def encode_message(msg: NegotiationMessage) -> bytes:
    parts = [struct.pack("<II", msg.sender, len(msg.system_config))]
    for agent_id in sorted(msg.system_config):
        choice = msg.system_config[agent_id]
        power = np.ascontiguousarray(choice.schedule.power_kw, dtype="<f8")
        parts.append(struct.pack("<IQI", agent_id, choice.counter, power.shape[0]))
        parts.append(power.tobytes())
        parts.append(struct.pack("<d", choice.schedule.local_fitness))
    if msg.best_candidate is None:
        parts.append(struct.pack("<B", 0))
    else:
        cand = msg.best_candidate
        parts.append(struct.pack("<BIdI", 1, cand.creator, cand.global_fitness,
                                 len(cand.schedules)))
        for agent_id in sorted(cand.schedules):
            parts.append(_encode_schedule(agent_id, cand.schedules[agent_id]))
    payload = b"".join(parts)
    return struct.pack("<I", len(payload)) + payload


def decode_message(buf: bytes) -> NegotiationMessage:
    (length,) = struct.unpack_from("<I", buf, 0)
    if len(buf) != 4 + length:
        raise ValueError("message frame length mismatch")
    off = 4
    sender, n_choices = struct.unpack_from("<II", buf, off)
    off += 8
    system_config: dict[int, ScheduleChoice] = {}
    for _ in range(n_choices):
        agent_id, counter, n = struct.unpack_from("<IQI", buf, off)
        off += 16
        power = np.frombuffer(buf, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        (fitness,) = struct.unpack_from("<d", buf, off)
        off += 8
        system_config[agent_id] = ScheduleChoice(OperationalSchedule(power, fitness),
                                                 counter)
    (has_candidate,) = struct.unpack_from("<B", buf, off)
    off += 1
    candidate = None
    if has_candidate:
        creator, fitness, n_entries = struct.unpack_from("<IdI", buf, off)
        off += 16
        schedules: dict[int, OperationalSchedule] = {}
        for _ in range(n_entries):
            agent_id, schedule, off = _decode_schedule(buf, off)
            schedules[agent_id] = schedule
        candidate = Candidate(schedules, fitness, creator)
    return NegotiationMessage(sender, system_config, candidate)


# ---------------------------------------------------------------------------
# pre-optimization

def pre_optimize(env: AgentEnv, ea_params: gabhyme.EaParams, phi_relative: float,
                 rng: np.random.Generator) -> tuple[ScheduleSet, float]:
    """Single-objective run on the local objective alone.

    Establishes the absolute acceptance threshold (best local fitness times
    the relative threshold) and seeds the feasible set with the best solution
    found plus every other archived solution already above the threshold.
    """
    params = replace(ea_params, mode="single_objective")
    archive = gabhyme.run(params, env, rng)
    best = max(archive, key=lambda ind: ind.fitness.local)
    phi = phi_relative * best.fitness.local

    def as_os(ind: gabhyme.Individual) -> OperationalSchedule:
        power = to_power(ind.genome, env.params, env.spec)
        return OperationalSchedule(operational_power(power.strategies, power.power_kw),
                                   ind.fitness.local)

    schedules = [as_os(ind) for ind in archive
                 if ind is best or ind.fitness.local > phi]
    return ScheduleSet(schedules), phi


# ---------------------------------------------------------------------------
# agent state machine

def _cluster_fitness(schedules: dict[int, OperationalSchedule],
                     target: np.ndarray) -> float:
    total = np.zeros_like(target)
    for agent_id in schedules:
        total = total + schedules[agent_id].power_kw
    return -float(np.abs(target - total).sum())


def _candidate_wins(challenger: Candidate, incumbent: Candidate | None) -> bool:
    """Merge precedence: wider coverage first, then strictly better fitness,
    then the lower creator id on exact ties."""
    if incumbent is None:
        return True
    ck, ik = challenger.coverage(), incumbent.coverage()
    if ck != ik:
        return ck > ik
    if challenger.global_fitness != incumbent.global_fitness:
        return challenger.global_fitness > incumbent.global_fitness
    return challenger.creator < incumbent.creator


class CohdaAgent:
    """Single-threaded negotiation state machine for one participant.

    Events must be handed in one at a time; distinct agents are independent.
    """

    def __init__(self, agent_id: int, target: np.ndarray,
                 schedule_set: ScheduleSet, decider: Decider) -> None:
        self.agent_id = agent_id
        self.schedule_set = schedule_set
        self.decider = decider
        self.memory = WorkingMemory(np.asarray(target, dtype=np.float64))
        self._counter = 0

    # -- update -------------------------------------------------------------

    def _merge_message(self, msg: NegotiationMessage) -> bool:
        changed = False
        for agent_id, theirs in msg.system_config.items():
            mine = self.memory.system_config.get(agent_id)
            if mine is None or theirs.counter > mine.counter:
                self.memory.system_config[agent_id] = theirs
                changed = True
        if msg.best_candidate is not None and _candidate_wins(
                msg.best_candidate, self.memory.best_candidate):
            self.memory.best_candidate = msg.best_candidate
            changed = True
        return changed

    # -- choose ---------------------------------------------------------------

    def _believed_others(self) -> dict[int, OperationalSchedule]:
        others: dict[int, OperationalSchedule] = {}
        if self.memory.best_candidate is not None:
            for agent_id, schedule in self.memory.best_candidate.schedules.items():
                if agent_id != self.agent_id:
                    others[agent_id] = schedule
        for agent_id, choice in self.memory.system_config.items():
            if agent_id != self.agent_id:
                others[agent_id] = choice.schedule
        return others

    def _choose(self) -> bool:
        if len(self.schedule_set) == 0:
            return False
        others = self._believed_others()
        residual = self.memory.target.copy()
        for schedule in others.values():
            residual -= schedule.power_kw
        gaps = np.abs(residual[np.newaxis, :] - self.schedule_set.matrix()).sum(axis=1)
        best_idx = int(np.argmin(gaps))
        own = self.schedule_set[best_idx]
        challenger = Candidate({**others, self.agent_id: own}, -float(gaps[best_idx]),
                               self.agent_id)
        changed = False
        if _candidate_wins(challenger, self.memory.best_candidate):
            self.memory.best_candidate = challenger
            chosen = own
            changed = True
        else:
            chosen = self.memory.best_candidate.schedules.get(self.agent_id, own)
        current = self.memory.system_config.get(self.agent_id)
        if current is None or not np.array_equal(current.schedule.power_kw,
                                                 chosen.power_kw):
            self._counter += 1
            self.memory.system_config[self.agent_id] = ScheduleChoice(chosen,
                                                                      self._counter)
            changed = True
        return changed

    # -- event chain ----------------------------------------------------------

    def handle_event(self, event) -> NegotiationMessage | None:
        """Run update / choose / send; returns the broadcast message iff the
        working memory changed."""
        changed = False
        if isinstance(event, MessageEvent):
            try:
                changed = self._merge_message(event.message)
            except (AttributeError, TypeError, ValueError):
                return None  # malformed message: drop, stay consistent
        elif not isinstance(event, SchedulesChangedEvent):
            raise TypeError(f"unknown event {event!r}")
        changed = self._choose() or changed
        if not changed:
            return None
        return NegotiationMessage(
            self.agent_id,
            dict(self.memory.system_config),
            self.memory.best_candidate,
        )

    def add_schedules(self, schedules) -> int:
        """Admit decider-approved schedules; returns how many were added."""
        added = 0
        for schedule in schedules:
            if self.decider.accept(schedule):
                self.schedule_set.add(schedule)
                added += 1
        return added

    def chosen_schedule(self) -> OperationalSchedule | None:
        if self.memory.best_candidate is None:
            return None
        return self.memory.best_candidate.schedules.get(self.agent_id)

    def state_fingerprint(self) -> tuple:
        """Cheap equality token for quiescence detection."""
        cand = self.memory.best_candidate
        return (
            tuple(sorted((a, c.counter) for a, c in self.memory.system_config.items())),
            None if cand is None else (cand.global_fitness, tuple(sorted(cand.schedules))),
            self.schedule_set.version,
        )


def handle_event(agent: CohdaAgent, event) -> NegotiationMessage | None:
    return agent.handle_event(event)
