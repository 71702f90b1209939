"""Deterministic simulated network and negotiation harness.

The canonical mode is a single-threaded virtual-time tick scheduler: per tick
every due message is delivered in a deterministic order, then every agent
advances its local optimizer by a configurable number of generations and
feeds freshly archived schedules through its decider.  Identical (setup,
seed) pairs produce byte-identical run records; a record contains enough of
the run (thresholds, schedule streams, optimizer completion ticks) to replay
the negotiation without re-running the optimizers.

A free-running threaded stress mode exists for exercising the agent logic
under real concurrency; it promises no determinism and is not used by the
metrics pipeline.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np

from . import gabhyme
from .cohda import (CONTROLLER_ID, CohdaAgent, Decider, MessageEvent,
                    NegotiationMessage, SchedulesChangedEvent, ScheduleSet,
                    decode_message, encode_message, pre_optimize)
from .objectives import AgentEnv, FitnessPair, normalize_global
from .schedule import OperationalSchedule, operational_power, to_power


@dataclass(frozen=True)
class Topology:
    kind: str
    n_agents: int
    adjacency: tuple[tuple[int, ...], ...]


def build_topology(kind: str, n_agents: int, seed: int | None = None,
                   k: int = 2, p: float = 0.1) -> Topology:
    """Connected communication graph; ``small_world`` uses a ring lattice
    with k neighbours per side and rewiring probability p."""
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if kind == "complete":
        graph = nx.complete_graph(n_agents)
    elif kind == "ring":
        graph = nx.cycle_graph(n_agents) if n_agents > 2 else nx.path_graph(n_agents)
    elif kind == "small_world":
        if n_agents <= 2 * k:
            graph = nx.complete_graph(n_agents)
        else:
            graph = nx.watts_strogatz_graph(n_agents, 2 * k, p, seed=seed)
    else:
        raise ValueError(f"unknown topology kind {kind!r}")
    if n_agents > 1 and not nx.is_connected(graph):
        raise ValueError("topology parameterization is disconnected")
    adjacency = tuple(tuple(sorted(graph.neighbors(i))) for i in range(n_agents))
    return Topology(kind, n_agents, adjacency)


@dataclass(frozen=True)
class DeliverySchedule:
    mode: str = "round_robin"  # or "random_order"
    latency: int = 1

    def __post_init__(self) -> None:
        if self.mode not in ("round_robin", "random_order"):
            raise ValueError(f"unknown delivery mode {self.mode!r}")
        if self.latency < 1:
            raise ValueError("latency must be >= 1 tick")


@dataclass
class AgentSetup:
    """How one agent participates in a negotiation.

    kind:
      optimizing - pre-optimization plus a parallel multi-criteria optimizer
      sampling   - a fixed-size set of randomly constructed valid schedules
      fixed      - an externally given schedule set (e.g. a generator profile)
    """

    agent_id: int
    kind: str
    env: AgentEnv | None = None
    ea_params: gabhyme.EaParams | None = None
    preopt_params: gabhyme.EaParams | None = None
    phi_relative: float = 0.5
    sampling_count: int = 10_000
    fixed_schedules: list[OperationalSchedule] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("optimizing", "sampling", "fixed"):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind in ("optimizing", "sampling") and self.env is None:
            raise ValueError(f"{self.kind} agents need an evaluation context")
        if self.kind == "fixed" and not self.fixed_schedules:
            raise ValueError("fixed agents need at least one schedule")


@dataclass
class NegotiationSetup:
    name: str
    target: np.ndarray
    agents: list[AgentSetup]
    topology: Topology
    delivery: DeliverySchedule = field(default_factory=DeliverySchedule)
    ea_generations_per_tick: int = 1

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.topology.n_agents != len(self.agents):
            raise ValueError("topology size does not match the agent list")
        if [a.agent_id for a in self.agents] != list(range(len(self.agents))):
            raise ValueError("agents must be listed in id order 0..n-1")


@dataclass
class RunRecord:
    """Everything needed to audit and replay one negotiation."""

    seed: int
    name: str
    n_agents: int
    horizon: int
    target: list[float]
    topology_kind: str
    delivery_mode: str
    delivery_latency: int
    ea_generations_per_tick: int
    phis: dict[int, float] = field(default_factory=dict)
    seed_schedules: dict[int, list[dict]] = field(default_factory=dict)
    schedule_events: list[dict] = field(default_factory=list)
    delivery_events: list[dict] = field(default_factory=list)
    state_events: list[dict] = field(default_factory=list)
    ea_done_ticks: dict[int, int] = field(default_factory=dict)
    final_choices: dict[int, dict] = field(default_factory=dict)
    schedule_set_fitness: dict[int, list[float]] = field(default_factory=dict)
    final_fitness: float = float("nan")
    fulfillment: float = float("nan")
    ticks: int = 0
    messages_sent: int = 0
    messages_delivered: int = 0
    budget_exhausted: bool = False

    def final_cluster_power(self) -> np.ndarray:
        total = np.zeros(self.horizon)
        for entry in self.final_choices.values():
            total += np.asarray(entry["power"])
        return total

    # -- serialization (line-delimited JSON; floats round-trip exactly) ------

    def to_jsonl(self) -> str:
        header = {
            "kind": "header", "version": 1, "seed": self.seed, "name": self.name,
            "n_agents": self.n_agents, "horizon": self.horizon,
            "target": self.target, "topology_kind": self.topology_kind,
            "delivery_mode": self.delivery_mode,
            "delivery_latency": self.delivery_latency,
            "ea_generations_per_tick": self.ea_generations_per_tick,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for agent_id in sorted(self.phis):
            lines.append(json.dumps(
                {"kind": "phi", "agent": agent_id, "phi": self.phis[agent_id],
                 "ea_done_tick": self.ea_done_ticks.get(agent_id, 0)},
                sort_keys=True))
        for agent_id in sorted(self.seed_schedules):
            for entry in self.seed_schedules[agent_id]:
                lines.append(json.dumps(
                    {"kind": "seed_schedule", "agent": agent_id, **entry},
                    sort_keys=True))
        for entry in self.schedule_events:
            lines.append(json.dumps({"kind": "schedule_added", **entry}, sort_keys=True))
        for entry in self.delivery_events:
            lines.append(json.dumps({"kind": "delivery", **entry}, sort_keys=True))
        for entry in self.state_events:
            lines.append(json.dumps({"kind": "state", **entry}, sort_keys=True))
        for agent_id in sorted(self.final_choices):
            lines.append(json.dumps(
                {"kind": "final", "agent": agent_id, **self.final_choices[agent_id]},
                sort_keys=True))
        lines.append(json.dumps(
            {"kind": "result", "final_fitness": self.final_fitness,
             "fulfillment": self.fulfillment, "ticks": self.ticks,
             "messages_sent": self.messages_sent,
             "messages_delivered": self.messages_delivered,
             "budget_exhausted": self.budget_exhausted,
             "schedule_set_fitness": {str(k): v for k, v in
                                      sorted(self.schedule_set_fitness.items())}},
            sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        header = records[0]
        if header.get("kind") != "header":
            raise ValueError("record does not start with a header line")
        rec = cls(seed=header["seed"], name=header["name"],
                  n_agents=header["n_agents"], horizon=header["horizon"],
                  target=header["target"], topology_kind=header["topology_kind"],
                  delivery_mode=header["delivery_mode"],
                  delivery_latency=header["delivery_latency"],
                  ea_generations_per_tick=header["ea_generations_per_tick"])
        for entry in records[1:]:
            kind = entry.pop("kind")
            if kind == "phi":
                rec.phis[entry["agent"]] = entry["phi"]
                rec.ea_done_ticks[entry["agent"]] = entry["ea_done_tick"]
            elif kind == "seed_schedule":
                rec.seed_schedules.setdefault(entry.pop("agent"), []).append(entry)
            elif kind == "schedule_added":
                rec.schedule_events.append(entry)
            elif kind == "delivery":
                rec.delivery_events.append(entry)
            elif kind == "state":
                rec.state_events.append(entry)
            elif kind == "final":
                rec.final_choices[entry.pop("agent")] = entry
            elif kind == "result":
                rec.final_fitness = entry["final_fitness"]
                rec.fulfillment = entry["fulfillment"]
                rec.ticks = entry["ticks"]
                rec.messages_sent = entry["messages_sent"]
                rec.messages_delivered = entry["messages_delivered"]
                rec.budget_exhausted = entry["budget_exhausted"]
                rec.schedule_set_fitness = {int(k): v for k, v in
                                            entry["schedule_set_fitness"].items()}
            else:
                raise ValueError(f"unknown record line kind {kind!r}")
        return rec


def agent_rng(seed: int, agent_id: int) -> np.random.Generator:
    """Per-agent stream derived from the master seed and the agent id only,
    so one agent's parameters never perturb another agent's randomness."""
    return np.random.default_rng(np.random.SeedSequence([seed, agent_id]))


def _net_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x6E6574]))


def _schedule_entry(os: OperationalSchedule) -> dict:
    return {"power": [float(v) for v in os.power_kw],
            "local_fitness": float(os.local_fitness)}


class _Mailroom:
    """In-flight message store with deterministic delivery order."""

    def __init__(self, delivery: DeliverySchedule, rng: np.random.Generator) -> None:
        self.delivery = delivery
        self.rng = rng
        self._pending: list[tuple[int, int, int, int, bytes]] = []
        self._seq = 0
        self.sent = 0
        self.delivered = 0

    def send(self, tick: int, src: int, dst: int, payload: bytes) -> None:
        self._pending.append((tick + self.delivery.latency, self._seq, src, dst, payload))
        self._seq += 1
        self.sent += 1

    def pending(self) -> int:
        return len(self._pending)

    def due(self, tick: int) -> list[tuple[int, int, bytes]]:
        ready = [m for m in self._pending if m[0] <= tick]
        self._pending = [m for m in self._pending if m[0] > tick]
        ready.sort(key=lambda m: (m[3], m[2], m[1]))  # (dst, src, seq)
        if self.delivery.mode == "random_order" and len(ready) > 1:
            order = self.rng.permutation(len(ready))
            ready = [ready[int(i)] for i in order]
        self.delivered += len(ready)
        return [(m[2], m[3], m[4]) for m in ready]


class _AgentRuntime:
    """One agent's negotiation state plus its optional local optimizer."""

    def __init__(self, setup: AgentSetup, target: np.ndarray, neighbors,
                 rng: np.random.Generator, record: RunRecord) -> None:
        self.setup = setup
        self.neighbors = list(neighbors)
        self.rng = rng
        self.ea: gabhyme.EvolutionRun | None = None
        self.inbox_schedules: list[OperationalSchedule] = []
        aid = setup.agent_id

        if setup.kind == "optimizing":
            preopt = setup.preopt_params or setup.ea_params
            schedule_set, phi = pre_optimize(setup.env, preopt,
                                             setup.phi_relative, rng)
            decider = Decider(phi, setup.phi_relative)
            env = setup.env.with_phi(phi)
            if setup.ea_params is not None:
                self.ea = gabhyme.EvolutionRun(
                    setup.ea_params, env, rng,
                    schedule_sink=lambda os, pair: self.inbox_schedules.append(os))
                # drop solutions already archived during construction
                self.inbox_schedules.clear()
        elif setup.kind == "sampling":
            schedules = []
            for _ in range(setup.sampling_count):
                genome = gabhyme.sample_genome(setup.env, rng)
                pair = setup.env.evaluate_genome(genome)
                power = to_power(genome, setup.env.params, setup.env.spec)
                schedules.append(OperationalSchedule(
                    operational_power(power.strategies, power.power_kw),
                    pair.local))
            schedule_set = ScheduleSet(schedules)
            decider = Decider(float("-inf"))
        else:  # fixed
            schedule_set = ScheduleSet(setup.fixed_schedules)
            decider = Decider(float("-inf"))

        record.phis[aid] = decider.phi
        record.seed_schedules[aid] = [_schedule_entry(s) for s in schedule_set]
        self.agent = CohdaAgent(aid, target, schedule_set, decider)

    def ea_done(self) -> bool:
        return self.ea is None or self.ea.done

    def step_ea(self, generations: int) -> list[OperationalSchedule]:
        """Advance the optimizer and return decider-approved new schedules."""
        if self.ea is not None and not self.ea.done:
            for _ in range(generations):
                if self.ea.step():
                    break
        fresh = self.inbox_schedules
        self.inbox_schedules = []
        return [os for os in fresh if self.agent.decider.accept(os)]


def run_negotiation(setup: NegotiationSetup, seed: int,
                    budget: int = 100_000) -> RunRecord:
    """Drive all agents under the virtual-time scheduler until quiescence
    (all optimizers finished, no in-flight messages, no agent changed state
    in the last tick) or until the tick budget is exhausted."""
    target = setup.target
    record = RunRecord(
        seed=seed, name=setup.name, n_agents=len(setup.agents),
        horizon=len(target), target=[float(v) for v in target],
        topology_kind=setup.topology.kind, delivery_mode=setup.delivery.mode,
        delivery_latency=setup.delivery.latency,
        ea_generations_per_tick=setup.ea_generations_per_tick)

    runtimes = [
        _AgentRuntime(agent_setup, target,
                      setup.topology.adjacency[agent_setup.agent_id],
                      agent_rng(seed, agent_setup.agent_id), record)
        for agent_setup in setup.agents
    ]
    mailroom = _Mailroom(setup.delivery, _net_rng(seed))

    def broadcast(tick: int, rt: _AgentRuntime, msg: NegotiationMessage | None) -> None:
        if msg is None:
            return
        payload = encode_message(msg)
        for dst in rt.neighbors:
            mailroom.send(tick, rt.setup.agent_id, dst, payload)

    def log_state(tick: int, rt: _AgentRuntime) -> None:
        cand = rt.agent.memory.best_candidate
        if cand is None:
            return
        own = rt.agent.chosen_schedule()
        record.state_events.append({
            "tick": tick, "agent": rt.setup.agent_id,
            "fitness": float(cand.global_fitness),
            "coverage": len(cand.schedules),
            "local": float(own.local_fitness) if own is not None else 0.0,
        })

    # message zero: the controller hands every agent the target schedule
    bootstrap = encode_message(NegotiationMessage(CONTROLLER_ID, {}, None))
    for rt in runtimes:
        mailroom.send(-setup.delivery.latency, CONTROLLER_ID, rt.setup.agent_id,
                      bootstrap)

    tick = 0
    quiescent = False
    while tick < budget:
        changed_this_tick = False
        for src, dst, payload in mailroom.due(tick):
            record.delivery_events.append({"tick": tick, "src": int(src), "dst": int(dst)})
            rt = runtimes[dst]
            before = rt.agent.state_fingerprint()
            out = rt.agent.handle_event(MessageEvent(decode_message(payload)))
            if rt.agent.state_fingerprint() != before:
                changed_this_tick = True
                log_state(tick, rt)
            broadcast(tick, rt, out)

        for rt in runtimes:
            was_done = rt.ea_done()
            accepted = rt.step_ea(setup.ea_generations_per_tick)
            if not was_done and rt.ea_done():
                record.ea_done_ticks[rt.setup.agent_id] = tick
            if accepted:
                for os in accepted:
                    rt.agent.schedule_set.add(os)
                    record.schedule_events.append(
                        {"tick": tick, "agent": rt.setup.agent_id,
                         **_schedule_entry(os)})
                out = rt.agent.handle_event(SchedulesChangedEvent())
                changed_this_tick = True
                log_state(tick, rt)
                broadcast(tick, rt, out)

        all_done = all(rt.ea_done() for rt in runtimes)
        if all_done and mailroom.pending() == 0 and not changed_this_tick:
            quiescent = True
            tick += 1
            break
        tick += 1

    record.ticks = tick
    record.budget_exhausted = not quiescent
    record.messages_sent = mailroom.sent
    record.messages_delivered = mailroom.delivered
    for rt in runtimes:
        aid = rt.setup.agent_id
        record.ea_done_ticks.setdefault(aid, 0)
        record.schedule_set_fitness[aid] = [float(v) for v in
                                            rt.agent.schedule_set.local_fitnesses()]
        chosen = rt.agent.chosen_schedule()
        if chosen is not None:
            record.final_choices[aid] = _schedule_entry(chosen)
    record.final_fitness = -float(np.abs(target - record.final_cluster_power()).sum())
    record.fulfillment = normalize_global(record.final_fitness, target)
    return record


def replay(record: RunRecord) -> RunRecord:
    """Re-run a logged negotiation from its schedule streams.

    The optimizers are replaced by the logged per-tick schedule additions (a
    schedule in the log has already passed its decider), so the agent state
    machines walk through the identical event sequence and must arrive at the
    identical final state.
    """
    target = np.asarray(record.target, dtype=np.float64)
    topology = build_topology(record.topology_kind, record.n_agents, seed=record.seed)
    delivery = DeliverySchedule(record.delivery_mode, record.delivery_latency)
    out = RunRecord(
        seed=record.seed, name=record.name, n_agents=record.n_agents,
        horizon=record.horizon, target=list(record.target),
        topology_kind=record.topology_kind, delivery_mode=record.delivery_mode,
        delivery_latency=record.delivery_latency,
        ea_generations_per_tick=record.ea_generations_per_tick)
    out.phis = dict(record.phis)
    out.ea_done_ticks = dict(record.ea_done_ticks)
    out.seed_schedules = {a: [dict(e) for e in entries]
                          for a, entries in record.seed_schedules.items()}

    agents = {}
    for agent_id in range(record.n_agents):
        seeds = [OperationalSchedule(np.asarray(e["power"]), e["local_fitness"])
                 for e in record.seed_schedules.get(agent_id, [])]
        agents[agent_id] = CohdaAgent(agent_id, target, ScheduleSet(seeds),
                                      Decider(record.phis.get(agent_id, float("-inf"))))

    additions: dict[int, list[tuple[int, OperationalSchedule]]] = {}
    for entry in record.schedule_events:
        additions.setdefault(entry["tick"], []).append(
            (entry["agent"], OperationalSchedule(np.asarray(entry["power"]),
                                                 entry["local_fitness"])))
    last_add = {}
    for entry in record.schedule_events:
        last_add[entry["agent"]] = max(entry["tick"], last_add.get(entry["agent"], 0))
    ea_done = {a: record.ea_done_ticks.get(a, 0) for a in agents}

    mailroom = _Mailroom(delivery, _net_rng(record.seed))

    def broadcast(tick: int, agent_id: int, msg: NegotiationMessage | None) -> None:
        if msg is None:
            return
        payload = encode_message(msg)
        for dst in topology.adjacency[agent_id]:
            mailroom.send(tick, agent_id, dst, payload)

    def log_state(tick: int, agent_id: int) -> None:
        cand = agents[agent_id].memory.best_candidate
        if cand is None:
            return
        own = agents[agent_id].chosen_schedule()
        out.state_events.append({
            "tick": tick, "agent": agent_id,
            "fitness": float(cand.global_fitness),
            "coverage": len(cand.schedules),
            "local": float(own.local_fitness) if own is not None else 0.0,
        })

    bootstrap = encode_message(NegotiationMessage(CONTROLLER_ID, {}, None))
    for agent_id in sorted(agents):
        mailroom.send(-delivery.latency, CONTROLLER_ID, agent_id, bootstrap)

    tick = 0
    quiescent = False
    budget = max(record.ticks + 1, 1)
    while tick < budget:
        changed_this_tick = False
        for src, dst, payload in mailroom.due(tick):
            out.delivery_events.append({"tick": tick, "src": int(src), "dst": int(dst)})
            agent = agents[dst]
            before = agent.state_fingerprint()
            msg = agent.handle_event(MessageEvent(decode_message(payload)))
            if agent.state_fingerprint() != before:
                changed_this_tick = True
                log_state(tick, dst)
            broadcast(tick, dst, msg)

        per_agent: dict[int, list[OperationalSchedule]] = {}
        for agent_id, os in additions.get(tick, []):
            per_agent.setdefault(agent_id, []).append(os)
        for agent_id in sorted(agents):
            batch = per_agent.get(agent_id)
            if not batch:
                continue
            for os in batch:
                agents[agent_id].schedule_set.add(os)
                out.schedule_events.append({"tick": tick, "agent": agent_id,
                                            **_schedule_entry(os)})
            msg = agents[agent_id].handle_event(SchedulesChangedEvent())
            changed_this_tick = True
            log_state(tick, agent_id)
            broadcast(tick, agent_id, msg)

        all_done = all(tick >= ea_done[a] for a in agents)
        if all_done and mailroom.pending() == 0 and not changed_this_tick:
            quiescent = True
            tick += 1
            break
        tick += 1

    out.ticks = tick
    out.budget_exhausted = not quiescent
    out.messages_sent = mailroom.sent
    out.messages_delivered = mailroom.delivered
    for agent_id in sorted(agents):
        out.schedule_set_fitness[agent_id] = [
            float(v) for v in agents[agent_id].schedule_set.local_fitnesses()]
        chosen = agents[agent_id].chosen_schedule()
        if chosen is not None:
            out.final_choices[agent_id] = _schedule_entry(chosen)
    out.final_fitness = -float(np.abs(target - out.final_cluster_power()).sum())
    out.fulfillment = normalize_global(out.final_fitness, target)
    return out


def run_negotiation_stress(setup: NegotiationSetup, seed: int,
                           duration_s: float = 2.0) -> dict[int, OperationalSchedule]:
    """Free-running concurrent mode: one thread per agent, linearizable
    inboxes, no determinism promised.  Returns the final chosen schedules."""
    target = setup.target
    record = RunRecord(seed=seed, name=setup.name, n_agents=len(setup.agents),
                       horizon=len(target), target=[float(v) for v in target],
                       topology_kind=setup.topology.kind,
                       delivery_mode=setup.delivery.mode,
                       delivery_latency=setup.delivery.latency,
                       ea_generations_per_tick=setup.ea_generations_per_tick)
    runtimes = [
        _AgentRuntime(agent_setup, target,
                      setup.topology.adjacency[agent_setup.agent_id],
                      agent_rng(seed, agent_setup.agent_id), record)
        for agent_setup in setup.agents
    ]
    inboxes: dict[int, queue.Queue] = {rt.setup.agent_id: queue.Queue()
                                       for rt in runtimes}
    stop = threading.Event()

    def worker(rt: _AgentRuntime) -> None:
        def send_all(msg):
            if msg is None:
                return
            payload = encode_message(msg)
            for dst in rt.neighbors:
                inboxes[dst].put(payload)

        send_all(rt.agent.handle_event(
            MessageEvent(NegotiationMessage(CONTROLLER_ID, {}, None))))
        while not stop.is_set():
            accepted = rt.step_ea(1)
            if accepted:
                for os in accepted:
                    rt.agent.schedule_set.add(os)
                send_all(rt.agent.handle_event(SchedulesChangedEvent()))
            try:
                payload = inboxes[rt.setup.agent_id].get(timeout=0.002)
            except queue.Empty:
                continue
            send_all(rt.agent.handle_event(MessageEvent(decode_message(payload))))

    threads = [threading.Thread(target=worker, args=(rt,), daemon=True)
               for rt in runtimes]
    for t in threads:
        t.start()
    stop_timer = threading.Timer(duration_s, stop.set)
    stop_timer.start()
    for t in threads:
        t.join(duration_s + 5.0)
    stop.set()
    stop_timer.cancel()
    return {rt.setup.agent_id: rt.agent.chosen_schedule() for rt in runtimes}
