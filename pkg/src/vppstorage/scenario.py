"""Scenario construction, profile plumbing, evaluation and sweeps.

A scenario file is one human-readable YAML document describing the horizon,
the agents (role, storage, profiles, prices), topology, method and algorithm
parameters.  Profiles are inline vectors, CSV references
(``{file: path}``, columns ``interval_index,value`` with a header) or
synthetic specs (``{synthetic: {kind: ..., seed: ...}}``).  The bundled
synthetic generators replace unavailable measurement data sets: a
double-peaked diurnal household load, a daytime industry plateau with peaks,
a clamped solar bell and two-level day/night market prices, all seeded.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .cohda import ScheduleSet
from .gabhyme import EaParams, EvolutionRun
from .objectives import (AgentEnv, LoadProfile, LocalObjective, MarketPrices,
                         PeakTariff, normalize_global)
from .schedule import (CoupledGeneratorProfile, OperationalSchedule,
                       operational_power, to_power)
from .simnet import (AgentSetup, DeliverySchedule, NegotiationSetup, RunRecord,
                     Topology, build_topology, run_negotiation)
from .storage import IntervalSpec, StorageParams
from . import gabhyme

METHODS = ("gabhyme_n", "gabhyme_p", "ea_n", "ea_p", "sampling")
ROLES = ("psp_arbitrage", "industry_peak_big", "industry_peak_small",
         "household_sdm", "fixed_generator")


class ConfigError(ValueError):
    """Scenario configuration is malformed."""


# ---------------------------------------------------------------------------
# synthetic profiles

def _tod_hours(n_intervals: int, minutes: float) -> np.ndarray:
    return (np.arange(n_intervals) + 0.5) * minutes / 60.0


def synth_household_load(n_intervals: int, minutes: float, seed: int,
                         daily_energy_band=(8.0, 12.0)) -> np.ndarray:
    """Double-peaked diurnal shape, normalized to a seeded daily energy
    inside the configured band (kWh per 24 h)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4848]))
    tod = _tod_hours(n_intervals, minutes) % 24.0
    base = 0.15 + 0.5 * np.exp(-0.5 * ((tod - 7.5) / 1.2) ** 2) \
        + 0.9 * np.exp(-0.5 * ((tod - 19.0) / 2.0) ** 2)
    noisy = np.maximum(base * (1.0 + 0.1 * rng.standard_normal(n_intervals)), 0.02)
    hours_total = n_intervals * minutes / 60.0
    target = rng.uniform(*daily_energy_band) * hours_total / 24.0
    energy = float(np.sum(noisy) * minutes / 60.0)
    return noisy * (target / energy)


def synth_industry_load(n_intervals: int, minutes: float, seed: int,
                        peak_kw: float = 100.0) -> np.ndarray:
    """Daytime plateau with one dominant seeded peak plus minor bumps;
    night base load."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x494E]))
    tod = _tod_hours(n_intervals, minutes) % 24.0
    plateau = np.where((tod >= 7.0) & (tod < 18.0), 0.5, 0.18)
    center = rng.uniform(9.0, 16.0)
    plateau = plateau + 0.5 * np.exp(-0.5 * ((tod - center) / rng.uniform(0.8, 1.5)) ** 2)
    for _ in range(2):
        bump = rng.uniform(8.0, 17.0)
        plateau = plateau + rng.uniform(0.05, 0.15) * np.exp(
            -0.5 * ((tod - bump) / rng.uniform(0.4, 0.8)) ** 2)
    noisy = plateau * (1.0 + 0.03 * rng.standard_normal(n_intervals))
    return np.maximum(noisy, 0.05) * peak_kw


def synth_spp_output(n_intervals: int, minutes: float, seed: int,
                     peak_kw: float = 10.0, sunrise: float = 6.0,
                     sunset: float = 20.0) -> np.ndarray:
    """Clamped sine daylight bell with seeded noise; zero outside daylight."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5350]))
    tod = _tod_hours(n_intervals, minutes) % 24.0
    daylight = (tod > sunrise) & (tod < sunset)
    phase = np.clip((tod - sunrise) / (sunset - sunrise), 0.0, 1.0)
    bell = np.sin(np.pi * phase) ** 1.5
    noisy = bell * (1.0 + 0.08 * rng.standard_normal(n_intervals))
    return np.where(daylight, np.maximum(noisy, 0.0), 0.0) * peak_kw


def synth_prices(n_intervals: int, minutes: float, seed: int,
                 base: float = 0.25, night_factor: float = 0.7,
                 sell_factor: float = 0.8, jitter: float = 0.04
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Two-level day/night buy price with seeded jitter; the sell price is a
    fixed fraction of the buy price (currency per kWh)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5052]))
    tod = _tod_hours(n_intervals, minutes) % 24.0
    day = (tod >= 8.0) & (tod < 20.0)
    buy = np.where(day, base, base * night_factor)
    buy = buy * (1.0 + jitter * rng.standard_normal(n_intervals))
    buy = np.maximum(buy, 0.01)
    return buy, buy * sell_factor


SYNTH_KINDS = {
    "household": synth_household_load,
    "industry": synth_industry_load,
    "spp": synth_spp_output,
}


# ---------------------------------------------------------------------------
# CSV ingestion

def load_profile_csv(path, n_intervals: int, nonnegative: bool = False) -> np.ndarray:
    """Read an (interval_index, value) CSV with a header row."""
    with open(path, newline="") as fh:
        return parse_profile_csv(fh, n_intervals, nonnegative, name=str(path))


def parse_profile_csv(fh, n_intervals: int, nonnegative: bool = False,
                      name: str = "<csv>") -> np.ndarray:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        raise ConfigError(f"{name}: empty profile file")
    values = []
    for row in reader:
        if not row:
            continue
        try:
            values.append(float(row[1]))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{name}: bad row {row!r}") from exc
    if len(values) != n_intervals:
        raise ConfigError(
            f"{name}: {len(values)} rows do not match the horizon {n_intervals}")
    arr = np.asarray(values, dtype=np.float64)
    if nonnegative and arr.min() < 0:
        raise ConfigError(f"{name}: generator output must be nonnegative")
    return arr


def write_profile_csv(path, values: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["interval_index", "value"])
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# configuration

@dataclass
class AgentSpec:
    role: str
    storage: dict | None = None
    load_profile: object = None        # list | {"file": ...} | {"synthetic": ...}
    generation_profile: object = None
    prices: dict | None = None         # {"buy": profile, "sell": profile} | {"synthetic": ...}
    peak_tariff: float | None = None
    capacity_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")
        needs = {
            "psp_arbitrage": ("storage", "prices"),
            "industry_peak_big": ("storage", "load_profile", "peak_tariff"),
            "industry_peak_small": ("storage", "load_profile", "peak_tariff"),
            "household_sdm": ("storage", "load_profile", "generation_profile", "prices"),
            "fixed_generator": ("generation_profile",),
        }[self.role]
        for attr in needs:
            if getattr(self, attr) is None:
                raise ConfigError(f"role {self.role} requires {attr}")


@dataclass
class ScenarioConfig:
    name: str
    n_intervals: int
    agents: list[AgentSpec]
    minutes_per_interval: float = 15.0
    topology: dict = field(default_factory=lambda: {"kind": "complete"})
    delivery: dict = field(default_factory=lambda: {"mode": "round_robin", "latency": 1})
    ea_generations_per_tick: int = 1
    target: list | None = None
    target_fraction: float = 0.4
    trials: int = 10
    method: str = "gabhyme_n"
    ea: dict = field(default_factory=dict)
    preopt: dict = field(default_factory=dict)
    phi_relative: float = 0.5
    base_seed: int = 1
    budget: int = 100_000
    peak_formula: str = "corrected"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; pick one of {METHODS}")
        if self.peak_formula not in ("corrected", "as_printed"):
            raise ConfigError("peak_formula must be corrected or as_printed")
        self.agents = [a if isinstance(a, AgentSpec) else AgentSpec(**a)
                       for a in self.agents]
        if self.target is not None and len(self.target) != self.n_intervals:
            raise ConfigError("target length does not match the horizon")


def serialize_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(asdict(config), sort_keys=True, default_flow_style=None)


def parse_config(text: str) -> ScenarioConfig:
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a mapping")
    try:
        return ScenarioConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


def save_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(serialize_config(config))


# ---------------------------------------------------------------------------
# resolution: config -> runtime objects

def _resolve_profile(spec, n: int, minutes: float, nonnegative: bool,
                     base_dir: Path | None, what: str) -> np.ndarray:
    if isinstance(spec, (list, tuple, np.ndarray)):
        arr = np.asarray(spec, dtype=np.float64)
        if len(arr) != n:
            raise ConfigError(f"{what}: inline profile length {len(arr)} != horizon {n}")
        if nonnegative and arr.size and arr.min() < 0:
            raise ConfigError(f"{what}: generator output must be nonnegative")
        return arr
    if isinstance(spec, dict) and "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return load_profile_csv(path, n, nonnegative)
    if isinstance(spec, dict) and "synthetic" in spec:
        params = dict(spec["synthetic"])
        kind = params.pop("kind")
        seed = params.pop("seed", 0)
        if kind not in SYNTH_KINDS:
            raise ConfigError(f"{what}: unknown synthetic kind {kind!r}")
        return SYNTH_KINDS[kind](n, minutes, seed, **params)
    raise ConfigError(f"{what}: cannot interpret profile spec {spec!r}")


def _resolve_prices(spec: dict, n: int, minutes: float,
                    base_dir: Path | None) -> MarketPrices:
    if "synthetic" in spec:
        params = dict(spec["synthetic"])
        params.pop("kind", None)
        seed = params.pop("seed", 0)
        buy, sell = synth_prices(n, minutes, seed, **params)
        return MarketPrices(buy, sell)
    buy = _resolve_profile(spec["buy"], n, minutes, False, base_dir, "buy price")
    sell = _resolve_profile(spec["sell"], n, minutes, False, base_dir, "sell price")
    return MarketPrices(buy, sell)


@dataclass
class ResolvedAgent:
    index: int
    role: str
    storage: StorageParams | None
    objective: LocalObjective
    coupled: CoupledGeneratorProfile | None
    generation: np.ndarray | None
    has_local_objective: bool


def resolve_agents(config: ScenarioConfig, base_dir: Path | None = None
                   ) -> list[ResolvedAgent]:
    n, minutes = config.n_intervals, config.minutes_per_interval
    resolved = []
    for idx, spec in enumerate(config.agents):
        what = f"agent {idx} ({spec.role})"
        storage = None
        if spec.storage is not None:
            kwargs = dict(spec.storage)
            kwargs["capacity_kwh"] = kwargs["capacity_kwh"] * spec.capacity_scale
            storage = StorageParams(**kwargs)
        coupled = None
        generation = None
        if spec.generation_profile is not None:
            generation = _resolve_profile(spec.generation_profile, n, minutes,
                                          True, base_dir, what)
        # a storage without an attached generator has no free charging source:
        # cap the charge strategy at zero so filling up requires buying
        no_source = CoupledGeneratorProfile(np.zeros(n))
        if spec.role == "psp_arbitrage":
            prices = _resolve_prices(spec.prices, n, minutes, base_dir)
            objective = LocalObjective.arbitrage(prices)
            coupled = no_source
        elif spec.role in ("industry_peak_big", "industry_peak_small"):
            load = _resolve_profile(spec.load_profile, n, minutes, False,
                                    base_dir, what)
            objective = LocalObjective.peak_shaving(
                LoadProfile(load), PeakTariff(spec.peak_tariff),
                formula=config.peak_formula)
            coupled = no_source
        elif spec.role == "household_sdm":
            load = _resolve_profile(spec.load_profile, n, minutes, False,
                                    base_dir, what)
            prices = _resolve_prices(spec.prices, n, minutes, base_dir)
            objective = LocalObjective.local_sdm(LoadProfile(load), prices)
            coupled = CoupledGeneratorProfile(generation)
        else:  # fixed_generator
            objective = LocalObjective.none()
        resolved.append(ResolvedAgent(idx, spec.role, storage, objective,
                                      coupled, generation,
                                      spec.role != "fixed_generator"))
    return resolved


#: windows of the synthetic two-sided day product, hours of day: the cluster
#: absorbs power at night and delivers it during the day
NIGHT_WINDOW = (0.0, 6.0)
DAY_WINDOW = (8.0, 20.0)


def _product_masks(n: int, minutes: float) -> tuple[np.ndarray, np.ndarray]:
    tod = _tod_hours(n, minutes) % 24.0
    day = (tod >= DAY_WINDOW[0]) & (tod < DAY_WINDOW[1])
    night = (tod >= NIGHT_WINDOW[0]) & (tod < NIGHT_WINDOW[1])
    if not day.any():
        day = np.ones(n, dtype=bool)
        night = np.zeros(n, dtype=bool)
    return night, day


def injection_weights(config: ScenarioConfig, agents: list[ResolvedAgent]
                      ) -> dict[int, np.ndarray]:
    """Per-agent feasible exchange profile (kW, signed).

    Fixed generators contribute their output.  A storage absorbs at night
    (negative, bounded by its charge limit and 60% of the free capacity) and
    delivers by day what it started with plus the nightly intake, all after
    efficiency losses and capped by the discharge limit.
    """
    n, minutes = config.n_intervals, config.minutes_per_interval
    night, day = _product_masks(n, minutes)
    night_h = max(night.sum() * minutes / 60.0, 1e-9)
    day_h = day.sum() * minutes / 60.0
    weights: dict[int, np.ndarray] = {}
    for agent in agents:
        if agent.role == "fixed_generator":
            weights[agent.index] = agent.generation.copy()
            continue
        p = agent.storage
        intake_kw = 0.0
        if night.any():
            headroom_kwh = 0.6 * p.capacity_kwh * (1.0 - p.initial_soc)
            intake_kw = min(p.p_max_charge_kw, headroom_kwh / night_h)
        energy_kwh = (p.capacity_kwh * p.initial_soc
                      + intake_kw * night_h * p.eta_charge) * p.eta_discharge
        if agent.coupled is not None:
            coupled_kwh = float(agent.coupled.output_kw.sum()) * minutes / 60.0
            energy_kwh += 0.5 * coupled_kwh * p.eta_charge * p.eta_discharge
        rate = min(p.p_max_discharge_kw, energy_kwh / day_h)
        weights[agent.index] = (np.where(day, rate, 0.0)
                                - np.where(night, intake_kw, 0.0))
    return weights


def default_target(config: ScenarioConfig, agents: list[ResolvedAgent]) -> np.ndarray:
    """Artifact-defined target: the configured fraction of the cluster's
    aggregate feasible injection (see :func:`injection_weights`)."""
    weights = injection_weights(config, agents)
    total = np.zeros(config.n_intervals)
    for w in weights.values():
        total += w
    return config.target_fraction * total


def resolve_target(config: ScenarioConfig,
                   agents: list[ResolvedAgent] | None = None,
                   base_dir: Path | None = None) -> np.ndarray:
    if config.target is not None:
        return np.asarray(config.target, dtype=np.float64)
    if agents is None:
        agents = resolve_agents(config, base_dir)
    return default_target(config, agents)


# ---------------------------------------------------------------------------
# method wiring

def ea_params_for(config: ScenarioConfig, method: str) -> tuple[EaParams, EaParams]:
    """(multi-criteria params, pre-optimization params) for a method."""
    mode = "pareto" if method.endswith("_p") else "normalized"
    base = dict(n_intervals=config.n_intervals, mu=20, kappa=100, lambda_=20, rho=2)
    base.update(config.ea)
    multi = EaParams(mode=mode, **base)
    pre = dict(base)
    pre.update(config.preopt)
    preopt = EaParams(**{**pre, "mode": "single_objective"})
    if method.startswith("ea_"):
        multi = gabhyme.baseline_ea_params(multi, mode)
        preopt = gabhyme.baseline_ea_params(preopt, "single_objective")
    return multi, preopt


def agent_target_shares(config: ScenarioConfig, agents: list[ResolvedAgent],
                        target: np.ndarray) -> dict[int, np.ndarray]:
    """Split the cluster target between the optimizing agents.

    The negotiation always works on the full target; the share only steers
    each agent's local schedule generation toward the slice of the product it
    can realistically carry.  The target is split per interval proportionally
    to the feasible-injection estimate (fixed generation takes its part off
    the top the same way).
    """
    weights = injection_weights(config, agents)
    total = np.zeros(config.n_intervals)
    for w in weights.values():
        total += w
    usable = np.abs(total) > 1e-12
    safe_total = np.where(usable, total, 1.0)
    shares = {}
    for agent in agents:
        if agent.role == "fixed_generator":
            continue
        if agent.storage is None:
            shares[agent.index] = np.zeros_like(target)
            continue
        frac = np.where(usable, weights[agent.index] / safe_total, 0.0)
        shares[agent.index] = target * frac
    return shares


def build_setup(config: ScenarioConfig, method: str | None = None,
                base_dir: Path | None = None) -> NegotiationSetup:
    method = method or config.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    agents = resolve_agents(config, base_dir)
    target = resolve_target(config, agents, base_dir)
    shares = agent_target_shares(config, agents, target)
    topo_kwargs = dict(config.topology)
    kind = topo_kwargs.pop("kind")
    topology = build_topology(kind, len(agents), seed=config.base_seed, **topo_kwargs)
    delivery = DeliverySchedule(**config.delivery)

    setups = []
    for agent in agents:
        if agent.role == "fixed_generator":
            setups.append(AgentSetup(
                agent_id=agent.index, kind="fixed",
                fixed_schedules=[OperationalSchedule(agent.generation, 0.0)]))
            continue
        env = AgentEnv(agent.storage, IntervalSpec(config.n_intervals,
                                                   config.minutes_per_interval),
                       agent.objective, shares[agent.index], coupled=agent.coupled)
        if method == "sampling":
            setups.append(AgentSetup(agent_id=agent.index, kind="sampling",
                                     env=env, sampling_count=config.ea.get(
                                         "sampling_count", 10_000)))
        else:
            multi, preopt = ea_params_for(config, method)
            setups.append(AgentSetup(agent_id=agent.index, kind="optimizing",
                                     env=env, ea_params=multi,
                                     preopt_params=preopt,
                                     phi_relative=config.phi_relative))
    return NegotiationSetup(name=f"{config.name}:{method}", target=target,
                            agents=setups, topology=topology, delivery=delivery,
                            ea_generations_per_tick=config.ea_generations_per_tick)


def run_baseline_sampling(env: AgentEnv, count: int,
                          rng: np.random.Generator) -> ScheduleSet:
    """Randomly constructed valid schedules for the raw-negotiation baseline."""
    schedules = []
    for _ in range(count):
        genome = gabhyme.sample_genome(env, rng)
        pair = env.evaluate_genome(genome)
        power = to_power(genome, env.params, env.spec)
        schedules.append(OperationalSchedule(
            operational_power(power.strategies, power.power_kw), pair.local))
    return ScheduleSet(schedules)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MetricsReport:
    scenario: str
    methods: list[str]
    seeds: list[int]
    fulfillment: dict[str, list[float]]
    local_fitness: dict[str, dict[int, list[float]]]
    stats: dict[str, dict[str, float]]
    lq: dict[str, float]
    records: dict[str, list[RunRecord]]

    def summary_rows(self) -> list[dict]:
        return [{"method": m, "mean": self.stats[m]["mean"],
                 "median": self.stats[m]["median"], "std": self.stats[m]["std"],
                 "lq": self.lq[m]} for m in self.methods]


def _aggregate(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "median": float(np.median(arr)),
            "std": float(arr.std(ddof=0))}


def compute_lq(local_fitness: Mapping[str, Mapping[int, Sequence[float]]]) -> dict[str, float]:
    """Relative local quality per method: for each agent the mean achieved
    local fitness is divided by the best mean any method achieved for that
    agent (signed division), then averaged over agents."""
    methods = list(local_fitness)
    agents = sorted({a for m in methods for a in local_fitness[m]})
    mean_local = {m: {a: float(np.mean(local_fitness[m][a])) for a in agents}
                  for m in methods}
    lq = {}
    for m in methods:
        ratios = []
        for a in agents:
            best = max(mean_local[x][a] for x in methods)
            ratios.append(mean_local[m][a] / best if best != 0 else 0.0)
        lq[m] = float(np.mean(ratios)) if ratios else 0.0
    return lq


def evaluate(config: ScenarioConfig, methods: Sequence[str] | None = None,
             base_dir: Path | None = None, keep_records: bool = True
             ) -> MetricsReport:
    """Run the configured number of seeded trials per method and aggregate
    fulfillment statistics plus the cross-method local quality."""
    methods = list(methods) if methods else [config.method]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    seeds = [config.base_seed + t for t in range(config.trials)]
    fulfillment: dict[str, list[float]] = {m: [] for m in methods}
    local_fitness: dict[str, dict[int, list[float]]] = {m: {} for m in methods}
    records: dict[str, list[RunRecord]] = {m: [] for m in methods}
    agents = resolve_agents(config, base_dir)
    tracked = [a.index for a in agents if a.has_local_objective]

    for method in methods:
        setup = build_setup(config, method, base_dir)
        for seed in seeds:
            record = run_negotiation(setup, seed, budget=config.budget)
            fulfillment[method].append(record.fulfillment)
            for agent_id in tracked:
                entry = record.final_choices.get(agent_id)
                local = entry["local_fitness"] if entry else 0.0
                local_fitness[method].setdefault(agent_id, []).append(local)
            if keep_records:
                records[method].append(record)

    stats = {m: _aggregate(fulfillment[m]) for m in methods}
    lq = compute_lq(local_fitness) if tracked else {m: 0.0 for m in methods}
    return MetricsReport(scenario=config.name, methods=methods, seeds=seeds,
                         fulfillment=fulfillment, local_fitness=local_fitness,
                         stats=stats, lq=lq, records=records)


def write_summary_csv(report: MetricsReport, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=["method", "mean", "median", "std", "lq"])
    writer.writeheader()
    for row in report.summary_rows():
        writer.writerow({k: (v if isinstance(v, str) else repr(v))
                         for k, v in row.items()})


def write_trials_csv(report: MetricsReport, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=["method", "trial", "seed", "fulfillment"])
    writer.writeheader()
    for method in report.methods:
        for t, value in enumerate(report.fulfillment[method]):
            writer.writerow({"method": method, "trial": t,
                             "seed": report.seeds[t], "fulfillment": repr(value)})


def write_locals_csv(report: MetricsReport, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=["method", "trial", "seed", "agent",
                                            "local_fitness"])
    writer.writeheader()
    for method in report.methods:
        for agent_id in sorted(report.local_fitness[method]):
            for t, value in enumerate(report.local_fitness[method][agent_id]):
                writer.writerow({"method": method, "trial": t,
                                 "seed": report.seeds[t], "agent": agent_id,
                                 "local_fitness": repr(value)})


def history_rows(record: RunRecord) -> list[dict]:
    """Per-tick negotiation history: the best known cluster fitness and each
    agent's combined (normalized local + normalized global) fitness."""
    target = np.asarray(record.target)
    norm = float(np.abs(target).sum())
    agents = sorted(record.phis)
    last_fitness: dict[int, float] = {}
    last_local: dict[int, float] = {}
    rows = []
    by_tick: dict[int, list[dict]] = {}
    for event in record.state_events:
        by_tick.setdefault(event["tick"], []).append(event)
    for tick in sorted(by_tick):
        for event in by_tick[tick]:
            last_fitness[event["agent"]] = event["fitness"]
            last_local[event["agent"]] = event["local"]
        row = {"tick": tick,
               "global_fitness": max(last_fitness.values())}
        for agent_id in agents:
            phi = record.phis.get(agent_id)
            local = last_local.get(agent_id, 0.0)
            g_val = last_fitness.get(agent_id, -norm)
            g_norm = 1.0 - abs(g_val / norm) if norm else 0.0
            if phi is None or not math.isfinite(phi) or phi == 0.0:
                f_norm = 0.0
            else:
                f_norm = min(local / phi, 1.0)
            row[f"combined_{agent_id}"] = f_norm + g_norm
        rows.append(row)
    return rows


def write_history_csv(record: RunRecord, fh) -> None:
    rows = history_rows(record)
    agents = sorted(record.phis)
    fieldnames = ["tick", "global_fitness"] + [f"combined_{a}" for a in agents]
    writer = csv.DictWriter(fh, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (v if isinstance(v, int) else repr(v))
                         for k, v in row.items()})


# ---------------------------------------------------------------------------
# local test cases and parameter sweeps

def local_test_envs(n_intervals: int = 24, minutes: float = 60.0,
                    seed: int = 7) -> dict[str, AgentEnv]:
    """The three single-agent local test setups (arbitrage storage, peak
    shaving battery, household supply-demand matching) on synthetic data."""
    spec = IntervalSpec(n_intervals, minutes)
    no_source = CoupledGeneratorProfile(np.zeros(n_intervals))
    buy, sell = synth_prices(n_intervals, minutes, seed, base=0.25)
    psp = StorageParams(600.0, math.sqrt(0.8), math.sqrt(0.8), 130.0, 130.0,
                        None, 0.3)
    arb_env = AgentEnv(psp, spec, LocalObjective.arbitrage(MarketPrices(buy, sell)),
                       np.zeros(n_intervals), coupled=no_source)

    industry = synth_industry_load(n_intervals, minutes, seed + 1, peak_kw=30.0)
    battery = StorageParams(33.3, math.sqrt(0.92), math.sqrt(0.92), 8.25, 8.25,
                            None, 0.5)
    peak_env = AgentEnv(battery, spec,
                        LocalObjective.peak_shaving(LoadProfile(industry),
                                                    PeakTariff(120.0)),
                        np.zeros(n_intervals), coupled=no_source)

    household = synth_household_load(n_intervals, minutes, seed + 2)
    spp = synth_spp_output(n_intervals, minutes, seed + 3, peak_kw=4.0)
    prices = MarketPrices(*synth_prices(n_intervals, minutes, seed + 4, base=0.2947))
    home_battery = StorageParams(5.12, math.sqrt(0.81), math.sqrt(0.81), 1.65, 2.4,
                                 None, 0.1)
    sdm_env = AgentEnv(home_battery, spec,
                       LocalObjective.local_sdm(LoadProfile(household), prices),
                       np.zeros(n_intervals),
                       coupled=CoupledGeneratorProfile(spp))
    return {"arbitrage": arb_env, "peak_shaving": peak_env, "local_sdm": sdm_env}


@dataclass
class SweepResult:
    parameter: str
    values: list
    repeats: int
    rows: list[dict]                       # case, value, repeat, final_fitness
    series: dict[tuple[str, float], np.ndarray]  # mean best-fitness per generation

    def final_fitness(self, case: str, value) -> np.ndarray:
        return np.asarray([r["final_fitness"] for r in self.rows
                           if r["case"] == case and r["value"] == value])


SWEEP_PARAMETERS = ("kappa", "mu", "rho")


def parameter_sweep(envs: Mapping[str, AgentEnv], parameter: str,
                    values: Sequence, repeats: int,
                    base_params: EaParams | None = None,
                    seed: int = 0) -> SweepResult:
    """Seeded single-objective runs per (test case, parameter value); emits
    final-fitness samples and the mean best-fitness-per-generation series."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}")
    rows = []
    series = {}
    for case, env in envs.items():
        base = base_params or EaParams(n_intervals=env.spec.n_intervals, mu=10,
                                       kappa=60, lambda_=10, rho=2)
        for value in values:
            overrides = {parameter: value, "mode": "single_objective",
                         "use_mgbm": False}
            if parameter == "mu":
                overrides["rho"] = min(base.rho, value)
            params = replace(base, **overrides)
            case_tag = zlib.crc32(case.encode())
            traces = []
            for r in range(repeats):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, case_tag, int(value), r]))
                runner = EvolutionRun(params, env, rng)
                trace = []
                while not runner.step():
                    trace.append(runner.best_k_fitness)
                trace.append(runner.best_k_fitness)
                traces.append(trace)
                rows.append({"case": case, "parameter": parameter, "value": value,
                             "repeat": r, "final_fitness": runner.best_k_fitness})
            longest = max(len(t) for t in traces)
            padded = np.full((repeats, longest), np.nan)
            for i, t in enumerate(traces):
                padded[i, :len(t)] = t
                padded[i, len(t):] = t[-1]
            series[(case, value)] = padded.mean(axis=0)
    return SweepResult(parameter, list(values), repeats, rows, series)


def write_sweep_csv(result: SweepResult, rows_fh, series_fh) -> None:
    writer = csv.DictWriter(rows_fh, fieldnames=["case", "parameter", "value",
                                                 "repeat", "final_fitness"])
    writer.writeheader()
    for row in result.rows:
        out = dict(row)
        out["final_fitness"] = repr(out["final_fitness"])
        writer.writerow(out)
    swriter = csv.writer(series_fh)
    swriter.writerow(["case", "value", "generation", "mean_best_fitness"])
    for (case, value), trace in result.series.items():
        for gen, fit in enumerate(trace):
            swriter.writerow([case, value, gen, repr(float(fit))])


# ---------------------------------------------------------------------------
# bundled scenarios

SQRT_080 = math.sqrt(0.8)
SQRT_081 = math.sqrt(0.81)
SQRT_092 = math.sqrt(0.92)

#: peak-demand tariff in currency per kW; a documented placeholder, the
#: energy price alone does not determine it
DEFAULT_PEAK_TARIFF = 120.0

PSP_STORAGE = dict(capacity_kwh=6000.0, eta_charge=SQRT_080, eta_discharge=SQRT_080,
                   p_max_charge_kw=1300.0, p_max_discharge_kw=1300.0,
                   self_discharge_tau=None, initial_soc=0.0)
BIG_PEAK_STORAGE = dict(capacity_kwh=177.7, eta_charge=SQRT_092,
                        eta_discharge=SQRT_092, p_max_charge_kw=117.6,
                        p_max_discharge_kw=117.6, self_discharge_tau=None,
                        initial_soc=0.1)
SMALL_PEAK_STORAGE = dict(capacity_kwh=33.3, eta_charge=SQRT_092,
                          eta_discharge=SQRT_092, p_max_charge_kw=8.25,
                          p_max_discharge_kw=8.25, self_discharge_tau=None,
                          initial_soc=0.1)
HOUSEHOLD_STORAGE = dict(capacity_kwh=5.12, eta_charge=SQRT_081,
                         eta_discharge=SQRT_081, p_max_charge_kw=1.65,
                         p_max_discharge_kw=2.4, self_discharge_tau=None,
                         initial_soc=0.1)

INDUSTRY_ENERGY_PRICE = 0.1649  # currency/kWh
HOUSEHOLD_ENERGY_PRICE = 0.2947


def _synth(kind: str, seed: int, **params) -> dict:
    return {"synthetic": {"kind": kind, "seed": seed, **params}}


def build_scenario_1(profile_seed: int = 101, freeze_target: bool = True) -> ScenarioConfig:
    """Transmission-level setting: five big peak-shaving industries, one
    pumped-storage arbitrage plant at 10% capacity and two solar profiles."""
    agents = []
    for i in range(5):
        agents.append(AgentSpec(
            role="industry_peak_big", storage=dict(BIG_PEAK_STORAGE),
            load_profile=_synth("industry", profile_seed + i, peak_kw=150.0),
            peak_tariff=DEFAULT_PEAK_TARIFF))
    agents.append(AgentSpec(
        role="psp_arbitrage", storage=dict(PSP_STORAGE), capacity_scale=0.1,
        prices={"synthetic": {"kind": "prices", "seed": profile_seed + 5,
                              "base": INDUSTRY_ENERGY_PRICE}}))
    for i in range(2):
        agents.append(AgentSpec(
            role="fixed_generator",
            generation_profile=_synth("spp", profile_seed + 6 + i, peak_kw=250.0)))
    config = ScenarioConfig(name="scenario1", n_intervals=96,
                            minutes_per_interval=15.0, agents=agents,
                            trials=10, base_seed=1000)
    if freeze_target:
        config.target = [float(v) for v in resolve_target(config)]
    return config


def build_scenario_2(profile_seed: int = 202, freeze_target: bool = True) -> ScenarioConfig:
    """Distribution-level setting: one small peak-shaving industry, three
    solar-coupled household batteries and two solar profiles."""
    agents = [AgentSpec(
        role="industry_peak_small", storage=dict(SMALL_PEAK_STORAGE),
        load_profile=_synth("industry", profile_seed, peak_kw=12.0),
        peak_tariff=DEFAULT_PEAK_TARIFF)]
    for i in range(3):
        agents.append(AgentSpec(
            role="household_sdm", storage=dict(HOUSEHOLD_STORAGE),
            load_profile=_synth("household", profile_seed + 1 + i),
            generation_profile=_synth("spp", profile_seed + 4 + i, peak_kw=4.0),
            prices={"synthetic": {"kind": "prices", "seed": profile_seed + 7 + i,
                                  "base": HOUSEHOLD_ENERGY_PRICE}}))
    for i in range(2):
        agents.append(AgentSpec(
            role="fixed_generator",
            generation_profile=_synth("spp", profile_seed + 10 + i, peak_kw=8.0)))
    config = ScenarioConfig(name="scenario2", n_intervals=96,
                            minutes_per_interval=15.0, agents=agents,
                            trials=10, base_seed=2000)
    if freeze_target:
        config.target = [float(v) for v in resolve_target(config)]
    return config


def build_scenario_reduced(profile_seed: int = 303,
                           freeze_target: bool = True) -> ScenarioConfig:
    """Desk-scale comparison scenario: horizon 24, two peak shavers, one
    arbitrage storage, one solar-coupled household."""
    agents = [
        AgentSpec(role="industry_peak_small", storage=dict(SMALL_PEAK_STORAGE),
                  load_profile=_synth("industry", profile_seed, peak_kw=12.0),
                  peak_tariff=DEFAULT_PEAK_TARIFF),
        AgentSpec(role="industry_peak_small", storage=dict(SMALL_PEAK_STORAGE),
                  load_profile=_synth("industry", profile_seed + 1, peak_kw=15.0),
                  peak_tariff=DEFAULT_PEAK_TARIFF),
        # pumped-storage plant scaled to 2% capacity with matching power
        # limits, so its operating range suits the desk-scale product
        AgentSpec(role="psp_arbitrage",
                  storage={**PSP_STORAGE, "initial_soc": 0.1,
                           "p_max_charge_kw": 30.0, "p_max_discharge_kw": 30.0},
                  capacity_scale=0.02,
                  prices={"synthetic": {"kind": "prices", "seed": profile_seed + 2,
                                        "base": INDUSTRY_ENERGY_PRICE}}),
        AgentSpec(role="household_sdm", storage=dict(HOUSEHOLD_STORAGE),
                  load_profile=_synth("household", profile_seed + 3),
                  generation_profile=_synth("spp", profile_seed + 4, peak_kw=4.0),
                  prices={"synthetic": {"kind": "prices", "seed": profile_seed + 5,
                                        "base": HOUSEHOLD_ENERGY_PRICE}}),
    ]
    config = ScenarioConfig(name="reduced", n_intervals=24,
                            minutes_per_interval=60.0, agents=agents,
                            trials=10, base_seed=3000, phi_relative=0.35,
                            target_fraction=0.6,
                            ea={"mu": 30, "kappa": 700, "lambda_": 30, "rho": 2,
                                "mgbm_min_generations": 150,
                                "mgbm_stop_threshold": 1e-4},
                            preopt={"kappa": 120, "mgbm_min_generations": 30,
                                    "mgbm_stop_threshold": 1e-3},
                            ea_generations_per_tick=4)
    if freeze_target:
        config.target = [float(v) for v in resolve_target(config)]
    return config


BUILTIN_SCENARIOS = {
    "scenario1": build_scenario_1,
    "scenario2": build_scenario_2,
    "reduced": build_scenario_reduced,
}
