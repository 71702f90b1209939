"""(mu + lambda) evolutionary schedule generator.

Per generation, lambda children are produced by similarity-based cut-point
recombination followed by a hybrid mutation (a gaussian "brush" over the SoC
trajectory for exploration, a sigmoid-stepped bounded local search for
exploitation).  Selection runs in one of three modes: NSGA-II over the
(local, global) objective pair, a normalized scalarization of the two, or
the local objective alone (used during pre-optimization).  Stagnating
populations restart around the elite half; termination is generation-count
or a Kalman-filter stagnation detector on the progress indicator (best
scalar fitness, or archive hypervolume in the Pareto mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .objectives import NEG_INF, AgentEnv, FitnessPair
from .schedule import (LoadStateSchedule, OperationalSchedule, PowerSchedule,
                       Strategy, operational_power, repair_load_state, to_power)
from .storage import StorageState, feasible_soc_range, kernel_args

MODES = ("pareto", "normalized", "single_objective")

#: self-adaptation constant for the lognormal step-size update
SIGMA_LEARNING_RATE = 0.22

ScheduleSink = Callable[[OperationalSchedule, FitnessPair], None]


def sigmoid_step(x: float) -> float:
    """Step-size curve of the local search: starts next to the bound
    (sigmoid_step(0) ~ 0.993) and backs off toward it with every step."""
    return 1.0 / (1.0 + math.exp(1.5 * x - 5.0))


@dataclass
class Individual:
    sigma: float
    genome: LoadStateSchedule
    fitness: FitnessPair | None = None

    def copy(self) -> "Individual":
        return Individual(self.sigma, self.genome.copy(), self.fitness)

    def ensure_fitness(self, env: AgentEnv) -> FitnessPair:
        if self.fitness is None:
            self.fitness = env.evaluate_genome(self.genome)
        return self.fitness


@dataclass
class EaParams:
    n_intervals: int
    mu: int = 30
    kappa: int = 500
    lambda_: int = 30
    rho: int = 2
    mode: str = "normalized"
    restart_window: int | None = None  # defaults to kappa // 10
    restart_epsilon: float = 0.01
    seed: int | None = None
    # baseline-EA switches: gaussian-only mutation, no recombination, no restart
    use_recombination: bool = True
    use_restart: bool = True
    explorative_only: bool = False
    # stagnation detector
    mgbm_process_noise: float = 1e-8
    mgbm_measurement_noise: float = 1e-6
    mgbm_stop_threshold: float = 1e-3
    mgbm_min_generations: int = 20
    use_mgbm: bool = True

    def __post_init__(self) -> None:
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if self.mu < 1 or self.lambda_ < 1 or self.kappa < 1:
            raise ValueError("mu, lambda_ and kappa must be >= 1")
        if not 1 <= self.rho <= self.mu:
            raise ValueError("rho must be in [1, mu]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def effective_restart_window(self) -> int:
        if self.restart_window is not None:
            return max(1, self.restart_window)
        return max(1, self.kappa // 10)


@dataclass
class MgbmState:
    """Scalar Kalman filter over the per-generation improvement rate."""

    estimate: float = 0.0
    variance: float = 1e-6
    process_noise: float = 1e-8
    measurement_noise: float = 1e-6
    stop_threshold: float = 1e-3
    min_generations: int = 20
    n_samples: int = 0


def mgbm_should_stop(state: MgbmState, progress_sample: float) -> tuple[MgbmState, bool]:
    """Feed one improvement sample; stop once the filtered improvement rate
    plus two standard deviations falls below the threshold."""
    predicted_var = state.variance + state.process_noise
    gain = predicted_var / (predicted_var + state.measurement_noise)
    estimate = state.estimate + gain * (progress_sample - state.estimate)
    variance = (1.0 - gain) * predicted_var
    new_state = MgbmState(estimate, variance, state.process_noise,
                          state.measurement_noise, state.stop_threshold,
                          state.min_generations, state.n_samples + 1)
    stop = (new_state.n_samples >= state.min_generations
            and estimate + 2.0 * math.sqrt(variance) < state.stop_threshold)
    return new_state, stop


def _draw_sigma(rng: np.random.Generator) -> float:
    return math.exp(SIGMA_LEARNING_RATE * rng.standard_normal())


def sample_genome(env: AgentEnv, rng: np.random.Generator) -> LoadStateSchedule:
    """One constructively valid genome: a uniform strategy per interval and a
    uniform feasible power for it, walked forward through the storage."""
    n = env.spec.n_intervals
    strategies = rng.integers(0, 5, size=n).astype(np.int64)
    uniforms = rng.random(n)
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(env.params, env.spec)
    powers = np.empty(n, dtype=np.float64)
    socs = np.empty(n, dtype=np.float64)
    coupled = env.coupled.output_kw if env.coupled is not None else kernels.EMPTY_F64
    kernels.sample_powers(strategies, uniforms, env.params.initial_soc, cap,
                          eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis,
                          coupled, 1 if env.coupled is not None else 0,
                          powers, socs)
    return LoadStateSchedule(strategies, socs)


def init_pop(mu: int, params: EaParams, env: AgentEnv,
             rng: np.random.Generator) -> list[Individual]:
    return [Individual(_draw_sigma(rng), sample_genome(env, rng))
            for _ in range(mu)]


def select_parents(pop: Sequence[Individual], rho: int,
                   rng: np.random.Generator) -> list[Individual]:
    """rho distinct individuals, uniformly without replacement."""
    if rho > len(pop):
        raise ValueError("rho exceeds the population size")
    idx = rng.choice(len(pop), size=rho, replace=False)
    return [pop[int(i)] for i in idx]


def _sign_consistent_strategy(original: int, power: float,
                              rng: np.random.Generator) -> int:
    if power > kernels.POWER_TOL:
        if original in (Strategy.BUY, Strategy.CHARGE):
            return original
        return int(rng.choice((int(Strategy.BUY), int(Strategy.CHARGE))))
    if power < -kernels.POWER_TOL:
        if original in (Strategy.SELL, Strategy.DISCHARGE, Strategy.LOCAL_SDM):
            return original
        return int(rng.choice((int(Strategy.SELL), int(Strategy.DISCHARGE),
                               int(Strategy.LOCAL_SDM))))
    return original


def mutate(ind: Individual, env: AgentEnv, rng: np.random.Generator,
           mode: str = "single_objective", explorative_only: bool = False) -> Individual:
    """Hybrid mutation; the result is always valid.

    Explorative branch (probability 0.5): brush gaussian offsets scaled by
    the mutated step size onto a run of consecutive SoC values, randomize one
    strategy, then repair.  Exploitation branch: probe one tuple's SoC toward
    both reachable bounds on the sigmoid step curve and keep the best
    improving probe (ties keep the original).
    """
    sigma = ind.sigma * math.exp(SIGMA_LEARNING_RATE * rng.standard_normal())
    genome = ind.genome
    n = len(genome)

    if explorative_only or rng.random() >= 0.5:
        # one brush stroke: a single gaussian offset painted over a run of
        # max(1, round(sigma*n)) consecutive SoC values (coherent strokes can
        # shift stored energy across time, which elementwise noise cannot)
        socs = genome.soc.copy()
        strategies = genome.strategies.copy()
        start = int(rng.integers(0, n))
        count = max(1, int(round(sigma * n)))
        stop = min(n, start + count)
        socs[start:stop] += sigma * rng.normal(0.0, 0.5)
        strategies[int(rng.integers(0, n))] = int(rng.integers(0, 5))
        repaired = repair_load_state(LoadStateSchedule(strategies, socs),
                                     env.params, env.spec, env.coupled, rng)
        return Individual(sigma, repaired)

    # exploitation: bounded local search on a single tuple; moving the level
    # of tuple t also changes the implied power of tuple t+1, so both labels
    # are kept sign-consistent for every probe
    base_pair = ind.ensure_fitness(env)
    best_fit = env.scalar_fitness(base_pair, mode)
    t = int(rng.integers(0, n))
    soc_prev = float(genome.soc[t - 1]) if t > 0 else env.params.initial_soc
    b_lower, b_upper = feasible_soc_range(StorageState(soc_prev), env.params, env.spec)
    l = float(genome.soc[t])
    best_probe = None
    best_pair = base_pair
    probe_socs = genome.soc.copy()
    probe_strats = genome.strategies.copy()
    cap, eta_ch, eta_dis, decay, sfac, dt_h, _, _ = kernel_args(env.params, env.spec)
    for i_m in range(5):
        for b in (b_lower, b_upper):
            l_new = l + sigmoid_step(i_m) * (b - l)
            l_new = min(1.0, max(0.0, l_new))
            p = kernels.power_for_delta(soc_prev, l_new, cap, eta_ch, eta_dis,
                                        decay, sfac, dt_h)
            s_new = _sign_consistent_strategy(int(genome.strategies[t]), p, rng)
            probe_socs[t] = l_new
            probe_strats[t] = s_new
            if t + 1 < n:
                p_next = kernels.power_for_delta(l_new, float(genome.soc[t + 1]),
                                                 cap, eta_ch, eta_dis, decay,
                                                 sfac, dt_h)
                probe_strats[t + 1] = _sign_consistent_strategy(
                    int(genome.strategies[t + 1]), p_next, rng)
            pair = env.evaluate_genome(LoadStateSchedule(probe_strats, probe_socs))
            fit = env.scalar_fitness(pair, mode)
            if fit > best_fit:
                best_fit = fit
                best_probe = (l_new, s_new,
                              int(probe_strats[t + 1]) if t + 1 < n else None)
                best_pair = pair
    if best_probe is None:
        return Individual(sigma, genome.copy(), base_pair)
    socs = genome.soc.copy()
    strategies = genome.strategies.copy()
    socs[t] = best_probe[0]
    strategies[t] = best_probe[1]
    if best_probe[2] is not None:
        strategies[t + 1] = best_probe[2]
    return Individual(sigma, LoadStateSchedule(strategies, socs), best_pair)


def recombination_cuts(n_intervals: int, rho: int,
                       parents: Sequence[LoadStateSchedule]) -> list[int]:
    """Most-similar cut index per parent boundary, searched inside the
    boundary's window [r_s, r_e)."""
    cuts = []
    r_n = n_intervals // rho
    for i_r in range(1, len(parents)):
        r_m = r_n * i_r
        r_s = r_m - r_n // 2
        r_e = max(r_m + r_n // 2, r_s + 1)
        window = np.abs(parents[i_r].soc[r_s:r_e] - parents[i_r - 1].soc[r_s:r_e])
        cuts.append(r_s + int(np.argmin(window)))
    return cuts


def recombine(parents: Sequence[Individual], rho: int, env: AgentEnv,
              rng: np.random.Generator) -> Individual:
    """Concatenate parent segments at their most similar SoC indices; the
    child's step size is the geometric mean of the parents'."""
    if not parents:
        raise ValueError("need at least one parent")
    if len(parents) == 1 or env.spec.n_intervals // rho == 0:
        return parents[0].copy()
    genomes = [p.genome for p in parents]
    cuts = recombination_cuts(env.spec.n_intervals, rho, genomes)
    bounds = [0] + cuts + [env.spec.n_intervals]
    strategies = np.concatenate([g.strategies[bounds[k]:bounds[k + 1]]
                                 for k, g in enumerate(genomes)])
    socs = np.concatenate([g.soc[bounds[k]:bounds[k + 1]]
                           for k, g in enumerate(genomes)])
    sigma = math.exp(sum(math.log(p.sigma) for p in parents) / len(parents))
    repaired = repair_load_state(LoadStateSchedule(strategies, socs),
                                 env.params, env.spec, env.coupled, rng)
    return Individual(sigma, repaired)


def _fitness_matrix(pool: Sequence[Individual], env: AgentEnv) -> np.ndarray:
    rows = np.empty((len(pool), 2), dtype=np.float64)
    for i, ind in enumerate(pool):
        pair = ind.ensure_fitness(env)
        # keep dominance finite: dead solutions sort behind everything
        rows[i, 0] = pair.local if pair.local > NEG_INF else -1e300
        rows[i, 1] = pair.global_ if pair.global_ > NEG_INF else -1e300
    return rows


def fast_nondominated_fronts(points: np.ndarray) -> list[list[int]]:
    """Indices grouped into nondominated fronts (two maximized objectives)."""
    points = np.asarray(points, dtype=np.float64)
    ranks = kernels.pareto_ranks(np.ascontiguousarray(points[:, 0]),
                                 np.ascontiguousarray(points[:, 1]))
    fronts: list[list[int]] = [[] for _ in range(int(ranks.max()) + 1)] if len(ranks) else []
    for i, r in enumerate(ranks):
        fronts[int(r)].append(i)
    return fronts


def crowding_distance(points: np.ndarray) -> np.ndarray:
    """NSGA-II crowding distance within one front."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for m in range(points.shape[1]):
        order = np.argsort(points[:, m], kind="stable")
        lo, hi = points[order[0], m], points[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi > lo:
            gaps = (points[order[2:], m] - points[order[:-2], m]) / (hi - lo)
            dist[order[1:-1]] += gaps
    return dist


def select(pool: Sequence[Individual], mu: int, mode: str,
           env: AgentEnv | None = None) -> list[Individual]:
    """Survivor selection; returns exactly ``mu`` individuals, best first.

    Fitness ties are broken toward the younger individual (the later pool
    position): offspring equal to a parent replace it, which keeps the
    self-adaptive step size drifting even while the fitness stagnates.
    """
    if not pool:
        raise ValueError("empty selection pool")
    if mu > len(pool):
        raise ValueError("mu exceeds the pool size")
    if env is None:
        raise ValueError("selection needs the evaluation context")
    young_first = np.arange(len(pool), dtype=np.int64)
    if mode == "pareto":
        points = _fitness_matrix(pool, env)
        chosen: list[int] = []
        for front in fast_nondominated_fronts(points):
            dist = crowding_distance(points[front])
            # descending crowding distance, ties broken toward younger entries
            order = np.lexsort((young_first[front], dist))[::-1]
            for i in order:
                chosen.append(front[int(i)])
                if len(chosen) == mu:
                    break
            if len(chosen) >= mu:
                break
        return [pool[i] for i in chosen[:mu]]
    if mode in ("normalized", "single_objective"):
        scores = np.array([env.scalar_fitness(ind.ensure_fitness(env), mode)
                           for ind in pool])
        order = np.lexsort((-young_first, -scores))
        return [pool[int(i)] for i in order[:mu]]
    raise ValueError(f"unknown mode {mode!r}")


def hypervolume_2d(pairs: Sequence[FitnessPair], env: AgentEnv) -> float:
    """Dominated area of the archive in normalized objective space.

    Coordinates are the normalized local and global fitness clipped at the
    reference point (local fitness 0, global fitness at -||target||_1, both
    of which normalize to 0), so the volume lives in [0, 1] x [0, 1].
    """
    pts = []
    for pair in pairs:
        if pair.is_dead():
            continue
        x = max(0.0, min(1.0, env.f_norm(pair.local)))
        y = max(0.0, min(1.0, env.g_norm(pair.global_)))
        if x > 0.0 and y > 0.0:
            pts.append((x, y))
    pts.sort(key=lambda t: (-t[0], t[1]))
    hv = 0.0
    covered = 0.0
    for x, y in pts:
        if y > covered:
            hv += x * (y - covered)
            covered = y
    return hv


def _dominates(a: FitnessPair, b: FitnessPair) -> bool:
    return (a.local >= b.local and a.global_ >= b.global_
            and (a.local > b.local or a.global_ > b.global_))


class EvolutionRun:
    """Stepwise driver: one :meth:`step` call advances one generation, so a
    scheduler can interleave the optimization with message handling."""

    def __init__(self, params: EaParams, env: AgentEnv, rng: np.random.Generator,
                 schedule_sink: ScheduleSink | None = None) -> None:
        self.params = params
        self.env = env
        self.rng = rng
        self.sink = schedule_sink
        self.pop = init_pop(params.mu, params, env, rng)
        self.pop = select(self.pop, params.mu, params.mode, env)
        self.archive: list[Individual] = []
        self.generation = 0
        self.done = False
        self.best_k_fitness: float | None = None
        self._fitness_last: float | None = None
        self._restart_count = 0
        self._tracked_prev: float | None = None
        self.recombine_calls = 0
        self.restart_count_total = 0
        self.mgbm = MgbmState(process_noise=params.mgbm_process_noise,
                              measurement_noise=params.mgbm_measurement_noise,
                              variance=params.mgbm_measurement_noise,
                              stop_threshold=params.mgbm_stop_threshold,
                              min_generations=params.mgbm_min_generations)

    # -- archive -----------------------------------------------------------

    def _emit(self, ind: Individual) -> None:
        if self.sink is None:
            return
        power = to_power(ind.genome, self.env.params, self.env.spec)
        os = OperationalSchedule(operational_power(power.strategies, power.power_kw),
                                 ind.fitness.local)
        self.sink(os, ind.fitness)

    def _archive_scalar(self, best: Individual, fit: float) -> None:
        if self.best_k_fitness is None or self.best_k_fitness < fit:
            entry = best.copy()
            self.archive.append(entry)
            self.best_k_fitness = fit
            self._emit(entry)

    def _archive_pareto(self, front: list[Individual]) -> None:
        for ind in front:
            pair = ind.fitness
            if pair is None or pair.is_dead():
                continue
            if any(_dominates(kept.fitness, pair) or
                   (kept.fitness.local == pair.local and
                    kept.fitness.global_ == pair.global_)
                   for kept in self.archive):
                continue
            self.archive = [kept for kept in self.archive
                            if not _dominates(pair, kept.fitness)]
            entry = ind.copy()
            self.archive.append(entry)
            self._emit(entry)

    # -- progress tracking ---------------------------------------------------

    def _tracked_indicator(self, best_fit: float) -> float:
        if self.params.mode == "pareto":
            return hypervolume_2d([i.fitness for i in self.archive], self.env)
        return best_fit

    # -- main loop -----------------------------------------------------------

    def step(self) -> bool:
        """Run one generation; returns True once the run has terminated."""
        if self.done:
            return True
        p = self.params
        children: list[Individual] = []
        for _ in range(p.lambda_):
            if p.use_recombination:
                parents = select_parents(self.pop, p.rho, self.rng)
                child = recombine(parents, p.rho, self.env, self.rng)
                self.recombine_calls += 1
            else:
                child = select_parents(self.pop, 1, self.rng)[0].copy()
            child = mutate(child, self.env, self.rng, p.mode, p.explorative_only)
            children.append(child)
        self.pop = select(list(self.pop) + children, p.mu, p.mode, self.env)

        best = max(self.pop,
                   key=lambda ind: self.env.scalar_fitness(ind.ensure_fitness(self.env), p.mode))
        best_fit = self.env.scalar_fitness(best.fitness, p.mode)
        if p.mode == "pareto":
            points = _fitness_matrix(self.pop, self.env)
            front = fast_nondominated_fronts(points)[0]
            self._archive_pareto([self.pop[i] for i in front])
        else:
            self._archive_scalar(best, best_fit)

        # population restart on a stagnating window
        if p.use_restart:
            if self._restart_count > p.effective_restart_window:
                if (self._fitness_last is not None
                        and best_fit - self._fitness_last <= p.restart_epsilon):
                    keep = max(1, p.mu // 2)
                    elites = [ind.copy() for ind in self.pop[:keep]]
                    self.pop = elites + init_pop(p.mu - keep, p, self.env, self.rng)
                    self.restart_count_total += 1
                self._restart_count = 0
                self._fitness_last = best_fit
            self._restart_count += 1

        self.generation += 1
        tracked = self._tracked_indicator(best_fit)
        if self._tracked_prev is not None and p.use_mgbm:
            sample = tracked - self._tracked_prev
            self.mgbm, stop = mgbm_should_stop(self.mgbm, sample)
            if stop:
                self.done = True
        self._tracked_prev = tracked
        if self.generation >= p.kappa:
            self.done = True
        return self.done


def run(params: EaParams, env: AgentEnv, rng: np.random.Generator,
        schedule_sink: ScheduleSink | None = None) -> list[Individual]:
    """Run the EA to termination and return the archive."""
    runner = EvolutionRun(params, env, rng, schedule_sink)
    while not runner.step():
        pass
    return runner.archive


def baseline_ea_params(base: EaParams, mode: str) -> EaParams:
    """Plain-EA reference configuration: self-adaptive gaussian mutation with
    basic repairing only, no recombination, no population restart."""
    return replace(base, mode=mode, use_recombination=False, use_restart=False,
                   explorative_only=True)
