import math

import numpy as np
import pytest
from scipy import stats

from vppstorage.gabhyme import (EaParams, EvolutionRun, Individual, MgbmState,
                                baseline_ea_params, crowding_distance,
                                fast_nondominated_fronts, hypervolume_2d,
                                init_pop, mgbm_should_stop, mutate, recombine,
                                recombination_cuts, run, sample_genome, select,
                                select_parents, sigmoid_step)
from vppstorage.objectives import (AgentEnv, FitnessPair, LocalObjective,
                                   MarketPrices)
from vppstorage.schedule import (CoupledGeneratorProfile, LoadStateSchedule,
                                 to_power, validate)
from vppstorage.storage import IntervalSpec, StorageParams


def make_env(n=8, minutes=15.0, phi=None, seed=0, coupled=False):
    spec = IntervalSpec(n, minutes)
    params = StorageParams(10.0, 0.95, 0.95, 8.0, 8.0, None, 0.5)
    rng = np.random.default_rng(seed)
    buy = rng.uniform(0.1, 0.3, n)
    prices = MarketPrices(buy, buy * 0.9)
    coupled_profile = CoupledGeneratorProfile(np.full(n, 3.0)) if coupled else None
    return AgentEnv(params, spec, LocalObjective.arbitrage(prices),
                    np.full(n, 2.0), coupled=coupled_profile, phi=phi)


def toy_arbitrage_env(n=8):
    """Two price levels: buying early and selling late is profitable."""
    spec = IntervalSpec(n, minutes_per_interval=15.0)
    params = StorageParams(10.0, 0.95, 0.95, 8.0, 8.0, None, 0.5)
    buy = np.array([0.10] * (n // 2) + [0.30] * (n - n // 2))
    prices = MarketPrices(buy, buy * 0.9)
    return AgentEnv(params, spec, LocalObjective.arbitrage(prices), np.zeros(n))


def test_sigmoid_value():
    assert sigmoid_step(0) == pytest.approx(1.0 / (1.0 + math.exp(-5.0)), rel=1e-12)
    assert sigmoid_step(0) == pytest.approx(0.993307, abs=1e-6)
    # monotonically decreasing steps toward the bound
    values = [sigmoid_step(i) for i in range(5)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_init_pop_valid_and_deterministic():
    env = make_env(coupled=True)
    params = EaParams(n_intervals=8, mu=20, kappa=10, lambda_=10, rho=2)
    pop1 = init_pop(20, params, env, np.random.default_rng(42))
    pop2 = init_pop(20, params, env, np.random.default_rng(42))
    for a, b in zip(pop1, pop2):
        assert a.sigma == b.sigma
        assert np.array_equal(a.genome.soc, b.genome.soc)
        assert np.array_equal(a.genome.strategies, b.genome.strategies)
    for ind in pop1:
        g = to_power(ind.genome, env.params, env.spec)
        assert validate(g, env.params, env.spec, env.coupled) == []
        assert ind.sigma > 0


def test_init_strategy_histogram_uniform():
    env = make_env(n=50)
    rng = np.random.default_rng(0)
    counts = np.zeros(5)
    for _ in range(200):
        genome = sample_genome(env, rng)
        for s in range(5):
            counts[s] += int((genome.strategies == s).sum())
    # 10 000 intervals over five strategies
    assert counts.sum() == 10_000
    chi2 = stats.chisquare(counts)
    assert chi2.pvalue > 0.01


def test_mutate_always_valid():
    env = make_env(coupled=True)
    rng = np.random.default_rng(1)
    params = EaParams(n_intervals=8, mu=10, kappa=10, lambda_=10, rho=2)
    pop = init_pop(10, params, env, rng)
    for _ in range(300):
        ind = pop[int(rng.integers(0, len(pop)))]
        child = mutate(ind, env, rng, "single_objective")
        g = to_power(child.genome, env.params, env.spec)
        assert validate(g, env.params, env.spec, env.coupled) == []
        assert child.sigma > 0


def test_mutate_exploitation_never_worse():
    env = make_env()
    rng = np.random.default_rng(3)
    params = EaParams(n_intervals=8, mu=10, kappa=10, lambda_=10, rho=2)
    pop = init_pop(10, params, env, rng)
    for ind in pop:
        base = env.scalar_fitness(ind.ensure_fitness(env), "single_objective")
        for k in range(30):
            # mirror the operator's draw order to detect the branch taken
            peek = np.random.default_rng(1000 + k)
            peek.standard_normal()  # step-size update draw
            if peek.random() >= 0.5:
                continue  # this seed takes the explorative branch
            child = mutate(ind, env, np.random.default_rng(1000 + k),
                           "single_objective")
            fit = env.scalar_fitness(child.ensure_fitness(env), "single_objective")
            assert fit >= base - 1e-12


def test_recombination_cut_window():
    cuts = recombination_cuts(96, 2, [LoadStateSchedule(np.zeros(96, np.int64),
                                                        np.linspace(0, 1, 96)),
                                      LoadStateSchedule(np.zeros(96, np.int64),
                                                        np.linspace(0, 1, 96))])
    # r_n = 48, window [24, 72); identical parents: first index wins
    assert cuts == [24]


def test_recombination_cut_is_argmin():
    rng = np.random.default_rng(5)
    a = LoadStateSchedule(np.zeros(96, np.int64), rng.random(96))
    b = LoadStateSchedule(np.zeros(96, np.int64), rng.random(96))
    cuts = recombination_cuts(96, 2, [a, b])
    window = np.abs(b.soc[24:72] - a.soc[24:72])
    assert cuts[0] == 24 + int(np.argmin(window))
    assert 24 <= cuts[0] < 72


def test_recombine_identical_parents_is_identity():
    env = make_env()
    rng = np.random.default_rng(7)
    parent = Individual(1.0, sample_genome(env, rng))
    child = recombine([parent, Individual(1.0, parent.genome.copy())], 2, env, rng)
    assert np.allclose(child.genome.soc, parent.genome.soc, atol=1e-9)
    assert child.sigma == pytest.approx(1.0)


def test_recombine_single_parent_copy():
    env = make_env()
    rng = np.random.default_rng(8)
    parent = Individual(0.7, sample_genome(env, rng))
    child = recombine([parent], 1, env, rng)
    assert child is not parent
    assert np.array_equal(child.genome.soc, parent.genome.soc)


def test_recombine_sigma_geometric_mean():
    env = make_env()
    rng = np.random.default_rng(9)
    parents = [Individual(0.5, sample_genome(env, rng)),
               Individual(2.0, sample_genome(env, rng))]
    child = recombine(parents, 2, env, rng)
    assert child.sigma == pytest.approx(1.0, rel=1e-12)


def test_recombine_child_valid():
    env = make_env(coupled=True)
    rng = np.random.default_rng(10)
    for _ in range(100):
        parents = [Individual(1.0, sample_genome(env, rng)) for _ in range(3)]
        child = recombine(parents, 3, env, rng)
        g = to_power(child.genome, env.params, env.spec)
        assert validate(g, env.params, env.spec, env.coupled) == []


def test_select_parents_uniform_without_replacement():
    env = make_env()
    rng = np.random.default_rng(11)
    pop = init_pop(10, EaParams(n_intervals=8, mu=10, kappa=1, lambda_=1, rho=2),
                   env, rng)
    picked = select_parents(pop, 10, rng)
    assert len({id(p) for p in picked}) == 10
    with pytest.raises(ValueError):
        select_parents(pop, 11, rng)
    counts = np.zeros(10)
    for _ in range(20_000):
        one = select_parents(pop, 1, rng)[0]
        counts[pop.index(one)] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def _pool_from_points(points):
    pool = []
    for f, g in points:
        ind = Individual(1.0, LoadStateSchedule(np.zeros(4, np.int64),
                                                np.zeros(4)))
        ind.fitness = FitnessPair(f, g)
        pool.append(ind)
    return pool


def _oracle_front(points):
    nondominated = []
    for i, p in enumerate(points):
        dominated = any((q[0] >= p[0] and q[1] >= p[1]
                         and (q[0] > p[0] or q[1] > p[1]))
                        for j, q in enumerate(points) if j != i)
        if not dominated:
            nondominated.append(i)
    return set(nondominated)


def test_front_one_matches_oracle():
    rng = np.random.default_rng(12)
    for _ in range(100):
        points = rng.normal(size=(rng.integers(2, 30), 2))
        fronts = fast_nondominated_fronts(points)
        assert set(fronts[0]) == _oracle_front([tuple(p) for p in points])
        # fronts partition the indices
        assert sorted(i for front in fronts for i in front) == list(range(len(points)))


def test_crowding_distance_boundaries_infinite():
    points = np.array([[0.0, 3.0], [1.0, 2.0], [2.0, 1.0], [3.0, 0.0]])
    dist = crowding_distance(points)
    assert dist[0] == np.inf and dist[3] == np.inf
    assert 0 < dist[1] < np.inf


def test_select_pareto_returns_mu():
    env = make_env()
    rng = np.random.default_rng(13)
    points = rng.normal(size=(20, 2))
    pool = _pool_from_points(points)
    chosen = select(pool, 7, "pareto", env)
    assert len(chosen) == 7
    # all of front one is retained when it fits
    front1 = _oracle_front([tuple(p) for p in points])
    if len(front1) <= 7:
        chosen_pairs = {(c.fitness.local, c.fitness.global_) for c in chosen}
        for i in front1:
            assert (points[i][0], points[i][1]) in chosen_pairs


def test_select_normalized_ranking():
    env = make_env(phi=4.0)
    pool = _pool_from_points([(4.0, 0.0), (2.0, -8.0), (0.0, -16.0)])
    chosen = select(pool, 1, "normalized", env)
    assert chosen[0].fitness.local == 4.0  # score 2.0 dominates
    identical = _pool_from_points([(1.0, -1.0)] * 5)
    assert len(select(identical, 3, "normalized", env)) == 3


def test_select_single_objective_ranking():
    env = make_env()
    pool = _pool_from_points([(1.0, -5.0), (3.0, -50.0), (2.0, 0.0)])
    chosen = select(pool, 2, "single_objective", env)
    assert [c.fitness.local for c in chosen] == [3.0, 2.0]


def test_run_archive_monotone_scalar():
    env = toy_arbitrage_env()
    params = EaParams(n_intervals=8, mu=10, kappa=40, lambda_=10, rho=2,
                      mode="single_objective", use_mgbm=False, seed=0)
    archive = run(params, env, np.random.default_rng(0))
    fits = [ind.fitness.local for ind in archive]
    assert all(a < b for a, b in zip(fits, fits[1:]))


def test_run_single_cycle():
    env = toy_arbitrage_env()
    params = EaParams(n_intervals=8, mu=2, kappa=1, lambda_=1, rho=2,
                      mode="single_objective", use_mgbm=False)
    runner = EvolutionRun(params, env, np.random.default_rng(1))
    assert runner.step() is True
    assert runner.generation == 1
    assert runner.recombine_calls == 1
    assert len(runner.pop) == 2


def test_run_deterministic():
    env = toy_arbitrage_env()
    params = EaParams(n_intervals=8, mu=8, kappa=20, lambda_=8, rho=2,
                      mode="normalized", use_mgbm=False)
    env = env.with_phi(1.0)
    a1 = run(params, env, np.random.default_rng(5))
    a2 = run(params, env, np.random.default_rng(5))
    assert len(a1) == len(a2)
    for x, y in zip(a1, a2):
        assert x.fitness == y.fitness
        assert np.array_equal(x.genome.soc, y.genome.soc)


def test_run_population_invariants():
    env = toy_arbitrage_env()
    params = EaParams(n_intervals=8, mu=6, kappa=15, lambda_=9, rho=2,
                      mode="single_objective", use_mgbm=False)
    runner = EvolutionRun(params, env, np.random.default_rng(2))
    while not runner.step():
        assert len(runner.pop) == 6
        for ind in runner.pop:
            g = to_power(ind.genome, env.params, env.spec)
            assert validate(g, env.params, env.spec) == []


def test_restart_preserves_elite():
    env = toy_arbitrage_env()
    params = EaParams(n_intervals=8, mu=6, kappa=60, lambda_=6, rho=2,
                      mode="single_objective", restart_window=5,
                      restart_epsilon=1e9, use_mgbm=False)  # force restarts
    runner = EvolutionRun(params, env, np.random.default_rng(3))
    best_before = None
    while not runner.step():
        if best_before is not None:
            fits = [env.scalar_fitness(i.ensure_fitness(env), "single_objective")
                    for i in runner.pop]
            assert max(fits) >= best_before - 1e-12
        best_before = max(env.scalar_fitness(i.ensure_fitness(env), "single_objective")
                          for i in runner.pop)
    assert runner.restart_count_total > 0


def test_baseline_params_disable_features():
    base = EaParams(n_intervals=8, mu=10, kappa=30, lambda_=10, rho=2)
    ea = baseline_ea_params(base, "pareto")
    assert not ea.use_recombination and not ea.use_restart and ea.explorative_only
    env = toy_arbitrage_env()
    runner = EvolutionRun(ea, env, np.random.default_rng(4))
    while not runner.step():
        pass
    assert runner.recombine_calls == 0
    assert runner.restart_count_total == 0


def test_sigma_survives_updates():
    env = make_env()
    rng = np.random.default_rng(6)
    ind = Individual(1.0, sample_genome(env, rng))
    for _ in range(200):
        ind = mutate(ind, env, rng, "single_objective")
        assert ind.sigma > 0


def test_toy_arbitrage_near_bruteforce_optimum():
    """Exhaustive oracle over 5 power levels per interval; the EA (searching
    the continuous space) must come within 5% of that discretized optimum."""
    env = toy_arbitrage_env()
    optimum = brute_force_arbitrage_optimum(env)
    assert optimum > 0
    params = EaParams(n_intervals=8, mu=20, kappa=120, lambda_=20, rho=2,
                      mode="single_objective", use_mgbm=False)
    hits = 0
    for seed in range(5):
        archive = run(params, env, np.random.default_rng(seed))
        best = archive[-1].fitness.local
        if best >= 0.95 * optimum:
            hits += 1
    assert hits >= 4


def brute_force_arbitrage_optimum(env: AgentEnv) -> float:
    """Vectorized enumeration of 5 discretized power levels per interval
    (max/half discharge to sell, zero, half/max charge as buy), keeping only
    physically feasible sequences."""
    from vppstorage import kernels
    from vppstorage.storage import kernel_args

    n = env.spec.n_intervals
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(env.params,
                                                                       env.spec)
    levels = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    n_seq = 5 ** n
    codes = np.arange(n_seq)
    soc = np.full(n_seq, env.params.initial_soc)
    feasible = np.ones(n_seq, dtype=bool)
    profit = np.zeros(n_seq)
    buy, sell = env.objective.price_buy, env.objective.price_sell
    for i in range(n):
        lvl = levels[(codes // (5 ** i)) % 5]
        p = np.where(lvl >= 0, lvl * p_ch, lvl * p_dis)
        u = np.where(p > 0, p * eta_ch * dt_h / cap, p * dt_h / (eta_dis * cap))
        nxt = soc * decay + np.where(p == 0, 0.0, u) * sfac
        feasible &= (nxt >= -1e-12) & (nxt <= 1.0 + 1e-12)
        # charging at full / discharging at empty is not allowed
        feasible &= ~((p > 0) & (soc >= 1.0)) & ~((p < 0) & (soc <= 0.0))
        profit += np.where(p < 0, sell[i] * (-p) * dt_h, -buy[i] * p * dt_h)
        soc = np.clip(nxt, 0.0, 1.0)
    profit[~feasible] = -np.inf
    return float(profit.max())


# -- stagnation detector --------------------------------------------------------

def test_mgbm_zero_stream_stops():
    state = MgbmState()
    stop = False
    samples = 0
    while not stop and samples < state.min_generations + 10:
        state, stop = mgbm_should_stop(state, 0.0)
        samples += 1
    assert stop
    assert samples <= MgbmState().min_generations + 10


def test_mgbm_large_improvement_keeps_running():
    state = MgbmState()
    for _ in range(200):
        state, stop = mgbm_should_stop(state, 0.5)
        assert not stop


def test_mgbm_ramp_slope_convergence():
    # noiseless linear fitness ramp: per-generation improvement is constant;
    # the filtered estimate must converge to the slope within 1%
    slope = 0.037
    state = MgbmState()
    for _ in range(50):
        state, _ = mgbm_should_stop(state, slope)
    assert abs(state.estimate - slope) / slope < 0.01


def test_hypervolume_basics():
    env = make_env(phi=2.0)  # target norm = 16
    # a single point at both normalization anchors covers the unit square
    full = [FitnessPair(2.0, 0.0)]
    assert hypervolume_2d(full, env) == pytest.approx(1.0)
    assert hypervolume_2d([], env) == 0.0
    # dominated points do not add volume
    pts = [FitnessPair(2.0, -8.0), FitnessPair(1.0, -8.0)]
    assert hypervolume_2d(pts, env) == pytest.approx(hypervolume_2d(pts[:1], env))
