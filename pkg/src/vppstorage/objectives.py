"""Coalition objective, local objectives, normalizations and metrics.

The coalition (global) objective rewards a cluster of operational schedules
whose sum tracks a target schedule; it is the negated L1 gap, so it is always
<= 0 and 0 exactly on a perfect match.  Local objectives value what a single
storage earns or saves: market arbitrage, local supply-demand matching and
peak shaving.  Invalid schedules are handled with a death penalty (both
fitness components forced to -inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .schedule import (CoupledGeneratorProfile, LoadStateSchedule, OperationalSchedule,
                       PowerSchedule, Strategy, operational_power, validate)
from .storage import IntervalSpec, StorageParams, kernel_args

NEG_INF = float("-inf")


@dataclass
class MarketPrices:
    """Per-interval prices in currency per kWh: ``buy_price`` is what buying
    costs, ``sell_price`` what selling earns."""

    buy_price: np.ndarray
    sell_price: np.ndarray

    def __post_init__(self) -> None:
        self.buy_price = np.asarray(self.buy_price, dtype=np.float64)
        self.sell_price = np.asarray(self.sell_price, dtype=np.float64)
        if self.buy_price.shape != self.sell_price.shape:
            raise ValueError("buy and sell price series must have equal length")
        if not (np.all(np.isfinite(self.buy_price))
                and np.all(np.isfinite(self.sell_price))):
            raise ValueError("prices must be finite")


@dataclass
class LoadProfile:
    """Signed demand per interval in kW (consumption positive)."""

    demand_kw: np.ndarray

    def __post_init__(self) -> None:
        self.demand_kw = np.asarray(self.demand_kw, dtype=np.float64)


@dataclass
class PeakTariff:
    """Price of the billing-relevant peak in currency per kW."""

    peak_price: float

    def __post_init__(self) -> None:
        if self.peak_price < 0:
            raise ValueError("peak price must be >= 0")


@dataclass(frozen=True)
class FitnessPair:
    """(local, global) fitness; -inf marks a death-penalized solution."""

    local: float
    global_: float

    def is_dead(self) -> bool:
        return self.local == NEG_INF or self.global_ == NEG_INF


def global_fitness(cluster: Iterable[OperationalSchedule] | Iterable[np.ndarray],
                   target: np.ndarray) -> float:
    """Negated L1 distance between the cluster sum and the target schedule."""
    target = np.asarray(target, dtype=np.float64)
    total = np.zeros_like(target)
    for entry in cluster:
        power = entry.power_kw if isinstance(entry, OperationalSchedule) else np.asarray(entry)
        if power.shape != target.shape:
            raise ValueError("schedule length does not match the target")
        total = total + power
    return -float(np.abs(target - total).sum())


def arbitrage_fitness(g: PowerSchedule, prices: MarketPrices,
                      spec: IntervalSpec) -> float:
    """Market profit: energy sold earns the sell price, energy bought costs
    the buy price; charging, discharging and local SDM do not trade."""
    dt_h = spec.dt_hours
    sell = g.strategies == Strategy.SELL
    buy = g.strategies == Strategy.BUY
    earned = np.sum(prices.sell_price[sell] * (-g.power_kw[sell])) * dt_h
    spent = np.sum(prices.buy_price[buy] * g.power_kw[buy]) * dt_h
    return float(earned - spent)


def local_sdm_fitness(g: PowerSchedule, household: LoadProfile,
                      prices: MarketPrices, spec: IntervalSpec) -> float:
    """Avoided purchases when local supply-demand matching covers demand.

    Per interval the saving is the buy price times the covered demand, where
    over- and undershooting the (nonnegative part of the) demand is penalized
    symmetrically through the absolute deviation.
    """
    dt_h = spec.dt_hours
    h = np.maximum(household.demand_kw, 0.0)
    p_lu = np.where(g.strategies == Strategy.LOCAL_SDM, -g.power_kw, 0.0)
    return float(np.sum(prices.buy_price * (h - np.abs(p_lu - h))) * dt_h)


def discharge_profile(g: PowerSchedule, include_local_sdm: bool = True) -> np.ndarray:
    """Per-interval storage contribution against the local load (<= 0)."""
    mask = g.strategies == Strategy.DISCHARGE
    if include_local_sdm:
        mask = mask | (g.strategies == Strategy.LOCAL_SDM)
    return np.where(mask, np.minimum(g.power_kw, 0.0), 0.0)


def peak_shaving_fitness(g: PowerSchedule, industry: LoadProfile,
                         tariff: PeakTariff, formula: str = "corrected",
                         include_local_sdm: bool = True) -> float:
    """Value of the peak reduction achieved by discharging into the load.

    The default mode prices the reduction of the load peak,
    (max(H) - max(H + D)) * peak_price.  ``formula="as_printed"`` instead
    evaluates (max(D) - max(H + D)) * peak_price verbatim.
    """
    if formula not in ("corrected", "as_printed"):
        raise ValueError(f"unknown peak formula {formula!r}")
    d_e = discharge_profile(g, include_local_sdm)
    h = industry.demand_kw
    if h.shape != d_e.shape:
        raise ValueError("load profile length does not match the schedule")
    combined_peak = float(np.max(h + d_e))
    if formula == "as_printed":
        return (float(np.max(d_e)) - combined_peak) * tariff.peak_price
    return (float(np.max(h)) - combined_peak) * tariff.peak_price


def normalize_global(g_value: float, target: np.ndarray) -> float:
    """Fulfillment rate: 1 - |g| / ||target||_1 (1.0 on a perfect match)."""
    norm = float(np.abs(np.asarray(target, dtype=np.float64)).sum())
    if norm == 0.0:
        raise ValueError("target norm is zero")
    return 1.0 - abs(g_value / norm)


def normalize_local(f_value: float, phi: float) -> float:
    """Local fitness scaled against the acceptance threshold, capped at 1."""
    if phi == 0:
        raise ValueError("threshold must be nonzero")
    return min(f_value / phi, 1.0)


def lq_metric(per_agent_local: Mapping, per_agent_best: Mapping) -> float:
    """Mean over agents of achieved local fitness relative to the best local
    fitness any compared method achieved for that agent (signed division)."""
    if not per_agent_local:
        raise ValueError("no agents")
    ratios = [per_agent_local[a] / per_agent_best[a] for a in per_agent_local]
    return float(np.mean(ratios))


def death_penalty_wrap(g: PowerSchedule, base_fitness: FitnessPair,
                       params: StorageParams, spec: IntervalSpec,
                       coupled: CoupledGeneratorProfile | None = None) -> FitnessPair:
    """Pass the fitness through unchanged for a valid schedule, otherwise
    force both components to -inf."""
    if validate(g, params, spec, coupled):
        return FitnessPair(NEG_INF, NEG_INF)
    return base_fitness


@dataclass(frozen=True)
class LocalObjective:
    """Tagged local objective so the fitness kernel can evaluate it."""

    kind: int = kernels.OBJ_NONE
    price_buy: np.ndarray = field(default_factory=lambda: kernels.EMPTY_F64)
    price_sell: np.ndarray = field(default_factory=lambda: kernels.EMPTY_F64)
    demand: np.ndarray = field(default_factory=lambda: kernels.EMPTY_F64)
    peak_cost: float = 0.0
    peak_as_printed: bool = False
    peak_include_sdm: bool = True

    @classmethod
    def none(cls) -> "LocalObjective":
        return cls()

    @classmethod
    def arbitrage(cls, prices: MarketPrices) -> "LocalObjective":
        return cls(kind=kernels.OBJ_ARBITRAGE, price_buy=prices.buy_price,
                   price_sell=prices.sell_price)

    @classmethod
    def local_sdm(cls, household: LoadProfile, prices: MarketPrices) -> "LocalObjective":
        return cls(kind=kernels.OBJ_LOCAL_SDM, price_buy=prices.buy_price,
                   price_sell=prices.sell_price, demand=household.demand_kw)

    @classmethod
    def peak_shaving(cls, industry: LoadProfile, tariff: PeakTariff,
                     formula: str = "corrected",
                     include_local_sdm: bool = True) -> "LocalObjective":
        if formula not in ("corrected", "as_printed"):
            raise ValueError(f"unknown peak formula {formula!r}")
        return cls(kind=kernels.OBJ_PEAK_SHAVING, demand=industry.demand_kw,
                   peak_cost=tariff.peak_price,
                   peak_as_printed=(formula == "as_printed"),
                   peak_include_sdm=include_local_sdm)

    def evaluate(self, g: PowerSchedule, spec: IntervalSpec) -> float:
        if self.kind == kernels.OBJ_ARBITRAGE:
            return arbitrage_fitness(
                g, MarketPrices(self.price_buy, self.price_sell), spec)
        if self.kind == kernels.OBJ_LOCAL_SDM:
            return local_sdm_fitness(
                g, LoadProfile(self.demand),
                MarketPrices(self.price_buy, self.price_sell), spec)
        if self.kind == kernels.OBJ_PEAK_SHAVING:
            return peak_shaving_fitness(
                g, LoadProfile(self.demand), PeakTariff(self.peak_cost),
                "as_printed" if self.peak_as_printed else "corrected",
                self.peak_include_sdm)
        return 0.0


@dataclass
class AgentEnv:
    """Everything an agent's optimizer needs to rate a schedule."""

    params: StorageParams
    spec: IntervalSpec
    objective: LocalObjective
    target: np.ndarray
    coupled: CoupledGeneratorProfile | None = None
    phi: float | None = None

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.float64)
        if len(self.target) != self.spec.n_intervals:
            raise ValueError("target length does not match the horizon")
        self._storage_args = kernel_args(self.params, self.spec)
        if self.coupled is None:
            self._coupled_arr, self._has_coupled = kernels.EMPTY_F64, 0
        else:
            if len(self.coupled.output_kw) != self.spec.n_intervals:
                raise ValueError("coupled profile length does not match the horizon")
            self._coupled_arr, self._has_coupled = self.coupled.output_kw, 1
        self._target_norm = float(np.abs(self.target).sum())

    def with_phi(self, phi: float) -> "AgentEnv":
        return replace(self, phi=phi)

    @property
    def target_norm(self) -> float:
        return self._target_norm

    def evaluate_genome(self, genome: LoadStateSchedule) -> FitnessPair:
        """Rate a load-state genome; invalid genomes get the death penalty."""
        cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = self._storage_args
        obj = self.objective
        f, g, valid = kernels.evaluate_genome(
            genome.strategies, genome.soc, self.params.initial_soc,
            cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis,
            self._coupled_arr, self._has_coupled,
            obj.kind, obj.price_buy, obj.price_sell, obj.demand, obj.peak_cost,
            1 if obj.peak_as_printed else 0, 1 if obj.peak_include_sdm else 0,
            self.target)
        if not valid:
            return FitnessPair(NEG_INF, NEG_INF)
        return FitnessPair(float(f), float(g))

    def evaluate_power(self, g: PowerSchedule) -> FitnessPair:
        """Rate a power-form schedule (report-based validity, death penalty)."""
        base = FitnessPair(
            self.objective.evaluate(g, self.spec),
            global_fitness([operational_power(g.strategies, g.power_kw)], self.target))
        return death_penalty_wrap(g, base, self.params, self.spec, self.coupled)

    def g_norm(self, g_value: float) -> float:
        if self._target_norm == 0.0:
            return 1.0 if g_value == 0.0 else NEG_INF
        return 1.0 - abs(g_value / self._target_norm)

    def f_norm(self, f_value: float) -> float:
        if self.phi is None or self.phi == 0.0:
            # degenerate threshold: grade by sign only
            return 1.0 if f_value >= 0.0 else 0.0
        return min(f_value / self.phi, 1.0)

    def scalar_fitness(self, pair: FitnessPair, mode: str) -> float:
        """Total-order fitness used for ranking, restarts and archiving."""
        if pair.is_dead():
            return NEG_INF
        if mode == "single_objective":
            return pair.local
        if mode == "normalized":
            return self.f_norm(pair.local) + self.g_norm(pair.global_)
        if mode == "pareto":
            # scalarization for bookkeeping only; selection uses dominance
            return self.f_norm(pair.local) + self.g_norm(pair.global_)
        raise ValueError(f"unknown mode {mode!r}")
