"""Solution representations and constraint handling for storage schedules.

A schedule pairs every planning interval with a strategy (what the power is
used for) and either a power value (power form) or the storage fill level
after the interval (load-state form).  The two forms are equivalent views
and convert into each other through the storage model.

Constraint families checked by :func:`validate` and fixed by :func:`repair`:

* ``limits``        power exceeds the storage limits or the clipping rule
* ``consistency``   sign of the power contradicts the strategy
* ``satisfiability`` the induced SoC trajectory leaves [0, 1]
* ``coupling``      charging exceeds the coupled generator output
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import kernels
from .storage import IntervalSpec, StorageParams, kernel_args


class Strategy(IntEnum):
    BUY = kernels.BUY
    SELL = kernels.SELL
    CHARGE = kernels.CHARGE
    DISCHARGE = kernels.DISCHARGE
    LOCAL_SDM = kernels.LOCAL_SDM


#: strategies consistent with positive / negative power
POSITIVE_STRATEGIES = (Strategy.BUY, Strategy.CHARGE)
NEGATIVE_STRATEGIES = (Strategy.SELL, Strategy.DISCHARGE, Strategy.LOCAL_SDM)


class InvalidScheduleError(ValueError):
    """Schedule violates a constraint family where validity is required."""


def _as_strategies(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("strategies must be one-dimensional")
    if arr.size and (arr.min() < 0 or arr.max() > 4):
        raise ValueError("unknown strategy code")
    return arr


def _as_floats(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("values must be one-dimensional")
    return arr


@dataclass
class PowerSchedule:
    """Power form: per interval a (strategy, signed power in kW) pair."""

    strategies: np.ndarray
    power_kw: np.ndarray

    def __post_init__(self) -> None:
        self.strategies = _as_strategies(self.strategies)
        self.power_kw = _as_floats(self.power_kw)
        if self.strategies.shape != self.power_kw.shape:
            raise ValueError("strategies and power_kw must have equal length")

    def __len__(self) -> int:
        return int(self.strategies.shape[0])

    def copy(self) -> "PowerSchedule":
        return PowerSchedule(self.strategies.copy(), self.power_kw.copy())


@dataclass
class LoadStateSchedule:
    """Load-state form: per interval a (strategy, SoC after interval) pair."""

    strategies: np.ndarray
    soc: np.ndarray

    def __post_init__(self) -> None:
        self.strategies = _as_strategies(self.strategies)
        self.soc = _as_floats(self.soc)
        if self.strategies.shape != self.soc.shape:
            raise ValueError("strategies and soc must have equal length")

    def __len__(self) -> int:
        return int(self.strategies.shape[0])

    def copy(self) -> "LoadStateSchedule":
        return LoadStateSchedule(self.strategies.copy(), self.soc.copy())


@dataclass
class OperationalSchedule:
    """Grid-visible active power per interval (positive = injection) together
    with the cached local objective value of the underlying schedule."""

    power_kw: np.ndarray
    local_fitness: float = 0.0

    def __post_init__(self) -> None:
        self.power_kw = _as_floats(self.power_kw)
        if not np.all(np.isfinite(self.power_kw)):
            raise ValueError("operational schedule must be finite")

    def __len__(self) -> int:
        return int(self.power_kw.shape[0])


@dataclass
class CoupledGeneratorProfile:
    """Output of a generator the storage charges from (kW, nonnegative)."""

    output_kw: np.ndarray

    def __post_init__(self) -> None:
        self.output_kw = _as_floats(self.output_kw)
        if self.output_kw.size and self.output_kw.min() < 0:
            raise ValueError("generator output must be nonnegative")


@dataclass(frozen=True)
class Violation:
    kind: str  # limits | consistency | satisfiability | coupling
    index: int
    detail: str = ""


def _coupled_args(coupled: CoupledGeneratorProfile | None, n: int):
    if coupled is None:
        return kernels.EMPTY_F64, 0
    if len(coupled.output_kw) != n:
        raise ValueError("coupled generator profile length mismatch")
    return coupled.output_kw, 1


def to_load_state(g: PowerSchedule, params: StorageParams,
                  spec: IntervalSpec) -> LoadStateSchedule:
    """Power form to load-state form by iterating the storage dynamics."""
    cap, eta_ch, eta_dis, decay, sfac, dt_h, _, _ = kernel_args(params, spec)
    socs = np.empty(len(g), dtype=np.float64)
    worst = kernels.soc_trajectory(g.power_kw, params.initial_soc, cap, eta_ch,
                                   eta_dis, decay, sfac, dt_h, socs)
    if worst > kernels.SOC_TOL:
        raise InvalidScheduleError(
            f"schedule drives the SoC out of [0, 1] by {worst}")
    return LoadStateSchedule(g.strategies.copy(), socs)


def to_power(gl: LoadStateSchedule, params: StorageParams,
             spec: IntervalSpec) -> PowerSchedule:
    """Load-state form back to power form via the inverse transition mapping."""
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    n = len(gl)
    powers = np.empty(n, dtype=np.float64)
    soc = params.initial_soc
    for i in range(n):
        target = gl.soc[i]
        if target > 1.0 + kernels.SOC_TOL or target < -kernels.SOC_TOL:
            raise InvalidScheduleError(f"soc out of [0, 1] at interval {i}")
        p = kernels.power_for_delta(soc, min(1.0, max(0.0, target)), cap,
                                    eta_ch, eta_dis, decay, sfac, dt_h)
        if p > p_ch + kernels.POWER_TOL or p < -p_dis - kernels.POWER_TOL:
            raise InvalidScheduleError(
                f"transition at interval {i} needs {p} kW, beyond the limits")
        powers[i] = min(p_ch, max(-p_dis, p))
        soc = target
    return PowerSchedule(gl.strategies.copy(), powers)


def validate(g: PowerSchedule, params: StorageParams, spec: IntervalSpec,
             coupled: CoupledGeneratorProfile | None = None) -> list[Violation]:
    """Constraint report for a power-form schedule; empty means valid."""
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    coupled_arr, has_coupled = _coupled_args(coupled, len(g))
    violations: list[Violation] = []
    soc = params.initial_soc
    for i in range(len(g)):
        p = float(g.power_kw[i])
        s = int(g.strategies[i])
        if not np.isfinite(p):
            violations.append(Violation("limits", i, "non-finite power"))
            p = 0.0
        clipped = kernels.clip_power(soc, p, p_ch, p_dis)
        if abs(clipped - p) > kernels.POWER_TOL:
            violations.append(Violation(
                "limits", i, f"power {p} clips to {clipped} at soc {soc:.6f}"))
        if p > kernels.POWER_TOL and s not in (Strategy.BUY, Strategy.CHARGE):
            violations.append(Violation(
                "consistency", i, f"positive power under {Strategy(s).name}"))
        elif p < -kernels.POWER_TOL and s not in (Strategy.SELL, Strategy.DISCHARGE,
                                                  Strategy.LOCAL_SDM):
            violations.append(Violation(
                "consistency", i, f"negative power under {Strategy(s).name}"))
        if has_coupled and s == Strategy.CHARGE and p > coupled_arr[i] + kernels.POWER_TOL:
            violations.append(Violation(
                "coupling", i, f"charge {p} exceeds generator output {coupled_arr[i]}"))
        nxt = kernels.step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h)
        if nxt > 1.0 + kernels.SOC_TOL or nxt < -kernels.SOC_TOL:
            violations.append(Violation(
                "satisfiability", i, f"soc trajectory reaches {nxt:.9f}"))
        soc = min(1.0, max(0.0, nxt))
    return violations


def is_valid(g: PowerSchedule, params: StorageParams, spec: IntervalSpec,
             coupled: CoupledGeneratorProfile | None = None) -> bool:
    """Fast validity check (kernel path, no report)."""
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    coupled_arr, has_coupled = _coupled_args(coupled, len(g))
    bits = kernels.validity_bits(g.strategies, g.power_kw, params.initial_soc,
                                 cap, eta_ch, eta_dis, decay, sfac, dt_h,
                                 p_ch, p_dis, coupled_arr, has_coupled)
    return bits == 0


def consistent_strategies(strategies: np.ndarray, powers: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Replace sign-inconsistent strategies by a uniformly random allowed one.

    Zero power is consistent with every strategy and left untouched.
    """
    out = strategies.copy()
    pos_bad = (powers > kernels.POWER_TOL) & ~np.isin(out, POSITIVE_STRATEGIES)
    neg_bad = (powers < -kernels.POWER_TOL) & ~np.isin(out, NEGATIVE_STRATEGIES)
    n_pos = int(pos_bad.sum())
    n_neg = int(neg_bad.sum())
    if n_pos:
        choices = np.array(POSITIVE_STRATEGIES, dtype=np.int64)
        out[pos_bad] = choices[rng.integers(0, len(choices), size=n_pos)]
    if n_neg:
        choices = np.array(NEGATIVE_STRATEGIES, dtype=np.int64)
        out[neg_bad] = choices[rng.integers(0, len(choices), size=n_neg)]
    return out


def repair(g: PowerSchedule, params: StorageParams, spec: IntervalSpec,
           coupled: CoupledGeneratorProfile | None = None,
           rng: np.random.Generator | None = None) -> PowerSchedule:
    """Return a schedule with an empty validation report.

    Fix order: limits (clip to the power limits), consistency (random allowed
    strategy for the realized sign), coupling (clip charging to the generator
    output), then a forward satisfiability sweep clipping each interval's
    power so the SoC trajectory stays inside [0, 1].  An already valid
    schedule is returned unchanged.
    """
    if not validate(g, params, spec, coupled):
        return g.copy()
    if rng is None:
        rng = np.random.default_rng()
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    coupled_arr, has_coupled = _coupled_args(coupled, len(g))
    powers = np.clip(np.nan_to_num(g.power_kw, nan=0.0, posinf=p_ch, neginf=-p_dis),
                     -p_dis, p_ch)
    strategies = consistent_strategies(g.strategies, powers, rng)
    socs = np.empty(len(g), dtype=np.float64)
    kernels.repair_powers(strategies, powers, params.initial_soc, cap, eta_ch,
                          eta_dis, decay, sfac, dt_h, p_ch, p_dis,
                          coupled_arr, has_coupled, socs)
    return PowerSchedule(strategies, powers)


def repair_load_state(gl: LoadStateSchedule, params: StorageParams,
                      spec: IntervalSpec,
                      coupled: CoupledGeneratorProfile | None = None,
                      rng: np.random.Generator | None = None) -> LoadStateSchedule:
    """Repair in the load-state form (used by the EA operators).

    The desired trajectory is first realized as closely as the limits allow,
    then strategies are made sign-consistent and the power-form repair rules
    applied; the realized trajectory is returned.
    """
    if rng is None:
        rng = np.random.default_rng()
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    coupled_arr, has_coupled = _coupled_args(coupled, len(gl))
    socs = gl.soc.copy()
    powers = np.empty(len(gl), dtype=np.float64)
    kernels.socs_to_powers_lenient(socs, params.initial_soc, cap, eta_ch, eta_dis,
                                   decay, sfac, dt_h, p_ch, p_dis, powers)
    strategies = consistent_strategies(gl.strategies, powers, rng)
    kernels.repair_powers(strategies, powers, params.initial_soc, cap, eta_ch,
                          eta_dis, decay, sfac, dt_h, p_ch, p_dis,
                          coupled_arr, has_coupled, socs)
    return LoadStateSchedule(strategies, socs)


def operational_power(strategies: np.ndarray, powers: np.ndarray) -> np.ndarray:
    """Grid-visible projection: injection positive, local SDM behind the meter."""
    return np.where(strategies == Strategy.LOCAL_SDM, 0.0, -powers)


def to_operational_schedule(g: PowerSchedule, local_fitness: float,
                            params: StorageParams | None = None,
                            spec: IntervalSpec | None = None,
                            coupled: CoupledGeneratorProfile | None = None
                            ) -> OperationalSchedule:
    """Project a valid schedule to the grid-visible operational schedule.

    Selling and discharging inject power into the coalition product
    (positive), buying and charging draw from it (negative), local
    supply-demand matching is consumed behind the meter and contributes 0.
    When storage parameters are given the schedule is validated first.
    """
    if params is not None and spec is not None:
        report = validate(g, params, spec, coupled)
        if report:
            raise InvalidScheduleError(
                f"cannot project an invalid schedule ({report[0].kind} at "
                f"interval {report[0].index})")
    return OperationalSchedule(operational_power(g.strategies, g.power_kw),
                               float(local_fitness))
