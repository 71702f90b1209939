"""Technology-independent energy storage model.

Covers the storage management rule (power clipping against limits and the
fill level), the discrete per-interval state-of-charge dynamics with
charge/discharge efficiencies and exponential self-discharge, reachability
queries and the inverse power-for-transition mapping.

All functions are pure; power is signed (positive = charge, negative =
discharge) and the state of charge is a fraction of capacity in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import kernels

#: slack absorbed silently by step_soc; anything larger signals a caller bug
SOC_RESIDUE = 1e-9


class InfeasibleTransitionError(ValueError):
    """A requested state transition leaves [0, 1] or exceeds power limits."""


@dataclass(frozen=True)
class StorageParams:
    """Static storage attributes.

    self_discharge_tau is the exponential time constant in interval units;
    ``None`` means no self-discharge (the sentinel for an infinite constant).
    """

    capacity_kwh: float
    eta_charge: float
    eta_discharge: float
    p_max_charge_kw: float
    p_max_discharge_kw: float
    self_discharge_tau: float | None = None
    initial_soc: float = 0.0

    def __post_init__(self) -> None:
        if not self.capacity_kwh > 0:
            raise ValueError("capacity_kwh must be > 0")
        if not 0 < self.eta_charge <= 1:
            raise ValueError("eta_charge must be in (0, 1]")
        if not 0 < self.eta_discharge <= 1:
            raise ValueError("eta_discharge must be in (0, 1]")
        if self.p_max_charge_kw < 0 or self.p_max_discharge_kw < 0:
            raise ValueError("power limits must be >= 0")
        if self.self_discharge_tau is not None and not self.self_discharge_tau > 0:
            raise ValueError("self_discharge_tau must be positive or None")
        if not 0 <= self.initial_soc <= 1:
            raise ValueError("initial_soc must be in [0, 1]")


@dataclass(frozen=True)
class StorageState:
    soc: float

    def __post_init__(self) -> None:
        if not 0 <= self.soc <= 1:
            raise ValueError("soc must be in [0, 1]")


@dataclass(frozen=True)
class IntervalSpec:
    n_intervals: int
    minutes_per_interval: float = 15.0

    def __post_init__(self) -> None:
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if not self.minutes_per_interval > 0:
            raise ValueError("minutes_per_interval must be > 0")

    @property
    def dt_hours(self) -> float:
        return self.minutes_per_interval / 60.0


def kernel_args(params: StorageParams, spec: IntervalSpec) -> tuple:
    """Scalars consumed by the numeric kernels, in their positional order:
    (cap, eta_ch, eta_dis, decay, sfac, dt_h, p_max_ch, p_max_dis)."""
    decay, sfac = kernels.decay_factors(params.self_discharge_tau)
    return (
        params.capacity_kwh,
        params.eta_charge,
        params.eta_discharge,
        decay,
        sfac,
        spec.dt_hours,
        params.p_max_charge_kw,
        params.p_max_discharge_kw,
    )


def clip_power(soc: float, p_set_kw: float, params: StorageParams) -> float:
    """Storage power actually applied for a set power at fill level ``soc``.

    Charging is clipped to the charge limit while the storage is below full;
    discharging to the (negated) discharge limit while above empty; charging
    a full storage or discharging an empty one yields 0.
    """
    if not 0 <= soc <= 1:
        raise ValueError(f"soc out of [0, 1]: {soc}")
    if not math.isfinite(p_set_kw):
        raise ValueError("set power must be finite")
    return kernels.clip_power(soc, p_set_kw, params.p_max_charge_kw,
                              params.p_max_discharge_kw)


def step_soc(state: StorageState, p_actual_kw: float, params: StorageParams,
             spec: IntervalSpec) -> StorageState:
    """Advance the state of charge by one interval under constant power.

    Uses the exact solution of the linear dynamics (charging scaled by the
    charge efficiency, discharging by the inverse discharge efficiency,
    exponential self-discharge).  The result is clamped into [0, 1] only to
    absorb floating-point residue; a larger excursion raises, because the
    caller was supposed to have validated the power.
    """
    cap, eta_ch, eta_dis, decay, sfac, dt_h, _, _ = kernel_args(params, spec)
    nxt = kernels.step_soc_raw(state.soc, p_actual_kw, cap, eta_ch, eta_dis,
                               decay, sfac, dt_h)
    if nxt > 1.0 + SOC_RESIDUE or nxt < -SOC_RESIDUE:
        raise InfeasibleTransitionError(
            f"step from soc={state.soc} with p={p_actual_kw} kW leaves [0, 1]: {nxt}")
    return StorageState(min(1.0, max(0.0, nxt)))


def feasible_soc_range(state: StorageState, params: StorageParams,
                       spec: IntervalSpec) -> tuple[float, float]:
    """Tightest SoC interval reachable from ``state`` in one interval.

    Bounds come from stepping with the extreme powers allowed by the limits,
    clamped into [0, 1]; the range always contains the self-discharge-only
    successor.
    """
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    hi = kernels.step_soc_raw(state.soc, p_ch, cap, eta_ch, eta_dis, decay, sfac, dt_h)
    lo = kernels.step_soc_raw(state.soc, -p_dis, cap, eta_ch, eta_dis, decay, sfac, dt_h)
    return max(0.0, min(lo, 1.0)), min(1.0, max(hi, 0.0))


def power_for_transition(soc_from: float, soc_to: float, params: StorageParams,
                         spec: IntervalSpec) -> float:
    """Constant power moving the storage from ``soc_from`` to ``soc_to``.

    Inverse of step_soc: the charging branch divides by the charge
    efficiency, the discharging branch multiplies by the discharge
    efficiency, and self-discharge over the interval is compensated.
    Raises when ``soc_to`` is not reachable under the power limits.
    """
    lo, hi = feasible_soc_range(StorageState(soc_from), params, spec)
    if soc_to < lo - SOC_RESIDUE or soc_to > hi + SOC_RESIDUE:
        raise InfeasibleTransitionError(
            f"target soc {soc_to} outside reachable range [{lo}, {hi}]")
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = kernel_args(params, spec)
    p = kernels.power_for_delta(soc_from, min(1.0, max(0.0, soc_to)),
                                cap, eta_ch, eta_dis, decay, sfac, dt_h)
    # reachability was checked on the SoC level; snap fp residue at the limits
    return min(p_ch, max(-p_dis, p))
