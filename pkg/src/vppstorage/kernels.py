"""Numeric hot kernels shared by the storage model, schedule handling and the EA.

The kernel set is built twice from the same source: once plain (interpreted,
kept in ``PY_IMPLS``) and once compiled with numba, when available and not
disabled.  Selection happens at import time via the ``VPPSTORAGE_NUMBA``
environment variable:

    VPPSTORAGE_NUMBA=1   force numba (raises if numba is missing)
    VPPSTORAGE_NUMBA=0   force the interpreted fallback
    unset / "auto"       use numba when importable

Kernels are deterministic and free of RNG; randomness stays with the callers.
``benchmarks/bench_kernels.py`` compares both paths.

Conventions used throughout:
  - power in kW, positive = storage charges, negative = storage discharges
  - state of charge (SoC) as a fraction in [0, 1]
  - ``decay``/``sfac`` encode per-interval self-discharge: for a time
    constant tau (in interval units) decay = exp(-1/tau) and
    sfac = tau*(1-decay); without self-discharge both are exactly 1.0
  - strategy codes: 0=buy, 1=sell, 2=charge, 3=discharge, 4=local supply-
    demand matching; codes 0/2 pair with nonnegative power, 1/3/4 with
    nonpositive power
"""

from __future__ import annotations

import math
import os

import numpy as np

# strategy codes (must match schedule.Strategy)
BUY = 0
SELL = 1
CHARGE = 2
DISCHARGE = 3
LOCAL_SDM = 4

# local objective codes (must match objectives.LocalObjective)
OBJ_NONE = 0
OBJ_ARBITRAGE = 1
OBJ_LOCAL_SDM = 2
OBJ_PEAK_SHAVING = 3

# validity bitmask
V_LIMITS = 1
V_CONSISTENCY = 2
V_SATISFIABILITY = 4
V_COUPLING = 8

SOC_TOL = 1e-9
POWER_TOL = 1e-9

EMPTY_F64 = np.empty(0, dtype=np.float64)


def numba_requested() -> bool:
    flag = os.environ.get("VPPSTORAGE_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False
    if flag in ("1", "true", "on", "yes"):
        return True
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def _build_kernels(jit):
    """Construct the kernel set, decorating every function with ``jit`` so
    inner calls resolve to the decorated versions."""

    @jit
    def clip_power(soc, p_set, p_max_ch, p_max_dis):
        # five-case storage management rule: charging only below full,
        # discharging only above empty, magnitudes capped by the power limits
        if 0.0 <= soc < 1.0 and p_set > p_max_ch:
            return p_max_ch
        if 0.0 <= soc < 1.0 and p_max_ch >= p_set > 0.0:
            return p_set
        if 0.0 < soc <= 1.0 and 0.0 > p_set >= -p_max_dis:
            return p_set
        if 0.0 < soc <= 1.0 and p_set < -p_max_dis:
            return -p_max_dis
        return 0.0

    @jit
    def step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h):
        # exact one-interval solution of the linear SoC dynamics for constant p
        if p > 0.0:
            u = p * eta_ch * dt_h / cap
        elif p < 0.0:
            u = p * dt_h / (eta_dis * cap)
        else:
            u = 0.0
        return soc * decay + u * sfac

    @jit
    def power_for_delta(soc_from, soc_to, cap, eta_ch, eta_dis, decay, sfac, dt_h):
        # inverse of step_soc_raw: the constant power moving soc_from to soc_to
        u = (soc_to - soc_from * decay) / sfac
        if u > 0.0:
            return u * cap / (eta_ch * dt_h)
        if u < 0.0:
            return u * cap * eta_dis / dt_h
        return 0.0

    @jit
    def power_bounds(soc, cap, eta_ch, eta_dis, decay, sfac, dt_h, p_max_ch, p_max_dis):
        # feasible one-interval power window: cap by limits and by hitting the
        # SoC bounds; a full storage cannot charge, an empty one not discharge
        if soc >= 1.0:
            p_hi = 0.0
        else:
            u_max = (1.0 - soc * decay) / sfac
            p_hi = u_max * cap / (eta_ch * dt_h)
            if p_hi > p_max_ch:
                p_hi = p_max_ch
            if p_hi < 0.0:
                p_hi = 0.0
        if soc <= 0.0:
            p_lo = 0.0
        else:
            u_min = (0.0 - soc * decay) / sfac
            p_lo = u_min * cap * eta_dis / dt_h
            if p_lo < -p_max_dis:
                p_lo = -p_max_dis
            if p_lo > 0.0:
                p_lo = 0.0
        return p_lo, p_hi

    @jit
    def soc_trajectory(powers, soc0, cap, eta_ch, eta_dis, decay, sfac, dt_h, socs):
        # forward sweep; fills socs (clamped into [0, 1] so it can continue)
        # and reports the worst unclamped excursion (0.0 when satisfiable)
        n = powers.shape[0]
        worst = 0.0
        soc = soc0
        for i in range(n):
            nxt = step_soc_raw(soc, powers[i], cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if nxt > 1.0:
                if nxt - 1.0 > worst:
                    worst = nxt - 1.0
                nxt = 1.0
            elif nxt < 0.0:
                if -nxt > worst:
                    worst = -nxt
                nxt = 0.0
            socs[i] = nxt
            soc = nxt
        return worst

    @jit
    def repair_powers(strategies, powers, soc0, cap, eta_ch, eta_dis, decay, sfac,
                      dt_h, p_max_ch, p_max_dis, coupled, has_coupled, socs):
        # deterministic clipping sweep (limits, coupling, satisfiability);
        # powers only shrink toward zero, so established sign consistency holds
        n = powers.shape[0]
        soc = soc0
        for i in range(n):
            p = powers[i]
            if p > p_max_ch:
                p = p_max_ch
            elif p < -p_max_dis:
                p = -p_max_dis
            if has_coupled != 0 and strategies[i] == CHARGE and p > coupled[i]:
                p = coupled[i]
                if p < 0.0:
                    p = 0.0
            p_lo, p_hi = power_bounds(soc, cap, eta_ch, eta_dis, decay, sfac, dt_h,
                                      p_max_ch, p_max_dis)
            if p > p_hi:
                p = p_hi
            elif p < p_lo:
                p = p_lo
            nxt = step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if nxt > 1.0:
                nxt = 1.0
            elif nxt < 0.0:
                nxt = 0.0
            powers[i] = p
            socs[i] = nxt
            soc = nxt

    @jit
    def socs_to_powers_lenient(socs, soc0, cap, eta_ch, eta_dis, decay, sfac, dt_h,
                               p_max_ch, p_max_dis, powers):
        # realize a desired SoC trajectory as closely as the limits allow;
        # rewrites socs to the achieved trajectory, fills powers
        n = socs.shape[0]
        soc = soc0
        for i in range(n):
            target = socs[i]
            if target > 1.0:
                target = 1.0
            elif target < 0.0:
                target = 0.0
            p_lo, p_hi = power_bounds(soc, cap, eta_ch, eta_dis, decay, sfac, dt_h,
                                      p_max_ch, p_max_dis)
            p = power_for_delta(soc, target, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if p > p_hi:
                p = p_hi
            elif p < p_lo:
                p = p_lo
            nxt = step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if nxt > 1.0:
                nxt = 1.0
            elif nxt < 0.0:
                nxt = 0.0
            powers[i] = p
            socs[i] = nxt
            soc = nxt

    @jit
    def sample_powers(strategies, uniforms, soc0, cap, eta_ch, eta_dis, decay, sfac,
                      dt_h, p_max_ch, p_max_dis, coupled, has_coupled, powers, socs):
        # constructive sampler: per interval a feasible power for the given
        # strategy, scaled by the pre-drawn uniform variate in [0, 1)
        n = strategies.shape[0]
        soc = soc0
        for i in range(n):
            p_lo, p_hi = power_bounds(soc, cap, eta_ch, eta_dis, decay, sfac, dt_h,
                                      p_max_ch, p_max_dis)
            s = strategies[i]
            if s == BUY or s == CHARGE:
                hi = p_hi
                if has_coupled != 0 and s == CHARGE and hi > coupled[i]:
                    hi = coupled[i]
                    if hi < 0.0:
                        hi = 0.0
                p = uniforms[i] * hi
            else:
                p = uniforms[i] * p_lo
            nxt = step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if nxt > 1.0:
                nxt = 1.0
            elif nxt < 0.0:
                nxt = 0.0
            powers[i] = p
            socs[i] = nxt
            soc = nxt

    @jit
    def validity_bits(strategies, powers, soc0, cap, eta_ch, eta_dis, decay, sfac,
                      dt_h, p_max_ch, p_max_dis, coupled, has_coupled):
        # bitmask of violated constraint families for a power-form schedule
        n = powers.shape[0]
        bits = 0
        soc = soc0
        for i in range(n):
            p = powers[i]
            s = strategies[i]
            clipped = clip_power(soc, p, p_max_ch, p_max_dis)
            if abs(clipped - p) > POWER_TOL:
                bits |= V_LIMITS
            if p > POWER_TOL and not (s == BUY or s == CHARGE):
                bits |= V_CONSISTENCY
            elif p < -POWER_TOL and not (s == SELL or s == DISCHARGE or s == LOCAL_SDM):
                bits |= V_CONSISTENCY
            if has_coupled != 0 and s == CHARGE and p > coupled[i] + POWER_TOL:
                bits |= V_COUPLING
            nxt = step_soc_raw(soc, p, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            if nxt > 1.0:
                if nxt - 1.0 > SOC_TOL:
                    bits |= V_SATISFIABILITY
                nxt = 1.0
            elif nxt < 0.0:
                if -nxt > SOC_TOL:
                    bits |= V_SATISFIABILITY
                nxt = 0.0
            soc = nxt
        return bits

    @jit
    def evaluate_genome(strategies, socs, soc0, cap, eta_ch, eta_dis, decay, sfac,
                        dt_h, p_max_ch, p_max_dis, coupled, has_coupled,
                        obj_kind, price_buy, price_sell, demand, peak_cost,
                        peak_as_printed, peak_include_sdm, target):
        # fitness of a load-state genome in one pass: recover powers, check
        # all constraint families, accumulate the local objective and the L1
        # gap of the grid-visible projection against the target;
        # returns (local_fitness, global_fitness, valid_flag)
        n = strategies.shape[0]
        valid = 1
        f = 0.0
        gap = 0.0
        max_h = -1.0e300
        max_hde = -1.0e300
        max_de = -1.0e300
        soc = soc0
        for i in range(n):
            s = strategies[i]
            nxt = socs[i]
            if nxt > 1.0 + SOC_TOL or nxt < -SOC_TOL:
                valid = 0
            p = power_for_delta(soc, nxt, cap, eta_ch, eta_dis, decay, sfac, dt_h)
            clipped = clip_power(soc, p, p_max_ch, p_max_dis)
            if abs(clipped - p) > POWER_TOL:
                valid = 0
            if p > POWER_TOL and not (s == BUY or s == CHARGE):
                valid = 0
            elif p < -POWER_TOL and not (s == SELL or s == DISCHARGE or s == LOCAL_SDM):
                valid = 0
            if has_coupled != 0 and s == CHARGE and p > coupled[i] + POWER_TOL:
                valid = 0

            if obj_kind == OBJ_ARBITRAGE:
                if s == SELL:
                    f += price_sell[i] * (-p) * dt_h
                elif s == BUY:
                    f -= price_buy[i] * p * dt_h
            elif obj_kind == OBJ_LOCAL_SDM:
                h = demand[i]
                if h < 0.0:
                    h = 0.0
                p_lu = -p if s == LOCAL_SDM else 0.0
                f += price_buy[i] * (h - abs(p_lu - h)) * dt_h
            elif obj_kind == OBJ_PEAK_SHAVING:
                de = 0.0
                if s == DISCHARGE or (peak_include_sdm != 0 and s == LOCAL_SDM):
                    if p < 0.0:
                        de = p
                h = demand[i]
                if h > max_h:
                    max_h = h
                if h + de > max_hde:
                    max_hde = h + de
                if de > max_de:
                    max_de = de

            # grid-visible projection: injection positive, local SDM behind the meter
            os_i = 0.0 if s == LOCAL_SDM else -p
            gap += abs(target[i] - os_i)
            soc = nxt

        if obj_kind == OBJ_PEAK_SHAVING:
            if peak_as_printed != 0:
                f = (max_de - max_hde) * peak_cost
            else:
                f = (max_h - max_hde) * peak_cost
        return f, -gap, valid

    @jit
    def pareto_ranks(f1, f2):
        # nondominated ranks for two maximized objectives (0 = first front)
        n = f1.shape[0]
        dom = np.zeros((n, n), dtype=np.uint8)
        count = np.zeros(n, dtype=np.int64)
        for p in range(n):
            for q in range(n):
                if p == q:
                    continue
                if (f1[p] >= f1[q] and f2[p] >= f2[q]
                        and (f1[p] > f1[q] or f2[p] > f2[q])):
                    dom[p, q] = 1
                    count[q] += 1
        ranks = np.full(n, -1, dtype=np.int64)
        current = np.empty(n, dtype=np.int64)
        m = 0
        for q in range(n):
            if count[q] == 0:
                ranks[q] = 0
                current[m] = q
                m += 1
        front = 0
        assigned = m
        while assigned < n and m > 0:
            nxt = np.empty(n, dtype=np.int64)
            nxt_m = 0
            for k in range(m):
                p = current[k]
                for q in range(n):
                    if dom[p, q] == 1:
                        count[q] -= 1
                        if count[q] == 0:
                            ranks[q] = front + 1
                            nxt[nxt_m] = q
                            nxt_m += 1
            front += 1
            current = nxt
            m = nxt_m
            assigned += nxt_m
        return ranks

    return {
        "clip_power": clip_power,
        "step_soc_raw": step_soc_raw,
        "power_for_delta": power_for_delta,
        "power_bounds": power_bounds,
        "soc_trajectory": soc_trajectory,
        "repair_powers": repair_powers,
        "socs_to_powers_lenient": socs_to_powers_lenient,
        "sample_powers": sample_powers,
        "validity_bits": validity_bits,
        "evaluate_genome": evaluate_genome,
        "pareto_ranks": pareto_ranks,
    }


PY_IMPLS = _build_kernels(lambda f: f)

NUMBA_ENABLED = numba_requested()

if NUMBA_ENABLED:
    from numba import njit

    NUMBA_IMPLS = _build_kernels(njit(cache=True))
    ACTIVE_IMPLS = NUMBA_IMPLS
else:
    NUMBA_IMPLS = None
    ACTIVE_IMPLS = PY_IMPLS

clip_power = ACTIVE_IMPLS["clip_power"]
step_soc_raw = ACTIVE_IMPLS["step_soc_raw"]
power_for_delta = ACTIVE_IMPLS["power_for_delta"]
power_bounds = ACTIVE_IMPLS["power_bounds"]
soc_trajectory = ACTIVE_IMPLS["soc_trajectory"]
repair_powers = ACTIVE_IMPLS["repair_powers"]
socs_to_powers_lenient = ACTIVE_IMPLS["socs_to_powers_lenient"]
sample_powers = ACTIVE_IMPLS["sample_powers"]
validity_bits = ACTIVE_IMPLS["validity_bits"]
evaluate_genome = ACTIVE_IMPLS["evaluate_genome"]
pareto_ranks = ACTIVE_IMPLS["pareto_ranks"]


def decay_factors(tau: float | None) -> tuple[float, float]:
    """(decay, sfac) for a self-discharge time constant in interval units."""
    if tau is None or math.isinf(tau):
        return 1.0, 1.0
    if tau <= 0.0:
        raise ValueError("self-discharge time constant must be positive")
    decay = math.exp(-1.0 / tau)
    return decay, tau * (1.0 - decay)
