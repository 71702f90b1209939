import math

import numpy as np
import pytest

from vppstorage.storage import IntervalSpec, StorageParams

# the four storage parameterizations used across the evaluation scenarios
STORAGE_ROWS = {
    "psp": StorageParams(6000.0, math.sqrt(0.8), math.sqrt(0.8),
                         1300.0, 1300.0, None, 0.0),
    "big_peak": StorageParams(177.7, math.sqrt(0.92), math.sqrt(0.92),
                              117.6, 117.6, None, 17.77 / 177.7),
    "small_peak": StorageParams(33.3, math.sqrt(0.92), math.sqrt(0.92),
                                8.25, 8.25, None, 3.33 / 33.3),
    "household": StorageParams(5.12, math.sqrt(0.81), math.sqrt(0.81),
                               1.65, 2.4, None, 0.512 / 5.12),
}


@pytest.fixture(params=sorted(STORAGE_ROWS))
def storage_row(request):
    return STORAGE_ROWS[request.param]


@pytest.fixture
def spec96():
    return IntervalSpec(96, 15.0)


@pytest.fixture
def spec8():
    return IntervalSpec(8, 15.0)


def euler_step(soc: float, p: float, params: StorageParams, dt_hours: float,
               substeps: int = 900) -> float:
    """Independent fine-grained Euler integration of the continuous dynamics,
    in interval-normalized time (one interval == one unit)."""
    if params.self_discharge_tau is None:
        inv_tau = 0.0
    else:
        inv_tau = 1.0 / params.self_discharge_tau
    if p > 0:
        u = p * params.eta_charge * dt_hours / params.capacity_kwh
    elif p < 0:
        u = p * dt_hours / (params.eta_discharge * params.capacity_kwh)
    else:
        u = 0.0
    dx = 1.0 / substeps
    level = soc
    for _ in range(substeps):
        level = level + dx * (-level * inv_tau + u)
    return level


def euler_step_vec(socs: np.ndarray, powers: np.ndarray, params: StorageParams,
                   dt_hours: float, substeps: int = 900) -> np.ndarray:
    """Vectorized version of euler_step over many (soc, power) pairs."""
    if params.self_discharge_tau is None:
        inv_tau = 0.0
    else:
        inv_tau = 1.0 / params.self_discharge_tau
    u = np.where(powers > 0,
                 powers * params.eta_charge * dt_hours / params.capacity_kwh,
                 powers * dt_hours / (params.eta_discharge * params.capacity_kwh))
    u = np.where(powers == 0.0, 0.0, u)
    dx = 1.0 / substeps
    level = socs.astype(np.float64).copy()
    for _ in range(substeps):
        level += dx * (-level * inv_tau + u)
    return level
