"""The compiled kernels and the interpreted fallbacks must agree exactly."""

import numpy as np
import pytest

from vppstorage import kernels


pytestmark = pytest.mark.skipif(not kernels.NUMBA_ENABLED,
                                reason="numba path disabled")

STORAGE_ARGS = dict(cap=33.3, eta_ch=0.959, eta_dis=0.959, decay=1.0, sfac=1.0,
                    dt_h=0.25, p_max_ch=8.25, p_max_dis=8.25)
DECAYED_ARGS = dict(STORAGE_ARGS, decay=np.exp(-0.125), sfac=8.0 * (1 - np.exp(-0.125)))


def _args(d):
    return (d["cap"], d["eta_ch"], d["eta_dis"], d["decay"], d["sfac"], d["dt_h"])


@pytest.mark.parametrize("argset", [STORAGE_ARGS, DECAYED_ARGS])
def test_scalar_kernels_match(argset):
    rng = np.random.default_rng(0)
    a = argset
    for _ in range(500):
        soc = rng.random()
        p = rng.uniform(-20, 20)
        assert (kernels.clip_power(soc, p, a["p_max_ch"], a["p_max_dis"])
                == kernels.PY_IMPLS["clip_power"](soc, p, a["p_max_ch"], a["p_max_dis"]))
        assert (kernels.step_soc_raw(soc, p, *_args(a))
                == kernels.PY_IMPLS["step_soc_raw"](soc, p, *_args(a)))
        target = rng.random()
        assert (kernels.power_for_delta(soc, target, *_args(a))
                == kernels.PY_IMPLS["power_for_delta"](soc, target, *_args(a)))
        assert (kernels.power_bounds(soc, *_args(a), a["p_max_ch"], a["p_max_dis"])
                == kernels.PY_IMPLS["power_bounds"](soc, *_args(a), a["p_max_ch"],
                                                    a["p_max_dis"]))


@pytest.mark.parametrize("argset", [STORAGE_ARGS, DECAYED_ARGS])
def test_sweep_kernels_match(argset):
    rng = np.random.default_rng(1)
    a = argset
    coupled = rng.uniform(0, 5, 16)
    for _ in range(50):
        strategies = rng.integers(0, 5, 16).astype(np.int64)
        powers = rng.uniform(-12, 12, 16)
        soc0 = rng.random()

        s1, s2 = np.empty(16), np.empty(16)
        w_j = kernels.soc_trajectory(powers, soc0, *_args(a), s1)
        w_p = kernels.PY_IMPLS["soc_trajectory"](powers, soc0, *_args(a), s2)
        assert w_j == w_p and np.array_equal(s1, s2)

        p1, p2 = powers.copy(), powers.copy()
        t1, t2 = np.empty(16), np.empty(16)
        kernels.repair_powers(strategies, p1, soc0, *_args(a), a["p_max_ch"],
                              a["p_max_dis"], coupled, 1, t1)
        kernels.PY_IMPLS["repair_powers"](strategies, p2, soc0, *_args(a),
                                          a["p_max_ch"], a["p_max_dis"],
                                          coupled, 1, t2)
        assert np.array_equal(p1, p2) and np.array_equal(t1, t2)

        socs = rng.uniform(-0.2, 1.2, 16)
        sa, sb = socs.copy(), socs.copy()
        pa, pb = np.empty(16), np.empty(16)
        kernels.socs_to_powers_lenient(sa, soc0, *_args(a), a["p_max_ch"],
                                       a["p_max_dis"], pa)
        kernels.PY_IMPLS["socs_to_powers_lenient"](sb, soc0, *_args(a),
                                                   a["p_max_ch"], a["p_max_dis"], pb)
        assert np.array_equal(sa, sb) and np.array_equal(pa, pb)

        uniforms = rng.random(16)
        pa, pb = np.empty(16), np.empty(16)
        ta, tb = np.empty(16), np.empty(16)
        kernels.sample_powers(strategies, uniforms, soc0, *_args(a), a["p_max_ch"],
                              a["p_max_dis"], coupled, 1, pa, ta)
        kernels.PY_IMPLS["sample_powers"](strategies, uniforms, soc0, *_args(a),
                                          a["p_max_ch"], a["p_max_dis"],
                                          coupled, 1, pb, tb)
        assert np.array_equal(pa, pb) and np.array_equal(ta, tb)

        assert (kernels.validity_bits(strategies, powers, soc0, *_args(a),
                                      a["p_max_ch"], a["p_max_dis"], coupled, 1)
                == kernels.PY_IMPLS["validity_bits"](strategies, powers, soc0,
                                                     *_args(a), a["p_max_ch"],
                                                     a["p_max_dis"], coupled, 1))


def test_evaluate_genome_matches():
    rng = np.random.default_rng(2)
    a = STORAGE_ARGS
    target = rng.normal(size=16)
    buy, sell = rng.random(16), rng.random(16)
    demand = rng.uniform(0, 10, 16)
    for kind in (kernels.OBJ_NONE, kernels.OBJ_ARBITRAGE, kernels.OBJ_LOCAL_SDM,
                 kernels.OBJ_PEAK_SHAVING):
        for _ in range(30):
            strategies = rng.integers(0, 5, 16).astype(np.int64)
            socs = np.clip(rng.normal(0.5, 0.2, 16), 0, 1)
            args = (strategies, socs, 0.5, *_args(a), a["p_max_ch"], a["p_max_dis"],
                    kernels.EMPTY_F64, 0, kind, buy, sell, demand, 7.0, 0, 1, target)
            assert kernels.evaluate_genome(*args) == kernels.PY_IMPLS["evaluate_genome"](*args)


def test_pareto_ranks_match():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        f1 = rng.normal(size=n)
        f2 = rng.normal(size=n)
        assert np.array_equal(kernels.pareto_ranks(f1, f2),
                              kernels.PY_IMPLS["pareto_ranks"](f1, f2))


def test_decay_factors():
    assert kernels.decay_factors(None) == (1.0, 1.0)
    decay, sfac = kernels.decay_factors(4.0)
    assert decay == pytest.approx(np.exp(-0.25))
    assert sfac == pytest.approx(4.0 * (1 - np.exp(-0.25)))
    with pytest.raises(ValueError):
        kernels.decay_factors(-1.0)


def test_env_flag_reporting():
    assert kernels.numba_requested() in (True, False)
    assert set(kernels.ACTIVE_IMPLS) == set(kernels.PY_IMPLS)
