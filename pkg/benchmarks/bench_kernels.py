#!/usr/bin/env python3
"""Benchmark the hot kernels: numba-compiled vs interpreted fallback.

The interpreted implementations are always importable via
``vppstorage.kernels.PY_IMPLS``; the compiled set exists when numba is
available and ``VPPSTORAGE_NUMBA`` is not 0.  Run:

    python benchmarks/bench_kernels.py [--n 96] [--repeat 2000]
"""

import argparse
import time

import numpy as np

from vppstorage import kernels


def timeit(fn, args, repeat):
    fn(*args)  # warm-up / compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=96, help="intervals per schedule")
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--pool", type=int, default=60,
                        help="pool size for the nondominated sort")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n = args.n
    storage = (33.3, 0.959, 0.959, 1.0, 1.0, 0.25, 8.25, 8.25)
    cap, eta_ch, eta_dis, decay, sfac, dt_h, p_ch, p_dis = storage
    strategies = rng.integers(0, 5, n).astype(np.int64)
    powers = rng.uniform(-10, 10, n)
    socs = np.clip(rng.normal(0.5, 0.2, n), 0, 1)
    uniforms = rng.random(n)
    coupled = rng.uniform(0, 5.0, n)
    target = rng.normal(size=n)
    buy, sell = rng.random(n), rng.random(n)
    demand = rng.uniform(0, 10, n)
    f1, f2 = rng.normal(size=args.pool), rng.normal(size=args.pool)
    out_socs = np.empty(n)
    out_powers = np.empty(n)

    cases = {
        "soc_trajectory": (powers, 0.5, cap, eta_ch, eta_dis, decay, sfac, dt_h,
                           out_socs),
        "repair_powers": (strategies, powers.copy(), 0.5, cap, eta_ch, eta_dis,
                          decay, sfac, dt_h, p_ch, p_dis, coupled, 1, out_socs),
        "socs_to_powers_lenient": (socs.copy(), 0.5, cap, eta_ch, eta_dis, decay,
                                   sfac, dt_h, p_ch, p_dis, out_powers),
        "sample_powers": (strategies, uniforms, 0.5, cap, eta_ch, eta_dis, decay,
                          sfac, dt_h, p_ch, p_dis, coupled, 1, out_powers, out_socs),
        "validity_bits": (strategies, powers, 0.5, cap, eta_ch, eta_dis, decay,
                          sfac, dt_h, p_ch, p_dis, coupled, 1),
        "evaluate_genome": (strategies, socs, 0.5, cap, eta_ch, eta_dis, decay,
                            sfac, dt_h, p_ch, p_dis, coupled, 1,
                            kernels.OBJ_ARBITRAGE, buy, sell, demand, 7.0, 0, 1,
                            target),
        "pareto_ranks": (f1, f2),
    }

    print(f"horizon={n}, repeat={args.repeat}, numba_enabled={kernels.NUMBA_ENABLED}")
    header = f"{'kernel':>24} {'interpreted':>14} {'numba':>14} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, case_args in cases.items():
        t_py = timeit(kernels.PY_IMPLS[name], case_args, max(1, args.repeat // 50))
        if kernels.NUMBA_ENABLED:
            t_nb = timeit(kernels.NUMBA_IMPLS[name], case_args, args.repeat)
            print(f"{name:>24} {t_py * 1e6:>11.1f} us {t_nb * 1e6:>11.1f} us "
                  f"{t_py / t_nb:>8.1f}x")
        else:
            print(f"{name:>24} {t_py * 1e6:>11.1f} us {'-':>14} {'-':>9}")


if __name__ == "__main__":
    main()
