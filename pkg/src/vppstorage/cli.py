"""Command-line interface.

Verbs:
  run           one negotiation: --scenario --method --seed --budget --out
  evaluate      repeated seeded trials plus the metrics tables
  sweep         EA parameter sweep on the three local test cases
  replay        re-run a recorded negotiation from its log
  gen-profiles  emit a synthetic profile as CSV

Exit codes: 0 success, 1 configuration error, 2 tick budget exhausted.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import scenario as sc
from .gabhyme import EaParams
from .simnet import RunRecord, run_negotiation, replay

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BUDGET = 2


def _load_scenario(ref: str) -> sc.ScenarioConfig:
    if ref in sc.BUILTIN_SCENARIOS:
        return sc.BUILTIN_SCENARIOS[ref]()
    return sc.load_config(ref)


def _scenario_base_dir(ref: str) -> Path | None:
    return None if ref in sc.BUILTIN_SCENARIOS else Path(ref).resolve().parent


def _cmd_run(args) -> int:
    config = _load_scenario(args.scenario)
    if args.seed is not None:
        config.base_seed = args.seed
    method = args.method or config.method
    setup = sc.build_setup(config, method, _scenario_base_dir(args.scenario))
    budget = args.budget or config.budget
    record = run_negotiation(setup, config.base_seed, budget=budget)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(record.to_jsonl())
    if args.history:
        with open(args.history, "w", newline="") as fh:
            sc.write_history_csv(record, fh)
    print(f"run {setup.name} seed={config.base_seed} ticks={record.ticks} "
          f"fulfillment={record.fulfillment:.4f} record={out}")
    return EXIT_BUDGET if record.budget_exhausted else EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _load_scenario(args.scenario)
    if args.trials:
        config.trials = args.trials
    if args.seed is not None:
        config.base_seed = args.seed
    methods = args.methods.split(",") if args.methods else [config.method]
    report = sc.evaluate(config, methods, _scenario_base_dir(args.scenario))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        sc.write_summary_csv(report, fh)
    with open(out / "trials.csv", "w", newline="") as fh:
        sc.write_trials_csv(report, fh)
    with open(out / "locals.csv", "w", newline="") as fh:
        sc.write_locals_csv(report, fh)
    budget_hit = False
    for method in report.methods:
        for t, record in enumerate(report.records[method]):
            (out / f"record_{method}_{t}.jsonl").write_text(record.to_jsonl())
            with open(out / f"history_{method}_{t}.csv", "w", newline="") as fh:
                sc.write_history_csv(record, fh)
            budget_hit = budget_hit or record.budget_exhausted
    for row in report.summary_rows():
        print(f"{row['method']:>10}  mean={row['mean']:+.4f}  "
              f"median={row['median']:+.4f}  std={row['std']:.4f}  "
              f"lq={row['lq']:+.4f}")
    return EXIT_BUDGET if budget_hit else EXIT_OK


def _cmd_sweep(args) -> int:
    values = [int(v) for v in args.values.split(",")]
    envs = sc.local_test_envs(args.horizon, args.minutes, args.profile_seed)
    if args.case != "all":
        if args.case not in envs:
            print(f"unknown test case {args.case!r}", file=sys.stderr)
            return EXIT_CONFIG
        envs = {args.case: envs[args.case]}
    result = sc.parameter_sweep(envs, args.param, values, args.repeats,
                                seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"sweep_{args.param}.csv", "w", newline="") as rows_fh, \
            open(out / f"sweep_{args.param}_series.csv", "w", newline="") as series_fh:
        sc.write_sweep_csv(result, rows_fh, series_fh)
    for case in envs:
        for value in values:
            finals = result.final_fitness(case, value)
            iqr = float(np.percentile(finals, 75) - np.percentile(finals, 25))
            print(f"{case:>12} {args.param}={value:<5} "
                  f"mean_final={finals.mean():+.4f} iqr={iqr:.4f}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    record = RunRecord.from_jsonl(Path(args.record).read_text())
    result = replay(record)
    if args.out:
        Path(args.out).write_text(result.to_jsonl())
    same = (result.final_fitness == record.final_fitness
            and result.fulfillment == record.fulfillment
            and result.final_choices == record.final_choices)
    print(f"replay ticks={result.ticks} fulfillment={result.fulfillment:.4f} "
          f"matches_record={same}")
    return EXIT_OK if same else EXIT_CONFIG


def _cmd_gen_profiles(args) -> int:
    if args.kind in sc.SYNTH_KINDS:
        values = sc.SYNTH_KINDS[args.kind](args.n, args.minutes, args.seed)
    elif args.kind == "price_buy":
        values = sc.synth_prices(args.n, args.minutes, args.seed)[0]
    elif args.kind == "price_sell":
        values = sc.synth_prices(args.n, args.minutes, args.seed)[1]
    else:
        print(f"unknown profile kind {args.kind!r}", file=sys.stderr)
        return EXIT_CONFIG
    sc.write_profile_csv(args.out, values)
    print(f"wrote {args.kind} profile ({args.n} intervals) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vppstorage",
        description="Distributed storage schedule negotiation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one negotiation")
    p_run.add_argument("--scenario", required=True,
                       help="scenario YAML path or builtin name "
                            f"({', '.join(sc.BUILTIN_SCENARIOS)})")
    p_run.add_argument("--method", choices=sc.METHODS, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--budget", type=int, default=None)
    p_run.add_argument("--out", required=True, help="run record path (.jsonl)")
    p_run.add_argument("--history", default=None, help="fitness history CSV path")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("evaluate", help="repeated trials plus metrics")
    p_eval.add_argument("--scenario", required=True)
    p_eval.add_argument("--methods", default=None,
                        help="comma-separated list, default: scenario method")
    p_eval.add_argument("--trials", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="EA parameter sweep")
    p_sweep.add_argument("--param", choices=sc.SWEEP_PARAMETERS, required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated ints")
    p_sweep.add_argument("--repeats", type=int, default=50)
    p_sweep.add_argument("--case", default="all",
                         choices=("all", "arbitrage", "peak_shaving", "local_sdm"))
    p_sweep.add_argument("--horizon", type=int, default=24)
    p_sweep.add_argument("--minutes", type=float, default=60.0)
    p_sweep.add_argument("--profile-seed", type=int, default=7)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_replay = sub.add_parser("replay", help="re-run a recorded negotiation")
    p_replay.add_argument("--record", required=True)
    p_replay.add_argument("--out", default=None)
    p_replay.set_defaults(func=_cmd_replay)

    p_gen = sub.add_parser("gen-profiles", help="emit a synthetic profile CSV")
    p_gen.add_argument("--kind", required=True,
                       choices=tuple(sc.SYNTH_KINDS) + ("price_buy", "price_sell"))
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n", type=int, default=96)
    p_gen.add_argument("--minutes", type=float, default=15.0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen_profiles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except sc.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
