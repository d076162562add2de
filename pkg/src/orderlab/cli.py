"""Command-line entry point (``orderlab`` / ``python -m orderlab``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import bench, diagnostics
from .errors import ConfigError
from .taskstream import EpisodeShape


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _modes(text: str) -> list[str]:
    return [m.strip() for m in text.split(",") if m.strip()]


def _load(args: argparse.Namespace) -> bench.ExperimentConfig:
    cfg = bench.load_config(args.config) if args.config else bench.config_from_dict({})
    seeds = [args.seed] if args.seed is not None else None
    return bench.with_overrides(cfg, args.mode, seeds, args.out_dir)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    status = bench.run_experiment(cfg)
    print(f"wrote {cfg.experiment.out_dir}/summary.json")
    return status


def _print_sweep(summary: dict, axis: str) -> int:
    for g in summary["groups"]:
        print(f"{g['variant']:<12} {axis}={g['point']:<5} acc={g['final_accuracy_mean']:.4f} "
              f"+/- {g['final_accuracy_ci95']:.4f}")
    for v, s in summary[f"{axis}_slope"].items():
        print(f"{v:<12} slope={s:.6f} change={summary[f'{axis}_change'][v]:+.4f}")
    return 1 if summary["failures"] else 0


def cmd_sweep_ood(args: argparse.Namespace) -> int:
    cfg = _load(args)
    return _print_sweep(bench.sweep_ood(cfg, args.R), "R")


def cmd_sweep_memory(args: argparse.Namespace) -> int:
    cfg = _load(args)
    return _print_sweep(bench.sweep_memory(cfg, args.sizes), "memory")


def cmd_grad_check(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    results = diagnostics.grad_check_suite(args.instances, args.seed or 0)
    for r in results:
        print(f"{r.name:<15} max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:.0e} "
              f"{'PASS' if r.passed else 'FAIL'}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def cmd_ot_check(args: argparse.Namespace) -> int:
    rep = diagnostics.ot_check(args.instances, args.seed or 0)
    print(f"instances={rep.instances} max_deviation={rep.max_cost_dev:.3e} "
          f"marginals={rep.max_marginal_dev:.3e} symmetry={rep.max_symmetry_dev:.3e} "
          f"identity={rep.max_identity_cost:.3e} elapsed={rep.seconds:.1f}s "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_mi_bench(args: argparse.Namespace) -> int:
    rows = diagnostics.mi_bench(n_samples=args.samples, seed=args.seed or 0)
    for r in rows:
        print(f"rho={r.rho:.1f} truth={r.truth:.4f} lower={r.lower:.4f} upper={r.upper:.4f} "
              f"{'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in rows) else 1


def cmd_ood_eval(args: argparse.Namespace) -> int:
    shape = EpisodeShape(N=args.N, K=args.K, Z=args.Z, R=args.R, Q_size=args.Q)
    res = diagnostics.ood_eval(args.episodes, args.seed or 0, shape, args.offset, args.multiplier)
    print(json.dumps(res, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="single seed (overrides the config's seed list)")
    common.add_argument("--out-dir", default=None, help="output directory")
    common.add_argument("--mode", type=_modes, default=None,
                        help=f"comma-separated variants from {sorted(bench.VARIANTS)}")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="orderlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="one run per variant and seed")
    s.add_argument("config", nargs="?", help="JSON config (defaults if omitted)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-ood", parents=[common], help="accuracy versus OOD count R")
    s.add_argument("config", nargs="?")
    s.add_argument("--R", type=_ints, default=None, help="comma-separated R values")
    s.set_defaults(func=cmd_sweep_ood)

    s = sub.add_parser("sweep-memory", parents=[common], help="accuracy versus buffer size")
    s.add_argument("config", nargs="?")
    s.add_argument("--sizes", type=_ints, default=None, help="comma-separated capacities")
    s.set_defaults(func=cmd_sweep_memory)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("mi-bench", parents=[common], help="MI bounds on Gaussian pairs")
    s.add_argument("--samples", type=int, default=10_000)
    s.set_defaults(func=cmd_mi_bench)

    s = sub.add_parser("ot-check", parents=[common], help="exact OT against vertex enumeration")
    s.add_argument("--instances", type=int, default=200)
    s.set_defaults(func=cmd_ot_check)

    s = sub.add_parser("ood-eval", parents=[common], help="OOD detector precision / recall")
    s.add_argument("--episodes", type=int, default=200)
    s.add_argument("--N", type=int, default=5)
    s.add_argument("--K", type=int, default=5)
    s.add_argument("--Z", type=int, default=10)
    s.add_argument("--R", type=int, default=100)
    s.add_argument("--Q", type=int, default=15)
    s.add_argument("--offset", type=float, default=2.0,
                   help="OOD distance beyond the class sphere, in units of its radius")
    s.add_argument("--multiplier", type=float, default=1.0, help="threshold = mean + multiplier * std")
    s.set_defaults(func=cmd_ood_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
