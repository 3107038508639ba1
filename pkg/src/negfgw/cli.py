"""Command-line entry point.

Subcommands: ``run`` executes a configured calculation and writes the
observable tables plus a run report; ``bench`` measures the scaling
sweeps; ``check-oracle`` compares the production kernels against their
reference implementations; ``gen-device`` writes a seeded toy device
file.  All configuration is explicit through flags and config files; no
environment variables are consulted.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import bench, deviceio, driver, toys
from .errors import NegfError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="negfgw",
        description="Quantum-transport batch runs on block-tridiagonal devices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured calculation")
    p_run.add_argument("--config", required=True, help="JSON run configuration")
    p_run.add_argument("--output-dir", help="override the configured output directory")
    p_run.add_argument("--workers", type=int, help="override the worker count")
    p_run.add_argument(
        "--partitions", type=int, help="override the spatial partition count"
    )
    p_run.add_argument(
        "--oracle",
        action="store_true",
        help="also run the dense/direct cross-checks and report deviations",
    )

    p_bench = sub.add_parser("bench", help="run the scaling benchmark suite")
    p_bench.add_argument("--output-dir", help="also write the report to a file")
    p_bench.add_argument(
        "--workers", type=int, help="largest worker count for the weak-scaling sweep"
    )
    p_bench.add_argument(
        "--partitions", type=int, help="largest partition count for the overhead sweep"
    )

    p_check = sub.add_parser(
        "check-oracle", help="compare production kernels against reference oracles"
    )
    p_check.add_argument("--output-dir", help="also write the report to a file")

    p_gen = sub.add_parser("gen-device", help="write a seeded toy device file")
    p_gen.add_argument("path", help="output device file")
    p_gen.add_argument(
        "--config",
        help="JSON generator parameters (seed, n_orb_puc, n_u_g, n_u_w, n_b, "
        "hopping, onsite_scale, v0, cell_length)",
    )
    return parser


def _emit(lines: list[str], output_dir: str | None, name: str) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if output_dir:
        import os

        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, name), "w", encoding="utf-8") as handle:
            handle.write(text)


def _cmd_run(args) -> int:
    config = driver.load_config(args.config)
    if args.output_dir is not None:
        config = replace(config, output_dir=args.output_dir)
    if args.partitions is not None:
        workers = args.workers if args.workers is not None else args.partitions
        config = replace(config, p_s=args.partitions, workers=workers)
    elif args.workers is not None:
        config = replace(config, workers=args.workers)
    if args.oracle:
        config = replace(config, options=replace(config.options, oracle_mode=True))

    out = driver.run(config)
    paths = driver.write_tables(out, config.output_dir)
    paths.append(driver.write_report(out, config.output_dir))
    status = "converged" if out.result.converged else "not converged"
    print(
        f"{status} after {out.result.n_iter} iteration(s), "
        f"final residual {out.result.residuals[-1]:.3e}"
    )
    for path in paths:
        print(f"wrote {path}")
    return out.exit_code


def _cmd_bench(args) -> int:
    workers = tuple(
        w for w in (1, 2, 4) if w <= (args.workers or 4)
    ) or (1,)
    p_s_list = tuple(p for p in (2, 4) if p <= (args.partitions or 4)) or (2,)
    lines = ["negfgw benchmark report", "======================="]
    for report in (
        bench.bench_chain_length(),
        bench.bench_block_size(),
        bench.bench_convolution(),
    ):
        pts = "  ".join(f"{p.size}:{p.seconds:.3e}s" for p in report.points)
        lines.append(f"{report.label:18s} slope {report.slope:5.3f}   {pts}")
    for point in bench.bench_weak_scaling(workers=workers):
        lines.append(
            f"weak scaling       workers {point.workers}  n_e {point.n_e}  "
            f"{point.seconds:.3f}s  efficiency {point.efficiency:.2f}"
        )
    for point in bench.bench_partition_overhead(p_s_list=p_s_list):
        lines.append(
            f"partition overhead p_s {point.p_s}  measured {point.measured:.4e}  "
            f"model {point.model:.4e}  rel err {point.relative_error:.4f}"
        )
    _emit(lines, args.output_dir, "bench.txt")
    return 0


CHECK_TOLERANCES = {
    "rgf_vs_dense": 1e-10,
    "solve_vs_dense": 1e-9,
    "fft_vs_direct": 1e-10,
    "spatial_vs_sequential": 1e-9,
}


def _cmd_check_oracle(args) -> int:
    devs = driver.check_oracle()
    lines = ["negfgw oracle cross-check", "========================="]
    ok = True
    for name, tol in CHECK_TOLERANCES.items():
        value = devs[name]
        passed = value <= tol
        ok &= passed
        lines.append(
            f"{name:24s} max deviation {value:.3e}  tolerance {tol:.0e}  "
            f"{'ok' if passed else 'FAIL'}"
        )
    _emit(lines, args.output_dir, "check_oracle.txt")
    return 0 if ok else 1


def _cmd_gen_device(args) -> int:
    params = {}
    if args.config:
        with open(args.config, encoding="utf-8") as handle:
            params = json.load(handle)
    params.setdefault("seed", 0)
    spec = toys.random_device(**params)
    deviceio.save_device(spec, args.path)
    print(
        f"wrote {args.path}: {spec.n_cells} cells x {spec.n_orb_puc} orbitals, "
        f"groupings G={spec.n_u_g} W={spec.n_u_w}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "bench": _cmd_bench,
        "check-oracle": _cmd_check_oracle,
        "gen-device": _cmd_gen_device,
    }
    try:
        return handlers[args.command](args)
    except (NegfError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return driver.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
