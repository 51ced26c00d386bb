"""Command-line interface.

Subcommands: run, diagonalize, sample, bench-scaling, extrapolate, report.
`SQD_THREADS` caps the worker ranks used by distributed applications.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .chem import configuration_from_string, parse_fcidump, SystemSpec, hf_configuration
from .davidson import solve_subspace
from .hamiltonian import build_hamiltonian_tables
from .parallel import scaling_benchmark, synthetic_problem, write_scaling_csv
from .recovery import CarryoverSet, build_subspace
from .reporting import (
    extrapolate_zero_variance,
    idle_summary,
    read_timeline,
    read_variance_csv,
)
from .sampler import (
    NoiseModel,
    execute_sampler_job,
    read_parameters,
    write_sample_batch,
)
from .workflow import RunConfig, run_closed_loop, warm_start


def _cmd_run(args) -> int:
    if args.resume:
        run_dir = run_closed_loop(None, resume_dir=args.resume)
    else:
        config = RunConfig.from_json(args.config)
        if args.out:
            config.output_dir = args.out
        if args.warm_start:
            config = warm_start(config, args.warm_start)
        run_dir = run_closed_loop(config)
    with open(Path(run_dir) / "result.json") as fh:
        result = json.load(fh)
    print(f"run directory: {run_dir}")
    print(f"best energy: {result['best_energy']:.10f}")
    return 0


def _read_basis_file(path) -> list:
    configurations = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            configurations.append(configuration_from_string(line.split()[0]))
    return configurations


def _cmd_diagonalize(args) -> int:
    ints, spec = parse_fcidump(args.fcidump)
    configurations = _read_basis_file(args.basis)
    spin_symmetric = args.spin_symmetric and spec.n_alpha == spec.n_beta
    basis = build_subspace(
        configurations, CarryoverSet.empty(), spec, spin_symmetric=spin_symmetric
    )
    tables = build_hamiltonian_tables(basis, ints)
    report = solve_subspace(
        tables, tol=args.tol, max_iter=args.max_iter,
        wall_clock_limit=args.wall_clock_limit,
    )
    payload = report.to_json_dict()
    payload["subspace_dim"] = basis.dimension
    payload["d_half_alpha"] = basis.dim_alpha
    payload["d_half_beta"] = basis.dim_beta
    print(json.dumps(payload, indent=1))
    return 0


def _cmd_sample(args) -> int:
    params = read_parameters(args.params)
    if args.fcidump:
        _, spec = parse_fcidump(args.fcidump)
    elif args.n_orb is not None and args.n_alpha is not None and args.n_beta is not None:
        spec = SystemSpec(args.n_orb, args.n_alpha, args.n_beta)
    else:
        print("sample: provide --fcidump or all of --n-orb/--n-alpha/--n-beta",
              file=sys.stderr)
        return 2
    batch = execute_sampler_job(
        params, spec, hf_configuration(spec), args.shots,
        NoiseModel(args.noise), args.seed,
    )
    if args.out:
        write_sample_batch(batch, args.out, spec.n_orb)
        print(f"wrote {len(batch.counts)} unique bitstrings to {args.out}")
    else:
        from .chem import configuration_to_string

        for conf in sorted(batch.counts):
            print(f"{configuration_to_string(conf, spec.n_orb)} {batch.counts[conf]}")
    return 0


def _cmd_bench_scaling(args) -> int:
    rank_counts = [int(x) for x in args.ranks.split(",")]
    records = []
    for dim in (int(x) for x in args.dims.split(",")):
        d_half = max(2, math.isqrt(dim))
        tables, psi = synthetic_problem(args.n_orb, d_half, args.seed)
        records.extend(
            scaling_benchmark(
                tables, psi, rank_counts,
                plans_per_count=args.plans_per_count,
                repetitions=args.repetitions,
                balance=args.balance == "on",
            )
        )
    write_scaling_csv(records, args.out)
    for r in records:
        print(f"ranks={r.rank_count} plan=({r.b_alpha},{r.b_beta},{r.t},{r.m}) "
              f"median={r.wall_ms_median:.2f} ms speedup={r.speedup:.2f} "
              f"efficiency={r.efficiency:.2f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_extrapolate(args) -> int:
    points = read_variance_csv(args.points)
    intercept, sigma = extrapolate_zero_variance(points)
    payload = {"intercept": intercept, "sigma": sigma, "n_points": len(points)}
    print(json.dumps(payload, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=1)
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    report: dict = {"schema": "sqd.report/1.0", "run_dir": str(run_dir)}
    config_path = run_dir / "config.json"
    if config_path.is_file():
        with open(config_path) as fh:
            report["config"] = json.load(fh)
    result_path = run_dir / "result.json"
    if result_path.is_file():
        with open(result_path) as fh:
            report["result"] = json.load(fh)
    timeline_path = run_dir / "timeline.csv"
    if timeline_path.is_file():
        records = read_timeline(timeline_path)
        report["idle"] = idle_summary(records)
        report["timeline_rows"] = len(records)
    variance_path = run_dir / "variance.csv"
    if variance_path.is_file():
        points = read_variance_csv(variance_path)
        report["variance_points"] = len(points)
        distinct = {p.variance for p in points}
        if len(points) >= 2 and len(distinct) >= 2:
            intercept, sigma = extrapolate_zero_variance(points)
            report["extrapolation"] = {"intercept": intercept, "sigma": sigma}
    out_path = run_dir / "report.json"
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=1)
    print(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sqd",
        description="Closed-loop sample-based quantum diagonalization at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the closed-loop workflow")
    p_run.add_argument("--config", help="run configuration JSON")
    p_run.add_argument("--resume", help="resume an interrupted run directory")
    p_run.add_argument("--warm-start", help="seed walkers from a prior run directory")
    p_run.add_argument("--out", help="output run directory (overrides config)")
    p_run.set_defaults(func=_cmd_run)

    p_diag = sub.add_parser("diagonalize", help="diagonalize over a basis file")
    p_diag.add_argument("--fcidump", required=True)
    p_diag.add_argument("--basis", required=True,
                        help="text file of configuration bitstrings")
    p_diag.add_argument("--tol", type=float, default=1e-3)
    p_diag.add_argument("--max-iter", type=int, default=10)
    p_diag.add_argument("--wall-clock-limit", type=float, default=None)
    p_diag.add_argument("--no-spin-symmetric", dest="spin_symmetric",
                        action="store_false")
    p_diag.set_defaults(func=_cmd_diagonalize)

    p_sample = sub.add_parser("sample", help="simulate the quantum sampler")
    p_sample.add_argument("--params", required=True, help="parameter JSON file")
    p_sample.add_argument("--shots", type=int, required=True)
    p_sample.add_argument("--noise", type=float, default=0.0,
                          help="per-bit flip rate")
    p_sample.add_argument("--fcidump")
    p_sample.add_argument("--n-orb", type=int)
    p_sample.add_argument("--n-alpha", type=int)
    p_sample.add_argument("--n-beta", type=int)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out")
    p_sample.set_defaults(func=_cmd_sample)

    p_bench = sub.add_parser("bench-scaling", help="strong-scaling benchmark")
    p_bench.add_argument("--dims", required=True,
                         help="comma-separated subspace dimensions")
    p_bench.add_argument("--ranks", required=True,
                         help="comma-separated rank counts, e.g. 1,2,4,8")
    p_bench.add_argument("--balance", choices=("on", "off"), default="on")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--n-orb", type=int, default=12)
    p_bench.add_argument("--repetitions", type=int, default=3)
    p_bench.add_argument("--plans-per-count", type=int, default=1)
    p_bench.add_argument("--out", default="scaling.csv")
    p_bench.set_defaults(func=_cmd_bench_scaling)

    p_ext = sub.add_parser("extrapolate", help="zero-variance energy extrapolation")
    p_ext.add_argument("--points", required=True, help="variance CSV")
    p_ext.add_argument("--out")
    p_ext.set_defaults(func=_cmd_extrapolate)

    p_rep = sub.add_parser("report", help="summarize a run directory")
    p_rep.add_argument("--run", required=True)
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run" and not args.resume and not args.config:
        print("run: --config is required unless --resume is given", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
