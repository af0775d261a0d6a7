"""Command-line entry point: keyrate, sweep, figure, reduce and mc-validate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ContractViolation, DomainError, NumericalError
from .sweep import (
    FIGURES,
    FORMATS,
    SweepConfig,
    _json_safe,
    figure_command,
    keyrate_point,
    load_config,
    mc_validate_command,
    reduction_trace,
    rows_to_csv,
    run_sweep,
    write_mc_report,
    write_result,
)


def _config(args) -> SweepConfig:
    cfg = load_config(args.config) if args.config else SweepConfig().validate()
    if getattr(args, "format", None):
        cfg.output.format = args.format
    if getattr(args, "out", None):
        cfg.output.path = args.out
    return cfg


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_keyrate(args) -> int:
    cfg = _config(args)
    n = args.n_bobs or cfg.network.n_bobs[0]
    b = keyrate_point(cfg, args.distance_km, n, args.ratio)
    _emit(json.dumps(_json_safe(b.to_dict()), indent=2) + "\n", args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    res = run_sweep(cfg, threads=args.threads)
    fmt = cfg.output.format
    if cfg.output.path:
        write_result(res, cfg.output.path, fmt)
    elif fmt == "csv":
        sys.stdout.write(rows_to_csv(res.rows))
    else:
        sys.stdout.write(json.dumps(_json_safe({"rows": res.rows, "summary": res.summary, "meta": res.meta}),
                                    indent=2) + "\n")
    for n, d in res.summary["max_secure_distance_km"].items():
        logging.info("N=%s: max secure distance %s km", n, d)
    return 0


def cmd_figure(args) -> int:
    out = args.out or f"figures/{args.name}"
    result = figure_command(args.name, out_dir=out, threads=args.threads, fmt=args.format or "csv")
    for check in result["checks"]:
        print(check.line())
    print(f"datasets written to {out}")
    return 0 if result["passed"] else 1


def cmd_reduce(args) -> int:
    cfg = _config(args)
    n = args.n_bobs or cfg.network.n_bobs[0]
    _emit(json.dumps(_json_safe(reduction_trace(cfg, args.distance_km, n)), indent=2) + "\n", args.out)
    return 0


def cmd_mc_validate(args) -> int:
    cfg = _config(args)
    if args.pulses:
        cfg.mc.pulses = args.pulses
    report = mc_validate_command(cfg, seed=args.seed, threads=args.threads)
    if args.out:
        write_mc_report(report, args.out)
    print(f"M = {report.M} ({report.estimation_samples} used for estimation), seed = {report.seed}")
    print(f"max |z| = {report.max_abs_z:.3f} (threshold {report.z_threshold:g})")
    print(f"K analytic = {report.K_analytic:.6g}, K estimated = {report.K_estimated:.6g}, "
          f"gap = {report.rate_gap:.2%} (threshold {report.gap_threshold:.0%})")
    print(f"min eig(gamma_hat + i Omega) = {report.min_eig_gamma_hat:.3e}")
    if report.error:
        print(f"rate from estimate failed: {report.error}")
    if report.insufficient_precision:
        print("insufficient precision: fewer than 10^6 pulses, comparison is indicative only")
        return 0
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptmpqkd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output path")
        p.add_argument("--format", choices=FORMATS)
        if threads:
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("keyrate", help="single-point key rate breakdown")
    common(p, threads=False)
    p.add_argument("--distance-km", type=float, required=True)
    p.add_argument("--n-bobs", type=int)
    p.add_argument("--ratio", type=float, help="eps_a / eps_tot (default from config)")
    p.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("sweep", help="distance / N / noise-ratio sweep")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("figure", help="built-in figure dataset with acceptance checks")
    p.add_argument("name", choices=FIGURES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_figure)

    p = sub.add_parser("reduce", help="emit the mode-reduction trace")
    common(p, threads=False)
    p.add_argument("--distance-km", type=float, required=True)
    p.add_argument("--n-bobs", type=int)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("mc-validate", help="Monte Carlo check of the analytic model")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--pulses", type=int)
    p.set_defaults(func=cmd_mc_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractViolation, DomainError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
