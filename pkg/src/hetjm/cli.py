"""Command-line entry point: ``hetjm {simulate,fit,diagnose,ppc}``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (bad input files, I/O errors, sampler failures).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .diagnostics import pretreatment_residuals, posterior_predictive, summarize, variance_screen
from .sampler import run
from .simulate import cohort_summary, simulate_cohort

log = logging.getLogger("hetjm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat TOML file with model, prior and sampler settings")
    p.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    p.add_argument("--quiet", action="store_true", help="only report warnings and errors")


def _dataset_args(p, required=True):
    p.add_argument("--long", type=Path, required=required, help="longitudinal.csv")
    p.add_argument("--surv", type=Path, required=required, help="survival.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetjm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a cohort and write the dataset files")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("fit", help="sample the joint posterior")
    _common(p)
    _dataset_args(p)
    p.add_argument("--chains", type=int)
    p.add_argument("--iters", type=int, help="iterations per chain, warmup included")
    p.add_argument("--warmup", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (draws.csv, summary.csv)")

    p = sub.add_parser("diagnose", help="convergence summary and heteroskedasticity screen")
    _common(p)
    p.add_argument("--draws", type=Path, help="draws.csv from fit")
    _dataset_args(p, required=False)
    p.add_argument("--out", type=Path, help="output directory (summary.csv, variance_screen.csv)")

    p = sub.add_parser("ppc", help="posterior predictive replicates of the longitudinal values")
    _common(p)
    _dataset_args(p)
    p.add_argument("--draws", type=Path, required=True)
    p.add_argument("--n-rep", type=int, default=100)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (replicates.csv)")
    return parser


def _run_config(args) -> io.RunConfig:
    values = io.load_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    for flag, key in (("chains", "chains"), ("iters", "iters"), ("warmup", "warmup")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return io.RunConfig.from_mapping(values)


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    dataset = simulate_cohort(cfg.sim)
    long_path, surv_path = io.write_dataset(dataset, args.out)
    log.info("wrote %s and %s: %s", long_path, surv_path, cohort_summary(dataset))
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    dataset = io.read_dataset(args.long, args.surv)
    if not any(s.event for s in dataset):
        log.warning("no events observed; Weibull parameters will be prior-dominated")
    sampler = replace(cfg.sampler, progress=not args.quiet)
    draws = run(dataset, cfg.prior, sampler)
    summary = summarize(draws)
    io.write_draws(draws, args.out / "draws.csv")
    io.write_summary(summary, args.out / "summary.csv")
    n_div = int(draws["divergent__"].sum())
    if n_div:
        log.warning("%d divergent transition(s) after warmup", n_div)
    rhat = max((r["rhat"] for r in summary.values() if math.isfinite(r["rhat"])), default=math.nan)
    log.info("wrote %s; max split R-hat %.3f", args.out / "draws.csv", rhat)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.draws is None and args.long is None:
        raise UsageError("diagnose needs --draws and/or --long/--surv")
    if (args.long is None) != (args.surv is None):
        raise UsageError("--long and --surv must be given together")
    if args.draws is not None:
        draws = io.read_draws(args.draws)
        summary = summarize(draws)
        rhats = [r["rhat"] for r in summary.values() if math.isfinite(r["rhat"])]
        print(f"parameters: {len(summary)}  max split R-hat: {max(rhats, default=math.nan):.4f}")
        if "divergent__" in draws:
            print(f"divergent transitions: {int(draws['divergent__'].sum())}")
        if args.out is not None:
            io.write_summary(summary, args.out / "summary.csv")
    if args.long is not None:
        dataset = io.read_dataset(args.long, args.surv)
        res = variance_screen(pretreatment_residuals(dataset), df_loss=2)
        verdict = "reject" if res.reject else "do not reject"
        print(f"variance screen: A2 = {res.a2:.4f}, p = {res.p_value:.4g}, {verdict} homoskedasticity")
        if args.out is not None:
            path = args.out / "variance_screen.csv"
            with io._open_write(path) as fh:
                fh.write("q,s2,transformed\n")
                for q, s2, u in zip(res.q, res.s2, res.transformed):
                    fh.write(f"{q},{io.fmt(s2)},{io.fmt(u)}\n")
    return EXIT_OK


def cmd_ppc(args) -> int:
    cfg = _run_config(args)
    if args.n_rep < 1:
        raise UsageError("--n-rep must be >= 1")
    dataset = io.read_dataset(args.long, args.surv)
    draws = io.read_draws(args.draws)
    if draws.iters == 0:
        raise ValueError(f"{args.draws}: no draws")
    rng = np.random.default_rng(cfg.sim.seed)
    try:
        reps = posterior_predictive(draws, dataset, args.n_rep, rng)
    except KeyError as exc:
        raise ValueError(f"draws file lacks column {exc}; was it fitted to this dataset?") from None
    path = io.write_replicates(reps, dataset, args.out / "replicates.csv")
    log.info("wrote %s", path)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose, "ppc": cmd_ppc}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hetjm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"hetjm {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
