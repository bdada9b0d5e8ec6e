from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Sequence

from pydantic import ValidationError

from riskmm import corridor, reporting, surrogates
from riskmm.errors import ConfigurationError, InfeasibleStateError, SolverError
from riskmm.settings import Settings, configure_logging
from riskmm.verification import CHECK_GROUPS, run_verification

logger = logging.getLogger("riskmm.cli")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3

DEFAULT_GAMMAS = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2]

# flag -> config field
FLAG_FIELDS = {
    "formulation": "formulation",
    "gamma": "gamma",
    "N": "horizon",
    "Nb": "n_branch",
    "steps": "steps",
    "seed": "seed",
    "repeats": "repeats",
}


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Corridor configuration JSON (defaults are used for missing fields).")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="PATH=VALUE",
        help="Override any config field by dot path, e.g. --set collision.beta=4. Repeatable.",
    )
    parser.add_argument("--formulation", choices=["optimistic", "pessimistic", "neutral_proxy"])
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--N", type=int, help="Prediction horizon.")
    parser.add_argument("--Nb", type=int, help="Branching horizon.")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--repeats", type=int)
    parser.add_argument("--out", type=Path, help="Output directory (default: RISKMM_OUTPUT_DIR or .).")
    parser.add_argument("--no-timing", action="store_true", help="Write 0 in timing columns for reproducible files.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskmm", description="Risk-sensitive MPC for mixture-of-experts systems.")
    parser.add_argument("--log-level", default=None, help="Logging level (default: RISKMM_LOG_LEVEL or INFO).")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="One open-loop solve from the configured state; writes solve.csv.")
    _add_config_arguments(solve)
    solve.add_argument("--random-init", action="store_true", help="Start MM from a seeded random input sequence.")
    solve.add_argument(
        "--guesses",
        type=int,
        metavar="K",
        help="Solve from K seeded random initial guesses; writes guesses.csv and guesses_summary.csv.",
    )

    simulate = sub.add_parser("simulate", help="Closed-loop runs over the configured seeds; writes trace.csv, metrics.csv.")
    _add_config_arguments(simulate)

    sweep = sub.add_parser("sweep-gamma", help="Closed-loop runs across gamma values; writes sweep.csv, sweep.svg.")
    _add_config_arguments(sweep)
    sweep.add_argument("--gammas", type=float, nargs="*", default=DEFAULT_GAMMAS)
    sweep.add_argument(
        "--formulations",
        nargs="+",
        default=["optimistic", "pessimistic"],
        choices=["optimistic", "pessimistic", "neutral_proxy"],
    )

    verify = sub.add_parser("verify", help="Run the verification suite; writes verify.json.")
    verify.add_argument("--only", nargs="+", choices=sorted(CHECK_GROUPS), help="Run only these check groups.")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out", type=Path)

    dump = sub.add_parser("dump-config", help="Write the effective configuration as JSON.")
    _add_config_arguments(dump)
    return parser


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    for flag, field in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{field}={json.dumps(value)}")
    if getattr(args, "random_init", False):
        overrides.append("random_init=true")
    return overrides


def _out_dir(args: argparse.Namespace) -> Path:
    out = args.out if args.out is not None else Settings().output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solve_guesses(config: corridor.CorridorConfig, guesses: int, out: Path) -> int:
    frame = reporting.guesses_frame(corridor.solve_random_guesses(config, guesses))
    summary = reporting.guess_summary_frame(frame)
    reporting.write_csv(frame, out / "guesses.csv")
    reporting.write_csv(summary, out / "guesses_summary.csv")
    row = summary.iloc[0]
    logger.info(
        "%s of %s guesses solved: loss %.4f +- %.4f, %.1f +- %.1f MM iterations",
        row["runs"],
        guesses,
        row["final_loss_mean"],
        row["final_loss_std"],
        row["mm_iterations_mean"],
        row["mm_iterations_std"],
    )
    return EXIT_OK if row["runs"] else EXIT_SOLVER


def cmd_solve(args: argparse.Namespace) -> int:
    config = corridor.load_config(args.config, _overrides(args))
    if args.guesses is not None:
        if args.guesses < 1:
            raise ConfigurationError(f"--guesses must be at least 1, got {args.guesses}")
        return _solve_guesses(config, args.guesses, _out_dir(args))
    out = _out_dir(args)
    try:
        _, report = corridor.solve_open_loop(config)
    except SolverError as exc:
        logger.error("Solve failed: %s", exc)
        if exc.report is not None:
            reporting.write_csv(reporting.solve_frame(exc.report, not args.no_timing), out / "solve.csv")
        return EXIT_SOLVER
    reporting.write_csv(reporting.solve_frame(report, not args.no_timing), out / "solve.csv")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = corridor.load_config(args.config, _overrides(args))
    out = _out_dir(args)
    results = corridor.simulate(config, n_jobs=Settings().threads)
    timing = not args.no_timing
    base = results[0]
    reporting.write_csv(reporting.trace_frame(base.trace, timing), out / "trace.csv")
    reporting.write_csv(reporting.metrics_frame(results), out / "metrics.csv")
    reporting.render_trace_svg(base.trace.states, out / "trace.svg")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = corridor.load_config(args.config, _overrides(args))
    cells = corridor.sweep_gamma(config, args.gammas, args.formulations, n_jobs=Settings().threads)
    out = _out_dir(args)
    summary = reporting.sweep_frame(cells)
    reporting.write_csv(summary, out / "sweep.csv")
    reporting.render_sweep_svg(summary, out / "sweep.svg")
    failures = int(summary["failures"].sum()) if not summary.empty else 0
    if failures:
        logger.warning("%s sweep runs failed; their cells aggregate the remaining runs", failures)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_verification(args.only, seed=args.seed, pi_solver=surrogates.optimal_pi)
    out = _out_dir(args)
    path = out / "verify.json"
    path.write_text(report.model_dump_json(indent=2))
    logger.info("Wrote %s: %s checks, %s failed", path, len(report.checks), len(report.failed))
    for check in report.failed:
        logger.error("FAILED %s: violation %.3e > tolerance %.1e", check.name, check.max_violation, check.tolerance)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_dump_config(args: argparse.Namespace) -> int:
    config = corridor.load_config(args.config, _overrides(args))
    text = corridor.dump_config(config)
    if args.out is not None:
        path = _out_dir(args) / "config.json"
        path.write_text(text + "\n")
        logger.info("Wrote %s", path)
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep-gamma": cmd_sweep,
    "verify": cmd_verify,
    "dump-config": cmd_dump_config,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ValidationError, InfeasibleStateError, json.JSONDecodeError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except SolverError as exc:
        logger.error("Solver failure: %s", exc)
        return EXIT_SOLVER
