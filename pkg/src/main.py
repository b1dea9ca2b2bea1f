"""Command-line entry point of the conical flow lab."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import acceptance
from config import LabSettings, load_model_config
from error_handling import ConfigValidationError, ErrorType, LabError, VerificationFailure, exit_code_for
from workflow import regenerate_report, run_limit, run_pipeline, run_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0


def _configure_logging(settings: LabSettings):
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def _default_out(settings: LabSettings, config) -> Path:
    return Path(settings.output_dir) / config.config_hash()[:12]


def _finish_pipeline(state) -> int:
    """Exit code of a finished pipeline state."""
    if state.get("last_error"):
        print(f"Run failed: {state['last_error']}", file=sys.stderr)
        return ErrorType(state.get("error_type") or ErrorType.UNKNOWN_ERROR.value).exit_code
    summary = state["summary"]
    print(f"Run directory: {state['run_dir']}")
    if summary.get("partial"):
        print("Ladder is partial: some rungs did not reach t_end", file=sys.stderr)
        return ErrorType.SOLVER_ERROR.exit_code
    passed = sum(1 for v in summary.get("verdicts", {}).values() if v["status"] in (acceptance.PASS, acceptance.NOT_APPLICABLE))
    print(f"Acceptance: {passed}/{len(summary.get('verdicts', {}))} criteria passed")
    return EXIT_OK


def cmd_run(args, settings: LabSettings) -> int:
    if args.resume_from:
        return cmd_resume(args, settings)
    config = load_model_config(args.config)
    out = Path(args.out) if args.out else _default_out(settings, config)
    state = run_pipeline(config, out, workers=settings.resolve_workers(args.workers))
    return _finish_pipeline(state)


def cmd_resume(args, settings: LabSettings) -> int:
    run_dir = Path(args.resume_from)
    config = load_model_config(run_dir / "config.json")
    if args.config:
        requested = load_model_config(args.config)
        if requested.config_hash() != config.config_hash():
            raise ConfigValidationError(f"{args.config} does not match the configuration stored in {run_dir}")
    logger.info(f"Resuming {run_dir}")
    state = run_pipeline(config, run_dir, workers=settings.resolve_workers(args.workers), resume=True)
    return _finish_pipeline(state)


def cmd_limit(args, settings: LabSettings) -> int:
    config = load_model_config(args.config)
    out = Path(args.out) if args.out else _default_out(settings, config)
    report = run_limit(config, out)
    print(f"Limit ladder written to {out / 'limit'}")
    print(f"Cauchy differences: {', '.join(f'{c:.3e}' for c in report['cauchy'])}")
    for row in report["gke"]:
        print(
            f"  eps={row['eps']:g}  newton {row['newton_residual']:.2e}  gke sup {row['gke_sup']:.2e}"
            f"  on [{row['s_lo']:.3g}, {row['s_hi']:.3g}]"
        )
    if not report["monotone"]:
        print("Warning: Cauchy differences are not decreasing", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args, settings: LabSettings) -> int:
    results = acceptance.evaluate(args.run_dir)
    print(acceptance.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"{len(failed)} of {len(results)} criteria did not pass")
    return EXIT_OK


def cmd_sweep(args, settings: LabSettings) -> int:
    out = Path(args.out) if args.out else Path(settings.output_dir) / f"sweep_{Path(args.config).stem}"
    rows = run_sweep(args.config, out, workers=settings.resolve_workers(args.workers))
    failed = [row for row in rows if row.get("status") != "completed"]
    print(f"Sweep written to {out}: {len(rows) - len(failed)}/{len(rows)} configurations completed")
    for row in failed:
        print(f"  run {row['index']}: {row.get('error_type')}: {row.get('error')}", file=sys.stderr)
    return EXIT_OK if not failed else ErrorType.SOLVER_ERROR.exit_code


def cmd_report(args, settings: LabSettings) -> int:
    summary = regenerate_report(args.run_dir)
    print(f"Figures regenerated in {Path(args.run_dir) / 'plots'}")
    for number, verdict in sorted(summary.get("verdicts", {}).items(), key=lambda kv: int(kv[0])):
        print(f"  {number:>2}. {verdict['title']}: {verdict['status']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conical-lab",
        description="Twisted conical Kahler-Ricci flow on P1 x P1: runs, limits, verification and sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the full pipeline for one configuration")
    run.add_argument("--config", required=False, help="Configuration JSON")
    run.add_argument("--out", help="Run directory")
    run.add_argument("--workers", type=int, help="Worker processes (overrides LAB_WORKERS)")
    run.add_argument("--resume-from", help="Continue an interrupted run directory")
    run.set_defaults(handler=cmd_run)

    resume = sub.add_parser("resume", help="Continue an interrupted run from its checkpoints")
    resume.add_argument("--resume-from", required=True, help="Run directory to continue")
    resume.add_argument("--config", help="Optional configuration that must match the stored one")
    resume.add_argument("--workers", type=int)
    resume.set_defaults(handler=cmd_resume)

    limit = sub.add_parser("limit", help="Solve the limit ladder and report the Kahler-Einstein residual")
    limit.add_argument("--config", required=True)
    limit.add_argument("--out")
    limit.set_defaults(handler=cmd_limit)

    verify = sub.add_parser("verify", help="Evaluate the acceptance criteria of a run directory")
    verify.add_argument("run_dir")
    verify.set_defaults(handler=cmd_verify)

    sweep = sub.add_parser("sweep", help="Run every configuration of a sweep document")
    sweep.add_argument("--config", required=True, help="Sweep document (base + variations)")
    sweep.add_argument("--out")
    sweep.add_argument("--workers", type=int)
    sweep.set_defaults(handler=cmd_sweep)

    report = sub.add_parser("report", help="Regenerate the figures of a run directory")
    report.add_argument("run_dir")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch the subcommand and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run" and not args.config and not args.resume_from:
        parser.error("run needs --config or --resume-from")

    try:
        settings = LabSettings.from_env()
    except ValueError as e:
        print(f"Invalid environment: {e}", file=sys.stderr)
        return ErrorType.VALIDATION_ERROR.exit_code
    _configure_logging(settings)

    try:
        return args.handler(args, settings)
    except ConfigValidationError as e:
        print(f"ConfigValidationError: {e}", file=sys.stderr)
        return exit_code_for(e)
    except LabError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    except KeyboardInterrupt:
        print("Interrupted; rerun with 'resume' to continue from the last checkpoint", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
