from experiment_pipeline import EXPERIMENTS, ExperimentPipeline, ExperimentReport, unique_path
from jumpex.errors import ConfigError, JumpexError
from jumpex.model_config import load_experiment_config
from report_reviewer import ReportReviewer
from dotenv import load_dotenv
from pathlib import Path
from typing import List, Optional
import argparse
import logging
import sys

load_dotenv()

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jumpex",
        description="Monte Carlo laboratory for exploratory mean-variance control with jumps")
    parser.add_argument("experiment", choices=EXPERIMENTS, help="experiment suite to run")
    parser.add_argument("--config", required=True, help="TOML or JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    parser.add_argument("--paths", type=int, default=None, help="Monte Carlo path count")
    parser.add_argument("--steps", type=int, default=None, help="time steps per path")
    parser.add_argument("--out", default=None, help="output directory (overrides JUMPEX_OUT_DIR)")
    fmt = parser.add_mutually_exclusive_group()
    fmt.add_argument("--json", dest="output_format", action="store_const", const="json",
                     help="write the JSON report only")
    fmt.add_argument("--csv", dest="output_format", action="store_const", const="csv",
                     help="write the CSV report only")
    parser.set_defaults(output_format="both")
    parser.add_argument("--dump-scenarios", choices=("per-path", "long"), default=None,
                        help="write simulated discrete scenarios (decomposition suite)")
    parser.add_argument("--dump-paths", action="store_true", help="write optimal-law paths (value-check suite)")
    parser.add_argument("--review", action="store_true",
                        help="write a quality review of the report next to it")
    parser.add_argument("--quiet", action="store_true", help="no progress output")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="library log level")
    return parser


def review_report(report: ExperimentReport, out_dir: str, quiet: bool = False) -> List[Path]:
    """Quality text report and per-row review CSV in out_dir"""
    reviewer = ReportReviewer()
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    text_path = unique_path(directory, f"{report.experiment}_quality", ".txt")
    text = reviewer.generate_quality_report(report, str(text_path))
    csv_path = unique_path(directory, f"{report.experiment}_review", ".csv")
    reviewer.export_detailed_csv(report, str(csv_path))
    if not quiet:
        print(text)
    return [text_path, csv_path]


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one experiment from the command line.

    Returns:
        0 when every check passes, 1 on a failed check or experiment error, 2 on a config error
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = load_experiment_config(args.config, args.experiment, seed=args.seed, paths=args.paths,
                                        steps=args.steps, out_dir=args.out, output_format=args.output_format,
                                        dump_scenarios=args.dump_scenarios, dump_paths=args.dump_paths)
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        pipeline = ExperimentPipeline(config, quiet=args.quiet)
        report = pipeline.run()
        pipeline.save(report)
        if args.review:
            review_report(report, config.out_dir, quiet=args.quiet)
    except ConfigError as e:
        print(f"❌ Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except JumpexError as e:
        print(f"❌ Experiment '{args.experiment}' failed: {e}", file=sys.stderr)
        return EXIT_FAIL

    if not report.passed:
        for row in report.failing_rows:
            print(f"❌ FAIL {row.name}: {row.estimate:.6g} vs {row.target:.6g} (tolerance {row.tolerance:.3g})",
                  file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
