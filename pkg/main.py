# main.py

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from maxprop import ExperimentRunner
from maxprop.commands import EXIT_USAGE
from maxprop.gradcheck import SCOPES

# Configure basic logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="maxprop", description="Train and compare residual, max and leaky-max combiner networks.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def run_options(p, config_required: bool):
        p.add_argument("--config", required=config_required, help="Run config (INI).")
        p.add_argument("--seed", type=int, default=None, help="Override [run] seed.")
        p.add_argument("--out", default=None, help="Override [run] output_dir.")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="Override a config value; repeatable.")

    train = sub.add_parser("train", help="Train one config or every run of a manifest.")
    run_options(train, config_required=False)
    train.add_argument("--manifest", default=None, help="Experiment manifest; trains every run x seed.")

    evaluate = sub.add_parser("eval", help="Evaluate saved weights.")
    run_options(evaluate, config_required=True)
    evaluate.add_argument("--weights", default=None, help="Weights file (default: <output_dir>/final_weights.bin).")
    evaluate.add_argument("--dataset", choices=("train", "test"), default="test")
    evaluate.add_argument("--results", default=None, help="JSON-lines file to append to.")

    ensemble = sub.add_parser("ensemble", help="Vote over the trained runs of a manifest.")
    ensemble.add_argument("--manifest", required=True)
    ensemble.add_argument("--voting", choices=("majority", "mean_prob"), default="majority")
    ensemble.add_argument("--dataset", choices=("train", "test"), default="test")

    gradcheck = sub.add_parser("gradcheck", help="Run the finite-difference gradient checks.")
    gradcheck.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    gradcheck.add_argument("--trials", type=int, default=100)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--inject-fault", action="store_true",
                           help="Add a deliberately wrong backward rule; the run must fail.")

    curves = sub.add_parser("curves", help="Merge metrics CSVs and optionally render a chart.")
    curves.add_argument("csv_paths", nargs="*", help="metrics.csv files.")
    curves.add_argument("--out", required=True, help="Merged CSV, or a .png/.pdf/.svg chart (CSV written alongside).")
    curves.add_argument("--chart", default=None, help="Optional chart path when --out is a CSV.")
    return parser


def command_kwargs(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "train":
        return dict(config=args.config, manifest=args.manifest, seed=args.seed, out=args.out, overrides=args.overrides)
    if args.command == "eval":
        return dict(config=args.config, weights=args.weights, dataset=args.dataset, seed=args.seed, out=args.out,
                    overrides=args.overrides, results=args.results)
    if args.command == "ensemble":
        return dict(manifest=args.manifest, voting=args.voting, dataset=args.dataset)
    if args.command == "gradcheck":
        return dict(scope=args.scope, trials=args.trials, seed=args.seed, inject_fault=args.inject_fault)
    return dict(csv_paths=args.csv_paths, out=args.out, chart=args.chart)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    runner = ExperimentRunner()
    report = runner.execute(args.command, **command_kwargs(args))
    print(json.dumps(report, indent=2, default=str))
    if "error" in report:
        logger.error(f"{args.command} failed: {report['error']}")
    return int(report.get("exit_code", EXIT_USAGE))


if __name__ == "__main__":
    sys.exit(main())
