# Command line front end: py-warp <subcommand> [options]
# Last modified on Oct 18, 2026
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from .models.lab_model import LaboratoryModel
from .models.refinement import refinement_study
from .models.scenario import PRESETS, STAGES, ScenarioConfig
from .utility.errors import WarpLabError

logger = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="py-warp",
        description="Numerical checks of Harnack-type estimates along warped "
        "product Ricci flows on a circle base.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="Scenario JSON file.")
    source.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default="coupled-p1",
        help="Named scenario used when --config is absent (default: coupled-p1).",
    )
    common.add_argument("--out", type=Path, default=None, help="Output directory.")
    common.add_argument(
        "--level", type=int, default=0, help="Refinement level of the run (default: 0)."
    )
    common.add_argument("--seed", type=int, default=None, help="Override the seed.")
    common.add_argument(
        "--jobs", type=int, default=1, help="joblib workers (default: 1)."
    )
    common.add_argument("--progress", action="store_true", help="Show progress bars.")
    common.add_argument(
        "--verbose", "-v", action="store_true", help="Log at DEBUG level."
    )

    for stage in STAGES:
        sub.add_parser(
            stage,
            parents=[common],
            help=f"Run the {stage} stage and the stages it needs.",
        )
    all_parser = sub.add_parser("run", parents=[common], help="Run every stage.")
    all_parser.set_defaults(stages=STAGES)

    study = sub.add_parser(
        "study", parents=[common], help="Refinement study over several levels."
    )
    study.add_argument(
        "--levels",
        type=int,
        nargs="+",
        default=[0, 1, 2],
        help="Levels relative to the scenario grid (default: 0 1 2).",
    )

    report = sub.add_parser("report", help="Summarize verdict files.")
    report.add_argument(
        "paths", type=Path, nargs="+", help="Run directories or verdict JSON files."
    )
    report.add_argument("--verbose", "-v", action="store_true")
    return parser


def load_config(args):
    """Scenario of the command line: file or preset, then seed and level."""
    if args.config is not None:
        config = ScenarioConfig.from_json(args.config)
    else:
        config = ScenarioConfig.from_preset(args.preset)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.command != "study" and args.level:
        config = config.with_level(args.level)
    return config


def _run(args, stages):
    config = replace(load_config(args), checks=tuple(stages))
    out = args.out if args.out is not None else Path("runs") / config.name
    model = LaboratoryModel(
        config, run_dir=out, n_jobs=args.jobs, show_progress=args.progress
    )
    verdict = model.run()
    _, df_checks = LaboratoryModel.get_dfs(model)
    print(df_checks.to_string(index=False))
    print(f"\n{config.name}: {'PASS' if verdict['all_passed'] else 'FAIL'} ({out})")
    return EXIT_PASS if verdict["all_passed"] else EXIT_FAIL


def _study(args):
    config = load_config(args)
    out = args.out if args.out is not None else Path("runs") / f"{config.name}-study"
    result = refinement_study(config, args.levels, out_dir=out, n_jobs=args.jobs)
    if not result.indicators.empty:
        print(result.indicators.to_string())
    for r in result.reports:
        print(f"{r.name:32s} {r.verdict}")
    print(f"\n{config.name} study: {'PASS' if result.passed else 'FAIL'} ({out})")
    return EXIT_PASS if result.passed else EXIT_FAIL


def _verdict_files(paths):
    for path in paths:
        if path.is_dir():
            yield from sorted(path.rglob("verdict.json"))
            yield from sorted(path.rglob("study_verdict.json"))
        else:
            yield path


def _report(args):
    rows = []
    all_passed = True
    for path in _verdict_files(args.paths):
        with open(path) as f:
            verdict = json.load(f)
        all_passed &= bool(verdict["all_passed"])
        for check in verdict["checks"]:
            rows.append(
                {
                    "file": str(path),
                    "stage": check.get("stage", "study"),
                    "name": check["name"],
                    "verdict": check["verdict"],
                    "worst_margin": check["worst_margin"],
                    "tolerance": check["tolerance"],
                }
            )
    if not rows:
        logger.error("No verdict files found under %s.", [str(p) for p in args.paths])
        return EXIT_ERROR
    print(pd.DataFrame(rows).to_string(index=False))
    print(f"\n{'PASS' if all_passed else 'FAIL'}")
    return EXIT_PASS if all_passed else EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        if args.command == "report":
            return _report(args)
        if args.command == "study":
            return _study(args)
        stages = getattr(args, "stages", None) or (args.command,)
        return _run(args, stages)
    except WarpLabError as e:
        logger.error("%s", e)
        return EXIT_ERROR
    except OSError as e:
        logger.error("Cannot read or write %s: %s", e.filename, e.strerror)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
