import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from fbflow.config import apply_overrides, load_run_config, settings, setup_logging
from fbflow.core.harness import EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_OK, RunOutcome, corpus, run, run_corpus
from fbflow.exceptions import ConvergenceFailureError, DivergenceError, InvalidConfigError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.APP_NAME,
        description="Integrate the forward-backward flow of f + g and verify its convergence guarantees",
    )
    parser.add_argument("--log-level", default=None, help="override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--compare-discrete", action="store_true", help="also run the discrete iteration from x0")
        p.add_argument("--t-max", type=float, default=None)
        p.add_argument("--stop-residual", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory")

    run_parser = sub.add_parser("run", help="run one TOML configuration")
    run_parser.add_argument("config", type=Path)
    add_common(run_parser)

    corpus_parser = sub.add_parser("corpus", help="run the built-in problems")
    corpus_parser.add_argument("--jobs", type=int, default=None)
    add_common(corpus_parser)
    return parser


def _report(outcome: RunOutcome) -> None:
    if outcome.exit_code == EXIT_CONFIG_ERROR:
        for line in outcome.diagnostics:
            print(line, file=sys.stderr)
    elif outcome.exit_code == EXIT_CHECK_FAILED:
        print(f"{outcome.name}: FAILED {', '.join(outcome.failed)}", file=sys.stderr)
    else:
        print(f"{outcome.name}: ok ({outcome.artifacts['analysis'].parent})")


def _overrides(args: argparse.Namespace) -> dict:
    return {"t_max": args.t_max, "stop_residual": args.stop_residual, "seed": args.seed}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    label = args.command
    try:
        if args.command == "run":
            config = apply_overrides(load_run_config(args.config), **_overrides(args))
            label = config.name
            outcome = run(config, compare_discrete=args.compare_discrete, output_dir=args.out)
            _report(outcome)
            return outcome.exit_code

        configs = [apply_overrides(c, **_overrides(args)) for c in corpus()]
        out = args.out or settings.OUTPUT_DIR
        jobs = args.jobs or settings.CORPUS_JOBS
        outcomes = run_corpus(configs, out, jobs=jobs, compare_discrete=args.compare_discrete)
    except InvalidConfigError as e:
        for line in e.diagnostics:
            print(line, file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (DivergenceError, ConvergenceFailureError) as e:
        logger.error(f"{label}: integration aborted: {e}")
        print(f"{label}: error: {e}", file=sys.stderr)
        return EXIT_CHECK_FAILED

    for outcome in outcomes:
        _report(outcome)
    return max((o.exit_code for o in outcomes), default=EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
