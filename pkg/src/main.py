import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv

from config import TrainConfig, default_output_dir, resolve_config
from errors import EngineError, UsageError
from experiment_workflow import COMMANDS

MSG_FAILED = "Run failed"
MSG_GRADCHECK_FAILED = "One or more gradient checks exceeded their tolerance."

load_dotenv()
logging.basicConfig(
    level=os.getenv('LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler(sys.stdout)]
)
logger = logging.getLogger(__name__)


@dataclass
class CliInvocation:
    """Parsed command line: subcommand, resolved config and output directory."""
    subcommand: str
    config: TrainConfig
    out_dir: str


def build_parser() -> argparse.ArgumentParser:
    """
    Argument parser with one subcommand per experiment and a flag for every
    TrainConfig field.

    Returns:
        argparse.ArgumentParser
    """
    parser = argparse.ArgumentParser(
        description="Train CNNs with batch, adaptive or no normalization and report the results",
        epilog="Example: python main.py crossval --config config/example_run.conf --batch_size 8"
    )
    subparsers = parser.add_subparsers(dest='subcommand', required=True)
    for name, help_text in (
        ('train', "Train one model on the first fold"),
        ('crossval', "K-fold cross-validation of one scenario"),
        ('compare', "Cross-validate all scenarios over the configured batch sizes"),
        ('gatereport', "Replay the adaptive gate without training and report gated fractions"),
        ('gradcheck', "Finite-difference gradient checks of every layer"),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="Plain-text key = value configuration file")
        sub.add_argument("--out", help="Output directory (default: OUTPUT_DIR or ./results)")
        sub.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override any configuration key; may be repeated"
        )
        for f in fields(TrainConfig):
            sub.add_argument(f"--{f.name}", dest=f"field_{f.name}", metavar="VALUE",
                             help=f"Override '{f.name}' (comma-separated for lists)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in args.set:
        if '=' not in item:
            raise UsageError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split('=', 1)
        overrides[key.strip()] = value.strip()
    for f in fields(TrainConfig):
        value = getattr(args, f"field_{f.name}")
        if value is not None:
            overrides[f.name] = value
    return overrides


def parse_invocation(argv: Optional[List[str]] = None) -> CliInvocation:
    """
    Parse argv and resolve the configuration: defaults < environment <
    --config file < flags.

    Raises:
        UsageError: On an unknown configuration key
        ConfigError: On an unparsable or out-of-range value
    """
    args = build_parser().parse_args(argv)
    config = resolve_config(args.config, _overrides(args))
    return CliInvocation(args.subcommand, config, args.out or default_output_dir())


def run(invocation: CliInvocation) -> Tuple[int, Dict]:
    bundle = COMMANDS[invocation.subcommand](invocation.config, invocation.out_dir)
    if not bundle.results.get('passed', True):
        logger.error(MSG_GRADCHECK_FAILED)
        return 1, bundle.results
    return 0, bundle.results


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point.

    Returns:
        int: 0 on success, 1 on any engine, I/O or configuration failure
    """
    try:
        invocation = parse_invocation(argv)
        logger.info(f"Starting {invocation.subcommand} (scenario={invocation.config.scenario}, "
                    f"dataset={invocation.config.dataset}, seed={invocation.config.seed})")
        code, _ = run(invocation)
        return code
    except (EngineError, OSError) as e:
        logger.error(f"{MSG_FAILED}: {type(e).__name__}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.error("Interrupted by user (Ctrl+C).")
        return 130


if __name__ == "__main__":
    project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    os.chdir(project_root)
    sys.exit(main())
