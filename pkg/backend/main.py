import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

load_dotenv()

from backend import __version__
from backend.core.errors import ConfigError, MsScatterError, NonContractionError, ToleranceError
from backend.core.run_config import SCENARIOS, load_config
from backend.core.scenario_pipeline import failure_reason, run_scenario

logging.basicConfig(
    level=os.getenv("MSSCATTER_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NON_CONTRACTION = 3
EXIT_TOLERANCE = 4
EXIT_IO = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msscatter",
        description="Modified wave operator runs for the Maxwell-Schrodinger system in Coulomb gauge",
    )
    parser.add_argument("--config", required=True, help="TOML run file")
    parser.add_argument("--scenario", required=True, choices=SCENARIOS, help="Scenario to run")
    parser.add_argument("--out-dir", required=True, help="Directory for report.json, series.csv and checkpoints")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key by dotted path, e.g. --set grid.n=32 (repeatable)",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, (ConfigError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(exc, NonContractionError):
        return EXIT_NON_CONTRACTION
    if isinstance(exc, ToleranceError):
        return EXIT_TOLERANCE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_ERROR


def _print_progress(current: int, total: int, message: str) -> None:
    logger.debug(f"[{current}/{total}] {message}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides, args.scenario, args.out_dir)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Invalid configuration: {e}")
        reason = e.reason if isinstance(e, ConfigError) else "invalid_config"
        print(json.dumps({"status": "error", "reason": reason, "message": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"Cannot read {args.config}: {e}")
        return EXIT_IO

    try:
        run_scenario(cfg, progress_callback=_print_progress)
    except ToleranceError as e:
        logger.warning(str(e))
        return EXIT_TOLERANCE
    except NonContractionError as e:
        logger.error(f"Fixed point failed: {e}", exc_info=True)
        print(json.dumps({"status": "error", "reason": "non_contraction", "ratios": e.ratios}), file=sys.stderr)
        return EXIT_NON_CONTRACTION
    except (MsScatterError, OSError) as e:
        logger.error(f"Run failed: {type(e).__name__}: {e}", exc_info=True)
        print(json.dumps({"status": "error", "reason": failure_reason(e), "message": str(e)}), file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.error(f"Run failed: {type(e).__name__}: {e}", exc_info=True)
        return exit_code_for(e)
    return EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
