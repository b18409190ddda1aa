import argparse
import asyncio
import os
import sys
from typing import Any, Dict, List, Optional

import yaml

from core.errors import PulseForgeError
from core.experiment_config import INIT_STRATEGIES, load_experiment
from core.experiment_runner import ExperimentRunner
from utils.logger import logger, setup_logging


class PulseForge:
    """
    The main class for PulseForge: loads config.yaml, layers the experiment file and
    command-line overrides on top, and drives the experiment runner.
    """
    def __init__(self, config_path: str = "config.yaml", experiment_path: Optional[str] = None,
                 log_level: Optional[str] = None, **overrides):
        self.config = self._load_config(config_path)
        app = self.config.get("app") or {}
        setup_logging(
            debug=app.get("debug", False),
            log_level=log_level or app.get("log_level", "INFO"),
            log_file=app.get("log_file"),
        )
        logger.info(f"Initializing {app.get('name', 'PulseForge')} {app.get('version', '')}".rstrip())

        self.experiment = load_experiment(self.config, experiment_path, **overrides)
        self.runner = ExperimentRunner(self.config, self.experiment)
        logger.info("PulseForge initialized successfully.")

    async def __aenter__(self):
        logger.info(f"Starting PulseForge session, results go to {self.experiment.output_dir}")
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        status = self.runner.get_status()
        logger.info(f"PulseForge session finished: {status['commands_run']} command(s), "
                    f"{status['files_written']} file(s) written, {status['reevaluations']} re-evaluation(s)")

    def _load_config(self, config_path: str) -> Dict[str, Any]:
        """Loads configuration from a YAML file."""
        if not os.path.exists(config_path):
            logger.error(f"Config file not found at {config_path}")
            raise FileNotFoundError(f"Config file not found at {config_path}")
        with open(config_path, "r", encoding="utf-8") as f:
            config = yaml.safe_load(f)
        return config or {}

    async def run(self, command: str, args: argparse.Namespace) -> int:
        """Dispatches one subcommand; returns the process exit status."""
        if command == "continuous":
            result = await self.runner.cmd_continuous()
            print(f"phi={result['phi']:.17g}")
            print(result["paths"]["summary"])
        elif command == "discrete":
            campaign = await self.runner.cmd_discrete_campaign(pulse_file=args.pulse)
            print(f"phi_best={campaign.best.phi:.17g}")
            print(campaign.paths["summary"])
        elif command == "lloyd":
            result = await self.runner.cmd_lloyd(pulse_file=args.pulse)
            print(f"phi={result['phi']:.17g}")
            print(result["paths"]["summary"])
        elif command == "compare":
            result = await self.runner.cmd_compare()
            print(result["paths"]["compare"])
        elif command == "oracle-check":
            result = await self.runner.cmd_oracle_check()
            print(result["paths"]["report"])
            if not result["passed"]:
                return 1
        return 0


def parse_m_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("M list must not be empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--app-config", default="config.yaml", help="YAML application config.")
    common.add_argument("--config", dest="experiment", help="key=value experiment file.")
    common.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit).")
    common.add_argument("--out", help="Output directory.")
    common.add_argument("--workers", type=int, help="Concurrent realizations.")
    common.add_argument("--m", type=int, help="Number of discrete phase values M.")
    common.add_argument("--m-list", type=parse_m_list, help="Comma-separated M values for compare.")
    common.add_argument("--realizations", type=int, help="Realizations per discrete campaign.")
    common.add_argument("--init", choices=INIT_STRATEGIES, help="Discrete GRAPE initialization.")
    common.add_argument("--pulse", help="Continuous pulse file for lloyd / from_lloyd.")
    common.add_argument("--log-level", help="Overrides app.log_level from config.yaml.")

    parser = argparse.ArgumentParser(description="Discrete-phase pulse design for spin ensembles.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("continuous", parents=[common], help="Continuous GRAPE benchmark.")
    commands.add_parser("discrete", parents=[common], help="Multi-start discrete GRAPE campaign.")
    commands.add_parser("lloyd", parents=[common], help="Lloyd quantization of the continuous pulse.")
    commands.add_parser("compare", parents=[common], help="Discrete GRAPE vs Lloyd over M values.")
    commands.add_parser("oracle-check", parents=[common], help="Brute-force and finite-difference checks.")
    return parser


async def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        logger.error(f"--seed {args.seed} is not an unsigned 64-bit integer")
        return 2

    try:
        forge = PulseForge(
            config_path=args.app_config,
            experiment_path=args.experiment,
            log_level=args.log_level,
            seed=args.seed,
            output_dir=args.out,
            workers=args.workers,
            m=args.m,
            m_list=tuple(args.m_list) if args.m_list else None,
            n_realizations=args.realizations,
            init=args.init,
        )
        async with forge:
            return await forge.run(args.command, args)
    except (PulseForgeError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
