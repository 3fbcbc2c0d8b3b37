import argparse
import json
import logging
import sys

from IllusionLab.errors import ConfigError, LabError
from IllusionLab.lab_log import MemoryLogHandler, get_logger, setup_logging
from Runner.lab_settings import SCENARIOS, config_to_dict, default_config, load_config
from Runner.results import SUMMARY_FILE, ResultWriter, dumps, now, start_manifest
from Runner.scenarios import SCENARIO_RUNNERS

logger = get_logger("lab_main")

EXIT_PASSED = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

memory_log = MemoryLogHandler()


def handle_errors(func):
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, OSError, json.JSONDecodeError) as e:
            logger.error(f"configuration or IO error: {e}")
            return {"status": "error", "message": str(e), "exit_code": EXIT_CONFIG}
        except LabError as e:
            logger.error(f"{type(e).__name__}: {e}")
            return {"status": "error", "message": f"{type(e).__name__}: {e}", "exit_code": EXIT_FAILED}

    return wrapper


@handle_errors
def run_scenario(scenario, args):
    config = load_config(scenario, args.config, args.seed, args.out)
    config_dict = config_to_dict(config)
    writer = ResultWriter(config.output_dir)
    manifest = start_manifest(scenario, config_dict)
    writer.json("config.json", config_dict)
    logger.info(f"Running {scenario} with seed {config.seed} into {config.output_dir}")

    outcome = SCENARIO_RUNNERS[scenario](config, writer, plot=args.plot)
    exit_code = EXIT_PASSED if outcome.passed else EXIT_FAILED
    writer.json(SUMMARY_FILE, outcome.to_dict())
    writer.text("run.log", memory_log.text())

    manifest.finished_at = now()
    manifest.exit_code = exit_code
    writer.manifest(manifest)

    passed = sum(c.passed for c in outcome.checks)
    message = f"{scenario}: {passed}/{len(outcome.checks)} checks passed"
    if outcome.failures():
        message += "; failed: " + ", ".join(outcome.failures())
    return {"status": "success" if outcome.passed else "error", "message": message, "exit_code": exit_code}


@handle_errors
def print_defaults(scenario, args):
    sys.stdout.write(dumps(default_config(scenario)))
    return {"status": "success", "message": f"defaults for {scenario}", "exit_code": EXIT_PASSED}


def command_handler(command, args):
    if command in SCENARIO_RUNNERS:
        return run_scenario(command, args)
    if command == "defaults":
        return print_defaults(args.scenario, args)
    return {"status": "error", "message": "Invalid command.", "exit_code": EXIT_CONFIG}


def build_parser():
    parser = argparse.ArgumentParser(prog="lab_main", description="Subspace patching illusion lab")
    commands = parser.add_subparsers(dest="command", required=True)
    for scenario in SCENARIO_RUNNERS:
        sub = commands.add_parser(scenario, help=f"run the {scenario} scenario")
        sub.add_argument("--config", help="JSON config file; missing keys take their defaults")
        sub.add_argument("--seed", type=int, help="overrides the config seed")
        sub.add_argument("--out", help="overrides the config output_dir")
        sub.add_argument("--plot", action="store_true", help="also write PNG figures")
        sub.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    defaults = commands.add_parser("defaults", help="print the complete default config of a scenario")
    defaults.add_argument("scenario", choices=list(SCENARIOS))
    defaults.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    memory_log.lines.clear()
    setup_logging(logging.DEBUG if args.verbose else logging.INFO, memory_log)
    response = command_handler(args.command, args)
    if args.command != "defaults" or response["status"] != "success":
        print(response["message"], file=sys.stderr if response["status"] == "error" else sys.stdout)
    return response["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
