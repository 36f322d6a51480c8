"""
`manage.py faster <subcommand>`: data generation, training, sampling, the
pilot study, pipeline simulation and comparison, the streaming server and
client, and table/figure reproduction. Artifacts go to <out>/<run-name>/.

Exit codes: 0 ok, 1 config or usage error, 2 runtime failure.
"""

import json
import logging
import sys
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError, CommandParser

from cli import tasks
from cli.config import load_config, write_manifest
from core.exceptions import ConfigError, FasterError
from pipeline.timing import ClientMode
from wire.server import serve

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
RUNTIME_EXIT = 2

SUBCOMMANDS = ("gen-data", "train", "sample", "pilot", "simulate", "compare", "serve", "client", "reproduce")

# flags that do not change what a run computes; the seed is part of the config
UNHASHED_OPTIONS = {
    "config",
    "seed",
    "out",
    "run_name",
    "progress",
    "trace",
    "subcommand",
    "verbosity",
    "settings",
    "pythonpath",
    "traceback",
    "no_color",
    "force_color",
    "skip_checks",
    "stdout",
    "stderr",
}


def run_options(options):
    """Subcommand flags that shape the results, as JSON-ready values."""
    return {
        key: str(value) if isinstance(value, Path) else value
        for key, value in sorted(options.items())
        if key not in UNHASHED_OPTIONS
    }


class UsageParser(CommandParser):
    """argparse reports usage errors with status 2; this command reserves 2 for runtime failures."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}", returncode=USAGE_EXIT)


class Command(BaseCommand):
    help = "Horizon-aware streaming flow policy experiments."

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = lambda message: UsageParser.error(parser, message)
        return parser

    def add_arguments(self, parser):
        sub = parser.add_subparsers(dest="subcommand", parser_class=UsageParser, required=True)
        modes = [m.value for m in ClientMode]

        def command(name, help_text):
            p = sub.add_parser(name, help=help_text)
            p.add_argument("--config", type=Path, help="JSON run configuration")
            p.add_argument("--seed", type=int, help="override the configured seed")
            p.add_argument("--out", type=Path, default=Path("out"), help="output root (default: out)")
            p.add_argument("--run-name", help="run directory name (default: the subcommand)")
            p.add_argument("--progress", action="store_true", help="show progress bars")
            return p

        command("gen-data", "write expert demonstrations")

        p = command("train", "train the velocity network")
        p.add_argument("--data", type=Path, help="dataset to train on (generated when omitted)")

        p = command("sample", "draw one chunk from a checkpoint")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--schedule", choices=["has", "constant"], default="has")
        p.add_argument("-d", "--delay", type=int, default=0, help="prefix length")
        p.add_argument("-s", "--horizon", type=int, help="execution horizon for early stopping")
        p.add_argument("--obs", type=float, nargs="+", help="observation values")

        p = command("pilot", "straightness and clean-estimate deviation per index")
        p.add_argument("--checkpoint", type=Path, help="evaluate this model instead of training one")
        p.add_argument("--samples", type=int, default=200)
        p.add_argument("--horizon", type=int, help="chunk length for a freshly trained model, e.g. 30")

        p = command("simulate", "discrete-event run of one client mode")
        p.add_argument("--mode", choices=modes, required=True)
        p.add_argument("--events", type=int, default=20, help="number of target jumps")
        p.add_argument("-s", "--horizon", type=int, help="execution horizon (default: s_min)")
        p.add_argument("--duration", type=float, default=30.0, help="seconds of simulated time")
        p.add_argument("--checkpoint", type=Path, help="use a trained model instead of the expert")

        p = command("compare", "analytic comparison table of all client modes")
        p.add_argument("--modes", choices=modes, nargs="+")
        p.add_argument("--name", default="timing")

        p = command("serve", "run the streaming policy server")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--host")
        p.add_argument("--port", type=int)
        p.add_argument("--mode", choices=["faster", "constant"])

        p = command("client", "run the wall-clock controller against a server")
        p.add_argument("--host")
        p.add_argument("--port", type=int)
        p.add_argument("--mode", choices=modes)
        p.add_argument("-s", "--horizon", type=int)
        p.add_argument("-d", "--delay", type=int, help="override the prefix length")
        p.add_argument("--duration", type=float)
        p.add_argument("--events", type=int, default=0)
        p.add_argument("--trace", type=Path, help="trace output path")

        p = command("reproduce", "comparison tables and figure data")
        p.add_argument("--tables", action="store_true")
        p.add_argument("--figures", action="store_true")
        p.add_argument("--checkpoint", type=Path, help="model for the figure data (trained when omitted)")
        p.add_argument("--samples", type=int, default=200)

    def handle(self, *args, **options):
        name = options["subcommand"]
        try:
            raw, cfg = load_config(options["config"], options["seed"])
            out_dir = options["out"] / (options["run_name"] or name)
            out_dir.mkdir(parents=True, exist_ok=True)
            results = self.dispatch(name, cfg, out_dir, options)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=USAGE_EXIT) from exc
        except (FasterError, OSError) as exc:
            logger.debug("%s failed", name, exc_info=True)
            raise CommandError(f"{name} failed: {exc}", returncode=RUNTIME_EXIT) from exc
        if results is None:
            return
        write_manifest(out_dir, name, raw, results, run_options(options))
        self.stdout.write(json.dumps({"command": name, "out": str(out_dir), "results": results}, default=str))

    def dispatch(self, name, cfg, out_dir, options):
        progress = options["progress"]
        if name == "gen-data":
            return tasks.run_gen_data(cfg, out_dir, progress)
        if name == "train":
            results, _ = tasks.run_train(cfg, out_dir, options["data"], progress)
            return results
        if name == "sample":
            return tasks.run_sample(
                cfg, out_dir, options["checkpoint"], options["delay"], options["horizon"], options["schedule"], options["obs"]
            )
        if name == "pilot":
            if options["samples"] < 1:
                raise ConfigError("--samples must be positive", path="--samples")
            return tasks.run_pilot(cfg, out_dir, options["samples"], options["horizon"], options["checkpoint"], progress)
        if name == "simulate":
            return tasks.run_simulate(
                cfg, out_dir, options["mode"], options["events"], options["horizon"], options["duration"], options["checkpoint"]
            )
        if name == "compare":
            return tasks.run_compare(cfg, out_dir, options["name"], options["modes"])
        if name == "serve":
            serve(options["checkpoint"], tasks.server_config(cfg, options["mode"], options["host"], options["port"]))
            return None
        if name == "client":
            return tasks.run_client(
                cfg,
                out_dir,
                options["mode"],
                options["horizon"],
                options["delay"],
                options["duration"],
                options["events"],
                options["host"],
                options["port"],
                options["trace"],
            )
        if name == "reproduce":
            if not options["tables"] and not options["figures"]:
                raise ConfigError("reproduce needs --tables and/or --figures")
            return tasks.run_reproduce(
                cfg, out_dir, options["tables"], options["figures"], options["checkpoint"], options["samples"], progress
            )
        raise ConfigError(f"unknown subcommand {name!r}; choose one of {', '.join(SUBCOMMANDS)}")
