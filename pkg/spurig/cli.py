"""Command-line entry point: ``spurig <subcommand> [--config PATH] [--set section.key=value]``."""
import argparse
import json
from logging import DEBUG, INFO, basicConfig, getLogger
from pathlib import Path
import sys
from typing import Callable, Dict, List, NamedTuple, Optional

import torch

from . import __version__
from .config import Config, ConfigValue, default_document, read_document, resolve, setup_config
from .shared import SpurigError

LOGGER = getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Command(NamedTuple):
    name: str
    run: Callable[["SpurigApp"], None]
    help: str


class SpurigApp:
    """Registry of configuration values and subcommands plus the resolved run state."""

    def __init__(self):
        self.registry: Dict[str, ConfigValue] = {}
        self.commands: Dict[str, Command] = {}
        self.config: Optional[Config] = None

    def add_config_value(self, name: str, default, validator, description: str = ""):
        if name in self.registry:
            raise ValueError(f"configuration value {name!r} is already registered")
        self.registry[name] = ConfigValue(name, default, validator, description)

    def add_command(self, name: str, run: Callable[["SpurigApp"], None], help: str = ""):
        if name in self.commands:
            raise ValueError(f"subcommand {name!r} is already registered")
        self.commands[name] = Command(name, run, help)

    @property
    def out(self) -> Path:
        return Path(self.cfg["run.out"])

    @property
    def cfg(self) -> Config:
        if self.config is None:
            raise RuntimeError("configuration has not been resolved")
        return self.config

    def configure(
        self,
        path: Optional[Path],
        overrides: List[str],
        seed: Optional[int] = None,
        out: Optional[str] = None,
        threads: Optional[int] = None,
    ) -> Config:
        documents = [default_document()]
        if path is not None:
            documents.append(read_document(path))
        extra = list(overrides)
        if seed is not None:
            extra.append(f"run.seed={seed}")
        if out is not None:
            extra.append(f"run.out={json.dumps(str(out))}")
        if threads is not None:
            extra.append(f"run.threads={threads}")
        self.config = resolve(self.registry, documents, extra)
        return self.config

    def run(self, name: str):
        if name not in self.commands:
            raise KeyError(f"unknown subcommand {name!r}")
        self.cfg.write_snapshot(self.out)
        LOGGER.info(f"{name}: resolved configuration\n{self.cfg.to_toml()}")
        self.commands[name].run(self)


def setup_cli() -> SpurigApp:
    """Set up the application with every configuration value and subcommand."""
    from .commands import setup_commands
    from .report import setup_report

    app = SpurigApp()
    setup_config(app)
    setup_commands(app)
    setup_report(app)
    return app


def build_parser(app: SpurigApp) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spurig", description="Desk-scale 3D unrolled MRF reconstruction experiments."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(app.commands), help="pipeline stage to run")
    parser.add_argument("--config", type=Path, default=None, help="experiment TOML file")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--out", default=None, help="override run.out")
    parser.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one configuration value (repeatable)",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def error_document(exc: BaseException) -> Dict[str, object]:
    return {
        "error": type(exc).__name__,
        "message": str(exc),
        "details": getattr(exc, "details", None),
    }


def main(argv: Optional[List[str]] = None) -> int:
    app = setup_cli()
    args = build_parser(app).parse_args(argv)
    basicConfig(level=DEBUG if args.verbose else INFO, format=LOG_FORMAT)
    try:
        app.configure(args.config, args.overrides, args.seed, args.out, args.threads)
        if app.cfg["run.threads"]:
            torch.set_num_threads(app.cfg["run.threads"])
        app.run(args.command)
    except (SpurigError, ValueError, KeyError) as exc:
        LOGGER.debug("subcommand failed", exc_info=True)
        sys.stderr.write(json.dumps(error_document(exc), sort_keys=True, default=str) + "\n")
        return 1
    return 0
