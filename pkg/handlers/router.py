"""
Command registry shared by the handler modules.

Each handler module owns a Router and registers its commands with
@router.command(...). cli.py includes every router and builds the argparse
tree from the registered commands.
"""

import os
from argparse import ArgumentParser, Namespace
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Type

from pydantic import BaseModel, ConfigDict, Field

from config import settings
from utils.io import read_json, write_json
from utils.logger import logger

COMMON_FLAGS = ("seed", "out_dir", "config")


class ExperimentConfig(BaseModel):
    """Resolved parameters of one command run; serialised beside its outputs."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: settings.seed)
    out_dir: str = Field(default_factory=lambda: settings.out_dir)
    config: Optional[str] = None

    def output_path(self, name: str) -> str:
        """Relative names land in out_dir; absolute paths are kept."""
        return os.path.join(self.out_dir, name)


@dataclass
class Command:
    name: str
    help: str
    config_model: Type[ExperimentConfig]
    arguments: Optional[Callable[[ArgumentParser], None]]
    handler: Callable[[ExperimentConfig], int]

    def add_to(self, subparsers) -> ArgumentParser:
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help)
        parser.add_argument("--seed", type=int, default=None, help="random seed")
        parser.add_argument("--out-dir", dest="out_dir", default=None, help="directory for outputs")
        parser.add_argument("--config", default=None, help="JSON file with parameters; flags override it")
        if self.arguments is not None:
            self.arguments(parser)
        return parser

    def resolve(self, args: Namespace) -> ExperimentConfig:
        """
        JSON file values first, then every flag that was actually given.

        Raises:
            pydantic.ValidationError: unknown keys or invalid values.
            OSError: the config file cannot be read.
            ValueError: the config file is not a JSON object.
        """
        values = {}
        if args.config:
            loaded = read_json(args.config)
            if not isinstance(loaded, dict):
                raise ValueError(f"{args.config} must hold a JSON object, got {type(loaded).__name__}")
            values.update(loaded)
            values["config"] = args.config
        flags = {k: v for k, v in vars(args).items() if k != "command" and v is not None}
        values.update(flags)
        return self.config_model.model_validate(values)

    def run(self, cfg: ExperimentConfig) -> int:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_json(cfg.model_dump(mode="json"), cfg.output_path(f"{self.name}.config.json"))
        logger.info(f"Running '{self.name}' (seed={cfg.seed}, out_dir={cfg.out_dir})")
        return self.handler(cfg)


class Router:
    def __init__(self) -> None:
        self.commands: Dict[str, Command] = {}

    def command(
        self,
        name: str,
        config: Type[ExperimentConfig],
        help: str = "",
        arguments: Optional[Callable[[ArgumentParser], None]] = None,
    ):
        def decorator(handler: Callable[[ExperimentConfig], int]):
            if name in self.commands:
                raise ValueError(f"command '{name}' registered twice")
            self.commands[name] = Command(name, help, config, arguments, handler)
            return handler

        return decorator

    def include_router(self, other: "Router") -> None:
        for name, command in other.commands.items():
            if name in self.commands:
                raise ValueError(f"command '{name}' registered twice")
            self.commands[name] = command
