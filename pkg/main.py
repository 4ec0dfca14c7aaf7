import argparse
import logging
import logging.config
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Type

import yaml
from pydantic import BaseModel, ValidationError

import service
from app_settings import AppSettings
from errors import ConfigError, NamSegError, UsageError
from models import EvalRunConfig, SegmentRunConfig, SynthRunConfig, TrainRunConfig
from utils import read_key_value_file

logger = logging.getLogger(__name__)

SEEDED_COMMANDS = ("synth", "train")


def setup_logging(verbose: bool = False):
    settings = AppSettings()
    config_path = Path(settings.log_config)
    if not config_path.is_absolute():
        config_path = Path(__file__).parent / config_path
    if not config_path.exists():
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
        return
    config = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    file_handler = config.get("handlers", {}).get("file")
    if file_handler is not None:
        Path(settings.log_dir).mkdir(parents=True, exist_ok=True)
        file_handler["filename"] = str(Path(settings.log_dir) / Path(file_handler["filename"]).name)
    logging.config.dictConfig(config)
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def _flag(parser: argparse.ArgumentParser, name: str, kind: Callable = str, help_text: str = ""):
    parser.add_argument(f"--{name}", dest=name.replace("-", "_"), type=kind, default=argparse.SUPPRESS, help=help_text)


def _switch(parser: argparse.ArgumentParser, name: str, help_text: str = ""):
    parser.add_argument(
        f"--{name}", dest=name.replace("-", "_"), action="store_true", default=argparse.SUPPRESS, help=help_text
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namseg", description="Weakly-supervised nodule segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-slice decisions")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "seed", int)
    _flag(common, "out", help_text="output directory")
    common.add_argument("--config", type=Path, default=None, help="key=value file; flags override its values")

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    for name in ("pos", "neg", "image-size"):
        _flag(synth, name, int)
    for name in ("background-level", "noise-sigma", "lung-texture", "radius-min", "radius-max",
                 "contrast-min", "contrast-max", "decoy-rate", "two-nodule-rate"):
        _flag(synth, name, float)

    train = commands.add_parser("train", parents=[common], help="train a GAP classifier on slice labels")
    _flag(train, "data")
    _flag(train, "gap-taps", help_text="comma-separated stage indices, e.g. 2 or 1,2")
    _flag(train, "stage-channels", help_text="comma-separated channel counts")
    for name in ("head-channels", "batch-size", "epochs"):
        _flag(train, name, int)
    for name in ("head-lr-multiplier", "initial-lr", "lr-decay", "momentum"):
        _flag(train, name, float)

    segment = commands.add_parser("segment", parents=[common], help="segment slices classified as nodule")
    for name in ("data", "one-gap", "multi-gap", "split"):
        _flag(segment, name)
    for name in ("min-area", "phases", "max-iters", "window-margin"):
        _flag(segment, name, int)
    for name in ("scope-threshold", "beta"):
        _flag(segment, name, float)
    _switch(segment, "coarse-only", "skip residual-NAM screening and keep every candidate")
    _switch(segment, "two-nodule", "segment the two most prominent blobs")
    _switch(segment, "dump-nam", "write the NAM of every nodule slice")
    _switch(segment, "dump-labels", "write ICM phase labels")
    _switch(segment, "pbm", "also write masks as PBM bitmaps")

    evaluate = commands.add_parser("eval", parents=[common], help="score predicted masks against truth")
    for name in ("data", "pred", "split", "name"):
        _flag(evaluate, name)
    _flag(evaluate, "px-to-mm2", float)
    _flag(evaluate, "detection-margin", int)
    _flag(evaluate, "size-bins", help_text="comma-separated diameter bin edges")
    return parser


COMMANDS: dict[str, tuple[Type[BaseModel], Callable[[Any], Path]]] = {
    "synth": (SynthRunConfig, service.cmd_synth),
    "train": (TrainRunConfig, service.cmd_train),
    "segment": (SegmentRunConfig, service.cmd_segment),
    "eval": (EvalRunConfig, service.cmd_eval),
}


def run_config(command: str, arguments: argparse.Namespace) -> BaseModel:
    values = vars(arguments).copy()
    config_file = values.pop("config", None)
    for key in ("command", "verbose"):
        values.pop(key, None)
    if config_file is not None:
        if not Path(config_file).exists():
            raise UsageError(f"config file {config_file} is not found")
        values = {**read_key_value_file(config_file), **values}
    if command in SEEDED_COMMANDS and "seed" not in values:
        raise UsageError(f"{command} requires --seed")
    if command not in SEEDED_COMMANDS:
        values.pop("seed", None)

    model_cls = COMMANDS[command][0]
    try:
        return model_cls(**values)
    except ValidationError as error:
        raise UsageError(f"invalid {command} options: {error}")
    except ConfigError as error:
        raise UsageError(error.detail)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        arguments = parser.parse_args(argv)
    except SystemExit as error:
        return error.code if isinstance(error.code, int) else 2
    setup_logging(arguments.verbose)

    try:
        cfg = run_config(arguments.command, arguments)
        COMMANDS[arguments.command][1](cfg)
    except NamSegError as error:
        logger.error(f"{arguments.command}: {error.detail}")
        return error.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(run())
