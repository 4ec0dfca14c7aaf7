from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from pydantic import BaseModel


def round_float(value: float) -> float:
    return round(value, 6)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(item) for item in value)
    return str(value)


def read_key_value_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition("=")
        if separator:
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def key_value_lines(values: Mapping[str, Any]) -> list[str]:
    return [f"{key}={format_value(value)}" for key, value in values.items()]


def write_manifest(directory: Path, *configs: BaseModel, **extra: Any):
    # output locations are not echoed
    values: dict[str, Any] = {}
    for config in configs:
        values.update(
            {key: value for key, value in config.dict().items() if key != "out" and not isinstance(value, dict)}
        )
    values.update(extra)
    Path(directory).mkdir(parents=True, exist_ok=True)
    (Path(directory) / "manifest.txt").write_text("\n".join(key_value_lines(values)) + "\n", encoding="utf-8")
