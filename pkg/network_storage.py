"""Weight file format::

    b"NAMSEG01"
    key=value lines (UTF-8, the ModelConfig fields), then one blank line
    every parameter as little-endian float64, in Model.named_parameters() order
"""
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from errors import ConfigError, FormatError
from models import ModelConfig
from network import Model, build
from utils import key_value_lines

MAGIC = b"NAMSEG01"
HEADER_END = b"\n\n"
DTYPE = np.dtype("<f8")


def save(model: Model, path: Path):
    header = "\n".join(key_value_lines(model.config.dict())).encode("utf-8") + HEADER_END
    payload = b"".join(tensor.data.astype(DTYPE).tobytes() for tensor in model.parameters())
    Path(path).write_bytes(MAGIC + header + payload)


def _parse_header(header: bytes) -> ModelConfig:
    values = {}
    try:
        lines = header.decode("utf-8").splitlines()
    except UnicodeDecodeError as error:
        raise FormatError(f"weight file header is not UTF-8: {error}")
    for line in lines:
        key, separator, value = line.partition("=")
        if not separator:
            raise FormatError(f"malformed header line {line!r}")
        values[key] = value
    try:
        return ModelConfig(**values)
    except (ValidationError, ConfigError) as error:
        raise FormatError(f"weight file declares an invalid config: {error}")


def load(path: Path) -> Model:
    content = Path(path).read_bytes()
    if not content.startswith(MAGIC):
        raise FormatError(f"bad magic {content[:len(MAGIC)]!r}, expected {MAGIC!r}")
    header_end = content.find(HEADER_END, len(MAGIC))
    if header_end < 0:
        raise FormatError("weight file header is not terminated by a blank line")
    config = _parse_header(content[len(MAGIC):header_end])
    payload = content[header_end + len(HEADER_END):]

    model = build(config, seed=0)
    tensors = model.parameters()
    expected = sum(tensor.data.size for tensor in tensors) * DTYPE.itemsize
    if len(payload) != expected:
        raise FormatError(f"weight payload has {len(payload)} bytes, config declares {expected}")

    offset = 0
    for tensor in tensors:
        count = tensor.data.size
        values = np.frombuffer(payload, dtype=DTYPE, count=count, offset=offset)
        tensor.data = values.astype(np.float64).reshape(tensor.shape)
        offset += count * DTYPE.itemsize
    return model
