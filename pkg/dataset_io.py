"""Dataset directory layout::

    images/NNNNNN.pgm     P5, 16-bit big-endian, intensities quantized from [0, 1]
    labels.csv            id,label          (label is "nodule" or "no_nodule")
    splits.csv            id,split          (train / val / test)
    truth/NNNNNN.masks    run-length masks, positives only, evaluation only
    manifest.txt          key=value echo of the generator config

Run-length mask files hold ``H W`` on the first line and one line per mask of
``start length`` pairs over the row-major flattened image.
"""
import csv
import logging
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import ValidationError

import validation
from dataset import SPLIT_RATIO, SplitDataset
from errors import ConfigError, DataError, FormatError
from models import SPLIT_NAMES, Sample, SliceLabel, SyntheticConfig
from utils import read_key_value_file, write_manifest

logger = logging.getLogger(__name__)

PGM_MAXVAL = 65535
LABEL_NAMES = {SliceLabel.NODULE: "nodule", SliceLabel.NO_NODULE: "no_nodule"}


class DatasetDirectory(NamedTuple):
    samples: list[Sample]
    splits: dict[int, str]
    config: SyntheticConfig


def file_stem(sample_id: int) -> str:
    return f"{sample_id:06d}"


def _header_tokens(content: bytes, count: int) -> tuple[list[bytes], int]:
    # offset lands just past the single whitespace byte after the last token
    tokens = []
    position = 0
    while len(tokens) < count:
        while position < len(content) and content[position:position + 1].isspace():
            position += 1
        if position >= len(content):
            raise FormatError("PGM header is truncated")
        if content[position:position + 1] == b"#":
            end = content.find(b"\n", position)
            position = len(content) if end < 0 else end + 1
            continue
        start = position
        while position < len(content) and not content[position:position + 1].isspace():
            position += 1
        tokens.append(content[start:position])
    return tokens, position + 1


def _header_int(token: bytes, field: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"PGM {field} {token!r} is not an integer")


def read_pgm(path: Path) -> np.ndarray:
    content = Path(path).read_bytes()
    magic = content[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: bad magic {magic!r}, expected b'P2' or b'P5'")
    tokens, offset = _header_tokens(content[2:], 3)
    width, height, maxval = (_header_int(token, field) for token, field in zip(tokens, ("width", "height", "maxval")))
    if width < 1 or height < 1:
        raise FormatError(f"{path}: image size {width}x{height} should be positive")
    if not 1 <= maxval <= PGM_MAXVAL:
        raise FormatError(f"{path}: maxval {maxval} should be in [1, {PGM_MAXVAL}]")

    body = content[2 + offset:]
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < width * height * dtype.itemsize:
            raise FormatError(f"{path}: raster has {len(body)} bytes, expected {width * height * dtype.itemsize}")
        values = np.frombuffer(body, dtype=dtype, count=width * height).astype(np.int64)
    else:
        words = body.split()
        if len(words) < width * height:
            raise FormatError(f"{path}: raster has {len(words)} samples, expected {width * height}")
        try:
            values = np.array([int(word) for word in words[:width * height]], dtype=np.int64)
        except ValueError:
            raise FormatError(f"{path}: raster holds a non-integer sample")
    if values.min() < 0 or values.max() > maxval:
        raise FormatError(f"{path}: sample values exceed maxval {maxval}")
    return (values.reshape(height, width) / maxval)[None]


def write_pgm(image: np.ndarray, path: Path):
    image = np.asarray(image, dtype=np.float64)
    validation.validate_ndim("image", image, (2, 3))
    plane = image.reshape(image.shape[-2:])
    validation.validate_finite("image", plane)
    quantized = np.rint(np.clip(plane, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    height, width = plane.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii") + quantized.tobytes())


def write_pbm(mask: np.ndarray, path: Path):
    mask = np.asarray(mask, dtype=bool)
    validation.validate_ndim("mask", mask, (2,))
    height, width = mask.shape
    rows = [" ".join("1" if pixel else "0" for pixel in row) for row in mask]
    Path(path).write_text(f"P1\n{width} {height}\n" + "\n".join(rows) + "\n", encoding="ascii")


def encode_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    flat = np.concatenate(([0], np.asarray(mask, dtype=np.int8).ravel(), [0]))
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return [(int(start), int(end - start)) for start, end in zip(starts, ends)]


def decode_runs(runs: Sequence[tuple[int, int]], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in runs:
        if start < 0 or length < 1 or start + length > flat.size:
            raise FormatError(f"run {start}+{length} falls outside a {shape[0]}x{shape[1]} mask")
        flat[start:start + length] = True
    return flat.reshape(shape)


def write_masks(masks: Sequence[np.ndarray], shape: tuple[int, int], path: Path):
    lines = [f"{shape[0]} {shape[1]}"]
    for mask in masks:
        validation.validate_shape_match("mask", shape, mask.shape)
        lines.append(" ".join(f"{start} {length}" for start, length in encode_runs(mask)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_masks(path: Path) -> list[np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        height, width = (int(value) for value in lines[0].split())
        masks = []
        for line in lines[1:]:
            numbers = [int(value) for value in line.split()]
            if len(numbers) % 2:
                raise FormatError(f"{path}: odd number of run values")
            masks.append(decode_runs(list(zip(numbers[0::2], numbers[1::2])), (height, width)))
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed run-length mask file")
    return masks


def parse_label(value: str) -> SliceLabel:
    for label, name in LABEL_NAMES.items():
        if value == name:
            return label
    raise DataError(f"unknown label {value!r}, expected one of {', '.join(LABEL_NAMES.values())}")


def _write_csv(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path, header: Sequence[str]) -> list[list[str]]:
    validation.validate_path_exists(path, "file")
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0] != list(header):
        raise FormatError(f"{path}: header should be {','.join(header)}")
    return rows[1:]


def write_dataset(directory: Path, samples: Sequence[Sample], parts: SplitDataset, cfg: SyntheticConfig):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "truth").mkdir(exist_ok=True)

    for sample in samples:
        stem = file_stem(sample.sample_id)
        write_pgm(sample.image, directory / "images" / f"{stem}.pgm")
        if sample.truth_masks:
            write_masks(sample.truth_masks, cfg.image_size, directory / "truth" / f"{stem}.masks")
    _write_csv(
        directory / "labels.csv", ("id", "label"),
        ((sample.sample_id, LABEL_NAMES[sample.label]) for sample in samples)
    )
    split_rows = sorted(
        (sample.sample_id, name) for name, part in zip(SPLIT_NAMES, parts) for sample in part
    )
    _write_csv(directory / "splits.csv", ("id", "split"), split_rows)

    positives = sum(sample.label == SliceLabel.NODULE for sample in samples)
    write_manifest(
        directory, cfg, ratio=":".join(map(str, SPLIT_RATIO)), pos=positives, neg=len(samples) - positives
    )
    logger.info(f"wrote {len(samples)} samples to {directory}")


def read_config(directory: Path) -> SyntheticConfig:
    manifest = Path(directory) / "manifest.txt"
    validation.validate_path_exists(manifest, "dataset manifest")
    values = read_key_value_file(manifest)
    try:
        return SyntheticConfig(**{key: values[key] for key in SyntheticConfig.__fields__ if key in values})
    except (ValidationError, ConfigError) as error:
        raise DataError(f"{manifest} holds an invalid generator config: {error}")


def read_splits(directory: Path) -> dict[int, str]:
    splits = {}
    for row in _read_csv(Path(directory) / "splits.csv", ("id", "split")):
        if len(row) != 2 or row[1] not in SPLIT_NAMES:
            raise FormatError(f"bad splits.csv row {row}")
        splits[int(row[0])] = row[1]
    return splits


def read_dataset(directory: Path, split: Optional[str] = None) -> DatasetDirectory:
    directory = Path(directory)
    validation.validate_path_exists(directory, "dataset directory")
    if split is not None and split not in SPLIT_NAMES:
        raise ConfigError(f"split {split!r} should be one of {', '.join(SPLIT_NAMES)}")
    config = read_config(directory)
    splits = read_splits(directory)

    samples = []
    for row in _read_csv(directory / "labels.csv", ("id", "label")):
        if len(row) != 2:
            raise FormatError(f"bad labels.csv row {row}")
        sample_id, label = int(row[0]), parse_label(row[1])
        if split is not None and splits.get(sample_id) != split:
            continue
        stem = file_stem(sample_id)
        image_path = directory / "images" / f"{stem}.pgm"
        validation.validate_path_exists(image_path, "image")
        truth_path = directory / "truth" / f"{stem}.masks"
        truth_masks = read_masks(truth_path) if truth_path.exists() else []
        samples.append(Sample(sample_id=sample_id, image=read_pgm(image_path), label=label, truth_masks=truth_masks))
    logger.info(f"read {len(samples)} samples from {directory}" + (f" ({split})" if split else ""))
    return DatasetDirectory(samples, splits, config)
