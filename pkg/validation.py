from pathlib import Path
from typing import Any, Sequence

import numpy as np

from errors import DataError, DimensionError, GeometryError, LabelIndexError, NumericError, DomainError


def validate_ndim(name: str, array: np.ndarray, allowed: Sequence[int]):
    if array.ndim not in allowed:
        raise DimensionError(f"{name} should have {' or '.join(map(str, allowed))} dimensions, got {array.ndim}")


def validate_shape_match(name: str, expected: Sequence[int], actual: Sequence[int]):
    if tuple(expected) != tuple(actual):
        raise DimensionError(f"{name} shape {tuple(actual)} does not match expected {tuple(expected)}")


def validate_odd_kernel(kernel_height: int, kernel_width: int):
    if kernel_height % 2 == 0 or kernel_width % 2 == 0:
        raise GeometryError(f"kernel size {kernel_height}x{kernel_width} should be odd")


def validate_conv_geometry(size: int, kernel: int, stride: int, pad: int, axis: str) -> int:
    if stride < 1 or pad < 0:
        raise GeometryError(f"stride {stride} and pad {pad} should be >= 1 and >= 0")
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise GeometryError(f"{axis}: ({size} + 2*{pad} - {kernel}) / {stride} + 1 is not a positive integer")
    return span // stride + 1


def validate_even_spatial(height: int, width: int):
    if height % 2 or width % 2:
        raise GeometryError(f"spatial size {height}x{width} should be even for 2x2 pooling")


def validate_label_in_range(label: int, num_classes: int):
    if not 0 <= label < num_classes:
        raise LabelIndexError(f"label {label} is out of range for {num_classes} classes")


def validate_finite(name: str, array: np.ndarray):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} contains non-finite values")


def validate_not_empty(value: Any, entity_name: str, error=DataError):
    if value is None or len(value) == 0:
        raise error(f"{entity_name} is empty")


def validate_mask_not_empty(mask: np.ndarray, entity_name: str):
    if not mask.any():
        raise DomainError(f"{entity_name} has no pixels")


def validate_both_classes(labels: Sequence[Any], classes: Sequence[Any]):
    missing = [cls for cls in classes if cls not in labels]
    if missing:
        raise DataError(f"dataset misses class(es) {', '.join(str(cls) for cls in missing)}")


def validate_path_exists(path: Path, entity_name: str):
    if not Path(path).exists():
        raise DataError(f"{entity_name} {path} is not found")


def validate_ids_known(ids: Sequence[int], known_ids: Sequence[int], entity_name: str):
    unknown = sorted(set(ids) - set(known_ids))
    if unknown:
        raise DataError(f"{entity_name} {unknown[0]} is not found in the dataset")


def validate_image_size(shape: Sequence[int], input_size: Sequence[int]):
    if len(shape) < 3 or shape[-3] != 1 or tuple(shape[-2:]) != tuple(input_size):
        raise GeometryError(f"image of shape {tuple(shape)} does not match model input 1x{input_size[0]}x{input_size[1]}")
