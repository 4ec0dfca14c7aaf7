from pathlib import Path
from typing import Union

import numpy as np
from scipy import ndimage

import validation
from errors import DimensionError
from models import Nam, Scope, SliceLabel
from network import Model, forward
from tensor import Tensor, as_tensor, no_grad


def upsample_bilinear(raw: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    height, width = raw.shape
    if (height, width) == tuple(size):
        return raw.astype(np.float64, copy=True)
    factors = (size[0] / height, size[1] / width)
    return ndimage.zoom(raw.astype(np.float64), factors, order=1, mode="nearest", grid_mode=False)


def compute_nam(model: Model, image: Union[Tensor, np.ndarray]) -> Nam:
    image = as_tensor(image)
    validation.validate_ndim("image", image.data, (3,))
    nodule_weights = model.fc_weight.data[SliceLabel.NODULE.value]
    validation.validate_finite("nodule fc weights", nodule_weights)
    with no_grad():
        activations = forward(model, image).tap_activations

    input_size = model.config.input_size
    raw_maps = []
    fused = np.zeros(input_size)
    for activation, columns in zip(activations, model.tap_slices()):
        raw = np.tensordot(nodule_weights[columns], activation.data, axes=(0, 0))
        raw_maps.append(raw)
        fused += upsample_bilinear(raw, input_size) / raw.size
    validation.validate_finite("nodule activation map", fused)
    return Nam(map=fused, raw_maps=raw_maps, score=float(sum(raw.mean() for raw in raw_maps)))


def fill(image: np.ndarray, mask: np.ndarray, fill_value: float) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    validation.validate_shape_match("mask", image.shape[-2:], mask.shape)
    filled = image.copy()
    filled[..., mask] = fill_value
    return filled


def compute_rnam(model: Model, image: np.ndarray, mask: np.ndarray, fill_value: float) -> Nam:
    return compute_nam(model, fill(image, np.asarray(mask, dtype=bool), fill_value))


def nam_distance(nam_a: Nam, nam_b: Nam, scope: Scope) -> float:
    if nam_a.map.shape != nam_b.map.shape:
        raise DimensionError(f"NAM shapes {nam_a.map.shape} and {nam_b.map.shape} differ")
    validation.validate_shape_match("scope", nam_a.map.shape, scope.mask.shape)
    validation.validate_mask_not_empty(scope.mask, "scope")
    difference = nam_a.map[scope.mask] - nam_b.map[scope.mask]
    return float(np.sum(difference * difference))


def write_nam(nam: Nam, path: Path):
    np.savetxt(path, nam.map, fmt="%.17g", delimiter=" ")


def read_nam(path: Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
