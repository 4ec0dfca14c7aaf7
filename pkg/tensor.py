from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import validation
from errors import DimensionError, StateError

_grad_enabled = True

ArrayLike = Union[np.ndarray, Sequence, float]


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = False
        tensor.name = ""
        tensor.grad = None
        tensor._parents = ()
        tensor._backward = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> list["Tensor"]:
        return backward(self, grad)


def parameter(data: ArrayLike, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> list[Tensor]:
    if loss._backward is None:
        raise StateError("backward called on a tensor without a recorded forward pass")
    if grad is None:
        if loss.data.size != 1:
            raise StateError(f"upstream gradient is required for output of shape {loss.shape}")
        grad = np.ones_like(loss.data)
    validation.validate_shape_match("upstream gradient", loss.shape, np.shape(grad))

    pending = {id(loss): np.asarray(grad, dtype=np.float64)}
    leaves: list[Tensor] = []
    for node in reversed(_topological_order(loss)):
        node_grad = pending.pop(id(node), None)
        if node_grad is None:
            continue
        if node._backward is None:
            node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
            leaves.append(node)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return leaves


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    validation.validate_ndim("conv2d input", x.data, (3, 4))
    validation.validate_ndim("conv2d kernel", kernel.data, (4,))
    batched = x.data.ndim == 4
    inputs = x.data if batched else x.data[None]
    _, channels, height, width = inputs.shape
    out_channels, kernel_channels, kernel_height, kernel_width = kernel.shape
    validation.validate_shape_match("conv2d kernel input channels", (channels,), (kernel_channels,))
    validation.validate_shape_match("conv2d bias", (out_channels,), bias.shape)
    validation.validate_odd_kernel(kernel_height, kernel_width)
    out_height = validation.validate_conv_geometry(height, kernel_height, stride, pad, "height")
    out_width = validation.validate_conv_geometry(width, kernel_width, stride, pad, "width")

    count = inputs.shape[0]
    padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [N, C_in, H', W', kH, kW]
    windows = sliding_window_view(padded, (kernel_height, kernel_width), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col rows are output pixels, kept for the kernel gradient
    columns = windows.transpose(0, 2, 3, 1, 4, 5).reshape(count * out_height * out_width, -1)
    flat_kernel = kernel.data.reshape(out_channels, -1)
    out = (columns @ flat_kernel.T).reshape(count, out_height, out_width, out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def backward_fn(grad: np.ndarray) -> tuple:
        grad = grad if batched else grad[None]
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_kernel = (grad_rows.T @ columns).reshape(kernel.shape)
        grad_bias = grad.sum(axis=(0, 2, 3))
        grad_input = None
        if x.requires_grad:
            grad_windows = (grad_rows @ flat_kernel).reshape(
                count, out_height, out_width, channels, kernel_height, kernel_width
            ).transpose(0, 3, 1, 2, 4, 5)
            grad_padded = np.zeros_like(padded)
            for i in range(kernel_height):
                for j in range(kernel_width):
                    grad_padded[:, :, i:i + stride * out_height:stride, j:j + stride * out_width:stride] += \
                        grad_windows[..., i, j]
            grad_input = grad_padded[:, :, pad:pad + height, pad:pad + width]
            grad_input = grad_input if batched else grad_input[0]
        return grad_input, grad_kernel, grad_bias

    return _node(out if batched else out[0], (x, kernel, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _node(np.where(active, x.data, 0.0), (x,), lambda grad: (grad * active,))


def maxpool2(x: Tensor) -> Tensor:
    validation.validate_ndim("maxpool2 input", x.data, (3, 4))
    *lead, height, width = x.shape
    validation.validate_even_spatial(height, width)
    blocks = x.data.reshape(*lead, height // 2, 2, width // 2, 2).swapaxes(-3, -2).reshape(
        *lead, height // 2, width // 2, 4
    )
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward_fn(grad: np.ndarray) -> tuple:
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, winner, grad[..., None], axis=-1)
        grad_input = grad_blocks.reshape(*lead, height // 2, width // 2, 2, 2).swapaxes(-3, -2).reshape(
            *lead, height, width
        )
        return (grad_input,)

    return _node(out, (x,), backward_fn)


def gap(x: Tensor) -> Tensor:
    validation.validate_ndim("gap input", x.data, (3, 4))
    height, width = x.shape[-2:]
    scale = 1.0 / (height * width)

    def backward_fn(grad: np.ndarray) -> tuple:
        return (np.broadcast_to(grad[..., None, None] * scale, x.shape).copy(),)

    return _node(x.data.mean(axis=(-2, -1)), (x,), backward_fn)


def fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    validation.validate_ndim("fc input", x.data, (1, 2))
    validation.validate_ndim("fc weight", weight.data, (2,))
    out_features, in_features = weight.shape
    validation.validate_shape_match("fc input features", (in_features,), x.shape[-1:])
    validation.validate_shape_match("fc bias", (out_features,), bias.shape)
    batched = x.data.ndim == 2
    inputs = np.atleast_2d(x.data)
    out = inputs @ weight.data.T + bias.data

    def backward_fn(grad: np.ndarray) -> tuple:
        grad = np.atleast_2d(grad)
        grad_input = grad @ weight.data
        return grad_input if batched else grad_input[0], grad.T @ inputs, grad.sum(axis=0)

    return _node(out if batched else out[0], (x, weight, bias), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    validation.validate_not_empty(tensors, "concat input")
    sizes = [tensor.shape[axis] for tensor in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def backward_fn(grad: np.ndarray) -> tuple:
        return tuple(np.split(grad, boundaries, axis=axis))

    return _node(np.concatenate([tensor.data for tensor in tensors], axis=axis), tuple(tensors), backward_fn)


def softmax_xent(logits: Tensor, label: Union[int, Sequence[int]]) -> Tensor:
    validation.validate_ndim("softmax_xent logits", logits.data, (1, 2))
    scores = np.atleast_2d(logits.data)
    count, num_classes = scores.shape
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    validation.validate_shape_match("softmax_xent labels", (count,), labels.shape)
    for value in labels:
        validation.validate_label_in_range(int(value), num_classes)

    shifted = scores - scores.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(count)
    loss = -log_probs[rows, labels].mean()

    def backward_fn(grad: np.ndarray) -> tuple:
        delta = np.exp(log_probs)
        delta[rows, labels] -= 1.0
        return ((delta * (grad / count)).reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), backward_fn)
