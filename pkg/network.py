import logging
from typing import NamedTuple, Union

import numpy as np

import validation
from models import Classification, ModelConfig, SliceLabel
from tensor import Tensor, as_tensor, concat, conv2d, fc, gap, maxpool2, no_grad, parameter, relu

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
CONVS_PER_STAGE = 2

ConvWeights = tuple[Tensor, Tensor]


class ForwardPass(NamedTuple):
    logits: Tensor
    tap_activations: list[Tensor]


class Model:
    def __init__(
            self,
            config: ModelConfig,
            stages: list[list[ConvWeights]],
            heads: list[ConvWeights],
            fc_weight: Tensor,
            fc_bias: Tensor
    ):
        self.config = config
        self.stages = stages
        self.heads = heads
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for stage_index, stage in enumerate(self.stages):
            for conv_index, (kernel, bias) in enumerate(stage):
                named.append((f"stage{stage_index}.conv{conv_index}.weight", kernel))
                named.append((f"stage{stage_index}.conv{conv_index}.bias", bias))
        return named

    def head_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for tap, (kernel, bias) in zip(self.config.gap_taps, self.heads):
            named.append((f"head{tap}.weight", kernel))
            named.append((f"head{tap}.bias", bias))
        named.append(("fc.weight", self.fc_weight))
        named.append(("fc.bias", self.fc_bias))
        return named

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone_parameters() + self.head_parameters()

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def tap_slices(self) -> list[slice]:
        width = self.config.head_channels
        return [slice(index * width, (index + 1) * width) for index in range(len(self.config.gap_taps))]

    def copy(self) -> "Model":
        def clone(tensor: Tensor) -> Tensor:
            return parameter(tensor.data.copy(), tensor.name)

        return Model(
            self.config.copy(deep=True),
            [[(clone(kernel), clone(bias)) for kernel, bias in stage] for stage in self.stages],
            [(clone(kernel), clone(bias)) for kernel, bias in self.heads],
            clone(self.fc_weight),
            clone(self.fc_bias),
        )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name)


def _conv(rng: np.random.Generator, in_channels: int, out_channels: int, name: str) -> ConvWeights:
    kernel = _uniform(rng, (out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE), f"{name}.weight")
    return kernel, parameter(np.zeros(out_channels), f"{name}.bias")


def build(config: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    stages = []
    in_channels = 1
    for stage_index, out_channels in enumerate(config.stage_channels):
        stage = []
        for conv_index in range(CONVS_PER_STAGE):
            stage.append(_conv(rng, in_channels, out_channels, f"stage{stage_index}.conv{conv_index}"))
            in_channels = out_channels
        stages.append(stage)
    heads = [
        _conv(rng, config.stage_channels[tap], config.head_channels, f"head{tap}") for tap in config.gap_taps
    ]
    fc_weight = _uniform(rng, (config.num_classes, config.feature_length), "fc.weight")
    fc_bias = parameter(np.zeros(config.num_classes), "fc.bias")
    logger.debug(f"built model with stages {config.stage_channels} and taps {config.gap_taps}")
    return Model(config, stages, heads, fc_weight, fc_bias)


def forward(model: Model, image: Union[Tensor, np.ndarray]) -> ForwardPass:
    x = as_tensor(image)
    validation.validate_ndim("image", x.data, (3, 4))
    validation.validate_image_size(x.shape, model.config.input_size)

    taps = model.config.gap_taps
    tap_activations: list[Tensor] = []
    features: list[Tensor] = []
    for stage_index, stage in enumerate(model.stages[:taps[-1] + 1]):
        for kernel, bias in stage:
            x = relu(conv2d(x, kernel, bias, stride=1, pad=KERNEL_SIZE // 2))
        x = maxpool2(x)
        if stage_index in taps:
            kernel, bias = model.heads[taps.index(stage_index)]
            activation = relu(conv2d(x, kernel, bias, stride=1, pad=KERNEL_SIZE // 2))
            tap_activations.append(activation)
            features.append(gap(activation))

    pooled = features[0] if len(features) == 1 else concat(features, axis=-1)
    return ForwardPass(fc(pooled, model.fc_weight, model.fc_bias), tap_activations)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _label_from_logits(logits: np.ndarray) -> SliceLabel:
    # ties go to no_nodule
    return SliceLabel.NODULE if logits[1] > logits[0] else SliceLabel.NO_NODULE


def classify_logits(logits: np.ndarray) -> Classification:
    probabilities = softmax(np.asarray(logits, dtype=np.float64))
    label = _label_from_logits(logits)
    return Classification(
        label=label,
        probability=float(probabilities[label.value]),
        nodule_probability=float(probabilities[SliceLabel.NODULE.value]),
    )


def classify(model: Model, image: Union[Tensor, np.ndarray]) -> Classification:
    with no_grad():
        logits = forward(model, image).logits.data
    return classify_logits(logits)


def predict_labels(model: Model, images: np.ndarray, batch_size: int = 64) -> list[SliceLabel]:
    labels = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = forward(model, images[start:start + batch_size]).logits.data
            labels.extend(_label_from_logits(row) for row in logits)
    return labels
