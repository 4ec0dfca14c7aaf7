import logging
from typing import NamedTuple, Optional, Sequence

import numpy as np

import validation
from errors import DataError
from models import EpochLog, LabeledImage, SliceLabel, TrainConfig
from network import Model, forward, predict_labels
from tensor import backward, softmax_xent

logger = logging.getLogger(__name__)


class TrainingResult(NamedTuple):
    model: Model
    log: list[EpochLog]
    best_epoch: int


class MomentumSgd:
    def __init__(self, model: Model, tcfg: TrainConfig):
        self.momentum = tcfg.momentum
        self.groups = [(tensor, tcfg.backbone_lr_multiplier) for _, tensor in model.backbone_parameters()]
        self.groups += [(tensor, model.config.head_lr_multiplier) for _, tensor in model.head_parameters()]
        self.velocities = [np.zeros_like(tensor.data) for tensor, _ in self.groups]

    def step(self, lr: float):
        for (tensor, multiplier), velocity in zip(self.groups, self.velocities):
            if tensor.grad is None:
                continue
            velocity *= self.momentum
            velocity -= (lr * multiplier) * tensor.grad
            tensor.data = tensor.data + velocity


def learning_rate(tcfg: TrainConfig, epoch: int) -> float:
    return tcfg.initial_lr * tcfg.lr_decay_per_epoch ** epoch


def stack_labeled(items: Sequence[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    for item in items:
        if not isinstance(item, LabeledImage):
            raise DataError(f"training accepts (image, label) pairs only, got {type(item).__name__}")
    images = np.stack([np.asarray(item.image, dtype=np.float64) for item in items])
    labels = np.array([item.label.value for item in items], dtype=np.int64)
    return images, labels


def train_step(model: Model, optimizer: MomentumSgd, images: np.ndarray, labels: np.ndarray, lr: float) -> float:
    model.zero_grad()
    loss = softmax_xent(forward(model, images).logits, labels)
    backward(loss)
    optimizer.step(lr)
    return float(loss)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    predicted = np.array([label.value for label in predict_labels(model, images)])
    return float(np.mean(predicted == labels))


def train(
        model: Model,
        dataset: Sequence[LabeledImage],
        tcfg: TrainConfig,
        validation_set: Optional[Sequence[LabeledImage]] = None
) -> TrainingResult:
    validation.validate_not_empty(dataset, "training set")
    images, labels = stack_labeled(dataset)
    validation.validate_both_classes(
        [SliceLabel(value) for value in set(labels.tolist())], [SliceLabel.NO_NODULE, SliceLabel.NODULE]
    )
    if validation_set:
        eval_images, eval_labels = stack_labeled(validation_set)
    else:
        eval_images, eval_labels = images, labels

    model = model.copy()
    optimizer = MomentumSgd(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    log: list[EpochLog] = []
    best_model, best_accuracy, best_epoch = model.copy(), -1.0, 0

    for epoch in range(tcfg.epochs):
        lr = learning_rate(tcfg, epoch)
        order = rng.permutation(len(images))
        loss_sum = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            loss_sum += train_step(model, optimizer, images[batch], labels[batch], lr) * len(batch)

        epoch_accuracy = accuracy(model, eval_images, eval_labels)
        entry = EpochLog(
            epoch=epoch + 1,
            learning_rate=lr,
            train_loss=loss_sum / len(order),
            validation_accuracy=epoch_accuracy,
        )
        log.append(entry)
        logger.info(
            f"epoch {entry.epoch}: lr={lr:.6g} loss={entry.train_loss:.6f} val_acc={epoch_accuracy:.4f}"
        )
        if epoch_accuracy > best_accuracy:
            best_model, best_accuracy, best_epoch = model.copy(), epoch_accuracy, entry.epoch

    logger.info(f"best validation accuracy {best_accuracy:.4f} at epoch {best_epoch}")
    return TrainingResult(best_model, log, best_epoch)
