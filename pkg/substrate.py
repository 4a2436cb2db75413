"""
Small CNN classifier substrate: model construction, forward pass,
cross-entropy, gradients with respect to parameters and inputs, and SGD.
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

import settings
from cohort_data import batch_iterator, stack_records
from errors import ConfigurationError, ContractError, NumericalError

logger = logging.getLogger(__name__)

CONV_FILTERS = (16, 32, 64, 64)
KERNEL_SIZE = 3
HIDDEN_UNITS = 128
POOLED_BLOCKS = 3  # max-pool after the first three conv blocks
MIN_IMAGE_SIDE = 8
# Inputs in [0, 1] are centered and scaled before the first conv
INPUT_CENTER = 0.5
INPUT_SCALE = 0.25


@dataclass(frozen=True)
class ConvLayerSpec:
    layer_id: str
    out_filters: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    index_in_model: int

    @property
    def weight_shape(self):
        return (self.out_filters, self.in_channels, self.kernel_h, self.kernel_w)


@dataclass(frozen=True)
class InitSpec:
    """Uniform(-bound, bound) weights, zero biases."""

    bound: float
    distribution: str = "uniform"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    lr_decay_epoch: Optional[int] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_decay_epoch is not None and self.lr_decay_epoch < 1:
            raise ConfigurationError("lr_decay_epoch must be >= 1")

    def with_seed(self, seed):
        return replace(self, seed=seed)


# Original model: SGD, momentum 0.9, batch 16, lr 0.01 decayed x0.1 after 10 epochs
ORIGINAL_TRAIN = TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=16, epochs=10, lr_decay_epoch=10)
# Post-unlearning fine-tuning
FINETUNE_TRAIN = TrainConfig(learning_rate=0.001, momentum=0.9, batch_size=64, epochs=10)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float


class CohortCNN(nn.Module):
    """Four 3x3 conv blocks, one hidden dense layer, linear classifier.

    No normalization layers, so every conv filter is fully described by its
    weight slice and bias.
    """

    def __init__(self, num_classes, image_shape, init_seed, filters=CONV_FILTERS, hidden=HIDDEN_UNITS):
        super().__init__()
        self.num_classes = num_classes
        self.image_shape = tuple(image_shape)
        self.init_seed = init_seed

        in_channels = self.image_shape[0]
        self.conv_specs = []
        for i, out_filters in enumerate(filters):
            layer_id = f"conv{i + 1}"
            self.add_module(
                layer_id,
                nn.Conv2d(in_channels, out_filters, KERNEL_SIZE, padding=KERNEL_SIZE // 2),
            )
            self.conv_specs.append(
                ConvLayerSpec(layer_id, out_filters, in_channels, KERNEL_SIZE, KERNEL_SIZE, i)
            )
            in_channels = out_filters
        self.pool = nn.MaxPool2d(2)
        self.head_pool = nn.AdaptiveAvgPool2d((2, 2))
        self.fc1 = nn.Linear(in_channels * 4, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

        # parameterized layers, input to output
        self.layer_ids = [spec.layer_id for spec in self.conv_specs] + ["fc1", "fc2"]
        self.init_specs = {}
        for layer_id in self.layer_ids:
            weight = getattr(self, layer_id).weight
            fan_in = weight[0].numel()
            gain = 1.0 if layer_id == "fc2" else 2.0  # ReLU-fed layers get He scaling
            self.init_specs[layer_id] = InitSpec(bound=math.sqrt(3.0 * gain / fan_in))
        self._initialize(init_seed)

    def _initialize(self, seed):
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for layer_id in self.layer_ids:
                layer = getattr(self, layer_id)
                layer.weight.copy_(self.sample_init(layer_id, generator))
                layer.bias.zero_()

    def sample_init(self, layer_id, generator):
        """Draw a fresh weight tensor for `layer_id` from its recorded init."""
        layer = getattr(self, layer_id)
        bound = self.init_specs[layer_id].bound
        fresh = torch.empty(layer.weight.shape, dtype=layer.weight.dtype)
        return fresh.uniform_(-bound, bound, generator=generator)

    @property
    def conv_layer_ids(self):
        return [spec.layer_id for spec in self.conv_specs]

    def forward(self, x):
        x = (x - INPUT_CENTER) / INPUT_SCALE
        for i, spec in enumerate(self.conv_specs):
            x = F.relu(getattr(self, spec.layer_id)(x))
            if i < POOLED_BLOCKS:
                x = self.pool(x)
        x = self.head_pool(x).flatten(1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


def build_model(num_classes, image_shape, init_seed):
    """Seeded CohortCNN in eval mode."""
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if len(image_shape) != 3 or image_shape[0] < 1:
        raise ConfigurationError(f"image_shape must be (C, H, W), got {image_shape}")
    if min(image_shape[1:]) < MIN_IMAGE_SIDE:
        raise ConfigurationError(
            f"images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {image_shape}"
        )
    model = CohortCNN(num_classes, image_shape, init_seed)
    model.eval()
    return model


def forward(model, batch):
    """Logits for a (B, C, H, W) batch in [0, 1]."""
    if batch.dim() != 4 or tuple(batch.shape[1:]) != model.image_shape:
        raise ContractError(
            f"expected batch of shape (B, {', '.join(map(str, model.image_shape))}), "
            f"got {tuple(batch.shape)}"
        )
    return model(batch)


def cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy with label range checking."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels, reduction=reduction)


def grad_wrt_params(model, batch, labels, reduction="mean"):
    """Map parameter name (e.g. 'conv2.weight') to the loss gradient."""
    names, params = zip(*model.named_parameters())
    with torch.enable_grad():
        loss = cross_entropy(forward(model, batch), labels, reduction=reduction)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g.detach()
        for name, p, g in zip(names, params, grads)
    }


def grad_wrt_input(model, batch, labels, reduction="mean"):
    """Loss gradient with respect to the input pixels."""
    with torch.enable_grad():
        x = batch.detach().clone().requires_grad_(True)
        loss = cross_entropy(forward(model, x), labels, reduction=reduction)
        (grad,) = torch.autograd.grad(loss, x)
    return grad.detach()


def predict(model, records, batch_size=256):
    """Argmax class per record."""
    preds = []
    with torch.no_grad():
        for batch in batch_iterator(records, batch_size):
            preds.append(forward(model, batch.images).argmax(dim=1))
    return torch.cat(preds)


def accuracy(model, records, batch_size=256):
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class."""
    if not records:
        raise ContractError("accuracy needs at least one record")
    _, labels = stack_records(records)
    return (predict(model, records, batch_size) == labels).float().mean().item()


def sgd_train(
    model,
    records,
    cfg: TrainConfig,
    trainable: Optional[Callable[[str], bool]] = None,
    *,
    ascent=False,
    aux_loss=None,
    audit=None,
    stage="train",
    step_log=None,
):
    """Train a copy of `model` with momentum SGD; the input model is untouched.

    `trainable` selects layer ids that receive updates; other parameters stay
    bit-identical. `ascent` negates the data loss (gradient ascent).
    `aux_loss(model)` adds a term to each step's objective; per-step values of
    both parts are appended to `step_log` when given.
    Returns the trained copy and its per-epoch log.
    """
    if not records:
        raise ConfigurationError("cannot train on an empty dataset")
    model = copy.deepcopy(model)
    selected = [
        (name, p)
        for name, p in model.named_parameters()
        if trainable is None or trainable(name.split(".")[0])
    ]
    log = []
    if cfg.epochs == 0 or not selected:
        return model, log

    selected_names = {name for name, _ in selected}
    for name, p in model.named_parameters():
        p.requires_grad_(name in selected_names)

    optimizer = torch.optim.SGD(
        [p for _, p in selected], lr=cfg.learning_rate, momentum=cfg.momentum
    )
    scheduler = None
    if cfg.lr_decay_epoch is not None:
        scheduler = MultiStepLR(optimizer, milestones=[cfg.lr_decay_epoch], gamma=0.1)
    sign = -1.0 if ascent else 1.0

    model.train()
    for epoch in tqdm(range(cfg.epochs), desc=stage, disable=not settings.SHOW_PROGRESS):
        total_loss, correct, seen = 0.0, 0, 0
        for batch in batch_iterator(records, cfg.batch_size, cfg.seed, epoch):
            if audit is not None:
                audit.record(stage, batch.records)
            logits = forward(model, batch.images)
            loss = cross_entropy(logits, batch.labels)
            objective = sign * loss
            aux = aux_loss(model) if aux_loss is not None else None
            if aux is not None:
                objective = objective + aux
            if not torch.isfinite(objective):
                raise NumericalError(f"{stage}: non-finite loss at epoch {epoch + 1}")

            optimizer.zero_grad(set_to_none=True)
            objective.backward()
            optimizer.step()

            if step_log is not None:
                step_log.append({
                    "epoch": epoch + 1,
                    "loss": loss.item(),
                    "aux": 0.0 if aux is None else aux.item(),
                    "objective": objective.item(),
                })
            n = len(batch.records)
            total_loss += loss.item() * n
            correct += (logits.argmax(dim=1) == batch.labels).sum().item()
            seen += n
        if scheduler is not None:
            scheduler.step()
        log.append(EpochLog(epoch + 1, total_loss / seen, correct / seen))
        logger.debug("%s epoch %d loss %.4f acc %.4f", stage, epoch + 1, log[-1].loss, log[-1].accuracy)
    model.eval()

    for p in model.parameters():
        p.requires_grad_(True)
        p.grad = None
    return model, log


def model_checksum(model):
    """SHA-256 over the state dict, parameters in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_model(model, path):
    """Write weights plus the metadata needed to rebuild the architecture."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": model.state_dict(),
            "num_classes": model.num_classes,
            "image_shape": list(model.image_shape),
            "init_seed": model.init_seed,
        },
        path,
    )
    return path


def load_model(path):
    """Rebuild a model written by save_model."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise ConfigurationError(f"model file not found: {path}")
    model = build_model(payload["num_classes"], tuple(payload["image_shape"]), payload["init_seed"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
