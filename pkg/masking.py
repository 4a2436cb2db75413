"""
Filter-level masking: gradient-discrepancy scoring between raw forget images
and their adversarial noises, median-threshold masks, filter re-initialization,
and the ablation strategies (random, top-gradient, random-noise).
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from attack import AdvConfig, NoisePair, error_minimizing_noise
from cohort_data import batch_iterator, stack_records
from errors import ConfigurationError, ContractError
from substrate import grad_wrt_params

logger = logging.getLogger(__name__)

NOISE_OFFSET = 0.5  # noise-only inputs are delta + 0.5, centred in [0, 1]


@dataclass
class FilterScores:
    scores: dict  # layer id -> (out_filters,) tensor

    def __getitem__(self, layer_id):
        return self.scores[layer_id]

    def layer_ids(self):
        return list(self.scores)


@dataclass
class FilterMask:
    bits: dict  # layer id -> (out_filters,) bool tensor, True = reset

    def __getitem__(self, layer_id):
        return self.bits[layer_id]

    def layer_ids(self):
        return list(self.bits)

    def count(self, layer_id=None):
        if layer_id is not None:
            return int(self.bits[layer_id].sum())
        return sum(int(b.sum()) for b in self.bits.values())

    def to_text(self):
        lines = []
        for layer_id, bits in self.bits.items():
            lines.append(f"{layer_id} {''.join('1' if b else '0' for b in bits.tolist())}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        bits = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or set(parts[1]) - {"0", "1"}:
                raise ContractError(f"mask line {line_no}: expected '<layer-id> <bits>'")
            bits[parts[0]] = torch.tensor([c == "1" for c in parts[1]], dtype=torch.bool)
        return cls(bits)

    def checksum(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    @classmethod
    def empty(cls, model):
        return cls({
            layer_id: torch.zeros(getattr(model, layer_id).weight.shape[0], dtype=torch.bool)
            for layer_id in model.conv_layer_ids
        })


def _mean_param_grads(model, images, labels, batch_size):
    """Parameter gradients of the CE loss averaged over the whole set."""
    total = None
    for start in range(0, len(images), batch_size):
        grads = grad_wrt_params(
            model,
            images[start:start + batch_size],
            labels[start:start + batch_size],
            reduction="sum",
        )
        if total is None:
            total = grads
        else:
            for name in total:
                total[name] += grads[name]
    return {name: g / len(images) for name, g in total.items()}


def _per_filter_mean(tensor):
    return tensor.abs().reshape(tensor.shape[0], -1).mean(dim=1)


def noise_images(noises):
    return torch.stack([n for n in noises]) + NOISE_OFFSET


def gradient_discrepancy_scores(model, records, noises, batch_size=128, audit=None):
    """Per-filter mean |G_noise - G_img| over each conv weight slice.

    `noises` is aligned 1:1 with `records`, either as tensors or NoisePairs.
    """
    if not records:
        raise ContractError("scoring needs at least one forget record")
    if len(noises) != len(records):
        raise ContractError(f"{len(noises)} noises for {len(records)} records")
    if noises and isinstance(noises[0], NoisePair):
        for i, (pair, record) in enumerate(zip(noises, records)):
            if pair.record is not record:
                raise ContractError(f"noise {i} belongs to a different record")
        noises = [pair.noise for pair in noises]

    if audit is not None:
        audit.record("scoring", records)
    images, labels = stack_records(records)
    with torch.no_grad():
        noise_batch = noise_images(noises)
    g_img = _mean_param_grads(model, images, labels, batch_size)
    g_noise = _mean_param_grads(model, noise_batch, labels, batch_size)

    scores = {}
    for layer_id in model.conv_layer_ids:
        name = f"{layer_id}.weight"
        scores[layer_id] = _per_filter_mean(g_noise[name] - g_img[name])
    return FilterScores(scores)


def _masked_count(ratio, n_filters):
    if not 0 <= ratio < 1:
        raise ConfigurationError(f"ratio must lie in [0, 1), got {ratio}")
    if n_filters < 2:
        raise ConfigurationError(f"cannot mask a layer with {n_filters} filter(s)")
    return math.floor(ratio * n_filters + 1e-9)


def _select(scores, ratio, largest):
    """Mask the k lowest (or highest) scores; ties go to lower filter indices."""
    k = _masked_count(ratio, scores.numel())
    order = torch.sort(scores, descending=largest, stable=True).indices[:k]
    bits = torch.zeros(scores.numel(), dtype=torch.bool)
    bits[order] = True
    return bits


def build_mask(scores: FilterScores, ratio=0.5):
    """Per layer, mask the floor(ratio * n) filters below the ratio-quantile."""
    return FilterMask({layer_id: _select(s, ratio, largest=False) for layer_id, s in scores.scores.items()})


def reset_filters(model, mask: FilterMask, seed):
    """Re-draw masked conv filter weights from the layer's init distribution.

    Returns a copy; unmasked weights, every bias and the dense head are
    bit-identical to the input.
    """
    if mask.layer_ids() != model.conv_layer_ids:
        raise ContractError(f"mask layers {mask.layer_ids()} do not match {model.conv_layer_ids}")
    for layer_id in model.conv_layer_ids:
        n_filters = getattr(model, layer_id).weight.shape[0]
        if mask[layer_id].shape != (n_filters,):
            raise ContractError(
                f"mask for {layer_id} has {mask[layer_id].numel()} bits, layer has {n_filters} filters"
            )

    model = copy.deepcopy(model)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer_id in model.conv_layer_ids:
            # draw every layer so the stream does not depend on mask contents
            fresh = model.sample_init(layer_id, generator)
            bits = mask[layer_id]
            if bits.any():
                getattr(model, layer_id).weight[bits] = fresh[bits]
    logger.debug("reset %d filters", mask.count())
    return model


def random_mask(model, ratio=0.5, seed=0):
    """Seeded uniform choice of floor(ratio * n) filters per conv layer."""
    generator = torch.Generator().manual_seed(seed)
    bits = {}
    for layer_id in model.conv_layer_ids:
        n_filters = getattr(model, layer_id).weight.shape[0]
        k = _masked_count(ratio, n_filters)
        chosen = torch.randperm(n_filters, generator=generator)[:k]
        bits[layer_id] = torch.zeros(n_filters, dtype=torch.bool)
        bits[layer_id][chosen] = True
    return FilterMask(bits)


def top_gradient_mask(model, records, ratio=0.5, batch_size=128, audit=None):
    """Mask the filters with the largest mean |gradient| on the forget set."""
    if not records:
        raise ContractError("scoring needs at least one forget record")
    if audit is not None:
        audit.record("scoring", records)
    images, labels = stack_records(records)
    grads = _mean_param_grads(model, images, labels, batch_size)
    return FilterMask({
        layer_id: _select(_per_filter_mean(grads[f"{layer_id}.weight"]), ratio, largest=True)
        for layer_id in model.conv_layer_ids
    })


def random_noise_mask(model, records, cfg=AdvConfig(), ratio=0.5, seed=0, steps=None, batch_size=128, audit=None):
    """Score against error-minimizing noise instead of adversarial noise."""
    if not records:
        raise ContractError("scoring needs at least one forget record")
    generator = torch.Generator().manual_seed(seed)
    noises = []
    for batch in batch_iterator(records, batch_size):
        if audit is not None:
            audit.record("attack", batch.records)
        noises.extend(
            error_minimizing_noise(model, batch.images, batch.labels, cfg, steps=steps, generator=generator)
        )
    scores = gradient_discrepancy_scores(model, records, noises, batch_size, audit=audit)
    return build_mask(scores, ratio)
