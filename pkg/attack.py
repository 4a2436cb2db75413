"""
Sample-wise adversarial noise for the forget set (multi-step L-infinity PGD),
plus the error-minimizing variant used by the random-noise ablation.
"""

import hashlib
import logging
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np
import torch

from cohort_data import batch_iterator, encode_png
from errors import ConfigurationError, ContractError
from substrate import grad_wrt_input, model_checksum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdvConfig:
    steps: int = 7
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not 0 < self.alpha <= self.epsilon:
            raise ConfigurationError(
                f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}"
            )
        if not self.pixel_min < self.pixel_max:
            raise ConfigurationError("pixel_min must be below pixel_max")


@dataclass(eq=False)
class NoisePair:
    record: object  # ImageRecord
    noise: torch.Tensor


def project(x_adv, x, cfg):
    """Clamp to the epsilon-ball around x, then to pixel bounds."""
    delta = torch.clamp(x_adv - x, -cfg.epsilon, cfg.epsilon)
    return torch.clamp(x + delta, cfg.pixel_min, cfg.pixel_max)


def _check_pixels(x, cfg):
    if x.numel() and (x.min() < cfg.pixel_min or x.max() > cfg.pixel_max):
        raise ContractError(f"inputs must lie in [{cfg.pixel_min}, {cfg.pixel_max}]")


def _sign_steps(model, x, y, start, cfg, steps, direction):
    # sum reduction: each sample's step ignores the rest of the batch
    x_adv = start.detach().clone()
    for _ in range(steps):
        grad = grad_wrt_input(model, x_adv, y, reduction="sum")
        x_adv = project(x_adv + direction * cfg.alpha * grad.sign(), x, cfg)
    return (x_adv - x).detach()


def pgd_attack(model, x, y, cfg=AdvConfig()):
    """Loss-ascending PGD noise (x_adv - x), starting from x itself."""
    _check_pixels(x, cfg)
    return _sign_steps(model, x, torch.as_tensor(y), x, cfg, cfg.steps, +1.0)


def error_minimizing_noise(model, x, y, cfg=AdvConfig(), seed=0, steps=None, generator=None):
    """Uniform noise in [-eps, eps] refined by sign-gradient descent on the loss.

    Pass `generator` to draw successive batches from one seeded stream.
    """
    _check_pixels(x, cfg)
    steps = cfg.steps if steps is None else steps
    if steps < 0:
        raise ConfigurationError(f"steps must be >= 0, got {steps}")
    if generator is None:
        generator = torch.Generator().manual_seed(seed)
    init = torch.empty(x.shape, dtype=x.dtype).uniform_(-cfg.epsilon, cfg.epsilon, generator=generator)
    start = project(x + init, x, cfg)
    return _sign_steps(model, x, torch.as_tensor(y), start, cfg, steps, -1.0)


def records_digest(records):
    digest = hashlib.sha256()
    for r in records:
        digest.update(f"{r.identity}:{r.label};".encode())
        digest.update(r.image.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class NoiseCache:
    """In-memory noise store keyed by (model checksum, forget set, config)."""

    def __init__(self):
        self._entries = {}

    @staticmethod
    def key(model, records, cfg):
        return model_checksum(model), records_digest(records), astuple(cfg)

    def get(self, key):
        return self._entries.get(key)

    def put(self, key, noises):
        self._entries[key] = noises

    def __len__(self):
        return len(self._entries)


def attack_forget_set(model, bundle, cfg=AdvConfig(), batch_size=128, cache=None, audit=None):
    """One noise per forget record, order preserved."""
    forget = bundle.forget
    if not forget:
        raise ConfigurationError("forget set is empty; nothing to attack")
    key = None
    if cache is not None:
        key = NoiseCache.key(model, forget, cfg)
        noises = cache.get(key)
        if noises is not None:
            logger.debug("noise cache hit for %d forget records", len(forget))
            return [NoisePair(r, d) for r, d in zip(forget, noises)]

    noises = []
    for batch in batch_iterator(forget, batch_size):
        if audit is not None:
            audit.record("attack", batch.records)
        noises.extend(pgd_attack(model, batch.images, batch.labels, cfg))
    if cache is not None:
        cache.put(key, noises)
    logger.info("generated adversarial noise for %d forget records", len(noises))
    return [NoisePair(r, d) for r, d in zip(forget, noises)]


def export_noises(pairs, out_dir, cfg=AdvConfig()):
    """Write one PNG visualization per noise plus the raw values in noises.npz."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        visual = torch.clamp(pair.noise / (2 * cfg.epsilon) + 0.5, 0.0, 1.0)
        encode_png(visual).save(out_dir / f"noise_{i:05d}.png")
    np.savez_compressed(
        out_dir / "noises.npz",
        noises=np.stack([p.noise.cpu().numpy() for p in pairs]),
        identities=np.array([p.record.identity for p in pairs]),
        labels=np.array([p.record.label for p in pairs]),
    )
    return out_dir
