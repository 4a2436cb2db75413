"""
Cohort-structured image datasets: synthetic generation, directory ingestion
and the five-way split contract (train / test / forget / retain / unseen).
"""

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from errors import ConfigurationError, ContractError, IngestionError

logger = logging.getLogger(__name__)

SPLITS = ("forget", "retain", "test", "unseen")

# Split tags used in labels.csv
CSV_SPLIT_TAGS = {
    "train_forget": "forget",
    "train_retain": "retain",
    "test": "test",
    "unseen": "unseen",
}
CSV_COLUMNS = ["filename", "label", "identity", "split"]


@dataclass(eq=False)
class ImageRecord:
    image: torch.Tensor  # (C, H, W), values in [0, 1]
    label: int
    identity: int
    split: str = "retain"

    def __post_init__(self):
        if self.label < 0:
            raise ContractError(f"label must be >= 0, got {self.label}")
        if self.identity < 0:
            raise ContractError(f"identity must be >= 0, got {self.identity}")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")


def identities(records):
    return {r.identity for r in records}


@dataclass(eq=False)
class DatasetBundle:
    train: list
    test: list
    forget: list
    retain: list
    unseen: list
    num_classes: int
    image_shape: tuple

    def validate(self):
        """Re-check every bundle invariant, raising ContractError on violation."""
        train_ids = {id(r) for r in self.train}
        forget_ids = {id(r) for r in self.forget}
        retain_ids = {id(r) for r in self.retain}
        if forget_ids & retain_ids:
            raise ContractError("forget and retain share records")
        if forget_ids | retain_ids != train_ids or len(self.train) != len(train_ids):
            raise ContractError("train must be exactly forget + retain")

        groups = {
            "forget": identities(self.forget),
            "retain": identities(self.retain),
            "unseen": identities(self.unseen),
        }
        for a, b in (("forget", "retain"), ("forget", "unseen"), ("retain", "unseen")):
            shared = groups[a] & groups[b]
            if shared:
                raise ContractError(
                    f"identities {sorted(shared)[:5]} appear in both {a} and {b}"
                )
        shared = identities(self.test) & identities(self.train)
        if shared:
            raise ContractError(f"test identities {sorted(shared)[:5]} also appear in train")

        for name in ("train", "test", "unseen"):
            for r in getattr(self, name):
                if not 0 <= r.label < self.num_classes:
                    raise ContractError(f"{name} record label {r.label} out of range")
                if tuple(r.image.shape) != tuple(self.image_shape):
                    raise ContractError(
                        f"{name} record has shape {tuple(r.image.shape)}, "
                        f"expected {tuple(self.image_shape)}"
                    )
        return self

    def sizes(self):
        return {
            "train": len(self.train),
            "test": len(self.test),
            "forget": len(self.forget),
            "retain": len(self.retain),
            "unseen": len(self.unseen),
        }


def fraction_of(n, fraction):
    """floor(n * fraction), immune to 100 * 0.29 == 28.999..."""
    return math.floor(n * fraction + 1e-9)


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 8
    num_identities: int = 100
    images_per_identity: int = 10
    image_shape: tuple = (3, 32, 32)
    forget_identity_fraction: float = 0.2
    unseen_identity_fraction: float = 0.2
    test_identity_fraction: float = 0.2
    noise_std: float = 0.1
    class_signal: float = 0.25
    identity_signal: float = 0.9
    patch_size: int = 10
    # Atypical identities carry a faint class pattern, so a model can only
    # fit them by memorizing their signature.
    atypical_identity_fraction: float = 0.25
    atypical_class_scale: float = 0.1
    seed: int = 0

    def group_sizes(self):
        """Number of identities in (forget, unseen, test, retain)."""
        n = self.num_identities
        n_forget = fraction_of(n, self.forget_identity_fraction)
        n_unseen = fraction_of(n, self.unseen_identity_fraction)
        n_test = fraction_of(n, self.test_identity_fraction)
        return n_forget, n_unseen, n_test, n - n_forget - n_unseen - n_test

    def validate(self):
        for name in ("num_classes", "num_identities", "images_per_identity", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigurationError(f"image_shape must be (C, H, W), got {self.image_shape}")
        _, h, w = self.image_shape
        if self.patch_size > min(h, w):
            raise ConfigurationError("patch_size larger than the image")
        for name in ("forget_identity_fraction", "unseen_identity_fraction", "test_identity_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if not 0 <= self.atypical_identity_fraction < 1:
            raise ConfigurationError("atypical_identity_fraction must lie in [0, 1)")
        if not 0 <= self.atypical_class_scale <= 1:
            raise ConfigurationError("atypical_class_scale must lie in [0, 1]")
        for name, count in zip(("forget", "unseen", "test", "retain"), self.group_sizes()):
            if count < 1:
                raise ConfigurationError(
                    f"identity fractions leave no {name} identity "
                    f"({self.num_identities} identities)"
                )
        return self


def _class_templates(rng, num_classes, image_shape):
    """Smooth per-class patterns in [0, 1], upsampled from a 4x4 grid."""
    c, h, w = image_shape
    coarse = torch.from_numpy(rng.random((num_classes, c, 4, 4)).astype(np.float32))
    return F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False).numpy()


def generate_synthetic(cfg):
    """Generate a seeded synthetic cohort benchmark.

    Every identity carries a fixed class and a fixed signature patch blended
    at a fixed location; images add a class pattern and pixel noise on top.
    The same share of every group is atypical (class pattern scaled by
    `atypical_class_scale`). Identity groups are laid out as forget, unseen,
    test, retain.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c, h, w = cfg.image_shape
    p = cfg.patch_size
    templates = _class_templates(rng, cfg.num_classes, cfg.image_shape)

    group_names = ("forget", "unseen", "test", "retain")
    records = {name: [] for name in group_names}
    identity = 0
    for name, count in zip(group_names, cfg.group_sizes()):
        atypical = set(rng.permutation(count)[:fraction_of(count, cfg.atypical_identity_fraction)].tolist())
        for j in range(count):
            # round-robin classes keep forget and unseen class-balanced alike
            label = j % cfg.num_classes
            scale = cfg.atypical_class_scale if j in atypical else 1.0
            patch = rng.random((c, p, p)).astype(np.float32)
            top = int(rng.integers(0, h - p + 1))
            left = int(rng.integers(0, w - p + 1))
            for _ in range(cfg.images_per_identity):
                strength = scale * cfg.class_signal * rng.uniform(0.8, 1.2)
                img = 0.5 + strength * (2.0 * templates[label] - 1.0)
                region = img[:, top:top + p, left:left + p]
                img[:, top:top + p, left:left + p] = (
                    (1.0 - cfg.identity_signal) * region + cfg.identity_signal * patch
                )
                img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
                img = np.clip(img, 0.0, 1.0).astype(np.float32)
                records[name].append(
                    ImageRecord(torch.from_numpy(img), label, identity, split=name)
                )
            identity += 1

    bundle = DatasetBundle(
        train=records["forget"] + records["retain"],
        test=records["test"],
        forget=records["forget"],
        retain=records["retain"],
        unseen=records["unseen"],
        num_classes=cfg.num_classes,
        image_shape=tuple(cfg.image_shape),
    )
    logger.info("generated synthetic bundle %s", bundle.sizes())
    return bundle.validate()


def _decode_png(path):
    img = Image.open(path)
    # Flatten transparency onto white
    if img.mode == "RGBA":
        background = Image.new("RGB", img.size, (255, 255, 255))
        background.paste(img, mask=img.split()[3])
        img = background
    elif img.mode not in ("RGB", "L"):
        img = img.convert("RGB")
    array = np.asarray(img, dtype=np.float32) / 255.0
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = array.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(array))


def load_directory_dataset(root, labels_file="labels.csv", num_classes=None):
    """Ingest `root/images/*.png` described by `root/labels.csv`.

    Invariant violations are rejected with an IngestionError naming the
    offending row; nothing is repaired.
    """
    root = Path(root)
    labels_path = root / labels_file
    if not labels_path.exists():
        raise IngestionError(f"labels file not found: {labels_path}")

    decoded = {}
    rows = []
    owner = {}  # identity -> (split, row number) for forget/retain/unseen
    train_ids = {}
    test_ids = {}

    with open(labels_path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [col for col in CSV_COLUMNS if col not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"{labels_path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{labels_path}:{row_no}"
            tag = row["split"].strip()
            if tag not in CSV_SPLIT_TAGS:
                raise IngestionError(f"{where}: unknown split tag {tag!r}")
            split = CSV_SPLIT_TAGS[tag]
            try:
                label = int(row["label"])
                identity = int(row["identity"])
            except ValueError:
                raise IngestionError(f"{where}: label and identity must be integers")
            if label < 0 or identity < 0:
                raise IngestionError(f"{where}: label and identity must be >= 0")

            if split == "test":
                if identity in train_ids:
                    raise IngestionError(
                        f"{where}: test identity {identity} also in train (row {train_ids[identity]})"
                    )
                test_ids.setdefault(identity, row_no)
            else:
                seen = owner.get(identity)
                if seen is not None and seen[0] != split:
                    raise IngestionError(
                        f"{where}: identity {identity} appears in both {seen[0]} "
                        f"(row {seen[1]}) and {split}"
                    )
                owner.setdefault(identity, (split, row_no))
                if split in ("forget", "retain"):
                    if identity in test_ids:
                        raise IngestionError(
                            f"{where}: train identity {identity} also in test (row {test_ids[identity]})"
                        )
                    train_ids.setdefault(identity, row_no)

            image_path = root / "images" / row["filename"]
            if image_path not in decoded:
                if not image_path.exists():
                    raise IngestionError(f"{where}: image not found: {image_path}")
                decoded[image_path] = _decode_png(image_path)
            rows.append((where, ImageRecord(decoded[image_path], label, identity, split=split)))

    if not rows:
        raise IngestionError(f"{labels_path}: no rows")

    image_shape = tuple(rows[0][1].image.shape)
    max_label = -1
    for where, record in rows:
        if tuple(record.image.shape) != image_shape:
            raise IngestionError(
                f"{where}: image shape {tuple(record.image.shape)} differs from {image_shape}"
            )
        max_label = max(max_label, record.label)
    if num_classes is None:
        num_classes = max_label + 1
    elif max_label >= num_classes:
        raise IngestionError(f"label {max_label} out of range for {num_classes} classes")

    by_split = defaultdict(list)
    for _, record in rows:
        by_split[record.split].append(record)
    bundle = DatasetBundle(
        train=[r for _, r in rows if r.split in ("forget", "retain")],
        test=by_split["test"],
        forget=by_split["forget"],
        retain=by_split["retain"],
        unseen=by_split["unseen"],
        num_classes=num_classes,
        image_shape=image_shape,
    )
    logger.info("loaded %s from %s", bundle.sizes(), root)
    return bundle.validate()


def encode_png(image):
    array = (image.detach().cpu().numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    if array.shape[0] == 1:
        return Image.fromarray(array[0], mode="L")
    if array.shape[0] == 3:
        return Image.fromarray(array.transpose(1, 2, 0), mode="RGB")
    raise ConfigurationError(f"cannot encode {array.shape[0]}-channel image as PNG")


def export_bundle(bundle, root):
    """Write a bundle to `root/images/*.png` + `root/labels.csv`."""
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    tag_for = {split: tag for tag, split in CSV_SPLIT_TAGS.items()}

    with open(root / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for split, records in (
            ("forget", bundle.forget),
            ("retain", bundle.retain),
            ("test", bundle.test),
            ("unseen", bundle.unseen),
        ):
            for i, record in enumerate(records):
                filename = f"{split}_{i:05d}.png"
                encode_png(record.image).save(images_dir / filename)
                writer.writerow([filename, record.label, record.identity, tag_for[split]])
    return root


class Batch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor
    records: list


def stack_records(records):
    images = torch.stack([r.image for r in records])
    labels = torch.tensor([r.label for r in records], dtype=torch.long)
    return images, labels


def batch_iterator(records, batch_size, shuffle_seed=None, epoch=0) -> Iterator[Batch]:
    """Yield one epoch of batches; the final partial batch is included.

    With a shuffle seed the order is a permutation drawn from (seed, epoch);
    without one the input order is kept.
    """
    if not records:
        raise ContractError("cannot iterate over an empty record list")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images, labels = stack_records(chunk)
        yield Batch(images, labels, chunk)


@dataclass
class AccessAudit:
    """Per-stage count of consumed samples by split."""

    counts: dict = field(default_factory=lambda: defaultdict(Counter))

    def record(self, stage, records: Sequence[ImageRecord]):
        self.counts[stage].update(r.split for r in records)

    def count(self, split, stage=None):
        if stage is not None:
            return self.counts.get(stage, Counter())[split]
        return sum(c[split] for c in self.counts.values())

    def stages_touching(self, split):
        return sorted(stage for stage, c in self.counts.items() if c[split] > 0)

    def as_dict(self):
        return {
            stage: {split: c[split] for split in sorted(c) if c[split]}
            for stage, c in sorted(self.counts.items())
        }
