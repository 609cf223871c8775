"""Image datasets: deterministic synthetic blobs and the raw-tensor directory format.

Raw-tensor directory layout:
    <dir>/
        meta.json          {"class_count", "height", "width", "channels", "dtype": "u8"}
        class_<id>.bin     concatenated H×W×C row-major u8 images of class <id>
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised when a dataset violates its shape or label contract."""


Origin = Literal["real", "condensed"]


@dataclass
class LabeledBatch:
    """Images with labels, tagged with where the pixels came from."""

    images: torch.Tensor
    labels: torch.Tensor
    origin: Origin = "real"

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def empty(cls, image_shape: tuple[int, ...], origin: Origin = "real") -> "LabeledBatch":
        return cls(torch.zeros((0, *image_shape)), torch.zeros(0, dtype=torch.long), origin)

    def of_class(self, k: int) -> "LabeledBatch":
        mask = self.labels == k
        return LabeledBatch(self.images[mask], self.labels[mask], self.origin)

    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))


@dataclass(frozen=True)
class DatasetSpec:
    """Labeled image tensor set: images N×C×H×W (float32), labels N (int64)."""

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    name: str = "dataset"
    strict: bool = True  # every class must have a sample

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be N×C×H×W, got {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DatasetError(f"{self.name}: labels must be a vector with one entry per image")
        if self.labels.numel() and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count
        ):
            raise DatasetError(f"{self.name}: class ids must lie in [0, {self.class_count})")
        if not self.strict:
            return
        present = set(self.labels.tolist())
        missing = [k for k in range(self.class_count) if k not in present]
        if missing:
            raise DatasetError(f"{self.name}: classes without samples: {missing[:10]}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def indices_of(self, classes: set[int] | list[int]) -> np.ndarray:
        """Sample indices whose label is in `classes`, ascending."""
        mask = np.isin(self.labels.numpy(), np.asarray(sorted(classes), dtype=np.int64))
        return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# Synthetic Gaussian-blob images
# ---------------------------------------------------------------------------


def _blob_templates(
    rng: np.random.Generator, class_count: int, size: int, channels: int, blobs: int
) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    templates = np.zeros((class_count, channels, size, size), dtype=np.float32)
    for k in range(class_count):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size, size=2)
            width = rng.uniform(size / 8, size / 4)
            color = rng.uniform(-1.0, 1.0, size=channels).astype(np.float32)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            templates[k] += color[:, None, None] * bump[None]
    return templates


def make_synthetic_split(
    class_count: int,
    samples_per_class: int,
    test_per_class: int,
    image_size: int = 16,
    channels: int = 3,
    noise: float = 0.35,
    blobs: int = 3,
    seed: int = 0,
) -> tuple[DatasetSpec, DatasetSpec]:
    """Build train/test sets drawn around shared per-class blob templates."""
    rng = np.random.default_rng(seed)
    templates = _blob_templates(rng, class_count, image_size, channels, blobs)

    def draw(per_class: int, name: str) -> DatasetSpec:
        n = class_count * per_class
        labels = np.repeat(np.arange(class_count), per_class)
        gain = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1)).astype(np.float32)
        jitter = rng.normal(0.0, noise, size=(n, channels, image_size, image_size)).astype(np.float32)
        images = templates[labels] * gain + jitter
        return DatasetSpec(
            images=torch.from_numpy(images),
            labels=torch.from_numpy(labels.astype(np.int64)),
            class_count=class_count,
            name=name,
        )

    train = draw(samples_per_class, f"synthetic-{class_count}-train")
    test = draw(test_per_class, f"synthetic-{class_count}-test")
    return train, test


# ---------------------------------------------------------------------------
# Raw-tensor directory format
# ---------------------------------------------------------------------------


def load_raw_dir(path: str | Path) -> DatasetSpec:
    """Load a raw-tensor dataset directory; pixels are scaled to [-1, 1]."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"No meta.json in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("dtype", "u8") != "u8":
        raise DatasetError(f"Unsupported dtype {meta.get('dtype')!r}; only 'u8' is supported")

    class_count = int(meta["class_count"])
    h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])
    per_image = h * w * c

    images: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for k in range(class_count):
        blob_path = root / f"class_{k}.bin"
        if not blob_path.exists():
            raise DatasetError(f"Missing {blob_path.name} in {root}")
        raw = np.fromfile(blob_path, dtype=np.uint8)
        if raw.size % per_image:
            raise DatasetError(f"{blob_path.name}: {raw.size} bytes is not a multiple of {per_image}")
        block = raw.reshape(-1, h, w, c).transpose(0, 3, 1, 2)
        images.append(block)
        labels.append(np.full(block.shape[0], k, dtype=np.int64))

    stacked = np.concatenate(images).astype(np.float32) / 255.0
    logger.info(f"Loaded {stacked.shape[0]} images over {class_count} classes from {root}")
    return DatasetSpec(
        images=torch.from_numpy((stacked - 0.5) / 0.5),
        labels=torch.from_numpy(np.concatenate(labels)),
        class_count=class_count,
        name=root.name,
    )


def write_raw_dir(dataset: DatasetSpec, path: str | Path) -> Path:
    """Export a dataset to the raw-tensor directory format (u8-quantized)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    c, h, w = dataset.image_shape
    meta = {"class_count": dataset.class_count, "height": h, "width": w, "channels": c, "dtype": "u8"}
    (root / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    pixels = ((dataset.images.clamp(-1, 1) * 0.5 + 0.5) * 255.0).round().to(torch.uint8)
    for k in range(dataset.class_count):
        block = pixels[dataset.labels == k].permute(0, 2, 3, 1).contiguous().numpy()
        block.tofile(root / f"class_{k}.bin")
    return root


def split_train_test(
    dataset: DatasetSpec, test_fraction: float, seed: int
) -> tuple[DatasetSpec, DatasetSpec]:
    """Stratified split; every class keeps at least one sample on each side when it has two."""
    rng = np.random.default_rng(seed)
    labels = dataset.labels.numpy()
    train_idx: list[int] = []
    test_idx: list[int] = []
    for k in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_test = int(round(len(idx) * test_fraction))
        n_test = min(max(n_test, 1 if len(idx) > 1 else 0), len(idx) - 1)
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    if not test_idx:
        raise DatasetError(f"{dataset.name}: too few samples to hold out a test split")

    def take(indices: list[int], suffix: str) -> DatasetSpec:
        order = torch.tensor(sorted(indices), dtype=torch.long)
        return DatasetSpec(
            dataset.images[order], dataset.labels[order], dataset.class_count, f"{dataset.name}-{suffix}"
        )

    train = take(train_idx, "train")
    order = torch.tensor(sorted(test_idx), dtype=torch.long)
    test = DatasetSpec(
        dataset.images[order], dataset.labels[order], dataset.class_count, f"{dataset.name}-test", strict=False
    )
    return train, test


def load_dataset(
    name: str,
    *,
    synthetic_classes: int,
    samples_per_class: int,
    test_per_class: int,
    image_size: int,
    channels: int,
    test_fraction: float,
    seed: int,
) -> tuple[DatasetSpec, DatasetSpec]:
    """Resolve a config dataset name to (train, test)."""
    if name == "synthetic":
        return make_synthetic_split(
            synthetic_classes,
            samples_per_class,
            test_per_class,
            image_size=image_size,
            channels=channels,
            seed=seed,
        )
    return split_train_test(load_raw_dir(name), test_fraction, seed)
