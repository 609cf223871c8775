"""Per-client rehearsal memory.

Three partitions share one client-owned store:
    orig  reservoir of current-task real images (feeds the condensation net only)
    cond  condensed exemplars of past tasks
    summ  condensed exemplars still being optimized for the current task

Only cond and summ count against the budget M. Every operation returns a new
store; the input is left untouched.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from fcil.data.codec import read_tensor_file, write_tensor_file
from fcil.data.datasets import LabeledBatch

logger = logging.getLogger(__name__)


class MemoryBudgetError(ValueError):
    """Raised when a memory operation would break the budget or a class quota."""


@dataclass
class CondensedExemplar:
    """One stored image. Condensed pixels are a leaf tensor while under optimization."""

    pixels: torch.Tensor
    label: int
    opt_state: dict[str, float] = field(default_factory=dict)
    origin: Literal["condensed", "real"] = "condensed"

    def frozen(self) -> "CondensedExemplar":
        return replace(self, pixels=self.pixels.detach().clone().requires_grad_(False))


@dataclass
class MemoryStore:
    budget: int
    image_shape: tuple[int, ...]
    orig: list[tuple[torch.Tensor, int]] = field(default_factory=list)
    orig_seen: int = 0
    cond: list[CondensedExemplar] = field(default_factory=list)
    summ: list[CondensedExemplar] = field(default_factory=list)
    quota: dict[int, int] = field(default_factory=dict)
    per_class: int = 0

    def class_counts(self, part: Literal["cond", "summ", "both"] = "both") -> Counter[int]:
        items = {"cond": self.cond, "summ": self.summ, "both": self.cond + self.summ}[part]
        return Counter(e.label for e in items)

    @property
    def stored(self) -> int:
        return len(self.cond) + len(self.summ)

    @property
    def free_slots(self) -> int:
        return self.budget - self.stored

    def summary_of(self, k: int) -> list[CondensedExemplar]:
        return [e for e in self.summ if e.label == k]

    def check(self) -> None:
        """Raise MemoryBudgetError if the budget or a class quota is exceeded."""
        if self.stored > self.budget:
            raise MemoryBudgetError(f"{self.stored} exemplars stored, budget is {self.budget}")
        for k, n in self.class_counts().items():
            if n > self.quota.get(k, 0):
                raise MemoryBudgetError(f"class {k}: {n} exemplars over quota {self.quota.get(k, 0)}")


def empty_store(budget: int, image_shape: tuple[int, ...]) -> MemoryStore:
    if budget < 1:
        raise MemoryBudgetError(f"budget must be >= 1, got {budget}")
    return MemoryStore(budget=budget, image_shape=tuple(image_shape))


# ---------------------------------------------------------------------------
# Quotas
# ---------------------------------------------------------------------------


def rebalance_quota(
    store: MemoryStore, total_classes_seen: int, new_classes: list[int] | None = None
) -> MemoryStore:
    """Set every class quota to floor(M / total_classes_seen).

    Condensed sets of classes already stored are cut to the new quota keeping
    their oldest entries; `new_classes` are admitted at the same quota.
    """
    if total_classes_seen < 1:
        raise MemoryBudgetError(f"total_classes_seen must be >= 1, got {total_classes_seen}")
    if store.budget < total_classes_seen:
        raise MemoryBudgetError(
            f"budget {store.budget} is too small for {total_classes_seen} classes"
        )
    per_class = store.budget // total_classes_seen
    classes = set(store.quota) | {e.label for e in store.cond} | set(new_classes or [])

    kept: list[CondensedExemplar] = []
    taken: Counter[int] = Counter()
    for exemplar in store.cond:
        if taken[exemplar.label] < per_class:
            kept.append(exemplar)
            taken[exemplar.label] += 1

    if len(kept) < len(store.cond):
        logger.debug(f"Quota {per_class}/class dropped {len(store.cond) - len(kept)} exemplars")
    return replace(
        store, cond=kept, quota={k: per_class for k in sorted(classes)}, per_class=per_class
    )


def fix_quota(store: MemoryStore, stream_class_count: int) -> MemoryStore:
    """Equal split over every class of the stream, decided once and never rebalanced."""
    if store.budget < stream_class_count:
        raise MemoryBudgetError(
            f"budget {store.budget} is too small for {stream_class_count} classes"
        )
    return replace(store, per_class=store.budget // stream_class_count)


def admit_classes(store: MemoryStore, classes: list[int]) -> MemoryStore:
    """Give unseen classes the current per-class quota."""
    quota = dict(store.quota)
    for k in classes:
        quota.setdefault(int(k), store.per_class)
    return replace(store, quota=quota)


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


def orig_capacity(store: MemoryStore, current_classes: int) -> int:
    return min(store.budget, 2 * store.per_class * current_classes)


def admit_original(
    store: MemoryStore, batch: LabeledBatch, cap: int, rng: np.random.Generator | int
) -> MemoryStore:
    """Reservoir-sample the stream of real images into orig, at most `cap` kept.

    Every item seen since the last clear has equal inclusion probability
    cap / seen. Condensed batches are ignored.
    """
    if batch.origin != "real":
        raise MemoryBudgetError("only real images may enter the original-image reservoir")
    if cap > store.budget:
        raise MemoryBudgetError(f"cap {cap} exceeds the budget {store.budget}")
    if cap <= 0 or len(batch) == 0:
        return replace(store, orig_seen=store.orig_seen + len(batch))
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)

    n = len(batch)
    # j_i uniform in [0, seen_i) where seen_i counts item i itself
    draws = rng.integers(0, store.orig_seen + np.arange(1, n + 1))
    slots: list[tuple[torch.Tensor, int] | int] = list(store.orig[:cap])
    for i in range(n):
        if len(slots) < cap:
            slots.append(i)
        elif draws[i] < cap:
            slots[int(draws[i])] = i

    labels = batch.labels.tolist()
    orig = [
        (batch.images[s].detach().clone(), int(labels[s])) if isinstance(s, int) else s
        for s in slots
    ]
    return replace(store, orig=orig, orig_seen=store.orig_seen + n)


def orig_batch(store: MemoryStore) -> LabeledBatch:
    if not store.orig:
        return LabeledBatch.empty(store.image_shape)
    images = torch.stack([img for img, _ in store.orig])
    labels = torch.tensor([k for _, k in store.orig], dtype=torch.long)
    return LabeledBatch(images, labels, "real")


def init_summary(
    store: MemoryStore, batch: LabeledBatch, rng: np.random.Generator
) -> MemoryStore:
    """Seed summary exemplars for classes in `batch` that have none yet.

    Each class gets quota-many copies of its real images from this batch,
    drawn with replacement only when the batch holds too few.
    """
    fresh: list[CondensedExemplar] = []
    held = store.class_counts("summ")
    for k in batch.classes():
        if held[k] or k not in store.quota:
            continue
        images = batch.of_class(k).images
        m = store.quota[k] - store.class_counts("cond")[k]
        if m <= 0:
            continue
        picks = rng.choice(len(images), size=m, replace=len(images) < m)
        for p in picks:
            pixels = images[int(p)].detach().clone().requires_grad_(True)
            fresh.append(CondensedExemplar(pixels=pixels, label=k, opt_state={"steps": 0.0}))
    if not fresh:
        return store
    out = replace(store, summ=store.summ + fresh)
    out.check()
    return out


def promote_summary(store: MemoryStore) -> MemoryStore:
    """Move the current task's summary exemplars into cond; clear summ and orig."""
    merged = store.class_counts("both")
    for k, n in merged.items():
        if n > store.quota.get(k, 0):
            raise MemoryBudgetError(
                f"promoting class {k} would hold {n} exemplars, quota is {store.quota.get(k, 0)}"
            )
    cond = store.cond + [e.frozen() for e in store.summ]
    if len(cond) > store.budget:
        raise MemoryBudgetError(f"promotion would hold {len(cond)} exemplars, budget is {store.budget}")
    return replace(store, cond=cond, summ=[], orig=[], orig_seen=0)


def promote_originals(store: MemoryStore) -> MemoryStore:
    """Replay baseline: keep reservoir real images per quota as the stored memory."""
    taken = store.class_counts("cond")
    promoted: list[CondensedExemplar] = []
    for pixels, k in store.orig:
        if taken[k] < store.quota.get(k, 0) and len(store.cond) + len(promoted) < store.budget:
            promoted.append(CondensedExemplar(pixels=pixels.clone(), label=k, origin="real"))
            taken[k] += 1
    return replace(store, cond=store.cond + promoted, summ=[], orig=[], orig_seen=0)


def sample_replay(store: MemoryStore, B_m: int, rng: np.random.Generator | int) -> LabeledBatch:
    """Uniform sample without replacement from cond ∪ summ; all of it if smaller than B_m."""
    pool = store.cond + store.summ
    if B_m <= 0 or not pool:
        return LabeledBatch.empty(store.image_shape, "condensed")
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    picks = sorted(rng.choice(len(pool), size=min(B_m, len(pool)), replace=False).tolist())
    chosen = [pool[i] for i in picks]
    origin = "condensed" if any(e.origin == "condensed" for e in chosen) else "real"
    images = torch.stack([e.pixels.detach() for e in chosen])
    labels = torch.tensor([e.label for e in chosen], dtype=torch.long)
    return LabeledBatch(images, labels, origin)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


def save_snapshot(store: MemoryStore, directory: str | Path) -> Path:
    """Write manifest.json plus exemplars.bin (named f32 tensors) under `directory`."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    items = [("cond", e) for e in store.cond] + [("summ", e) for e in store.summ]
    manifest = {
        "budget": store.budget,
        "image_shape": list(store.image_shape),
        "per_class": store.per_class,
        "quota": {str(k): v for k, v in store.quota.items()},
        "exemplars": [
            {"name": f"{part}_{i}", "part": part, "label": e.label, "origin": e.origin}
            for i, (part, e) in enumerate(items)
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    write_tensor_file(
        root / "exemplars.bin",
        {"budget": store.budget},
        {f"{part}_{i}": e.pixels for i, (part, e) in enumerate(items)},
    )
    return root


def load_snapshot(directory: str | Path) -> MemoryStore:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    _, tensors = read_tensor_file(root / "exemplars.bin")
    store = MemoryStore(
        budget=manifest["budget"],
        image_shape=tuple(manifest["image_shape"]),
        quota={int(k): v for k, v in manifest["quota"].items()},
        per_class=manifest["per_class"],
    )
    for entry in manifest["exemplars"]:
        exemplar = CondensedExemplar(tensors[entry["name"]], entry["label"], origin=entry["origin"])
        getattr(store, entry["part"]).append(exemplar)
    store.check()
    return store
