"""Task stream: class-incremental schedules, Dirichlet client partitions, client groups.

All functions are pure: identical (seed, inputs) give identical outputs.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from pydantic import BaseModel, Field, model_validator

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    """Raised when a task stream cannot be built from the given arguments."""


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


class TaskSchedule(BaseModel):
    """Ordered, pairwise disjoint class sets, one per task."""

    tasks: list[list[int]]

    @model_validator(mode="after")
    def _disjoint(self) -> "TaskSchedule":
        seen: set[int] = set()
        for classes in self.tasks:
            overlap = seen.intersection(classes)
            if overlap:
                raise ScheduleError(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(classes)
        return self

    @property
    def T(self) -> int:
        return len(self.tasks)

    def label_map(self) -> dict[int, int]:
        """Class id → classifier head index, in order of first appearance."""
        mapping: dict[int, int] = {}
        for classes in self.tasks:
            for k in classes:
                mapping[k] = len(mapping)
        return mapping

    def head_classes(self, task_id: int) -> list[int]:
        """Head indices of the classes introduced by `task_id`."""
        start = sum(len(c) for c in self.tasks[:task_id])
        return list(range(start, start + len(self.tasks[task_id])))

    def seen_through(self, task_id: int) -> int:
        """Number of classes introduced up to and including `task_id`."""
        return sum(len(c) for c in self.tasks[: task_id + 1])


class ClientPartition(BaseModel):
    """Per-task sample assignment: client id → sample indices."""

    task_id: int
    sigma: float = Field(gt=0)
    assignment: dict[int, list[int]] = Field(default_factory=dict)

    def all_indices(self) -> list[int]:
        return sorted(i for idx in self.assignment.values() for i in idx)


class ClientGroupAssignment(BaseModel):
    """Old / in-between / new client groups for one task."""

    task_id: int
    old: list[int] = Field(default_factory=list, description="Past-task data only")
    between: list[int] = Field(default_factory=list, description="Past and current-task data")
    new: list[int] = Field(default_factory=list, description="Current-task data only")

    @model_validator(mode="after")
    def _pairwise_disjoint(self) -> "ClientGroupAssignment":
        groups = [set(self.old), set(self.between), set(self.new)]
        if sum(len(g) for g in groups) != len(set().union(*groups)):
            raise ScheduleError("client groups must be pairwise disjoint")
        return self

    @property
    def total(self) -> int:
        return len(self.old) + len(self.between) + len(self.new)

    @property
    def all_clients(self) -> list[int]:
        return sorted(self.old + self.between + self.new)

    @property
    def current_data_clients(self) -> list[int]:
        return sorted(self.between + self.new)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def build_task_schedule(class_count: int, T: int, classes_per_task: int, seed: int) -> TaskSchedule:
    """Draw T disjoint class sets of size `classes_per_task` by a seeded shuffle."""
    if min(class_count, T, classes_per_task) < 1:
        raise ScheduleError("class_count, T and classes_per_task must be positive")
    if T * classes_per_task > class_count:
        raise ScheduleError(
            f"insufficient classes: {T} tasks × {classes_per_task} classes > {class_count}"
        )
    order = np.random.default_rng(seed).permutation(class_count)
    tasks = [
        sorted(int(k) for k in order[t * classes_per_task : (t + 1) * classes_per_task])
        for t in range(T)
    ]
    return TaskSchedule(tasks=tasks)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Round proportions to integer counts summing exactly to `total`."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    indices: np.ndarray,
    labels: np.ndarray,
    client_ids: list[int],
    sigma: float,
    seed: int,
    task_id: int = 0,
) -> ClientPartition:
    """Split a task's samples over clients with per-class Dirichlet(sigma) proportions.

    `indices[i]` is a dataset index whose class is `labels[i]`. Counts per class are
    rounded by largest remainder, so the result is an exact disjoint cover.
    """
    if sigma <= 0:
        raise ScheduleError(f"sigma must be > 0, got {sigma}")
    if not client_ids:
        raise ScheduleError("at least one client is required")
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)

    rng = np.random.default_rng([seed, task_id])
    buckets: dict[int, list[int]] = {cid: [] for cid in client_ids}
    n_clients = len(client_ids)
    for k in np.unique(labels):
        members = rng.permutation(indices[labels == k])
        props = rng.dirichlet(np.full(n_clients, sigma))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            props = np.eye(n_clients)[rng.integers(n_clients)]
        counts = _largest_remainder(props / props.sum(), len(members))
        start = 0
        for cid, n in zip(client_ids, counts):
            buckets[cid].extend(int(i) for i in members[start : start + n])
            start += n

    return ClientPartition(
        task_id=task_id,
        sigma=sigma,
        assignment={cid: sorted(idx) for cid, idx in buckets.items()},
    )


def advance_client_groups(
    prev: ClientGroupAssignment | None,
    task_id: int,
    increment: int,
    transition_fraction: float,
    seed: int,
    initial_clients: int = 0,
) -> ClientGroupAssignment:
    """Re-draw the old/in-between/new groups for `task_id`.

    Task 0 starts `initial_clients` clients, all new. Later tasks add `increment`
    brand-new clients and move a seeded `transition_fraction` of the existing
    clients into the in-between group; the rest become old.
    """
    if not 0.0 <= transition_fraction <= 1.0:
        raise ScheduleError(f"transition_fraction must lie in [0, 1], got {transition_fraction}")
    if increment < 0:
        raise ScheduleError(f"increment must be >= 0, got {increment}")

    if prev is None:
        if task_id != 0:
            raise ScheduleError(f"task {task_id} needs the previous group assignment")
        return ClientGroupAssignment(task_id=0, new=list(range(initial_clients)))
    if task_id == 0:
        raise ScheduleError("task 0 cannot follow a previous assignment")

    existing = prev.all_clients
    n_between = int(math.floor(len(existing) * transition_fraction + 0.5))
    rng = np.random.default_rng([seed, task_id])
    between = sorted(int(c) for c in rng.choice(existing, size=n_between, replace=False)) if existing else []
    old = sorted(set(existing) - set(between))
    first_new = (max(existing) + 1) if existing else 0
    new = list(range(first_new, first_new + increment))

    logger.info(
        f"Task {task_id}: {len(old)} old / {len(between)} in-between / {len(new)} new clients"
    )
    return ClientGroupAssignment(task_id=task_id, old=old, between=between, new=new)


def sample_round_clients(
    assignment: ClientGroupAssignment,
    count: int,
    seed: int,
    round_id: int = 0,
    include_old_group: bool = False,
) -> list[int]:
    """Seeded uniform sample without replacement of clients holding current-task data."""
    eligible = assignment.current_data_clients
    if include_old_group:
        eligible = sorted(eligible + assignment.old)
    if count <= 0:
        return []
    if count >= len(eligible):
        return eligible
    rng = np.random.default_rng([seed, assignment.task_id, round_id])
    return sorted(int(c) for c in rng.choice(eligible, size=count, replace=False))
