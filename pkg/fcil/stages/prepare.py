"""Stage 1: load data, draw the task schedule, client groups and per-task partitions."""

from __future__ import annotations

import asyncio
import logging

import numpy as np
import torch

from fcil.data.datasets import DatasetError, DatasetSpec, load_dataset
from fcil.models import ExperimentConfig, ExperimentState
from fcil.stream.schedule import (
    ClientGroupAssignment,
    ClientPartition,
    ScheduleError,
    advance_client_groups,
    build_task_schedule,
    dirichlet_partition,
)

logger = logging.getLogger(__name__)


def restrict_to_schedule(dataset: DatasetSpec, mapping: dict[int, int], strict: bool) -> DatasetSpec:
    """Keep the scheduled classes only, relabelled to head indices."""
    keep = torch.from_numpy(dataset.indices_of(list(mapping)))
    lut = torch.full((dataset.class_count,), -1, dtype=torch.long)
    for k, head in mapping.items():
        lut[k] = head
    return DatasetSpec(
        images=dataset.images[keep],
        labels=lut[dataset.labels[keep]],
        class_count=len(mapping),
        name=dataset.name,
        strict=strict,
    )


def prepare_stream(config: ExperimentConfig, seed: int) -> dict:
    """Everything the training stage needs, derived from (config, seed) alone."""
    train, test = load_dataset(
        config.dataset,
        synthetic_classes=config.synthetic_classes,
        samples_per_class=config.samples_per_class,
        test_per_class=config.test_per_class,
        image_size=config.backbone.image_size,
        channels=config.backbone.channels,
        test_fraction=config.test_fraction,
        seed=seed,
    )
    if train.image_shape != (config.backbone.channels, config.backbone.image_size, config.backbone.image_size):
        raise DatasetError(
            f"dataset images are {train.image_shape}, backbone expects "
            f"{config.backbone.channels}×{config.backbone.image_size}×{config.backbone.image_size}"
        )
    schedule = build_task_schedule(train.class_count, config.T, config.classes_per_task, seed)
    mapping = schedule.label_map()
    train = restrict_to_schedule(train, mapping, strict=True)
    test = restrict_to_schedule(test, mapping, strict=False)

    labels = train.labels.numpy()
    groups: list[ClientGroupAssignment] = []
    partitions: list[ClientPartition] = []
    counts: list[dict] = []
    prev = None
    for t in range(config.T):
        prev = advance_client_groups(
            prev, t, config.clients_increment, config.transition_fraction, seed, config.clients_initial
        )
        receivers = prev.current_data_clients
        if not receivers:
            raise ScheduleError(f"task {t}: no client can receive current-task data")
        idx = train.indices_of(schedule.head_classes(t))
        partition = dirichlet_partition(idx, labels[idx], receivers, config.sigma, seed, t)
        groups.append(prev)
        partitions.append(partition)
        for cid, assigned in partition.assignment.items():
            classes, n = np.unique(labels[assigned], return_counts=True)
            counts.extend(
                {"task": t, "client_id": cid, "class_id": int(k), "count": int(c)} for k, c in zip(classes, n)
            )
    return {
        "train_set": train,
        "test_set": test,
        "schedule": schedule,
        "groups": groups,
        "partitions": partitions,
        "partition_counts": counts,
    }


async def prepare_stream_node(state: ExperimentState) -> dict:
    """Build the task stream for this seed.

    Writes: train_set, test_set, schedule, groups, partitions, partition_counts
    """
    config, seed = state["config"], state["seed"]
    try:
        prepared = await asyncio.to_thread(prepare_stream, config, seed)
    except Exception as e:
        logger.error(f"Seed {seed}: stream preparation failed: {e}")
        return {"errors": [f"Prepare: {e}"], "current_stage": "prepare"}

    schedule = prepared["schedule"]
    return {
        **prepared,
        "current_stage": "prepare",
        "progress_messages": [
            f"Prepared {schedule.T} tasks over {len(prepared['train_set'])} training images "
            f"and {prepared['groups'][-1].total} clients"
        ],
    }
