"""Test-set evaluation and Stage 3: scoring the accuracy matrix."""

from __future__ import annotations

import logging

import numpy as np
import torch

from fcil.data.datasets import DatasetSpec
from fcil.metrics import IncompleteMatrixError, compute_metrics
from fcil.models import ExperimentConfig, ExperimentState
from fcil.nets.backbone import Backbone, init_backbone
from fcil.seeding import derive_seed
from fcil.stream.schedule import TaskSchedule

logger = logging.getLogger(__name__)

_EVAL_BATCH = 512


def task_accuracy(model: Backbone, test_set: DatasetSpec, head_classes: list[int]) -> float:
    """Accuracy on the test samples of `head_classes`, argmax over every head the model has."""
    idx = torch.from_numpy(test_set.indices_of(head_classes))
    if len(idx) == 0:
        return 0.0
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for chunk in idx.split(_EVAL_BATCH):
            pred = model(test_set.images[chunk]).argmax(dim=1)
            correct += int((pred == test_set.labels[chunk]).sum())
    model.train(was_training)
    return correct / len(idx)


def task_test_sizes(test_set: DatasetSpec, schedule: TaskSchedule) -> list[int]:
    return [len(test_set.indices_of(schedule.head_classes(t))) for t in range(schedule.T)]


def random_baseline(
    config: ExperimentConfig, test_set: DatasetSpec, schedule: TaskSchedule, task_id: int, seed: int
) -> float:
    """Mean accuracy on task `task_id` of freshly initialized models with the same head width."""
    width = schedule.seen_through(task_id)
    scores = [
        task_accuracy(
            init_backbone(config.backbone, width, derive_seed(seed, 17, task_id, i)),
            test_set,
            schedule.head_classes(task_id),
        )
        for i in range(config.baseline_inits)
    ]
    return float(np.mean(scores))


async def score_metrics_node(state: ExperimentState) -> dict:
    """Compute the metric suite from the accuracy matrix.

    Writes: metrics
    """
    matrix = state.get("matrix")
    try:
        if matrix is None:
            raise IncompleteMatrixError("no accuracy matrix was produced")
        metrics = compute_metrics(matrix, state.get("pretrain_accuracy"), state.get("random_baseline"))
    except Exception as e:
        logger.error(f"Seed {state['seed']}: scoring failed: {e}")
        return {"errors": [f"Metrics: {e}"], "current_stage": "metrics"}

    return {
        "metrics": metrics,
        "current_stage": "metrics",
        "progress_messages": [f"A_avg={metrics.A_avg:.4f} A_last={metrics.A_last:.4f}"],
    }
