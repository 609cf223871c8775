"""Stage 2: run the task stream through the federation and fill the accuracy matrix."""

from __future__ import annotations

import asyncio
import logging

import torch

from fcil.data.datasets import LabeledBatch
from fcil.federation.client import ClientState
from fcil.federation.runtime import begin_task, end_task, run_task
from fcil.federation.server import heterogeneity_report
from fcil.models import AccuracyMatrix, ExperimentState, HeterogeneityReport, RoundReport
from fcil.seeding import derive_seed
from fcil.stages.evaluate import random_baseline, task_accuracy, task_test_sizes

logger = logging.getLogger(__name__)

def memory_banks(clients: dict[int, ClientState]) -> dict[int, LabeledBatch]:
    """Each client's stored past-task memory as one batch."""
    banks = {}
    for cid, client in sorted(clients.items()):
        if client.store is None or not client.store.cond:
            continue
        cond = client.store.cond
        banks[cid] = LabeledBatch(
            torch.stack([e.pixels for e in cond]),
            torch.tensor([e.label for e in cond], dtype=torch.long),
            "condensed" if any(e.origin == "condensed" for e in cond) else "real",
        )
    return banks


async def train_stream_node(state: ExperimentState) -> dict:
    """Train every task in order, recording accuracy rows, pre-training accuracy and baselines.

    Writes: global_state, clients, matrix, pretrain_accuracy, random_baseline,
            round_reports, loss_traces, heterogeneity
    """
    config, seed = state["config"], state["seed"]
    schedule, test_set = state["schedule"], state["test_set"]
    strategy = config.strategy()

    matrix = AccuracyMatrix(test_sizes=task_test_sizes(test_set, schedule))
    pretrain: list[float | None] = []
    baseline: list[float] = []
    rounds: list[RoundReport] = []
    heterogeneity: list[HeterogeneityReport] = []
    global_state = None
    clients: dict[int, ClientState] = {}

    try:
        for t in range(schedule.T):
            global_state, clients, task_data = await asyncio.to_thread(
                begin_task,
                global_state,
                clients,
                t,
                schedule,
                state["partitions"][t],
                state["groups"][t],
                state["train_set"],
                config,
                seed,
            )
            head = schedule.head_classes(t)
            pretrain.append(task_accuracy(global_state.classifier, test_set, head))
            baseline.append(await asyncio.to_thread(random_baseline, config, test_set, schedule, t, seed))

            global_state, clients, reports = await run_task(
                global_state, clients, task_data, state["groups"][t], config, seed, t
            )
            rounds.extend(reports)
            global_state, clients = await asyncio.to_thread(end_task, global_state, clients, config)

            row = [task_accuracy(global_state.classifier, test_set, schedule.head_classes(j)) for j in range(t + 1)]
            matrix.rows.append(row)
            logger.info(f"Seed {seed} task {t}: accuracy row {[round(a, 4) for a in row]}")

            if strategy.uses_memory:
                heterogeneity.append(
                    await asyncio.to_thread(
                        heterogeneity_report,
                        memory_banks(clients),
                        global_state.classifier,
                        schedule.seen_through(t),
                        config.lr,
                        config.batch_size,
                        derive_seed(seed, 19, t),
                    )
                )
    except Exception as e:
        logger.error(f"Seed {seed}: training failed: {e}")
        return {"errors": [f"Train: {e}"], "current_stage": "train"}

    return {
        "global_state": global_state,
        "clients": clients,
        "matrix": matrix,
        "pretrain_accuracy": pretrain,
        "random_baseline": baseline,
        "round_reports": rounds,
        "loss_traces": {cid: c.loss_trace for cid, c in sorted(clients.items())},
        "heterogeneity": heterogeneity,
        "current_stage": "train",
        "progress_messages": [
            f"Trained {schedule.T} tasks × {config.R} rounds; final row {[round(a, 4) for a in matrix.rows[-1]]}"
        ],
    }
