"""Round and task orchestration of the in-process federation.

Selected clients train concurrently in worker threads (bounded by FCIL_THREADS);
the server aggregates at a barrier in client-id order, so results do not depend
on completion order.
"""

from __future__ import annotations

import asyncio
import logging
import os
from collections import Counter
from dataclasses import dataclass, replace

import torch

from fcil.data.datasets import DatasetSpec, LabeledBatch
from fcil.disentangle.prototypes import PrototypeSet
from fcil.disentangle.vae import SharedVAE
from fcil.federation.client import (
    ClientState,
    ClientUpdate,
    SkipClient,
    client_local_train,
    finish_client_task,
    prepare_client_for_task,
)
from fcil.federation.server import aggregate_vae, build_round_prototypes, fedavg_aggregate
from fcil.federation.transport import decode_broadcast, decode_update, encode_broadcast, encode_update
from fcil.models import ExperimentConfig, RoundReport
from fcil.nets.backbone import Backbone, expand_head, init_backbone
from fcil.nets.params import ParamVector
from fcil.seeding import derive_seed
from fcil.stream.schedule import ClientGroupAssignment, ClientPartition, TaskSchedule, sample_round_clients

logger = logging.getLogger(__name__)


@dataclass
class GlobalModelState:
    classifier: Backbone
    vae: SharedVAE | None = None
    teacher: Backbone | None = None
    round: int = 0
    task: int = 0


def max_workers() -> int:
    raw = os.environ.get("FCIL_THREADS", "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        logger.warning(f"Ignoring FCIL_THREADS={raw!r}; running clients sequentially")
        return 1


def freeze(model: Backbone) -> Backbone:
    frozen = model.clone().eval()
    frozen.requires_grad_(False)
    return frozen


def model_seed(seed: int) -> int:
    return derive_seed(seed, 11)


def _image_shape(state: GlobalModelState) -> tuple[int, int, int]:
    spec = state.classifier.spec
    return (spec.channels, spec.image_size, spec.image_size)


# ---------------------------------------------------------------------------
# Task boundaries
# ---------------------------------------------------------------------------


def begin_task(
    global_state: GlobalModelState | None,
    clients: dict[int, ClientState],
    task_id: int,
    schedule: TaskSchedule,
    partition: ClientPartition,
    groups: ClientGroupAssignment,
    train_set: DatasetSpec,
    config: ExperimentConfig,
    seed: int,
) -> tuple[GlobalModelState, dict[int, ClientState], dict[int, LabeledBatch]]:
    """Grow the head, register the task's classes and hand every client its local data."""
    head_classes = schedule.head_classes(task_id)
    if global_state is None:
        classifier = init_backbone(config.backbone, len(head_classes), model_seed(seed))
        global_state = GlobalModelState(classifier=classifier)
    else:
        classifier = expand_head(global_state.classifier, len(head_classes), model_seed(seed))
        global_state = replace(global_state, classifier=classifier)

    strategy = config.strategy()
    if strategy.uses_compensation:
        vae = global_state.vae
        if vae is None:
            vae = SharedVAE(classifier.feature_dim, config.vae, derive_seed(seed, 13))
        vae = vae.clone()
        vae.register_classes(head_classes)
        global_state = replace(global_state, vae=vae)
    global_state = replace(global_state, task=task_id, round=0)
    logger.info(
        f"Task {task_id}: head {len(head_classes)} classes, {global_state.classifier.params.total_dim} parameters"
    )

    task_data: dict[int, LabeledBatch] = {}
    updated = dict(clients)
    for cid in groups.all_clients:
        idx = torch.tensor(partition.assignment.get(cid, []), dtype=torch.long)
        data = LabeledBatch(train_set.images[idx], train_set.labels[idx], "real")
        task_data[cid] = data
        client = updated.get(cid) or ClientState(client_id=cid)
        updated[cid] = prepare_client_for_task(
            client,
            data.classes(),
            task_id,
            config,
            train_set.image_shape,
            schedule.seen_through(schedule.T - 1),
        )
    return global_state, updated, task_data


def end_task(
    global_state: GlobalModelState, clients: dict[int, ClientState], config: ExperimentConfig
) -> tuple[GlobalModelState, dict[int, ClientState]]:
    """Freeze the teacher and promote every client's current-task memory."""
    strategy = config.strategy()
    anchor = global_state.classifier.params
    finished = {cid: finish_client_task(c, strategy, anchor) for cid, c in sorted(clients.items())}
    return replace(global_state, teacher=freeze(global_state.classifier)), finished


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------


def _client_round(
    blob: bytes,
    templates: GlobalModelState,
    client: ClientState,
    data: LabeledBatch,
    config: ExperimentConfig,
    seed: int,
    task_id: int,
    round_id: int,
) -> tuple[ClientUpdate | None, ClientState]:
    received = decode_broadcast(blob, templates.classifier, templates.vae)
    try:
        update, client = client_local_train(
            received.classifier,
            templates.teacher,
            received.vae,
            received.prototypes,
            client,
            data,
            config,
            seed,
            task_id,
            round_id,
        )
    except SkipClient as e:
        logger.warning(f"Round {round_id}: {e}")
        return None, client
    return decode_update(encode_update(update, round_id, task_id), round_id, task_id), client


def _round_report(
    task_id: int, round_id: int, updates: list[ClientUpdate], state: GlobalModelState
) -> RoundReport:
    n = max(len(updates), 1)
    origins: Counter[str] = Counter()
    for u in updates:
        origins.update(u.report.omega_update_origins)
    return RoundReport(
        task=task_id,
        round=round_id,
        participants=[u.client_id for u in updates],
        mean_ce_loss=sum(u.report.ce_loss for u in updates) / n,
        mean_replay_loss=sum(u.report.replay_loss for u in updates) / n,
        mean_kd_loss=sum(u.report.kd_loss for u in updates) / n,
        classifier_norm=state.classifier.params.norm(),
        vae_norm=ParamVector.from_module(state.vae).norm() if state.vae is not None else None,
        omega_update_origins=dict(origins),
    )


async def run_task(
    global_state: GlobalModelState,
    clients: dict[int, ClientState],
    task_data: dict[int, LabeledBatch],
    groups: ClientGroupAssignment,
    config: ExperimentConfig,
    seed: int,
    task_id: int,
) -> tuple[GlobalModelState, dict[int, ClientState], list[RoundReport]]:
    """R rounds of sample → broadcast → local training → aggregation."""
    strategy = config.strategy()
    semaphore = asyncio.Semaphore(max_workers())
    reports: list[RoundReport] = []
    clients = dict(clients)
    pending_vae: dict[int, ClientUpdate] = {}

    for round_id in range(config.R):
        participants = sample_round_clients(
            groups, config.round_clients, seed, round_id, config.include_old_group
        )
        prototypes: PrototypeSet | None = None
        if strategy.uses_compensation and global_state.vae is not None:
            prototypes = build_round_prototypes(
                global_state.vae, config.vae.samples_per_class, derive_seed(seed, task_id, round_id)
            )
        blob = encode_broadcast(global_state.classifier, global_state.vae, prototypes, round_id, task_id)

        async def train_one(cid: int) -> tuple[ClientUpdate | None, ClientState]:
            async with semaphore:
                return await asyncio.to_thread(
                    _client_round,
                    blob,
                    global_state,
                    clients[cid],
                    task_data[cid] if cid in task_data else LabeledBatch.empty(_image_shape(global_state)),
                    config,
                    seed,
                    task_id,
                    round_id,
                )

        results = await asyncio.gather(*(train_one(cid) for cid in participants))
        updates: list[ClientUpdate] = []
        for cid, (update, client) in sorted(zip(participants, results), key=lambda item: item[0]):
            clients[cid] = client
            if update is not None:
                updates.append(update)

        if not updates:
            logger.warning(f"Task {task_id} round {round_id}: no client produced an update")
        else:
            classifier = global_state.classifier.clone()
            fedavg_aggregate(updates).load_into(classifier)
            global_state = replace(global_state, classifier=classifier)
            with_vae = [u for u in updates if u.vae is not None]
            if global_state.vae is not None and with_vae:
                if config.vae.aggregate_every == "round":
                    global_state = replace(global_state, vae=aggregate_vae(with_vae, global_state.vae))
                else:
                    pending_vae.update({u.client_id: u for u in with_vae})

        global_state = replace(global_state, round=round_id + 1)
        report = _round_report(task_id, round_id, updates, global_state)
        reports.append(report)
        logger.info(
            f"Task {task_id} round {round_id + 1}/{config.R}: {len(updates)} updates, "
            f"ce={report.mean_ce_loss:.4f} replay={report.mean_replay_loss:.4f}"
        )

    if pending_vae and global_state.vae is not None:
        merged = aggregate_vae([pending_vae[c] for c in sorted(pending_vae)], global_state.vae)
        global_state = replace(global_state, vae=merged)
    return global_state, clients, reports
