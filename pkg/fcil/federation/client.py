"""Client-side local training: replay, distillation, EWC and online condensation.

A client never shares mutable state with the server or other clients. Each
call returns a new ClientState plus a ClientUpdate for aggregation.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from fcil.condense.engine import (
    CondensationState,
    condensation_features,
    condense_step,
    init_condensation,
)
from fcil.data.datasets import LabeledBatch
from fcil.disentangle.prototypes import PrototypeSet
from fcil.disentangle.vae import SharedVAE, vae_train_step
from fcil.memory.store import (
    MemoryStore,
    admit_classes,
    admit_original,
    empty_store,
    fix_quota,
    orig_capacity,
    promote_originals,
    promote_summary,
    rebalance_quota,
    sample_replay,
)
from fcil.models import ClientReport, CondenseReport, ExperimentConfig, StrategyConfig
from fcil.nets.backbone import Backbone
from fcil.nets.params import GradRequest, ParamVector, grad
from fcil.seeding import numpy_rng, torch_generator

logger = logging.getLogger(__name__)

_FISHER_BATCHES = 4


class SkipClient(Exception):
    """Raised when a selected client has nothing to train on this round."""


@dataclass
class ClientState:
    client_id: int
    store: MemoryStore | None = None
    condensation: CondensationState | None = None
    condensation_task: int = -1
    held_classes: set[int] = field(default_factory=set)
    current_classes: list[int] = field(default_factory=list)
    anchor: ParamVector | None = None
    fisher: ParamVector | None = None
    pending_fisher: ParamVector | None = None
    loss_trace: list[CondenseReport] = field(default_factory=list)


@dataclass
class ClientUpdate:
    client_id: int
    classifier: ParamVector
    sample_count: int
    report: ClientReport
    vae: ParamVector | None = None
    vae_classes: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def distillation_kl(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float
) -> torch.Tensor:
    """T²·KL(softmax(teacher/T) ‖ softmax(student/T)) over the teacher's (old-class) columns."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    n_old = teacher_logits.shape[1]
    if student_logits.shape[1] < n_old:
        raise ValueError(f"student has {student_logits.shape[1]} logits, teacher has {n_old}")
    log_q = F.log_softmax(student_logits[:, :n_old] / temperature, dim=1)
    p = F.softmax(teacher_logits.detach() / temperature, dim=1)
    return F.kl_div(log_q, p, reduction="batchmean") * temperature**2


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor | None,
    temperature: float,
    labels: torch.Tensor,
    lam: float,
) -> torch.Tensor:
    ce = F.cross_entropy(student_logits, labels)
    if teacher_logits is None or lam == 0:
        return ce
    return ce + lam * distillation_kl(student_logits, teacher_logits, temperature)


def ewc_penalty(
    model: torch.nn.Module, anchor: ParamVector, fisher: ParamVector, factor: float
) -> torch.Tensor:
    """factor·Σ F_i(θ_i − θ*_i)², restricted to the rows that existed when θ* was taken."""
    total = next(model.parameters()).new_zeros(())
    for name, p in model.named_parameters():
        if name not in anchor.layers:
            continue
        ref = anchor.layers[name]
        live = p[tuple(slice(0, n) for n in ref.shape)]
        total = total + (fisher.layers[name] * (live - ref).pow(2)).sum()
    return factor * total


def estimate_fisher(model: Backbone, batches: list[LabeledBatch]) -> ParamVector:
    """Diagonal Fisher: mean squared CE gradient over the given batches."""
    names = [n for n, _ in model.named_parameters()]
    acc = [torch.zeros_like(p) for p in model.parameters()]
    used = [b for b in batches if len(b)]
    for b in used:
        grads = grad(
            model,
            GradRequest("params", lambda m, x, y: F.cross_entropy(m(x), y), b.images, b.labels),
        )
        for a, g in zip(acc, grads):
            a += g.detach().pow(2)
    scale = 1.0 / max(len(used), 1)
    return ParamVector(OrderedDict(zip(names, (a * scale for a in acc))))


# ---------------------------------------------------------------------------
# Task lifecycle
# ---------------------------------------------------------------------------


def prepare_client_for_task(
    client: ClientState,
    local_classes: list[int],
    task_id: int,
    config: ExperimentConfig,
    image_shape: tuple[int, ...],
    stream_class_count: int,
) -> ClientState:
    """Admit this task's local classes into the client's memory quotas."""
    strategy = config.strategy()
    held = client.held_classes | set(local_classes)
    out = replace(client, held_classes=held, current_classes=sorted(local_classes))
    if not strategy.uses_memory or not local_classes:
        return out

    store = client.store
    if store is None:
        store = empty_store(config.M, image_shape)
        if not strategy.components.adjustable_memory:
            store = fix_quota(store, stream_class_count)
    new = sorted(set(local_classes) - set(store.quota))
    if strategy.components.adjustable_memory or strategy.method == "replay":
        store = rebalance_quota(store, len(held), new)
    else:
        store = admit_classes(store, new)
    logger.debug(
        f"Client {client.client_id} task {task_id}: quota {store.per_class}/class over {len(held)} classes"
    )
    return replace(out, store=store)


def finish_client_task(client: ClientState, strategy: StrategyConfig, anchor: ParamVector) -> ClientState:
    """Task-end bookkeeping: fix the memory for the next task and roll the EWC anchor."""
    out = client
    if client.store is not None:
        if strategy.uses_condensation:
            out = replace(out, store=promote_summary(client.store))
        else:
            out = replace(out, store=promote_originals(client.store))
    if strategy.method == "ewc" and client.pending_fisher is not None:
        out = replace(out, anchor=anchor, fisher=client.pending_fisher, pending_fisher=None)
    return replace(out, condensation=None, condensation_task=-1, current_classes=[])


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------


def _minibatches(data: LabeledBatch, batch_size: int, rng: np.random.Generator) -> list[LabeledBatch]:
    order = torch.from_numpy(rng.permutation(len(data)))
    return [
        LabeledBatch(data.images[idx], data.labels[idx], data.origin)
        for idx in order.split(batch_size)
    ]


def _vae_pool(data: LabeledBatch, store: MemoryStore | None) -> LabeledBatch:
    """Current-task images plus the condensed memory of earlier tasks."""
    if store is None or not store.cond:
        return data
    images = torch.stack([e.pixels.detach() for e in store.cond])
    labels = torch.tensor([e.label for e in store.cond], dtype=torch.long)
    return LabeledBatch(torch.cat([data.images, images]), torch.cat([data.labels, labels]), "condensed")


def _train_vae(
    vae: SharedVAE,
    cond: CondensationState,
    data: LabeledBatch,
    store: MemoryStore | None,
    config: ExperimentConfig,
    rng: np.random.Generator,
    generator: torch.Generator,
) -> tuple[SharedVAE, list[int]]:
    """Fit the Shared-VAE to Φ_ω features, the space the contrastive anchor lives in."""
    pool = _vae_pool(data, store)
    feats = condensation_features(cond, pool.images, differentiable=False)
    local = vae
    trained: set[int] = set()
    for _ in range(config.vae.steps_per_round):
        idx = torch.from_numpy(rng.choice(len(pool), size=min(config.batch_size, len(pool)), replace=False))
        local, _report = vae_train_step(local, feats[idx], pool.labels[idx], config.vae.lr, generator)
        trained.update(pool.labels[idx].tolist())
    return local, sorted(trained)


def client_local_train(
    classifier: Backbone,
    teacher: Backbone | None,
    vae: SharedVAE | None,
    prototypes: PrototypeSet | None,
    client: ClientState,
    data: LabeledBatch,
    config: ExperimentConfig,
    seed: int,
    task_id: int,
    round_id: int,
) -> tuple[ClientUpdate, ClientState]:
    """E local epochs of L(θ; B_n) + λ_m·L_m(θ; B_m), with KD, EWC and condensation per strategy.

    `classifier` and `vae` are the broadcast global models; they are copied,
    never modified.
    """
    strategy = config.strategy()
    store = client.store
    memory_size = store.stored if store is not None else 0
    if len(data) == 0 and memory_size == 0:
        raise SkipClient(f"client {client.client_id} has neither task data nor memory")

    rng = numpy_rng(seed, task_id, round_id, client.client_id)
    generator = torch_generator(seed, task_id, round_id, client.client_id)
    model = classifier.clone()
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=strategy.lr)
    use_teacher = strategy.uses_kd and teacher is not None
    use_ewc = strategy.method == "ewc" and client.anchor is not None and client.fisher is not None

    cond = client.condensation
    if strategy.uses_condensation and len(data) and client.condensation_task != task_id:
        cond = init_condensation(config.backbone, model.head_classes, strategy.eta, seed, task_id)

    sums: Counter[str] = Counter()
    steps = 0
    trace: list[CondenseReport] = []
    recent: list[LabeledBatch] = []
    n_current = max(len(client.current_classes), 1)

    for _epoch in range(strategy.E):
        if len(data):
            batches = _minibatches(data, strategy.batch_size, rng)
        else:
            batches = [LabeledBatch.empty(tuple(data.images.shape[1:]))] * max(
                1, math.ceil(memory_size / max(strategy.replay_batch_size, 1))
            )
        for batch in batches:
            memory = (
                sample_replay(store, strategy.replay_batch_size, rng)
                if store is not None and strategy.uses_memory
                else None
            )
            optimizer.zero_grad()
            loss = model.head.weight.new_zeros(())
            if len(batch):
                logits = model(batch.images)
                teacher_logits = None
                if use_teacher:
                    with torch.no_grad():
                        teacher_logits = teacher(batch.images)
                ce_kd = kd_loss(logits, teacher_logits, strategy.kd_temperature, batch.labels, strategy.lambda_kd)
                ce = F.cross_entropy(logits.detach(), batch.labels)
                sums["ce"] += float(ce)
                sums["kd"] += float(ce_kd) - float(ce)
                loss = loss + ce_kd
            if memory is not None and len(memory):
                replay = F.cross_entropy(model(memory.images), memory.labels)
                sums["replay"] += float(replay)
                loss = loss + strategy.lambda_memory * replay
            if use_ewc:
                penalty = ewc_penalty(model, client.anchor, client.fisher, strategy.ewc_factor)
                sums["ewc"] += float(penalty)
                loss = loss + penalty
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
            steps += 1

            if not len(batch):
                continue
            recent = (recent + [batch])[-_FISHER_BATCHES:]
            if strategy.uses_condensation and store is not None:
                store, cond, report = condense_step(cond, store, batch, prototypes, strategy, rng, n_current)
                trace.append(report)
            elif store is not None and strategy.uses_memory:
                store = admit_original(store, batch, orig_capacity(store, n_current), rng)

    new_vae = None
    vae_classes: list[int] = []
    if vae is not None and strategy.uses_compensation and len(data) and cond is not None:
        new_vae, vae_classes = _train_vae(vae, cond, data, store, config, rng, generator)

    pending_fisher = client.pending_fisher
    if strategy.method == "ewc" and recent:
        pending_fisher = estimate_fisher(model, recent)

    def mean(key: str) -> float:
        return sums[key] / steps if steps else 0.0

    report = ClientReport(
        client_id=client.client_id,
        sample_count=len(data) or memory_size,
        ce_loss=mean("ce"),
        replay_loss=mean("replay"),
        kd_loss=mean("kd"),
        ewc_penalty=mean("ewc"),
        condense=trace,
        omega_update_origins=dict(cond.origins) if cond is not None else {},
    )
    update = ClientUpdate(
        client_id=client.client_id,
        classifier=model.params,
        sample_count=report.sample_count,
        report=report,
        vae=ParamVector.from_module(new_vae) if new_vae is not None else None,
        vae_classes=vae_classes,
    )
    new_state = replace(
        client,
        store=store,
        condensation=cond,
        condensation_task=task_id if cond is not None else client.condensation_task,
        pending_fisher=pending_fisher,
        loss_trace=client.loss_trace + trace,
    )
    return update, new_state
