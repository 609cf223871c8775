"""Online exemplar condensation.

Summary exemplars of the current task are optimized in pixel space so that the
condensation net ω sees the same gradients (and feature relationships) on them
as on real data. ω itself only ever trains on real images.
"""

from __future__ import annotations

import copy
import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fcil.data.datasets import LabeledBatch
from fcil.disentangle.prototypes import PrototypeSet, mkcl_loss
from fcil.memory.store import (
    CondensedExemplar,
    MemoryStore,
    admit_original,
    init_summary,
    orig_batch,
    orig_capacity,
)
from fcil.models import BackboneSpec, CondenseReport, StrategyConfig
from fcil.nets.backbone import extract_features, init_backbone
from fcil.nets.params import GradRequest, grad
from fcil.seeding import derive_seed

logger = logging.getLogger(__name__)


class CondensationError(ValueError):
    """Raised for malformed condensation inputs (mixed labels, empty batches, NaN pixels)."""


class LeakageError(CondensationError):
    """Raised when a non-real batch is offered to the condensation net."""


@dataclass
class CondensationState:
    omega: nn.Module
    eta: float
    step_count: int = 0
    origins: Counter[str] = field(default_factory=Counter)


def init_condensation(
    spec: BackboneSpec, num_classes: int, eta: float, seed: int, task_id: int
) -> CondensationState:
    """Fresh ω for a task; its init depends only on (seed, task_id)."""
    if eta <= 0:
        raise CondensationError(f"eta must be > 0, got {eta}")
    omega = init_backbone(spec, num_classes, derive_seed(seed, task_id, 0xC0DE))
    return CondensationState(omega=omega, eta=eta)


def condensation_features(
    state: CondensationState, images: torch.Tensor, differentiable: bool = True
) -> torch.Tensor:
    """Φ_ω(images): the one feature space shared by the contrastive anchor and the Shared-VAE."""
    if not differentiable:
        return extract_features(state.omega, images)
    return state.omega.features(images)


def _ce(model: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(model(images), labels)


def _single_label(batch: LabeledBatch, role: str) -> int:
    if len(batch) == 0:
        raise CondensationError(f"{role} batch is empty")
    classes = batch.classes()
    if len(classes) != 1:
        raise CondensationError(f"{role} batch mixes labels {classes}")
    return classes[0]


# ---------------------------------------------------------------------------
# Matching losses
# ---------------------------------------------------------------------------


def gradient_distance(grads_a: list[torch.Tensor], grads_b: list[torch.Tensor]) -> torch.Tensor:
    """Σ over weight tensors (ndim > 1) of 1 − cos(flattened a, flattened b)."""
    total = grads_a[0].new_zeros(())
    for a, b in zip(grads_a, grads_b):
        if a.ndim < 2:
            continue
        total = total + (1.0 - F.cosine_similarity(a.reshape(-1), b.reshape(-1), dim=0, eps=1e-8))
    return total


def grad_match_loss(omega: nn.Module, exemplars: LabeledBatch, real: LabeledBatch) -> torch.Tensor:
    """Gradient-matching distance between ω's CE gradients on exemplars and on real data of one class.

    The exemplar side keeps its graph so the result is differentiable w.r.t. the pixels.
    """
    k_syn = _single_label(exemplars, "exemplar")
    k_real = _single_label(real, "real")
    if k_syn != k_real:
        raise CondensationError(f"exemplar label {k_syn} differs from real label {k_real}")

    g_real = grad(omega, GradRequest("params", _ce, real.images.detach(), real.labels))
    g_syn = grad(omega, GradRequest("params", _ce, exemplars.images, exemplars.labels, create_graph=True))
    return gradient_distance(g_syn, [g.detach() for g in g_real])


def relationship_distance(
    feats_m: torch.Tensor, feats_b: torch.Tensor, feats_rest: torch.Tensor
) -> torch.Tensor:
    """Mean squared difference of the mean-pooled cosine-similarity profiles against `feats_rest`."""
    rest = F.normalize(feats_rest, dim=1, eps=1e-12)
    rho_m = (F.normalize(feats_m, dim=1, eps=1e-12) @ rest.T).mean(dim=0)
    rho_b = (F.normalize(feats_b, dim=1, eps=1e-12) @ rest.T).mean(dim=0)
    return F.mse_loss(rho_m, rho_b)


def relationship_loss(
    omega: nn.Module, exemplars: LabeledBatch, real: LabeledBatch, rest: torch.Tensor
) -> torch.Tensor:
    _single_label(exemplars, "exemplar")
    _single_label(real, "real")
    if rest.shape[0] == 0:
        logger.warning("No reference exemplars of other classes; relationship term is 0")
        return exemplars.images.sum() * 0.0
    with torch.no_grad():
        feats_b = omega.features(real.images)
        feats_rest = omega.features(rest)
    return relationship_distance(omega.features(exemplars.images), feats_b, feats_rest)


def total_memory_loss(l_cond, l_rel, l_mkcl, beta: float):
    if beta < 0:
        raise CondensationError(f"beta must be >= 0, got {beta}")
    return l_cond + l_rel + beta * l_mkcl


# ---------------------------------------------------------------------------
# Condensation net update
# ---------------------------------------------------------------------------


def update_condensation_model(
    state: CondensationState, current: LabeledBatch, stored: LabeledBatch | None = None
) -> CondensationState:
    """One SGD step of ω on CE(current) + CE(stored); real images only."""
    batches = [current] + ([stored] if stored is not None and len(stored) else [])
    for b in batches:
        if b.origin != "real":
            raise LeakageError(f"a {b.origin!r} batch was offered to the condensation net")
    if len(current) == 0:
        raise CondensationError("current batch is empty")

    omega = copy.deepcopy(state.omega)

    def loss_fn(model: nn.Module, _inputs: torch.Tensor, _labels: torch.Tensor) -> torch.Tensor:
        return sum(_ce(model, b.images, b.labels) for b in batches)

    grads = grad(omega, GradRequest("params", loss_fn, current.images, current.labels))
    with torch.no_grad():
        for p, g in zip(omega.parameters(), grads):
            p.sub_(state.eta * g)

    origins = state.origins.copy()
    origins.update(b.origin for b in batches)
    return replace(state, omega=omega, step_count=state.step_count + 1, origins=origins)


# ---------------------------------------------------------------------------
# One online step
# ---------------------------------------------------------------------------


def _class_terms(
    state: CondensationState,
    store: MemoryStore,
    exemplars: list[CondensedExemplar],
    real: LabeledBatch,
    prototypes: PrototypeSet | None,
    cfg: StrategyConfig,
) -> dict[str, torch.Tensor]:
    k = exemplars[0].label
    syn = LabeledBatch(
        torch.stack([e.pixels for e in exemplars]),
        torch.full((len(exemplars),), k, dtype=torch.long),
        "condensed",
    )
    zero = syn.images.sum() * 0.0
    terms = {"l_cond": zero, "l_rel": zero, "l_mkcl": zero}
    c = cfg.components

    if c.gradient_matching:
        terms["l_cond"] = grad_match_loss(state.omega, syn, real)
    if c.feature_matching:
        others = [e.pixels.detach() for e in store.cond + store.summ if e.label != k]
        rest = torch.stack(others) if others else syn.images.new_zeros((0, *syn.images.shape[1:]))
        terms["l_rel"] = relationship_loss(state.omega, syn, real, rest)
    if cfg.uses_compensation and prototypes is not None:
        if k in prototypes:
            z = condensation_features(state, syn.images)
            terms["l_mkcl"] = mkcl_loss(z, prototypes.positives(k), prototypes.negatives(k), cfg.tau)
        else:
            logger.warning(f"No prototypes for class {k}; contrastive term skipped")
    return terms


def condense_exemplars(
    state: CondensationState,
    store: MemoryStore,
    batch: LabeledBatch,
    prototypes: PrototypeSet | None,
    cfg: StrategyConfig,
) -> tuple[MemoryStore, dict[str, float]]:
    """Pixel-space SGD on the summary exemplars of the classes present in `batch`.

    ω is held fixed. Returns the updated store and the per-term losses summed
    over classes, taken before each step.
    """
    sums = {"l_cond": 0.0, "l_rel": 0.0, "l_mkcl": 0.0, "l_total": 0.0}
    for _ in range(cfg.condense_iterations):
        updated: dict[int, torch.Tensor] = {}
        for k in batch.classes():
            exemplars = store.summary_of(k)
            if not exemplars:
                continue
            terms = _class_terms(state, store, exemplars, batch.of_class(k), prototypes, cfg)
            total = total_memory_loss(terms["l_cond"], terms["l_rel"], terms["l_mkcl"], cfg.beta)
            for name, value in terms.items():
                sums[name] += float(value)
            sums["l_total"] += float(total)

            if not total.requires_grad or cfg.exemplar_lr == 0:
                continue
            leaves = [e.pixels for e in exemplars]
            grads = torch.autograd.grad(total, leaves, allow_unused=True)
            for e, g in zip(exemplars, grads):
                if g is None:
                    continue
                stepped = (e.pixels - cfg.exemplar_lr * g).detach()
                if not torch.isfinite(stepped).all():
                    raise CondensationError(f"class {k}: pixel step produced non-finite values")
                updated[id(e)] = stepped

        if updated:
            summ = []
            for e in store.summ:
                if id(e) in updated:
                    steps = e.opt_state.get("steps", 0.0) + 1.0
                    e = replace(e, pixels=updated[id(e)].requires_grad_(True), opt_state={"steps": steps})
                summ.append(e)
            store = replace(store, summ=summ)
    return store, sums


def condense_step(
    state: CondensationState,
    store: MemoryStore,
    batch: LabeledBatch,
    prototypes: PrototypeSet | None,
    cfg: StrategyConfig,
    rng: np.random.Generator,
    current_classes: int | None = None,
) -> tuple[MemoryStore, CondensationState, CondenseReport]:
    """Seed missing summaries, step the exemplars, then update ω and the reservoir."""
    if batch.origin != "real":
        raise LeakageError("condensation targets must be real images")
    store = init_summary(store, batch, rng)
    store, sums = condense_exemplars(state, store, batch, prototypes, cfg)

    state = update_condensation_model(state, batch, orig_batch(store))
    n_current = current_classes if current_classes is not None else len(batch.classes())
    store = admit_original(store, batch, orig_capacity(store, n_current), rng)
    return store, state, CondenseReport(step=state.step_count, **sums)
