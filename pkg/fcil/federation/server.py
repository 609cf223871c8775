"""Server-side aggregation, round prototypes and the meta-information heterogeneity diagnostic."""

from __future__ import annotations

import itertools
import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import entropy

from fcil.data.datasets import LabeledBatch
from fcil.disentangle.prototypes import FeatureBank, PrototypeSet, build_prototypes
from fcil.disentangle.vae import SharedVAE, generate_features
from fcil.federation.client import ClientUpdate
from fcil.models import HeterogeneityReport
from fcil.nets.backbone import Backbone
from fcil.nets.params import ParamVector
from fcil.seeding import derive_seed, numpy_rng

logger = logging.getLogger(__name__)

KL_CAP = 50.0
_EMBEDDING_PREFIX = "embeddings."


class AggregationError(ValueError):
    """Raised for an empty update list or updates of mismatched architecture."""


# ---------------------------------------------------------------------------
# FedAvg
# ---------------------------------------------------------------------------


def weighted_mean(vectors: list[ParamVector], weights: list[float]) -> ParamVector:
    if not vectors:
        raise AggregationError("no parameter vectors to aggregate")
    first = vectors[0]
    for v in vectors[1:]:
        if not first.same_architecture(v):
            raise AggregationError("parameter vectors have different architectures")
    total = float(sum(weights))
    if total <= 0:
        raise AggregationError("aggregation weights must sum to a positive value")

    acc: ParamVector | None = None
    for v, w in zip(vectors, weights):
        term = v.to(torch.float64).scale(float(w) / total)
        acc = term if acc is None else acc + term
    return ParamVector(OrderedDict((name, t.to(first.layers[name].dtype)) for name, t in acc))


def fedavg_aggregate(updates: list[ClientUpdate]) -> ParamVector:
    """Σ (n_l / Σn) · θ_l, elementwise."""
    if not updates:
        raise AggregationError("fedavg_aggregate needs at least one update")
    bad = [u.client_id for u in updates if u.sample_count <= 0]
    if bad:
        raise AggregationError(f"updates from clients {bad} carry no samples")
    if len(updates) == 1:
        return updates[0].classifier
    return weighted_mean([u.classifier for u in updates], [float(u.sample_count) for u in updates])


def aggregate_vae(updates: list[ClientUpdate], global_vae: SharedVAE) -> SharedVAE:
    """Sample-weighted mean of the Shared-VAE.

    A class embedding is averaged only over the clients that trained that class
    this round; embeddings nobody trained keep their global value.
    """
    carrying = [u for u in updates if u.vae is not None]
    if not carrying:
        raise AggregationError("no update carries Shared-VAE parameters")

    out = global_vae.clone()
    out.register_classes(sorted({k for u in carrying for k in u.vae_classes}))
    values: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, current in out.named_parameters():
        if name.startswith(_EMBEDDING_PREFIX):
            k = int(name[len(_EMBEDDING_PREFIX) :])
            holders = [u for u in carrying if k in u.vae_classes and name in u.vae.layers]
        else:
            holders = [u for u in carrying if name in u.vae.layers]
        if not holders:
            values[name] = current.detach().clone()
            continue
        shapes = {tuple(u.vae.layers[name].shape) for u in holders}
        if shapes != {tuple(current.shape)}:
            raise AggregationError(f"Shared-VAE parameter {name!r} has mismatched shapes {shapes}")
        part = weighted_mean(
            [ParamVector(OrderedDict([(name, u.vae.layers[name])])) for u in holders],
            [float(u.sample_count) for u in holders],
        )
        values[name] = part.layers[name]
    ParamVector(values).load_into(out)
    return out


def build_round_prototypes(vae: SharedVAE, samples_per_class: int, seed: int) -> PrototypeSet:
    """Generate features for every class the shared model knows and cluster them."""
    bank = FeatureBank()
    for k in vae.classes:
        bank.add(k, generate_features(vae, k, samples_per_class, seed))
    return build_prototypes(bank)


# ---------------------------------------------------------------------------
# Heterogeneity diagnostic
# ---------------------------------------------------------------------------


def symmetric_kl(p: np.ndarray, q: np.ndarray, cap: float = KL_CAP) -> float:
    """max(KL(p‖q), KL(q‖p)) in nats, capped for disjoint supports."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    value = max(entropy(p, q), entropy(q, p))
    return float(min(value, cap)) if np.isfinite(value) else cap


def _one_round_loss(
    classifier: Backbone, banks: list[LabeledBatch], lr: float, batch_size: int, seed: int
) -> float:
    updates = []
    for i, bank in enumerate(banks):
        model = classifier.clone()
        optimizer = torch.optim.SGD(model.parameters(), lr=lr)
        order = torch.from_numpy(numpy_rng(seed, i).permutation(len(bank)))
        for idx in order.split(batch_size):
            optimizer.zero_grad()
            F.cross_entropy(model(bank.images[idx]), bank.labels[idx]).backward()
            optimizer.step()
        updates.append(model.params)
    merged = classifier.clone()
    weighted_mean(updates, [float(len(b)) for b in banks]).load_into(merged)
    union_x = torch.cat([b.images for b in banks])
    union_y = torch.cat([b.labels for b in banks])
    with torch.no_grad():
        return float(F.cross_entropy(merged(union_x), union_y))


def heterogeneity_report(
    banks: dict[int, LabeledBatch],
    classifier: Backbone | None,
    num_classes: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> HeterogeneityReport:
    """Pairwise class-histogram KL of the clients' condensed banks, plus ΔL.

    ΔL is the global loss after one FedAvg round on the actual banks minus the
    loss after one round on an IID reshuffle of the same exemplars.
    """
    banks = {cid: b for cid, b in sorted(banks.items()) if len(b)}
    if len(banks) < 2:
        logger.warning(f"Heterogeneity needs two non-empty banks, got {len(banks)}")
        return HeterogeneityReport()

    hists = {
        cid: np.bincount(b.labels.numpy(), minlength=num_classes).astype(np.float64) for cid, b in banks.items()
    }
    pairwise = {
        f"{a}-{b}": symmetric_kl(hists[a] / hists[a].sum(), hists[b] / hists[b].sum())
        for a, b in itertools.combinations(hists, 2)
    }

    delta = None
    if classifier is not None:
        actual = list(banks.values())
        images = torch.cat([b.images for b in actual])
        labels = torch.cat([b.labels for b in actual])
        perm = torch.from_numpy(numpy_rng(seed, 1).permutation(len(labels)))
        sizes = [len(b) for b in actual]
        iid = [
            LabeledBatch(images[idx], labels[idx], actual[0].origin) for idx in perm.split(sizes)
        ]
        run_seed = derive_seed(seed, 2)
        delta = _one_round_loss(classifier, actual, lr, batch_size, run_seed) - _one_round_loss(
            classifier, iid, lr, batch_size, run_seed
        )
    return HeterogeneityReport(pairwise_kl=pairwise, delta_loss=delta)
