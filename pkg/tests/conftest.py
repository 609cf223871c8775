"""Shared pytest fixtures: tiny configs, toy datasets, small nets, temp run dirs."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from fcil.data.datasets import DatasetSpec, LabeledBatch, make_synthetic_split
from fcil.memory.store import empty_store
from fcil.models import BackboneSpec, ExperimentConfig, VaeConfig
from fcil.nets.backbone import init_backbone

# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

TINY_BACKBONE = BackboneSpec(kind="convnet", channels=3, image_size=8, width=8, depth=2)
TINY_MLP = BackboneSpec(kind="mlp", channels=1, image_size=2, width=8, depth=2, activation="tanh")


def tiny_config(**overrides) -> ExperimentConfig:
    """Smallest stream that still exercises every stage: 2 tasks, 2 clients, 1 round."""
    base = {
        "synthetic_classes": 4,
        "samples_per_class": 12,
        "test_per_class": 6,
        "T": 2,
        "classes_per_task": 2,
        "clients_initial": 2,
        "clients_increment": 0,
        "round_clients": 2,
        "M": 4,
        "R": 1,
        "E": 1,
        "lr": 0.05,
        "batch_size": 8,
        "replay_batch_size": 4,
        "exemplar_lr": 0.1,
        "backbone": TINY_BACKBONE,
        "vae": VaeConfig(latent_dim=4, hidden=8, steps_per_round=1, samples_per_class=4),
        "baseline_inits": 1,
        "seeds": [0],
    }
    base.update(overrides)
    return ExperimentConfig.desk(**base)


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def tiny_spec() -> BackboneSpec:
    return TINY_BACKBONE


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@pytest.fixture
def toy_split() -> tuple[DatasetSpec, DatasetSpec]:
    return make_synthetic_split(4, 12, 6, image_size=8, channels=3, seed=0)


def real_batch(n: int, label: int, seed: int = 0, shape: tuple[int, ...] = (3, 8, 8)) -> LabeledBatch:
    g = torch.Generator().manual_seed(seed)
    return LabeledBatch(torch.randn((n, *shape), generator=g), torch.full((n,), label, dtype=torch.long))


def mixed_batch(per_class: int, classes: list[int], seed: int = 0) -> LabeledBatch:
    parts = [real_batch(per_class, k, seed + k) for k in classes]
    return LabeledBatch(torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]))


@pytest.fixture
def store():
    return empty_store(budget=100, image_shape=(3, 8, 8))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@pytest.fixture
def tiny_net():
    return init_backbone(TINY_BACKBONE, num_classes=4, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def central_difference(loss_fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numeric gradient of the scalar `loss_fn()` w.r.t. `x`, perturbing `x` in place."""
    numeric = torch.zeros_like(x)
    flat_x = x.data.view(-1)
    flat_n = numeric.view(-1)
    for i in range(flat_x.numel()):
        orig = flat_x[i].item()
        flat_x[i] = orig + h
        up = float(loss_fn())
        flat_x[i] = orig - h
        down = float(loss_fn())
        flat_x[i] = orig
        flat_n[i] = (up - down) / (2 * h)
    return numeric


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    return float((analytic - numeric).abs().max() / analytic.abs().max().clamp_min(1e-12))
