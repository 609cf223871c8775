"""Tests for the condensation engine: matching losses, ω updates and online steps."""

from __future__ import annotations

import logging
from unittest.mock import patch

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from fcil.condense.engine import (
    CondensationError,
    CondensationState,
    LeakageError,
    condensation_features,
    condense_exemplars,
    condense_step,
    grad_match_loss,
    gradient_distance,
    init_condensation,
    relationship_loss,
    total_memory_loss,
    update_condensation_model,
)
from fcil.data.datasets import LabeledBatch
from fcil.disentangle.prototypes import FeatureBank, build_prototypes, mkcl_loss
from fcil.memory.store import CondensedExemplar, empty_store, rebalance_quota
from fcil.models import BackboneSpec, EcoralComponents, StrategyConfig
from fcil.nets.backbone import init_backbone
from tests.conftest import TINY_MLP, central_difference, mixed_batch, real_batch, relative_error

MLP = BackboneSpec(kind="mlp", channels=1, image_size=4, width=8, depth=1, activation="tanh")


class _IdentityFeatures(nn.Module):
    def features(self, images: torch.Tensor) -> torch.Tensor:
        return images.flatten(1)


def _cfg(**components) -> StrategyConfig:
    flags = {
        "adjustable_memory": True,
        "gradient_matching": False,
        "feature_matching": False,
        "compensation": False,
        "contrastive": False,
    }
    flags.update(components)
    return StrategyConfig(components=EcoralComponents(**flags), exemplar_lr=1.0)


# ---------------------------------------------------------------------------
# Gradient matching
# ---------------------------------------------------------------------------


class TestGradMatchLoss:
    def test_identical_batches(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        batch = real_batch(4, 1, seed=2)
        syn = LabeledBatch(batch.images.clone(), batch.labels, "condensed")
        assert grad_match_loss(omega, syn, batch).item() == pytest.approx(0.0, abs=1e-5)

    def test_antipodal_single_layer(self):
        w = torch.randn(3, 4)
        assert gradient_distance([w], [-w]).item() == pytest.approx(2.0, abs=1e-6)

    def test_bias_vectors_are_ignored(self):
        w = torch.randn(3, 4)
        assert gradient_distance([w, torch.ones(3)], [w, -torch.ones(3)]).item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_independent_cosine(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=5)
        real = real_batch(6, 2, seed=1)
        syn = real_batch(2, 2, seed=9)
        params = list(omega.parameters())
        g_real = torch.autograd.grad(F.cross_entropy(omega(real.images), real.labels), params)
        g_syn = torch.autograd.grad(F.cross_entropy(omega(syn.images), syn.labels), params)
        expected = sum(
            1 - torch.dot(a.flatten(), b.flatten()) / (a.norm() * b.norm())
            for a, b in zip(g_syn, g_real)
            if a.ndim >= 2
        )
        assert grad_match_loss(omega, syn, real).item() == pytest.approx(expected.item(), rel=1e-5)

    def test_rejects_mixed_labels(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        with pytest.raises(CondensationError, match="mixes labels"):
            grad_match_loss(omega, mixed_batch(2, [0, 1]), real_batch(2, 0))

    def test_rejects_label_disagreement(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        with pytest.raises(CondensationError, match="differs"):
            grad_match_loss(omega, real_batch(2, 0), real_batch(2, 1))

    def test_pixel_gradient_matches_central_differences(self):
        for instance in range(20):
            omega = init_backbone(TINY_MLP, 3, seed=instance).double()
            g = torch.Generator().manual_seed(instance)
            k = instance % 3
            real = LabeledBatch(
                torch.randn(4, 1, 2, 2, generator=g, dtype=torch.float64), torch.full((4,), k)
            )
            pixels = torch.randn(2, 1, 2, 2, generator=g, dtype=torch.float64).requires_grad_(True)
            labels = torch.full((2,), k)

            def loss():
                return grad_match_loss(omega, LabeledBatch(pixels, labels, "condensed"), real)

            (analytic,) = torch.autograd.grad(loss(), pixels)
            assert relative_error(analytic, central_difference(loss, pixels)) <= 1e-3, instance

    def test_differentiable_in_pixels(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        pixels = torch.randn(2, 3, 8, 8, requires_grad=True)
        syn = LabeledBatch(pixels, torch.tensor([1, 1]), "condensed")
        grad_match_loss(omega, syn, real_batch(5, 1)).backward()
        assert pixels.grad is not None and torch.count_nonzero(pixels.grad) > 0


# ---------------------------------------------------------------------------
# Relationship matching
# ---------------------------------------------------------------------------


class TestRelationshipLoss:
    def test_identical_batches(self, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        batch = real_batch(3, 0)
        rest = real_batch(4, 1, seed=3).images
        assert relationship_loss(omega, batch, batch, rest).item() == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_versus_parallel(self):
        exemplars = LabeledBatch(torch.tensor([[0.0, 1.0]]), torch.tensor([0]), "condensed")
        real = LabeledBatch(torch.tensor([[2.0, 0.0]]), torch.tensor([0]))
        rest = torch.tensor([[1.0, 0.0]])
        assert relationship_loss(_IdentityFeatures(), exemplars, real, rest).item() == pytest.approx(1.0)

    def test_empty_reference_set(self, caplog, tiny_spec):
        omega = init_backbone(tiny_spec, 3, seed=0)
        with caplog.at_level(logging.WARNING):
            loss = relationship_loss(omega, real_batch(2, 0), real_batch(2, 0), torch.zeros(0, 3, 8, 8))
        assert loss.item() == 0.0
        assert "No reference exemplars" in caplog.text


class TestTotalMemoryLoss:
    def test_weighted_sum(self):
        assert total_memory_loss(1.0, 0.5, 2.0, beta=0.5) == pytest.approx(2.5)

    def test_beta_zero_drops_contrastive_term(self):
        assert total_memory_loss(1.0, 0.5, 2.0, beta=0.0) == pytest.approx(1.5)

    def test_negative_beta(self):
        with pytest.raises(CondensationError, match="beta"):
            total_memory_loss(1.0, 0.5, 2.0, beta=-1.0)


# ---------------------------------------------------------------------------
# Condensation net updates
# ---------------------------------------------------------------------------


class TestUpdateCondensationModel:
    def test_zero_step_keeps_omega(self, tiny_spec):
        state = CondensationState(omega=init_backbone(tiny_spec, 2, seed=0), eta=0.0)
        out = update_condensation_model(state, real_batch(3, 1))
        assert torch.equal(out.omega.params.flatten(), state.omega.params.flatten())
        assert out.step_count == 1

    def test_linear_model_one_step(self):
        model = nn.Linear(2, 2)
        with torch.no_grad():
            model.weight.copy_(torch.tensor([[0.5, -0.2], [0.1, 0.3]]))
            model.bias.copy_(torch.tensor([0.0, 0.1]))
        x = torch.tensor([[1.0, 2.0], [0.5, -1.0]])
        y = torch.tensor([0, 1])
        state = CondensationState(omega=model, eta=0.1)

        out = update_condensation_model(state, LabeledBatch(x, y))

        # Closed-form CE gradient: (softmax − one-hot)ᵀ x / N
        with torch.no_grad():
            delta = (torch.softmax(model(x), dim=1) - F.one_hot(y, 2).float()) / 2
            w_expected = model.weight - 0.1 * delta.T @ x
            b_expected = model.bias - 0.1 * delta.sum(dim=0)
        assert torch.allclose(out.omega.weight, w_expected, atol=1e-6)
        assert torch.allclose(out.omega.bias, b_expected, atol=1e-6)
        # The input state is left as it was
        assert torch.equal(model.weight, state.omega.weight)

    def test_empty_store_is_single_term_update(self, tiny_spec):
        state = init_condensation(tiny_spec, 2, eta=0.05, seed=0, task_id=0)
        current = real_batch(4, 0)
        a = update_condensation_model(state, current, LabeledBatch.empty((3, 8, 8)))
        b = update_condensation_model(state, current)
        assert torch.equal(a.omega.params.flatten(), b.omega.params.flatten())

    def test_stored_images_join_the_update(self, tiny_spec):
        state = init_condensation(tiny_spec, 2, eta=0.05, seed=0, task_id=0)
        current = real_batch(4, 0)
        with_store = update_condensation_model(state, current, real_batch(2, 1, seed=4))
        without = update_condensation_model(state, current)
        assert not torch.equal(with_store.omega.params.flatten(), without.omega.params.flatten())
        assert with_store.origins == {"real": 2}

    def test_condensed_batch_is_leakage(self, tiny_spec):
        state = init_condensation(tiny_spec, 2, eta=0.05, seed=0, task_id=0)
        condensed = LabeledBatch(torch.randn(2, 3, 8, 8), torch.tensor([0, 0]), "condensed")
        with pytest.raises(LeakageError):
            update_condensation_model(state, real_batch(2, 0), condensed)
        with pytest.raises(LeakageError):
            update_condensation_model(state, condensed)

    def test_reinit_depends_on_task(self, tiny_spec):
        a = init_condensation(tiny_spec, 2, eta=0.1, seed=3, task_id=0)
        b = init_condensation(tiny_spec, 2, eta=0.1, seed=3, task_id=1)
        c = init_condensation(tiny_spec, 2, eta=0.1, seed=3, task_id=1)
        assert not torch.equal(a.omega.params.flatten(), b.omega.params.flatten())
        assert torch.equal(b.omega.params.flatten(), c.omega.params.flatten())

    def test_rejects_non_positive_eta(self, tiny_spec):
        with pytest.raises(CondensationError, match="eta"):
            init_condensation(tiny_spec, 2, eta=0.0, seed=0, task_id=0)


# ---------------------------------------------------------------------------
# Exemplar optimization
# ---------------------------------------------------------------------------


def _noise_store(seed: int, n: int = 4):
    store = rebalance_quota(empty_store(10, (1, 4, 4)), 1, new_classes=[0])
    g = torch.Generator().manual_seed(seed)
    store.summ.extend(
        CondensedExemplar(torch.randn(1, 4, 4, generator=g).requires_grad_(True), 0) for _ in range(n)
    )
    return store


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matching_descends(seed):
    g = torch.Generator().manual_seed(100 + seed)
    real = LabeledBatch(torch.randn(32, 1, 4, 4, generator=g) + 1.0, torch.zeros(32, dtype=torch.long))
    state = init_condensation(MLP, 3, eta=0.1, seed=seed, task_id=0)
    cfg = _cfg(gradient_matching=True)

    store = _noise_store(seed)
    store, first = condense_exemplars(state, store, real, None, cfg)
    for _ in range(99):
        store, _ = condense_exemplars(state, store, real, None, cfg)
    _, last = condense_exemplars(state, store, real, None, cfg)

    assert first["l_cond"] > 0
    assert last["l_cond"] <= 0.5 * first["l_cond"]
    assert all(e.opt_state["steps"] == 100.0 for e in store.summ)


def test_frozen_omega_is_not_modified():
    state = init_condensation(MLP, 3, eta=0.1, seed=0, task_id=0)
    before = state.omega.params.flatten()
    real = LabeledBatch(torch.randn(8, 1, 4, 4), torch.zeros(8, dtype=torch.long))
    condense_exemplars(state, _noise_store(0), real, None, _cfg(gradient_matching=True, feature_matching=True))
    assert torch.equal(before, state.omega.params.flatten())


def test_condense_step_wires_summary_omega_and_reservoir():
    state = init_condensation(MLP, 2, eta=0.1, seed=0, task_id=0)
    store = rebalance_quota(empty_store(8, (1, 4, 4)), 2, new_classes=[0, 1])
    batch = LabeledBatch(torch.randn(6, 1, 4, 4), torch.tensor([0, 0, 0, 1, 1, 1]))
    cfg = _cfg(gradient_matching=True, feature_matching=True)

    store, state, report = condense_step(state, store, batch, None, cfg, np.random.default_rng(0), current_classes=2)

    assert store.class_counts("summ") == {0: 4, 1: 4}
    assert len(store.orig) == 6
    assert state.step_count == 1
    assert set(state.origins) == {"real"}
    assert report.step == 1
    assert report.l_total == pytest.approx(report.l_cond + report.l_rel)


def test_condense_step_rejects_condensed_targets():
    state = init_condensation(MLP, 2, eta=0.1, seed=0, task_id=0)
    store = rebalance_quota(empty_store(8, (1, 4, 4)), 2, new_classes=[0, 1])
    condensed = LabeledBatch(torch.randn(2, 1, 4, 4), torch.tensor([0, 1]), "condensed")
    with pytest.raises(LeakageError):
        condense_step(state, store, condensed, None, _cfg(gradient_matching=True), np.random.default_rng(0))


def test_contrastive_anchor_lives_in_the_condensation_feature_space():
    state = init_condensation(MLP, 2, eta=0.1, seed=0, task_id=0)
    store = _noise_store(3)
    real = LabeledBatch(torch.randn(8, 1, 4, 4), torch.zeros(8, dtype=torch.long))
    bank = FeatureBank()
    bank.add(0, condensation_features(state, real.images, differentiable=False))
    bank.add(1, condensation_features(state, torch.randn(6, 1, 4, 4), differentiable=False))
    prototypes = build_prototypes(bank)
    expected = condensation_features(state, torch.stack([e.pixels.detach() for e in store.summ]), differentiable=False)

    anchors = []

    def record(z, positives, negatives, tau):
        anchors.append(z.detach().clone())
        return mkcl_loss(z, positives, negatives, tau)

    cfg = _cfg(gradient_matching=True, compensation=True, contrastive=True)
    with patch("fcil.condense.engine.mkcl_loss", side_effect=record):
        _, sums = condense_exemplars(state, store, real, prototypes, cfg)

    assert len(anchors) == 1
    assert torch.allclose(anchors[0], expected, atol=1e-6)
    assert anchors[0].shape[1] == prototypes.positives(0).shape[1]
    assert sums["l_mkcl"] > 0
