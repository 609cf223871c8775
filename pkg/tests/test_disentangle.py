"""Tests for FINCH prototypes, the prototype contrastive loss and the Shared-VAE."""

from __future__ import annotations

import logging
import math
from unittest.mock import patch

import numpy as np
import pytest
import torch

from fcil.disentangle.prototypes import (
    FeatureBank,
    PrototypeSet,
    build_prototypes,
    finch_cluster,
    first_neighbors,
    mkcl_loss,
)
from fcil.disentangle.vae import SharedVAE, UnknownClassError, generate_features, vae_train_step
from fcil.models import VaeConfig


def _canonical(labels) -> list[int]:
    """Relabel clusters in order of first appearance."""
    seen: dict[int, int] = {}
    return [seen.setdefault(int(c), len(seen)) for c in labels]


def _brute_force_finch(x: np.ndarray, metric: str) -> list[int]:
    n = len(x)
    nearest = []
    for i in range(n):
        best, best_d = i, math.inf
        for j in range(n):
            if i == j:
                continue
            if metric == "euclidean":
                d = float(np.sqrt(((x[i] - x[j]) ** 2).sum()))
            else:
                d = 1.0 - float(x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j])))
            if d < best_d:
                best, best_d = j, d
        nearest.append(best)

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in enumerate(nearest):
        parent[find(i)] = find(j)
    return _canonical(find(i) for i in range(n))


class TestFinch:
    @pytest.mark.parametrize("metric", ["euclidean", "cosine"])
    def test_matches_brute_force(self, metric):
        rng = np.random.default_rng(0)
        sizes = [1, 2] + [int(n) for n in rng.integers(1, 201, size=98)]
        for trial, n in enumerate(sizes):
            x = rng.normal(size=(n, int(rng.integers(2, 6))))
            assert _canonical(finch_cluster(x, metric)) == _brute_force_finch(x, metric), trial

    def test_single_point(self):
        assert finch_cluster(np.ones((1, 3))).tolist() == [0]

    def test_separated_groups(self):
        x = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0], [10.1, 10.0]])
        assert _canonical(finch_cluster(x, "euclidean")) == [0, 0, 0, 1, 1]

    def test_first_neighbor_excludes_self(self):
        x = np.array([[0.0], [1.0], [3.0]])
        assert first_neighbors(x, "euclidean").tolist() == [1, 0, 1]

    def test_empty_input(self):
        with pytest.raises(ValueError, match="at least one point"):
            finch_cluster(np.zeros((0, 2)))


class TestPrototypes:
    def test_cluster_means_per_class(self):
        bank = FeatureBank()
        bank.add(0, torch.tensor([[0.0, 0.0], [0.2, 0.0], [9.0, 9.0], [9.2, 9.0]]))
        bank.add(1, torch.tensor([[5.0, 0.0]]))
        protos = build_prototypes(bank, "euclidean")
        assert protos.count(0) == 2
        assert torch.allclose(protos.positives(0), torch.tensor([[0.1, 0.0], [9.1, 9.0]]))
        assert torch.allclose(protos.negatives(0), torch.tensor([[5.0, 0.0]]))

    def test_bank_rejects_dim_mismatch(self):
        bank = FeatureBank()
        bank.add(0, torch.zeros(2, 3))
        with pytest.raises(ValueError, match="does not match"):
            bank.add(1, torch.zeros(1, 4))

    def test_tensor_names(self):
        protos = PrototypeSet({2: torch.ones(1, 3), 0: torch.zeros(2, 3)})
        assert list(protos.to_tensors()) == ["proto_0", "proto_2"]
        assert 2 in PrototypeSet.from_tensors(protos.to_tensors())


class TestMkclLoss:
    def test_hand_value(self):
        z = torch.tensor([1.0, 0.0])
        loss = mkcl_loss(z, torch.tensor([[2.0, 0.0]]), torch.tensor([[0.0, 3.0]]), tau=1.0)
        assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)

    def test_no_negatives_is_zero(self, caplog):
        z = torch.randn(3, 4, requires_grad=True)
        with caplog.at_level(logging.WARNING):
            loss = mkcl_loss(z, torch.randn(2, 4), torch.zeros(0, 4), tau=0.5)
        assert loss.item() == 0.0
        assert "No negative prototypes" in caplog.text

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError, match="tau"):
            mkcl_loss(torch.ones(2), torch.ones(1, 2), torch.ones(1, 2), tau=0.0)

    def test_pulls_toward_positive(self):
        z = torch.tensor([[1.0, 1.0]], requires_grad=True)
        loss = mkcl_loss(z, torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]), tau=0.5)
        loss.backward()
        # Descent direction increases the first coordinate relative to the second
        step = -z.grad[0]
        assert step[0] > step[1]


def _vae(seed: int = 0) -> SharedVAE:
    return SharedVAE(feature_dim=6, config=VaeConfig(latent_dim=3, hidden=16), seed=seed)


class TestSharedVae:
    def test_embedding_init_depends_on_seed_and_class(self):
        a, b = _vae(1), _vae(1)
        a.register_classes([0, 4])
        b.register_classes([4])
        assert torch.equal(a.embeddings["4"], b.embeddings["4"])
        assert a.classes == [0, 4]

    def test_unknown_class(self):
        vae = _vae()
        with pytest.raises(UnknownClassError):
            generate_features(vae, 3, 2, seed=0)
        with pytest.raises(UnknownClassError):
            vae.decode(torch.zeros(1, 3), [3])

    def test_generate_shape_and_determinism(self):
        vae = _vae()
        vae.register_classes([2])
        a = generate_features(vae, 2, 5, seed=7)
        assert a.shape == (5, 6)
        assert torch.equal(a, generate_features(vae, 2, 5, seed=7))
        assert generate_features(vae, 2, 0, seed=7).shape == (0, 6)

    def test_training_reduces_reconstruction(self):
        torch.manual_seed(0)
        labels = torch.tensor([0, 1] * 16)
        features = torch.where(labels[:, None] == 0, 2.0, -2.0) * torch.ones(32, 6) + 0.1 * torch.randn(32, 6)
        vae = _vae()
        first = None
        for step in range(200):
            vae, report = vae_train_step(vae, features, labels, lr=0.05, generator=torch.Generator().manual_seed(step))
            first = first if first is not None else report
            assert report.kl >= -1e-6
        _, last = vae_train_step(vae, features, labels, lr=0.05, generator=torch.Generator().manual_seed(0))
        assert last.recon < first.recon

    def test_train_step_leaves_input_untouched(self):
        vae = _vae()
        before = [p.clone() for p in vae.parameters()]
        trained, _ = vae_train_step(vae, torch.randn(4, 6), torch.tensor([0, 0, 1, 1]), 0.1, torch.Generator())
        assert vae.classes == []
        assert trained.classes == [0, 1]
        assert all(torch.equal(a, b) for a, b in zip(before, vae.parameters()))

    def test_report_carries_the_raw_kl(self):
        recon = torch.tensor(1.0, requires_grad=True)
        kl = torch.tensor(-0.25, requires_grad=True)
        with patch("fcil.disentangle.vae.elbo_terms", return_value=(recon, kl)):
            _, report = vae_train_step(_vae(), torch.randn(4, 6), torch.tensor([0, 0, 1, 1]), 0.1, torch.Generator())
        assert report.kl == pytest.approx(-0.25)
        assert report.recon == pytest.approx(1.0)
