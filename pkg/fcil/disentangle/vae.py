"""Shared-VAE over backbone feature vectors, conditioned on learned class embeddings."""

from __future__ import annotations

import copy
import logging

import torch
import torch.nn.functional as F
from torch import nn

from fcil.models import ElboReport, VaeConfig
from fcil.seeding import derive_seed, torch_generator

logger = logging.getLogger(__name__)

_LOGVAR_CLAMP = 10.0


class UnknownClassError(KeyError):
    """Raised when generating for a class the shared model has no embedding for."""


class SharedVAE(nn.Module):
    """Feature encoder q(z|h) and class-conditioned decoder p(h|z, k)."""

    def __init__(self, feature_dim: int, config: VaeConfig, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.latent_dim = config.latent_dim
        self.beta_vae = config.beta_vae
        self.seed = seed
        self.encoder = nn.Sequential(
            nn.Linear(feature_dim, config.hidden), nn.ReLU(), nn.Linear(config.hidden, 2 * config.latent_dim)
        )
        self.decoder = nn.Sequential(
            nn.Linear(2 * config.latent_dim, config.hidden), nn.ReLU(), nn.Linear(config.hidden, feature_dim)
        )
        self.embeddings = nn.ParameterDict()

        g = torch_generator(seed, 0)
        with torch.no_grad():
            for layer in [*self.encoder, *self.decoder]:
                if isinstance(layer, nn.Linear):
                    bound = 1.0 / layer.in_features**0.5
                    layer.weight.uniform_(-bound, bound, generator=g)
                    layer.bias.uniform_(-bound, bound, generator=g)

    @property
    def classes(self) -> list[int]:
        return sorted(int(k) for k in self.embeddings)

    def register_classes(self, classes: list[int]) -> list[int]:
        """Add embeddings for unseen classes; the init depends only on (seed, class)."""
        added = []
        ref = next(self.encoder.parameters())
        for k in classes:
            if str(k) in self.embeddings:
                continue
            g = torch_generator(self.seed, 1, int(k))
            init = torch.randn(self.latent_dim, generator=g).to(ref.dtype)
            self.embeddings[str(k)] = nn.Parameter(init)
            added.append(int(k))
        return added

    def encode(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, logvar = self.encoder(features).chunk(2, dim=1)
        return mu, logvar.clamp(-_LOGVAR_CLAMP, _LOGVAR_CLAMP)

    def decode(self, z: torch.Tensor, labels: torch.Tensor | list[int]) -> torch.Tensor:
        keys = labels.tolist() if isinstance(labels, torch.Tensor) else list(labels)
        missing = sorted({int(k) for k in keys if str(int(k)) not in self.embeddings})
        if missing:
            raise UnknownClassError(f"classes {missing} are not represented in the shared model")
        if not keys:
            return z.new_zeros((0, self.feature_dim))
        emb = torch.stack([self.embeddings[str(int(k))] for k in keys])
        return self.decoder(torch.cat([z, emb], dim=1))

    def clone(self) -> "SharedVAE":
        return copy.deepcopy(self)


def elbo_terms(
    vae: SharedVAE, features: torch.Tensor, labels: torch.Tensor, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction MSE, KL(q(z|h) ‖ N(0, I)) averaged over the batch)."""
    mu, logvar = vae.encode(features)
    eps = torch.randn(mu.shape, generator=generator).to(mu.dtype)
    z = mu + eps * torch.exp(0.5 * logvar)
    recon = F.mse_loss(vae.decode(z, labels), features)
    kl = (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=1)).mean()
    return recon, kl


def vae_train_step(
    vae: SharedVAE,
    features: torch.Tensor,
    labels: torch.Tensor,
    lr: float,
    generator: torch.Generator,
) -> tuple[SharedVAE, ElboReport]:
    """One SGD step on recon + beta_vae·KL; returns the updated clone and the pre-step terms."""
    if features.shape[0] == 0:
        raise ValueError("vae_train_step needs a non-empty feature batch")
    model = vae.clone()
    model.register_classes(sorted(set(labels.tolist())))
    features = features.detach().to(next(model.parameters()).dtype)

    recon, kl = elbo_terms(model, features, labels, generator)
    loss = recon + model.beta_vae * kl
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(lr * g)
    return model, ElboReport(recon=float(recon), kl=float(kl))


def generate_features(vae: SharedVAE, class_id: int, n: int, seed: int) -> torch.Tensor:
    """Decode n standard-normal latents with class `class_id`'s embedding."""
    if str(int(class_id)) not in vae.embeddings:
        raise UnknownClassError(f"class {class_id} is not represented in the shared model")
    dtype = next(vae.parameters()).dtype
    if n <= 0:
        return torch.zeros((0, vae.feature_dim), dtype=dtype)
    g = torch.Generator().manual_seed(derive_seed(seed, int(class_id)))
    z = torch.randn((n, vae.latent_dim), generator=g).to(dtype)
    with torch.no_grad():
        return vae.decode(z, [int(class_id)] * n)
