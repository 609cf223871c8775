"""Desk-scale classifier backbones with seeded init and growable heads.

The same architecture serves as the global classifier and as the condensation
network ω; the feature extractor Φ is the penultimate activation.
"""

from __future__ import annotations

import copy
import logging

import torch
from torch import nn

from fcil.models import BackboneSpec
from fcil.nets.params import ParamVector
from fcil.seeding import derive_seed

logger = logging.getLogger(__name__)


class ArchitectureError(ValueError):
    """Raised for unknown architecture specs or inputs of the wrong shape."""


def _activation(name: str) -> nn.Module:
    return nn.Tanh() if name == "tanh" else nn.ReLU()


def _build_trunk(spec: BackboneSpec) -> tuple[nn.Sequential, int]:
    if spec.kind == "convnet":
        side = spec.image_size // (2**spec.depth)
        if side < 1:
            raise ArchitectureError(
                f"depth {spec.depth} pools a {spec.image_size}px input below one pixel"
            )
        layers: list[nn.Module] = []
        in_ch = spec.channels
        for _ in range(spec.depth):
            layers += [
                nn.Conv2d(in_ch, spec.width, kernel_size=3, padding=1),
                nn.GroupNorm(spec.width, spec.width, affine=True),
                _activation(spec.activation),
                nn.AvgPool2d(2),
            ]
            in_ch = spec.width
        layers.append(nn.Flatten())
        return nn.Sequential(*layers), spec.width * side * side
    if spec.kind == "mlp":
        layers = [nn.Flatten()]
        in_dim = spec.channels * spec.image_size * spec.image_size
        for _ in range(spec.depth):
            layers += [nn.Linear(in_dim, spec.width), _activation(spec.activation)]
            in_dim = spec.width
        return nn.Sequential(*layers), spec.width
    raise ArchitectureError(f"unknown architecture kind {spec.kind!r}")


class Backbone(nn.Module):
    """Feature trunk Φ plus a linear head of width `head_classes`."""

    def __init__(self, spec: BackboneSpec, num_classes: int):
        super().__init__()
        self.spec = spec
        self.trunk, self.feature_dim = _build_trunk(spec)
        self.head = nn.Linear(self.feature_dim, num_classes)

    @property
    def head_classes(self) -> int:
        return self.head.out_features

    @property
    def params(self) -> ParamVector:
        return ParamVector.from_module(self)

    def check_input(self, images: torch.Tensor) -> None:
        expected = (self.spec.channels, self.spec.image_size, self.spec.image_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ArchitectureError(f"expected N×{expected} images, got {tuple(images.shape)}")

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.trunk(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(images))

    def clone(self) -> "Backbone":
        return copy.deepcopy(self)


def _uniform_(tensor: torch.Tensor, bound: float, generator: torch.Generator) -> None:
    tensor.uniform_(-bound, bound, generator=generator)


def _init_head_rows(head: nn.Linear, rows: range, seed: int) -> None:
    bound = 1.0 / head.in_features**0.5
    with torch.no_grad():
        for row in rows:
            g = torch.Generator().manual_seed(derive_seed(seed, row))
            _uniform_(head.weight[row], bound, g)
            _uniform_(head.bias[row : row + 1], bound, g)


def init_backbone(spec: BackboneSpec, num_classes: int, seed: int) -> Backbone:
    """Seeded initialization; equal (spec, num_classes, seed) give equal parameters."""
    if num_classes < 1:
        raise ArchitectureError(f"num_classes must be >= 1, got {num_classes}")
    model = Backbone(spec, num_classes)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in model.trunk:
            if isinstance(layer, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / layer.weight[0].numel() ** 0.5
                _uniform_(layer.weight, bound, g)
                _uniform_(layer.bias, bound, g)
    _init_head_rows(model.head, range(num_classes), seed)
    return model


def extract_features(model: Backbone, images: torch.Tensor) -> torch.Tensor:
    """Penultimate-layer activations; never mutates parameters."""
    model.check_input(images)
    with torch.no_grad():
        return model.features(images)


def expand_head(model: Backbone, added_classes: int, seed: int) -> Backbone:
    """Grow the head by `added_classes` rows; existing rows are copied bit-exactly.

    New row k is seeded from (seed, k), so 10→15→20 and 10→20 agree row by row.
    """
    if added_classes < 1:
        raise ArchitectureError(f"added_classes must be >= 1, got {added_classes}")
    grown = model.clone()
    old = model.head
    head = nn.Linear(old.in_features, old.out_features + added_classes, dtype=old.weight.dtype)
    _init_head_rows(head, range(old.out_features, head.out_features), seed)
    with torch.no_grad():
        head.weight[: old.out_features].copy_(old.weight)
        head.bias[: old.out_features].copy_(old.bias)
    grown.head = head
    logger.debug(f"Expanded head {old.out_features} → {head.out_features}")
    return grown
