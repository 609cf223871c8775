"""Named parameter vectors and exact gradient requests."""

from __future__ import annotations

from collections import OrderedDict
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import Literal

import torch
from torch import nn


class GradientError(ValueError):
    """Raised when a gradient is requested for a non-scalar loss."""


@dataclass
class ParamVector:
    """Ordered named tensors of one architecture; supports elementwise + and scaling."""

    layers: OrderedDict[str, torch.Tensor] = field(default_factory=OrderedDict)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        return cls(OrderedDict((name, p.detach().clone()) for name, p in module.named_parameters()))

    @property
    def total_dim(self) -> int:
        return sum(t.numel() for t in self.layers.values())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self.layers.items()}

    def same_architecture(self, other: "ParamVector") -> bool:
        return self.shapes == other.shapes and list(self.layers) == list(other.layers)

    def __iter__(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.layers.items())

    def __add__(self, other: "ParamVector") -> "ParamVector":
        if not self.same_architecture(other):
            raise ValueError("cannot add parameter vectors of different architectures")
        return ParamVector(OrderedDict((n, t + other.layers[n]) for n, t in self.layers.items()))

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(OrderedDict((n, t * factor) for n, t in self.layers.items()))

    def to(self, dtype: torch.dtype) -> "ParamVector":
        return ParamVector(OrderedDict((n, t.to(dtype)) for n, t in self.layers.items()))

    def flatten(self) -> torch.Tensor:
        if not self.layers:
            return torch.zeros(0)
        return torch.cat([t.reshape(-1) for t in self.layers.values()])

    def norm(self) -> float:
        return float(self.flatten().norm())

    def load_into(self, module: nn.Module) -> None:
        """Copy values into a module with the same named parameters."""
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.layers[name])


@dataclass
class GradRequest:
    """A scalar loss of (model, inputs, labels) and the target to differentiate against."""

    target: Literal["params", "inputs"]
    loss_fn: Callable[[nn.Module, torch.Tensor, torch.Tensor], torch.Tensor]
    inputs: torch.Tensor
    labels: torch.Tensor | None = None
    create_graph: bool = False


def grad(model: nn.Module, request: GradRequest) -> list[torch.Tensor] | torch.Tensor:
    """Exact gradients of the requested loss.

    Returns one tensor per named parameter for target="params", or a tensor shaped
    like the inputs for target="inputs". A loss independent of the target yields zeros.
    """
    inputs = request.inputs
    if request.target == "inputs":
        inputs = inputs.detach().clone().requires_grad_(True)
    loss = request.loss_fn(model, inputs, request.labels)
    if loss.numel() != 1:
        raise GradientError(f"loss must be scalar, got shape {tuple(loss.shape)}")

    wrt: list[torch.Tensor]
    if request.target == "params":
        wrt = [p for p in model.parameters()]
    else:
        wrt = [inputs]

    if not loss.requires_grad:
        grads = [torch.zeros_like(w) for w in wrt]
    else:
        raw = torch.autograd.grad(
            loss.reshape(()), wrt, create_graph=request.create_graph, allow_unused=True
        )
        grads = [torch.zeros_like(w) if g is None else g for w, g in zip(wrt, raw)]
    return grads if request.target == "params" else grads[0]
