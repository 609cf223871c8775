"""Feature banks, single-pass FINCH clustering, class prototypes and the prototype contrastive loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)


@dataclass
class FeatureBank:
    """Per-class feature vectors (rows of one n×d tensor per class)."""

    features: dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def dim(self) -> int | None:
        for rows in self.features.values():
            return int(rows.shape[1])
        return None

    def add(self, class_id: int, rows: torch.Tensor) -> None:
        if rows.ndim != 2:
            raise ValueError(f"feature rows must be n×d, got {tuple(rows.shape)}")
        if self.dim is not None and rows.shape[1] != self.dim:
            raise ValueError(f"feature dim {rows.shape[1]} does not match bank dim {self.dim}")
        if not torch.isfinite(rows).all():
            raise ValueError(f"class {class_id}: non-finite features")
        if rows.shape[0] == 0:
            return
        prev = self.features.get(class_id)
        rows = rows.detach()
        self.features[class_id] = rows if prev is None else torch.cat([prev, rows])

    def classes(self) -> list[int]:
        return sorted(self.features)


@dataclass
class PrototypeSet:
    """Per-class centroid matrices (V_k × d)."""

    centroids: dict[int, torch.Tensor] = field(default_factory=dict)

    def __contains__(self, k: int) -> bool:
        return k in self.centroids

    def __len__(self) -> int:
        return len(self.centroids)

    def count(self, k: int) -> int:
        return int(self.centroids[k].shape[0])

    def positives(self, k: int) -> torch.Tensor:
        return self.centroids[k]

    def negatives(self, k: int) -> torch.Tensor:
        others = [c for j, c in sorted(self.centroids.items()) if j != k]
        if not others:
            dim = self.centroids[k].shape[1]
            return torch.zeros((0, dim), dtype=self.centroids[k].dtype)
        return torch.cat(others)

    def to_tensors(self) -> dict[str, torch.Tensor]:
        return {f"proto_{k}": c for k, c in sorted(self.centroids.items())}

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor]) -> "PrototypeSet":
        return cls({int(name.split("_", 1)[1]): t for name, t in tensors.items() if name.startswith("proto_")})


# ---------------------------------------------------------------------------
# FINCH
# ---------------------------------------------------------------------------


def first_neighbors(
    features: np.ndarray, metric: Literal["cosine", "euclidean"] = "cosine"
) -> np.ndarray:
    """Index of each point's nearest other point; ties go to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        unit = x / np.maximum(norms, 1e-12)
        dist = 1.0 - unit @ unit.T
    elif metric == "euclidean":
        dist = cdist(x, x)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def finch_cluster(
    features: np.ndarray | torch.Tensor, metric: Literal["cosine", "euclidean"] = "cosine"
) -> np.ndarray:
    """One FINCH pass: connected components of the first-neighbor graph.

    Returns a cluster id per point, numbered in order of first appearance.
    """
    x = features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    n = x.shape[0]
    if n == 0:
        raise ValueError("finch_cluster needs at least one point")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    nn_idx = first_neighbors(x, metric)
    graph = csr_matrix((np.ones(n), (np.arange(n), nn_idx)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64)


def build_prototypes(
    bank: FeatureBank, metric: Literal["cosine", "euclidean"] = "cosine"
) -> PrototypeSet:
    """Cluster each class's features and keep the cluster means as its prototypes."""
    centroids: dict[int, torch.Tensor] = {}
    for k in bank.classes():
        rows = bank.features[k]
        if rows.shape[0] == 0:
            raise ValueError(f"class {k} has no features")
        labels = torch.from_numpy(finch_cluster(rows, metric))
        centroids[k] = torch.stack([rows[labels == c].mean(dim=0) for c in labels.unique(sorted=True)])
    logger.debug(
        f"Built prototypes for {len(centroids)} classes: "
        f"{ {k: int(c.shape[0]) for k, c in centroids.items()} }"
    )
    return PrototypeSet(centroids)


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------


def mkcl_loss(
    z: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor | None, tau: float
) -> torch.Tensor:
    """−log(Σ_P exp(cos/τ) / (Σ_P exp(cos/τ) + Σ_N exp(cos/τ))), averaged over rows of z.

    `z` is one feature vector or a batch of them.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if positives.shape[0] == 0:
        raise ValueError("at least one positive prototype is required")
    anchors = z.reshape(-1, z.shape[-1])
    if negatives is None or negatives.shape[0] == 0:
        logger.warning("No negative prototypes; contrastive term is 0")
        return anchors.sum() * 0.0

    unit = F.normalize(anchors, dim=1, eps=1e-12)
    pos = unit @ F.normalize(positives.to(anchors.dtype), dim=1, eps=1e-12).T / tau
    neg = unit @ F.normalize(negatives.to(anchors.dtype), dim=1, eps=1e-12).T / tau
    loss = torch.logsumexp(torch.cat([pos, neg], dim=1), dim=1) - torch.logsumexp(pos, dim=1)
    return loss.mean()
