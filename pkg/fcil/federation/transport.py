"""Round messages between the in-process server and its clients.

Every broadcast and every client update is encoded to bytes and decoded again
before use, so nothing crosses the server/client boundary by reference.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass

import torch

from fcil.data.codec import CodecError, decode_tensors, encode_tensors
from fcil.disentangle.prototypes import PrototypeSet
from fcil.disentangle.vae import SharedVAE
from fcil.federation.client import ClientUpdate
from fcil.models import ClientReport
from fcil.nets.backbone import Backbone
from fcil.nets.params import ParamVector

logger = logging.getLogger(__name__)

SERVER_ID = -1


class TransportError(CodecError):
    """Raised when a round message does not match what the receiver expects."""


def _prefixed(prefix: str, vector: ParamVector) -> OrderedDict[str, torch.Tensor]:
    return OrderedDict((f"{prefix}{name}", t) for name, t in vector)


def _strip(prefix: str, tensors: dict[str, torch.Tensor]) -> ParamVector:
    return ParamVector(
        OrderedDict((name[len(prefix) :], t) for name, t in tensors.items() if name.startswith(prefix))
    )


@dataclass
class Broadcast:
    classifier: Backbone
    vae: SharedVAE | None
    prototypes: PrototypeSet | None
    round: int
    task: int


def encode_broadcast(
    classifier: Backbone,
    vae: SharedVAE | None,
    prototypes: PrototypeSet | None,
    round_id: int,
    task_id: int,
) -> bytes:
    tensors = _prefixed("classifier.", classifier.params)
    header = {
        "kind": "broadcast",
        "round": round_id,
        "task": task_id,
        "client_id": SERVER_ID,
        "n_l": 0,
        "head_classes": classifier.head_classes,
        "vae_classes": vae.classes if vae is not None else None,
    }
    if vae is not None:
        tensors.update(_prefixed("vae.", ParamVector.from_module(vae)))
    if prototypes is not None:
        tensors.update(prototypes.to_tensors())
    return encode_tensors(header, tensors)


def decode_broadcast(blob: bytes, classifier: Backbone, vae: SharedVAE | None) -> Broadcast:
    """Rebuild the broadcast models on copies of the receiver's templates."""
    header, tensors = decode_tensors(blob)
    if header.get("kind") != "broadcast":
        raise TransportError(f"expected a broadcast, got {header.get('kind')!r}")
    if header["head_classes"] != classifier.head_classes:
        raise TransportError(
            f"broadcast head has {header['head_classes']} classes, template has {classifier.head_classes}"
        )
    model = classifier.clone()
    _strip("classifier.", tensors).load_into(model)

    shared = None
    if header["vae_classes"] is not None:
        if vae is None:
            raise TransportError("broadcast carries a Shared-VAE but the receiver has no template")
        shared = vae.clone()
        shared.register_classes(header["vae_classes"])
        _strip("vae.", tensors).load_into(shared)
    prototypes = PrototypeSet.from_tensors(tensors)
    return Broadcast(
        classifier=model,
        vae=shared,
        prototypes=prototypes if len(prototypes) else None,
        round=header["round"],
        task=header["task"],
    )


def encode_update(update: ClientUpdate, round_id: int, task_id: int) -> bytes:
    tensors = _prefixed("classifier.", update.classifier)
    if update.vae is not None:
        tensors.update(_prefixed("vae.", update.vae))
    header = {
        "kind": "update",
        "round": round_id,
        "task": task_id,
        "client_id": update.client_id,
        "n_l": update.sample_count,
        "has_vae": update.vae is not None,
        "vae_classes": update.vae_classes,
        "report": update.report.model_dump(),
    }
    return encode_tensors(header, tensors)


def decode_update(blob: bytes, round_id: int, task_id: int) -> ClientUpdate:
    header, tensors = decode_tensors(blob)
    if header.get("kind") != "update":
        raise TransportError(f"expected a client update, got {header.get('kind')!r}")
    if (header["round"], header["task"]) != (round_id, task_id):
        raise TransportError(
            f"update for round {header['round']} task {header['task']} "
            f"arrived in round {round_id} task {task_id}"
        )
    return ClientUpdate(
        client_id=header["client_id"],
        classifier=_strip("classifier.", tensors),
        sample_count=header["n_l"],
        report=ClientReport.model_validate(header["report"]),
        vae=_strip("vae.", tensors) if header["has_vae"] else None,
        vae_classes=header["vae_classes"],
    )
