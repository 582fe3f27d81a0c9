"""Simulated federated meta-training round: clients compute local meta
gradients over their own task sets, encrypt them, and the server sums
ciphertexts before decrypting exactly once and applying the meta step.

The client/server boundary is an in-process message queue carrying bytes:
the server only ever sees serialized model parameters going out and
serialized ciphertext vectors coming back, so data locality is enforced by
the interfaces rather than by convention. Round transcripts are JSON lines
of (round, client ids, parameter checksum).
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn, paillier
from .data import NormStats, PhoneDataset
from .meta import MetaConfig, Task, build_task_set, meta_batch_gradient

_PARAMS_MAGIC = b"PTPV"


def params_to_bytes(params: nn.ParamVector) -> bytes:
    layout = [[name, list(shape)] for name, shape in params.layout.entries]
    header = json.dumps(layout).encode()
    return b"".join(
        [
            _PARAMS_MAGIC,
            struct.pack(">I", len(header)),
            header,
            params.values.tobytes(),
        ]
    )


def params_from_bytes(blob: bytes) -> nn.ParamVector:
    if blob[:4] != _PARAMS_MAGIC:
        raise ValueError("not a serialized parameter vector")
    header_len = struct.unpack(">I", blob[4:8])[0]
    layout = nn.Layout(
        tuple(
            (name, tuple(shape))
            for name, shape in json.loads(blob[8 : 8 + header_len].decode())
        )
    )
    values = np.frombuffer(blob[8 + header_len :], dtype=np.float64)
    return nn.ParamVector(values, layout)


def params_checksum(params: nn.ParamVector) -> str:
    return hashlib.sha256(params_to_bytes(params)).hexdigest()[:16]


@dataclass(frozen=True)
class Message:
    sender: str
    kind: str  # "model" or "gradient" or "opt_out"
    payload: bytes


class Channel:
    """In-process transport; every payload crosses as plain bytes."""

    def __init__(self):
        self.to_clients: dict[int, deque[Message]] = {}
        self.to_server: deque[Message] = deque()

    def send_to_client(self, client_id: int, message: Message) -> None:
        self.to_clients.setdefault(client_id, deque()).append(message)

    def send_to_server(self, message: Message) -> None:
        self.to_server.append(message)

    def receive_for_client(self, client_id: int) -> Message:
        return self.to_clients[client_id].popleft()

    def drain_server(self) -> list[Message]:
        messages = list(self.to_server)
        self.to_server.clear()
        return messages


@dataclass
class ClientState:
    """One simulated phone: its data never crosses the channel."""

    client_id: int
    dataset: PhoneDataset
    n_tasks: int
    config: MetaConfig
    norm: NormStats
    seed: int

    def has_enough_data(self) -> bool:
        return len(self.dataset) >= self.config.k_spt + self.config.k_qry


def client_tasks(client: ClientState, round_index: int) -> list[Task]:
    """The task set this client would build for a round (seeded, re-derivable)."""
    return build_task_set(
        [client.dataset],
        client.config.k_spt,
        client.config.k_qry,
        client.n_tasks,
        seed=client.seed * 100003 + round_index,
    )


def client_calculate(
    client: ClientState,
    model_blob: bytes,
    pk: paillier.PublicKey,
    q: int,
    round_index: int,
) -> Message:
    """Local inner loops over the client's tasks, then encrypt the summed
    query gradient. Clients without enough data opt out of the round."""
    if not client.has_enough_data():
        return Message(str(client.client_id), "opt_out", b"")
    params = params_from_bytes(model_blob)
    if client.n_tasks == 0:
        encrypted = paillier.encrypt_zeros(pk, params.layout.size, q)
    else:
        tasks = client_tasks(client, round_index)
        grad = meta_batch_gradient(params, tasks, client.config, client.norm)
        rng = random.Random(client.seed * 2654435761 + round_index)
        encrypted = paillier.encrypt(pk, grad.values, q, rng)
    return Message(str(client.client_id), "gradient", paillier.serialize(encrypted))


def federated_round(
    params: nn.ParamVector,
    clients: list[ClientState],
    optimizer: nn.OptimizerState,
    keypair: paillier.KeyPair,
    q: int,
    round_index: int,
    transcript_path=None,
) -> tuple[nn.ParamVector, nn.OptimizerState]:
    """One server round: broadcast parameters, collect encrypted gradients,
    sum ciphertexts, decrypt once, apply the meta step.

    The ciphertext sum is complete before the private key is touched; with
    zero participating clients the round is skipped and the parameters are
    returned unchanged.
    """
    if not clients:
        raise ValueError("need at least one client")
    channel = Channel()
    blob = params_to_bytes(params)
    for client in clients:
        channel.send_to_client(client.client_id, Message("server", "model", blob))
    for client in sorted(clients, key=lambda c: c.client_id):
        request = channel.receive_for_client(client.client_id)
        channel.send_to_server(
            client_calculate(client, request.payload, keypair.public, q, round_index)
        )

    encrypted_sum = None
    participant_ids = []
    for message in channel.drain_server():
        if message.kind == "opt_out":
            continue
        participant_ids.append(int(message.sender))
        vector = paillier.deserialize(message.payload)
        if encrypted_sum is None:
            encrypted_sum = vector
        else:
            encrypted_sum = paillier.add_encrypted(encrypted_sum, vector, keypair.public)

    if encrypted_sum is None:
        new_params, new_state = params, optimizer
    else:
        grad_values = paillier.decrypt(keypair.private, encrypted_sum)
        grad = nn.GradientVector(grad_values, params.layout)
        new_params, new_state = nn.optimizer_step(optimizer, params, grad)

    if transcript_path is not None:
        line = json.dumps(
            {
                "round": round_index,
                "clients": participant_ids,
                "theta_checksum": params_checksum(new_params),
            }
        )
        with Path(transcript_path).open("a") as fh:
            fh.write(line + "\n")
    return new_params, new_state
