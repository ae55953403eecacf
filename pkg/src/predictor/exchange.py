"""Control-plane messages between neighbouring relays.

Downstream messages (predecessor to successor) carry the sender's planned
outgoing rates and predicted queues and are usable in the same control step.
Upstream messages (successor to predecessor) carry the planned incoming rates
and arrive one step later.

Binary layout, big endian::

    sender index   uint16
    step           uint32
    circuit count  uint8
    horizon        uint8
    entries        uint32 each, value * 100 rounded (0.01 resolution)

Downstream messages carry ``2 * circuits * horizon`` entries (rates, then
queues), upstream messages ``circuits * horizon``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import NetworkTopology

DOWN = "down"
UP = "up"

HEADER = struct.Struct(">HIBB")
ENTRY_BYTES = 4
SCALE = 100.0
_MAX_ENTRY = (2**32 - 1) / SCALE


def quantize(values) -> np.ndarray:
    """Round to the wire resolution; the result survives encode/decode bit-exactly."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, _MAX_ENTRY)
    return np.round(v * SCALE) / SCALE


@dataclass(frozen=True)
class DownstreamMsg:
    sender: str
    step: int
    circuits: tuple[int, ...]
    r_out: np.ndarray = field(compare=False)
    s_queue: np.ndarray = field(compare=False)

    def row(self, circuit: int) -> int:
        return self.circuits.index(circuit)


@dataclass(frozen=True)
class UpstreamMsg:
    sender: str
    step: int
    circuits: tuple[int, ...]
    r_in: np.ndarray = field(compare=False)

    def row(self, circuit: int) -> int:
        return self.circuits.index(circuit)


@dataclass(frozen=True)
class Envelope:
    receiver: str
    direction: str
    send_step: int
    deliver_step: int
    msg: DownstreamMsg | UpstreamMsg


@dataclass(frozen=True)
class MessageLogEntry:
    direction: str
    size: int
    send_step: int
    deliver_step: int
    sender: str
    receiver: str


def _payload(msg) -> list[np.ndarray]:
    if isinstance(msg, DownstreamMsg):
        return [msg.r_out, msg.s_queue]
    return [msg.r_in]


def wire_size(msg: DownstreamMsg | UpstreamMsg) -> int:
    entries = sum(int(np.asarray(a).size) for a in _payload(msg))
    return HEADER.size + ENTRY_BYTES * entries


def encode(msg: DownstreamMsg | UpstreamMsg, node_index: dict[str, int]) -> bytes:
    arrays = [np.asarray(a, dtype=float) for a in _payload(msg)]
    p = len(msg.circuits)
    horizon = arrays[0].shape[1] if arrays[0].ndim == 2 and p else 0
    if p > 255 or horizon > 255:
        raise ValueError("circuit count and horizon must fit in one byte")
    head = HEADER.pack(node_index[msg.sender], msg.step, p, horizon)
    ints = np.concatenate([np.round(quantize(a).ravel() * SCALE) for a in arrays]).astype(">u4")
    return head + ints.tobytes()


def decode(data: bytes, direction: str, circuits: Sequence[int], node_ids: Sequence[str]):
    sender, step, p, horizon = HEADER.unpack_from(data)
    if p != len(circuits):
        raise ValueError(f"message carries {p} circuits, expected {len(circuits)}")
    vals = np.frombuffer(data, dtype=">u4", offset=HEADER.size).astype(float) / SCALE
    blocks = 2 if direction == DOWN else 1
    if vals.size != blocks * p * horizon:
        raise ValueError("payload length does not match header")
    arrays = vals.reshape(blocks, p, horizon)
    if direction == DOWN:
        return DownstreamMsg(node_ids[sender], step, tuple(circuits), arrays[0].copy(), arrays[1].copy())
    return UpstreamMsg(node_ids[sender], step, tuple(circuits), arrays[0].copy())


def to_json(msg: DownstreamMsg | UpstreamMsg) -> str:
    body = {"sender": msg.sender, "step": msg.step, "circuits": list(msg.circuits)}
    if isinstance(msg, DownstreamMsg):
        body.update(direction=DOWN, r_out=np.asarray(msg.r_out).tolist(), s_queue=np.asarray(msg.s_queue).tolist())
    else:
        body.update(direction=UP, r_in=np.asarray(msg.r_in).tolist())
    return json.dumps(body, sort_keys=True)


def emit_messages(node_id: str, circuits: Sequence[int], plan, step: int, t: NetworkTopology) -> list[Envelope]:
    """One downstream message per successor relay and one upstream message per predecessor relay.

    ``circuits`` are the node's circuit ids in the row order of ``plan``.
    """
    succ: dict[str, list[int]] = {}
    pred: dict[str, list[int]] = {}
    for row, cid in enumerate(circuits):
        g = t.successor(cid, node_id)
        if g is not None:
            succ.setdefault(g, []).append(row)
        b = t.predecessor(cid, node_id)
        if b is not None:
            pred.setdefault(b, []).append(row)
    out = []
    for g in sorted(succ, key=t.node_ids.index):
        rows = succ[g]
        msg = DownstreamMsg(
            sender=node_id,
            step=step,
            circuits=tuple(circuits[r] for r in rows),
            r_out=quantize(plan.r_out[rows]),
            s_queue=quantize(plan.s_pred[rows, 1:]),
        )
        out.append(Envelope(g, DOWN, step, step, msg))
    for b in sorted(pred, key=t.node_ids.index):
        rows = pred[b]
        msg = UpstreamMsg(
            sender=node_id,
            step=step,
            circuits=tuple(circuits[r] for r in rows),
            r_in=quantize(plan.r_in[rows]),
        )
        out.append(Envelope(b, UP, step, step + 1, msg))
    return out


def log_entry(env: Envelope) -> MessageLogEntry:
    return MessageLogEntry(
        direction=env.direction,
        size=wire_size(env.msg),
        send_step=env.send_step,
        deliver_step=env.deliver_step,
        sender=env.msg.sender,
        receiver=env.receiver,
    )


def deliver(messages: Sequence[Envelope], step: int) -> tuple[dict[str, list[Envelope]], list[Envelope]]:
    """Split ``messages`` into the per-node inbox for ``step`` and those still in flight."""
    inbox: dict[str, list[Envelope]] = {}
    pending = []
    for env in messages:
        if env.deliver_step <= step:
            inbox.setdefault(env.receiver, []).append(env)
        else:
            pending.append(env)
    return inbox, pending
