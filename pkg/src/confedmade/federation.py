"""Server state, inter-node messages, wire format, FedAvg and the communication ledger.

Every message between server and clients is serialized to bytes and decoded
again on the receiving side, so what a node receives is exactly what the
ledger counted. Messages carry only parameters, mask seeds and attention
values; they have no field that could hold a data row.

Wire format (little-endian)::

    5s  magic b"CFMSG" | u8 version | u32 header length n | n bytes UTF-8 JSON
    header {"kind", "round", "task", "client", "seed", "tensors": [[name, shape, nnz], ...]}
    then for each tensor: nnz int64 flat indices followed by nnz float64 values
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import AggregationError, FormatError, ProtocolError, TopologyError

WIRE_MAGIC = b"CFMSG"
WIRE_VERSION = 1

SERVER_TO_CLIENT = "server_to_client"
CLIENT_TO_SERVER = "client_to_server"


@dataclass(frozen=True)
class SparseTensor:
    """Coordinate form of a dense array: flat indices and their values."""

    shape: tuple
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_dense(cls, arr, floor=0.0):
        """Keep entries with ``|a| >= floor`` (``floor=0`` keeps every non-zero)."""
        arr = np.asarray(arr, dtype=np.float64)
        flat = arr.ravel()
        keep = flat != 0.0 if floor == 0.0 else np.abs(flat) >= floor
        idx = np.flatnonzero(keep).astype(np.int64)
        return cls(tuple(arr.shape), idx, flat[idx].copy())

    def to_dense(self):
        out = np.zeros(int(np.prod(self.shape)) if self.shape else 1)
        out[self.indices] = self.values
        return out.reshape(self.shape)

    @property
    def nnz(self):
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True)
class Message:
    """One transmission. ``tensors`` maps names to :class:`SparseTensor`.

    Names: ``W/<key>`` for model weights and ``kb/<client>/<task>/<key>`` for
    knowledge-base entries sent to a client, ``A/<key>`` for a finished task's
    adaptive parameters sent to the server.
    """

    kind: str
    round: int
    task: int
    client: int
    tensors: dict = field(default_factory=dict)
    seed: int | None = None

    def count(self):
        return sum(t.nnz for t in self.tensors.values()) + (0 if self.seed is None else 1)

    def counts_by_key(self):
        out = {}
        for name, t in self.tensors.items():
            key = name.rsplit("/", 1)[-1]
            out[key] = out.get(key, 0) + t.nnz
        if self.seed is not None:
            out["mask_seed"] = 1
        return out

    def weights(self):
        return {n[2:]: t.to_dense() for n, t in self.tensors.items() if n.startswith("W/")}

    def kb_entries(self):
        out = {}
        for n, t in self.tensors.items():
            if n.startswith("kb/"):
                _, i, j, key = n.split("/")
                out.setdefault((int(i), int(j)), {})[key] = t.to_dense()
        return out

    def adaptive(self):
        return {n[2:]: t.to_dense() for n, t in self.tensors.items() if n.startswith("A/")}


def serialize(msg: Message) -> bytes:
    names = list(msg.tensors)
    header = {
        "kind": msg.kind, "round": int(msg.round), "task": int(msg.task),
        "client": int(msg.client), "seed": None if msg.seed is None else int(msg.seed),
        "tensors": [[n, list(msg.tensors[n].shape), int(msg.tensors[n].indices.size)]
                    for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [WIRE_MAGIC, struct.pack("<BI", WIRE_VERSION, len(hb)), hb]
    for n in names:
        t = msg.tensors[n]
        parts.append(np.ascontiguousarray(t.indices, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> Message:
    if blob[:5] != WIRE_MAGIC:
        raise FormatError("not a federation message", offset=0)
    version, hlen = struct.unpack_from("<BI", blob, 5)
    if version != WIRE_VERSION:
        raise FormatError(f"unsupported message version {version}", offset=5)
    pos = 10
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    tensors = {}
    for name, shape, nnz in header["tensors"]:
        end = pos + 16 * nnz
        if end > len(blob):
            raise FormatError(f"truncated tensor {name!r}", offset=pos)
        idx = np.frombuffer(blob, dtype="<i8", count=nnz, offset=pos).astype(np.int64)
        val = np.frombuffer(blob, dtype="<f8", count=nnz, offset=pos + 8 * nnz).astype(np.float64)
        tensors[name] = SparseTensor(tuple(shape), idx, val)
        pos = end
    return Message(header["kind"], header["round"], header["task"], header["client"],
                   tensors, header["seed"])


@dataclass
class CommLedger:
    """Exact non-zero counts of every transmitted message."""

    rows: list = field(default_factory=list)

    def record(self, direction, msg: Message):
        row = {"round": int(msg.round), "task": int(msg.task), "direction": direction,
               "client": int(msg.client), "kind": msg.kind,
               "per_key": dict(sorted(msg.counts_by_key().items())), "count": msg.count()}
        self.rows.append(row)
        return row

    def total(self, direction=None, task=None, kind=None):
        return sum(r["count"] for r in self.rows
                   if (direction is None or r["direction"] == direction)
                   and (task is None or r["task"] == task)
                   and (kind is None or r["kind"] == kind))

    def totals(self):
        tasks = sorted({r["task"] for r in self.rows})
        return {
            "total": self.total(),
            SERVER_TO_CLIENT: self.total(SERVER_TO_CLIENT),
            CLIENT_TO_SERVER: self.total(CLIENT_TO_SERVER),
            "per_task": {str(t): {SERVER_TO_CLIENT: self.total(SERVER_TO_CLIENT, t),
                                  CLIENT_TO_SERVER: self.total(CLIENT_TO_SERVER, t)}
                         for t in tasks},
        }

    def to_dict(self):
        return {"rows": self.rows, "totals": self.totals()}


class Channel:
    """Serializes, ledgers and decodes messages; ``on_message(row, blob)`` observes traffic."""

    def __init__(self, ledger=None, on_message=None):
        self.ledger = ledger if ledger is not None else CommLedger()
        self.on_message = on_message

    def send(self, direction, msg: Message) -> Message:
        blob = serialize(msg)
        received = deserialize(blob)
        row = self.ledger.record(direction, received)
        if self.on_message is not None:
            self.on_message(row, blob)
        return received


@dataclass
class ServerState:
    weights: dict
    mask_seed: int
    kb: dict = field(default_factory=dict)  # (client, task) -> {key: SparseTensor}
    round: int = 0
    task: int = 0

    def store(self, client, task, tensors):
        key = (int(client), int(task))
        if key in self.kb:
            raise ProtocolError(f"knowledge base already holds an entry for client {client}, task {task}")
        self.kb[key] = dict(tensors)

    def kb_size(self):
        return len(self.kb)


def broadcast_round_start(server: ServerState, channel: Channel, client_shapes, round_seeds,
                          first_round_of_task):
    """Send ``W_G`` (plus mask seed, plus kb at task start) to every client.

    ``client_shapes[c]`` is client ``c``'s parameter-shape dict; ``round_seeds[c]``
    is the seed to send, or ``None`` when masks are not synchronized.
    """
    shapes = {k: tuple(v.shape) for k, v in server.weights.items()}
    weights = {f"W/{k}": SparseTensor.from_dense(v) for k, v in server.weights.items()}
    out = []
    for c, cs in enumerate(client_shapes):
        cs = {k: tuple(v) for k, v in cs.items()}
        if cs != shapes:
            raise TopologyError(f"client {c} architecture {cs} does not match the global {shapes}")
        tensors = dict(weights)
        if first_round_of_task:
            for (i, j), entry in sorted(server.kb.items()):
                if i == c:
                    continue
                for key, t in entry.items():
                    tensors[f"kb/{i}/{j}/{key}"] = t
        msg = Message("broadcast", server.round, server.task, c, tensors, round_seeds[c])
        out.append(channel.send(SERVER_TO_CLIENT, msg))
    return out


def fedavg_aggregate(uploads):
    """Elementwise mean of the uploaded weights; absent entries count as zero."""
    if not uploads:
        raise AggregationError("FedAvg needs at least one upload")
    dense = [u.weights() if isinstance(u, Message) else u for u in uploads]
    keys = set(dense[0])
    for c, d in enumerate(dense):
        if set(d) != keys:
            raise AggregationError(f"upload {c} has keys {sorted(d)}, expected {sorted(keys)}")
        for k in keys:
            if d[k].shape != dense[0][k].shape:
                raise AggregationError(
                    f"upload {c} tensor {k!r} has shape {d[k].shape}, expected {dense[0][k].shape}")
    n = len(dense)
    out = {}
    for k in dense[0]:
        acc = np.zeros_like(dense[0][k])
        for d in dense:
            acc = acc + d[k]
        out[k] = acc / n
    return out


def finish_task(server: ServerState, channel: Channel, adaptive_uploads):
    """Store each client's finished-task adaptive parameters in the knowledge base.

    ``adaptive_uploads[c]`` is a dense ``{key: array}`` dict already sparsified
    by the client.
    """
    for c, adaptive in enumerate(adaptive_uploads):
        msg = Message("task_adaptive", server.round, server.task, c,
                      {f"A/{k}": SparseTensor.from_dense(v) for k, v in adaptive.items()})
        received = channel.send(CLIENT_TO_SERVER, msg)
        server.store(c, server.task,
                     {n[2:]: t for n, t in received.tensors.items()})
    return server.kb


def recount_nonzeros(blob: bytes) -> int:
    """Non-zero scalar count of a serialized message, parsed from the bytes alone."""
    version, hlen = struct.unpack_from("<BI", blob, 5)
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    pos = 10 + hlen
    total = 0 if header["seed"] is None else 1
    for _, _, nnz in header["tensors"]:
        vals = np.frombuffer(blob, dtype="<f8", count=nnz, offset=pos + 8 * nnz)
        total += int(np.count_nonzero(vals))
        pos += 16 * nnz
    return total
