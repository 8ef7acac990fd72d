"""Simulated broadcast network: range-limited, lossy, latency-bearing.

Messages are enqueued at send time against ground-truth positions and
delivered in (deliver_time, src id, enqueue order).  Chunk bookkeeping
summarizes which map chunks a robot holds so peers can re-share anything
missing, repairing packet loss and relaying across hops.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import pickle
from dataclasses import dataclass, field

import numpy as np

KINDS = (
    "StateBroadcast",
    "ChunkBroadcast",
    "Bookkeeping",
    "ChunkRequestReply",
    "InteractionRequest",
    "InteractionResponse",
)


@dataclass(frozen=True)
class NetMessage:
    kind: str
    src: int
    payload: object

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind}")

    def nbytes(self) -> int:
        payload = self.payload
        if hasattr(payload, "nbytes") and callable(payload.nbytes):
            return 8 + payload.nbytes()
        if isinstance(payload, (list, tuple)):
            return 8 + sum(
                p.nbytes() if hasattr(p, "nbytes") and callable(p.nbytes) else 16
                for p in payload
            )
        return 24

    def digest(self) -> str:
        return hashlib.sha1(pickle.dumps((self.kind, self.src, self.payload))).hexdigest()[:16]


@dataclass
class Bookkeeping:
    """Compact record of held chunk ids: per producer, the highest contiguous
    sequence number (from 0) plus any extras beyond the gap."""

    held: dict  # producer -> (hi, frozenset extras)

    @staticmethod
    def from_ids(chunk_ids) -> "Bookkeeping":
        by_producer: dict[int, set] = {}
        for producer, seq in chunk_ids:
            by_producer.setdefault(producer, set()).add(seq)
        held = {}
        for producer in sorted(by_producer):
            seqs = by_producer[producer]
            hi = -1
            while hi + 1 in seqs:
                hi += 1
            extras = frozenset(s for s in seqs if s > hi)
            held[producer] = (hi, extras)
        return Bookkeeping(held)

    def contains(self, producer: int, seq: int) -> bool:
        ent = self.held.get(producer)
        if ent is None:
            return False
        hi, extras = ent
        return seq <= hi or seq in extras

    def nbytes(self) -> int:
        return sum(8 + 4 * len(extras) for _, extras in self.held.values())


def missing_chunks(held: dict, peer_bk: Bookkeeping) -> list:
    """Chunks held locally but unrecorded by the peer, in (producer, seq) order."""
    out = []
    for (producer, seq) in sorted(held.keys()):
        if not peer_bk.contains(producer, seq):
            out.append(held[(producer, seq)])
    return out


class Channel:
    """Discrete-event lossy broadcast medium owned by the simulation driver."""

    def __init__(self, comm_range: float = math.inf, loss_prob: float = 0.0,
                 latency: tuple = (0.01, 0.05), rng_seed: int = 0,
                 track_digests: bool = False):
        if not 0.0 <= loss_prob <= 1.0:
            raise ValueError("loss probability must be in [0, 1]")
        self.comm_range = comm_range
        self.loss_prob = loss_prob
        self.latency = latency
        self.rng = np.random.default_rng(rng_seed)
        self.queue: list = []
        self._counter = 0
        self.track_digests = track_digests
        self.sent_digests: set = set()
        self.log: list = []  # (time, event, dst, kind, src, nbytes)
        self.counters: dict = {}

    def _count(self, bucket: str, msg: NetMessage) -> None:
        key = (bucket, msg.kind)
        n, b = self.counters.get(key, (0, 0))
        self.counters[key] = (n + 1, b + msg.nbytes())

    def broadcast(self, src: int, msg: NetMessage, now: float, positions: dict) -> None:
        """Fan a message out to every in-range peer, independently lossy."""
        self._count("sent", msg)
        if self.track_digests:
            self.sent_digests.add(msg.digest())
        self.log.append((now, "send", -1, msg.kind, src, msg.nbytes()))
        src_pos = np.asarray(positions[src], dtype=float)
        for dst in sorted(positions):
            if dst == src:
                continue
            dist = float(np.linalg.norm(np.asarray(positions[dst], dtype=float) - src_pos))
            if dist > self.comm_range:
                continue
            if self.loss_prob > 0 and self.rng.random() < self.loss_prob:
                self.log.append((now, "drop", dst, msg.kind, src, msg.nbytes()))
                continue
            lag = float(self.rng.uniform(self.latency[0], self.latency[1]))
            self._counter += 1
            heapq.heappush(self.queue, (now + lag, src, self._counter, dst, msg))

    def step(self, now: float) -> list:
        """Deliver everything due by `now`, ordered (time, src id, enqueue order)."""
        out = []
        while self.queue and self.queue[0][0] <= now:
            t, src, _, dst, msg = heapq.heappop(self.queue)
            if self.track_digests:
                assert msg.digest() in self.sent_digests, "fabricated message"
            self._count("delivered", msg)
            self.log.append((t, "deliver", dst, msg.kind, src, msg.nbytes()))
            out.append((dst, msg))
        return out

    def pending(self) -> int:
        return len(self.queue)

    def dump_log(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("time,event,dst,kind,src,nbytes\n")
            for t, event, dst, kind, src, nbytes in self.log:
                fh.write(f"{t:.6f},{event},{dst},{kind},{src},{nbytes}\n")
