"""Decentralized pairwise task reallocation over unreliable broadcast.

Each robot periodically broadcasts its claimed cells and the timestamp of its
latest interaction attempt.  A request-response handshake lets exactly one
pair repartition the union of their cells at a time: requesters skip peers
with a recent attempt, pick the peer they have not succeeded with for the
longest, and wait a bounded window for the answer; responders double-check
their own attempt timestamp before accepting.  Lost responses leave the two
sides briefly divergent; per-cell commit stamps carried in the state
broadcasts arbitrate any double claim (later stamp wins, then lower id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .netsim import NetMessage


@dataclass(frozen=True)
class ClaimInfo:
    stamp: float
    centroid: tuple
    demand: int


@dataclass(frozen=True)
class StatePayload:
    robot_id: int
    t_att: float
    position: tuple
    owned: tuple  # ((cell_id, stamp, centroid, demand), ...)

    def nbytes(self) -> int:
        return 24 + 28 * len(self.owned)


@dataclass(frozen=True)
class InteractionRequestPayload:
    requester: int
    responder: int
    t_n: float
    assign_requester: tuple
    assign_responder: tuple
    union_info: tuple  # ((cell_id, centroid, demand), ...)

    def nbytes(self) -> int:
        return 28 + 4 * (len(self.assign_requester) + len(self.assign_responder)) \
            + 20 * len(self.union_info)


@dataclass(frozen=True)
class InteractionResponsePayload:
    responder: int
    requester: int
    t_n: float
    ok: bool

    def nbytes(self) -> int:
        return 24


@dataclass
class PeerInfo:
    owned: dict
    t_att: float
    position: tuple
    heard_at: float


class Coordinator:
    """Per-robot protocol state machine (transport-agnostic)."""

    def __init__(self, robot_id: int, eps_att: float = 1.0, peer_stale_s: float = 1.0,
                 related_cells=None, log: list | None = None):
        self.robot_id = robot_id
        self.eps_att = eps_att
        self.peer_stale_s = peer_stale_s
        self.related_cells = related_cells or (lambda a, b: a == b)
        self.log = log if log is not None else []
        self.owned: dict[int, ClaimInfo] = {}
        self.t_att = -math.inf
        self.t_succ: dict[int, float] = {}
        self.peers: dict[int, PeerInfo] = {}
        self.pending = None  # (peer, t_n, mine, theirs, deadline)

    # -- bookkeeping -----------------------------------------------------------

    def owned_cells(self) -> set:
        return set(self.owned.keys())

    def _log(self, now: float, kind: str, **fields) -> None:
        rec = {"t": now, "robot": self.robot_id, "kind": kind}
        rec.update(fields)
        self.log.append(rec)

    def claim(self, cell_id: int, centroid, demand: int, now: float) -> None:
        self.owned[cell_id] = ClaimInfo(now, tuple(float(x) for x in centroid), int(demand))
        self._log(now, "claim", cell=cell_id)

    def drop_claim(self, cell_id: int) -> None:
        self.owned.pop(cell_id, None)

    def refresh_claim(self, cell_id: int, centroid, demand: int) -> None:
        """Update claim geometry without touching its commit stamp."""
        old = self.owned.get(cell_id)
        if old is not None:
            self.owned[cell_id] = ClaimInfo(
                old.stamp, tuple(float(x) for x in centroid), int(demand)
            )

    def translate_claim(self, cell_id: int, replacements) -> None:
        """Replace a refined-away claim by its surviving descendant cells."""
        old = self.owned.pop(cell_id, None)
        if old is None:
            return
        for rid, centroid, demand in replacements:
            self.owned[rid] = ClaimInfo(
                old.stamp, tuple(float(x) for x in centroid), int(demand)
            )

    # -- state broadcasting ------------------------------------------------------

    def state_payload(self, now: float, position) -> StatePayload:
        owned = tuple(
            (cid, info.stamp, info.centroid, info.demand)
            for cid, info in sorted(self.owned.items())
        )
        return StatePayload(self.robot_id, self.t_att, tuple(float(x) for x in position), owned)

    def state_message(self, now: float, position) -> NetMessage:
        return NetMessage("StateBroadcast", self.robot_id, self.state_payload(now, position))

    def on_state(self, payload: StatePayload, now: float) -> None:
        """Track the peer and arbitrate any ownership conflicts."""
        claims = {cid: ClaimInfo(stamp, centroid, demand)
                  for cid, stamp, centroid, demand in payload.owned}
        self.peers[payload.robot_id] = PeerInfo(
            owned=claims, t_att=payload.t_att, position=payload.position, heard_at=now,
        )
        peer_id = payload.robot_id
        for mine in sorted(self.owned.keys()):
            info = self.owned.get(mine)
            if info is None:
                continue
            for theirs, pinfo in claims.items():
                if mine != theirs and not self.related_cells(mine, theirs):
                    continue
                if pinfo.stamp > info.stamp + 1e-9 or (
                    abs(pinfo.stamp - info.stamp) <= 1e-9 and peer_id < self.robot_id
                ):
                    self.drop_claim(mine)
                    self._log(now, "reconcile_drop", cell=mine, to=peer_id)
                    break

    # -- interaction: requester side ----------------------------------------------

    def eligible_peers(self, now: float) -> list:
        out = []
        for pid in sorted(self.peers):
            peer = self.peers[pid]
            if now - peer.heard_at > self.peer_stale_s:
                continue
            if now - peer.t_att <= self.eps_att:
                continue  # the peer recently attempted an interaction
            out.append(pid)
        return out

    def start_request(self, now: float, position, partition_fn):
        """Try to open an interaction; returns a NetMessage or None.

        `partition_fn(union_info, my_pos, peer_pos, peer_id)` returns the new
        (mine, theirs) cell-id lists for the pooled cells.
        """
        if self.pending is not None:
            return None
        candidates = []
        for pid in self.eligible_peers(now):
            union = self._union_with(pid)
            if not union:
                continue
            age = now - self.t_succ.get(pid, -math.inf)
            candidates.append((-age, pid, union))
        if not candidates:
            return None
        candidates.sort()
        _, eta, union = candidates[0]
        peer = self.peers[eta]
        mine, theirs = partition_fn(union, position, peer.position, eta)
        payload = InteractionRequestPayload(
            requester=self.robot_id,
            responder=eta,
            t_n=now,
            assign_requester=tuple(sorted(mine)),
            assign_responder=tuple(sorted(theirs)),
            union_info=tuple(union),
        )
        self.t_att = now
        self.pending = (eta, now, payload.assign_requester, payload.assign_responder,
                        payload.union_info, now + self.eps_att)
        self._log(now, "request_sent", peer=eta, t_n=now,
                  n_union=len(union))
        return NetMessage("InteractionRequest", self.robot_id, payload)

    def _union_with(self, pid: int) -> list:
        peer = self.peers[pid]
        merged: dict[int, tuple] = {}
        for cid, info in sorted(self.owned.items()):
            merged[cid] = (cid, info.centroid, info.demand, info.stamp)
        for cid, info in sorted(peer.owned.items()):
            cur = merged.get(cid)
            if cur is None or info.stamp > cur[3]:
                merged[cid] = (cid, info.centroid, info.demand, info.stamp)
        return [(cid, c, d) for cid, c, d, _ in
                (merged[k] for k in sorted(merged.keys()))]

    def on_response(self, payload: InteractionResponsePayload, now: float) -> None:
        if payload.requester != self.robot_id or self.pending is None:
            return
        eta, t_n, mine, theirs, union, deadline = self.pending
        if payload.responder != eta or payload.t_n != t_n:
            return  # stale response from an earlier exchange
        if now > deadline:
            self._log(now, "response_late", peer=eta, t_n=t_n)
            self.pending = None
            return
        self.pending = None
        if not payload.ok:
            self._log(now, "response_fail", peer=eta, t_n=t_n)
            return
        self.t_succ[eta] = t_n
        self._commit(mine, union, t_n, now, peer=eta)

    def poll_timeout(self, now: float) -> None:
        if self.pending is not None and now > self.pending[5]:
            eta, t_n = self.pending[0], self.pending[1]
            self.pending = None
            self._log(now, "timeout", peer=eta, t_n=t_n)

    # -- interaction: responder side ------------------------------------------------

    def on_request(self, payload: InteractionRequestPayload, now: float):
        if payload.responder != self.robot_id:
            return None
        if payload.t_n - self.t_att <= self.eps_att:
            # double check: a recent attempt of our own may still be in flight
            self._log(now, "respond_fail", peer=payload.requester, t_n=payload.t_n)
            body = InteractionResponsePayload(self.robot_id, payload.requester,
                                              payload.t_n, False)
            return NetMessage("InteractionResponse", self.robot_id, body)
        self.t_att = payload.t_n
        self.t_succ[payload.requester] = payload.t_n
        self._log(now, "respond_succ", peer=payload.requester, t_n=payload.t_n)
        self._commit(payload.assign_responder, payload.union_info, payload.t_n, now,
                     peer=payload.requester)
        body = InteractionResponsePayload(self.robot_id, payload.requester, payload.t_n, True)
        return NetMessage("InteractionResponse", self.robot_id, body)

    def _commit(self, assigned, union_info, t_n: float, now: float, peer: int) -> None:
        union_ids = {u[0] for u in union_info}
        info_by_id = {u[0]: u for u in union_info}
        for cid in sorted(union_ids):
            if cid in self.owned and cid not in assigned:
                self.drop_claim(cid)
        for cid in assigned:
            _, centroid, demand = info_by_id[cid]
            self.owned[cid] = ClaimInfo(t_n, tuple(centroid), int(demand))
        self._log(now, "commit", peer=peer, t_n=t_n,
                  window=(t_n, now), cells=tuple(sorted(assigned)))


def committed_windows(log: list, robot_id: int) -> list:
    """(t_n, commit_time) intervals of interactions this robot committed."""
    return sorted(
        (rec["window"][0], rec["window"][1])
        for rec in log
        if rec["kind"] == "commit" and rec["robot"] == robot_id
    )


def assert_no_overlapping_interactions(log: list, robot_ids) -> None:
    for rid in robot_ids:
        windows = committed_windows(log, rid)
        for (s1, e1), (s2, e2) in zip(windows, windows[1:]):
            if s2 < e1 - 1e-12:
                raise AssertionError(
                    f"robot {rid}: overlapping committed interactions "
                    f"({s1:.3f},{e1:.3f}) and ({s2:.3f},{e2:.3f})"
                )
