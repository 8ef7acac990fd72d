"""Per-robot agent: sensing, map sharing, decomposition upkeep, coordination
hooks, planning, and motion.  One Robot owns one map, hgrid, cell graph,
frontier manager, and protocol state machine; all cross-robot effects flow
through netsim messages handed in by the simulation driver.
"""

from __future__ import annotations

import math

import numpy as np

from .config import SimConfig
from .coordination import Coordinator
from .frontier import FrontierManager, FrontierParams, Viewpoint
from .hgrid import ChangeSet, Hgrid
from .netsim import Bookkeeping, NetMessage, missing_chunks
from .planner import (
    LocalCluster,
    PlannerParams,
    RobotKinematics,
    estimate_path_len,
    plan_coverage_path,
    plan_local_path,
    refine_viewpoints,
    step_motion,
)
from .routing import build_avrp_matrix, build_open_tsp_matrix, solve_cvrp, solve_open_tsp
from .sparse_graph import CellGraph
from .voxel_map import FREE, UNKNOWN, SensorModel, VoxelMap


class Robot:
    def __init__(self, rid: int, cfg: SimConfig, gt: VoxelMap, start_pose,
                 log: list, counters: dict):
        self.rid = rid
        self.cfg = cfg
        self.gt = gt
        self.counters = counters
        self.log = log
        self.uses_cells = cfg.variant != "NoHgrid"

        self.map = VoxelMap(gt.origin, gt.resolution, gt.dims)
        self.sensor = SensorModel(cfg.sensor.fov_h_deg, cfg.sensor.fov_v_deg,
                                  cfg.sensor.max_range, cfg.sensor.ray_density)
        self.kin = RobotKinematics(np.array(start_pose[:3], dtype=float),
                                   yaw=float(start_pose[3]))
        self.params = PlannerParams(
            n_cp=cfg.planner.n_cp, w_con=cfg.planner.w_con, v_max=cfg.planner.v_max,
            yaw_rate_max=cfg.planner.yaw_rate_max, d_min=cfg.planner.d_min,
        )
        fr = cfg.frontier
        self.fis = FrontierManager(self.map, self.sensor, FrontierParams(
            min_voxels=fr.eps_f1, max_viewpoints=fr.n_vf, r_min=fr.r_min, r_max=fr.r_max,
            n_angles=fr.n_angles, n_radii=fr.n_radii, z_offsets=tuple(fr.z_offsets),
            coverage_frac=fr.coverage_frac, max_extent_m=cfg.sensor.max_range,
            v_max=cfg.planner.v_max, yaw_rate_max=cfg.planner.yaw_rate_max,
        ))
        if self.uses_cells:
            self.hgrid = Hgrid(self.map, cfg.hgrid.levels, cfg.hgrid.coarsest_cell_m)
            self.graph = CellGraph()
            self.graph.refresh(self.hgrid, ChangeSet(touched=list(self.hgrid.active)), self.map)
            related = self._cells_related
        else:
            self.hgrid = None
            self.graph = None
            related = None
        self.coord = Coordinator(rid, eps_att=cfg.net.eps_att,
                                 peer_stale_s=cfg.net.peer_stale_s,
                                 related_cells=related, log=log)

        self.chunks: dict = {}
        self.seq = 0
        self.boxes: list = []
        self.cp: list = []
        self.prev_cp_first: int | None = None
        self.vp_queue: list = []
        self.target: Viewpoint | None = None
        self.target_is_cell = False
        self.path_pts: list | None = None
        self.need_replan = True
        self.owned_sig = None
        self._path_tick = -(10 ** 9)
        self._progress_tick = 0
        self.trace: list = []  # (t, x, y, z, yaw, owned, cp_len)

    # -- identity helpers ------------------------------------------------------

    def _cells_related(self, a: int, b: int) -> bool:
        if a == b:
            return True
        hg = self.hgrid
        try:
            return a in hg.ancestors_of(b) or b in hg.ancestors_of(a)
        except ValueError:
            return False

    def position(self):
        return self.kin.position

    # -- sensing and map sharing -------------------------------------------------

    def sense(self, now: float) -> list:
        chunk, aabb = self.map.integrate_scan(
            self.kin.position, self.kin.yaw, self.sensor, self.gt,
            producer=self.rid, seq=self.seq,
        )
        out = []
        if len(chunk):
            self.chunks[chunk.chunk_id] = chunk
            self.seq += 1
            self.boxes.append(aabb)
            out.append(NetMessage("ChunkBroadcast", self.rid, chunk))
        return out

    def bookkeeping_message(self) -> NetMessage:
        return NetMessage("Bookkeeping", self.rid, Bookkeeping.from_ids(self.chunks.keys()))

    def handle(self, msg: NetMessage, now: float) -> list:
        out = []
        if msg.kind == "ChunkBroadcast":
            self._absorb_chunk(msg.payload)
        elif msg.kind == "ChunkRequestReply":
            for chunk in msg.payload:
                self._absorb_chunk(chunk)
        elif msg.kind == "Bookkeeping":
            missing = missing_chunks(self.chunks, msg.payload)
            if missing:
                out.append(NetMessage("ChunkRequestReply", self.rid, tuple(missing)))
        elif msg.kind == "StateBroadcast":
            before = self.coord.owned_cells()
            self.coord.on_state(msg.payload, now)
            if self.coord.owned_cells() != before:
                self.need_replan = True
        elif msg.kind == "InteractionRequest":
            resp = self.coord.on_request(msg.payload, now)
            if resp is not None:
                if resp.payload.ok:
                    self.need_replan = True
                out.append(resp)
        elif msg.kind == "InteractionResponse":
            before = self.coord.owned_cells()
            self.coord.on_response(msg.payload, now)
            if self.coord.owned_cells() != before:
                self.need_replan = True
        return out

    def _absorb_chunk(self, chunk) -> None:
        if chunk.chunk_id in self.chunks:
            return
        self.chunks[chunk.chunk_id] = chunk
        aabb = self.map.apply_chunk(chunk)
        if aabb is not None:
            self.boxes.append(aabb)

    # -- decomposition upkeep ------------------------------------------------------

    def update_world(self, now: float) -> None:
        boxes, self.boxes = self.boxes, []
        if self.uses_cells:
            changes = self.hgrid.update(
                self.map, boxes, self.kin.position,
                alpha_u=self.cfg.hgrid.alpha_u, delta_u=self.cfg.hgrid.delta_u,
            )
            if not changes.is_empty():
                self.graph.refresh(self.hgrid, changes, self.map)
                self._sync_claims(changes, now)
                self.need_replan = True
            self.fis.update(boxes, self.coord.owned_cells(), self.hgrid, self.graph)
        else:
            self.fis.update(boxes, hgrid=None)
            self._sync_cluster_claims(now)

    def _sync_claims(self, changes: ChangeSet, now: float) -> None:
        hg = self.hgrid
        for cid in changes.subdivided:
            if cid in self.coord.owned:
                repl = []
                for kid in hg.descendants_of(cid):
                    cell = hg.active[kid]
                    if cell.centroid is not None:
                        repl.append((kid, tuple(cell.centroid), cell.unknown_count))
                self.coord.translate_claim(cid, repl)
        for cid in changes.removed:
            self.coord.drop_claim(cid)
        for cid in sorted(self.coord.owned):
            cell = hg.active.get(cid)
            if cell is not None:
                if cell.centroid is not None:
                    self.coord.refresh_claim(cid, tuple(cell.centroid), cell.unknown_count)
                cell.owner = self.rid
            else:
                # keep claims that are merely coarser/finer than our grid view
                if not hg.descendants_of(cid) and not any(
                    a in hg.active for a in self._safe_ancestors(cid)
                ):
                    self.coord.drop_claim(cid)

    def _safe_ancestors(self, cid: int) -> list:
        try:
            return self.hgrid.ancestors_of(cid)
        except ValueError:
            return []

    def _sync_cluster_claims(self, now: float) -> None:
        """NoHgrid: claims keyed by the centroid voxel of each cluster."""
        keys = {}
        for c in sorted(self.fis.clusters.values(), key=lambda c: c.cluster_id):
            key = self.map.linear(self.map.world_to_voxel(c.centroid))
            keys[key] = c
        self._cluster_by_key = keys
        known_claims = set()
        for pid in sorted(self.coord.peers):
            known_claims |= set(self.coord.peers[pid].owned.keys())
        for key in sorted(keys):
            c = keys[key]
            if key not in self.coord.owned and key not in known_claims:
                self.coord.claim(key, tuple(c.centroid), len(c.voxels), now)
                self.need_replan = True
        for key in sorted(self.coord.owned_cells()):
            if key not in keys:
                # cluster gone (explored or reshaped): drop the stale claim
                self.coord.drop_claim(key)
                self.need_replan = True

    # -- coordination -----------------------------------------------------------------

    def coordination_tick(self, now: float) -> list:
        self.coord.poll_timeout(now)
        out = []
        if self.uses_cells:
            self._greedy_claim(now)
        partition = self._cell_partition if self.uses_cells else self._cluster_partition
        if self.cfg.variant == "H_BFS":
            partition = self._bfs_partition
        msg = self.coord.start_request(now, self.kin.position, partition)
        if msg is not None:
            out.append(msg)
        return out

    def _greedy_claim(self, now: float) -> None:
        claimed = set(self.coord.owned_cells())
        for pid in sorted(self.coord.peers):
            claimed |= set(self.coord.peers[pid].owned.keys())
        best = None
        for cid in sorted(self.hgrid.active):
            if cid in claimed or any(r in claimed for r in self._safe_ancestors(cid)):
                continue
            cell = self.hgrid.active[cid]
            if cell.centroid is None or cell.unknown_count == 0:
                continue
            d = float(np.linalg.norm(cell.centroid - self.kin.position))
            if best is None or d < best[0]:
                best = (d, cid, cell)
        if best is not None:
            _, cid, cell = best
            self.coord.claim(cid, tuple(cell.centroid), cell.unknown_count, now)
            self.need_replan = True

    def _cost_providers(self, union, my_pos, peer_pos):
        cen = {cid: np.asarray(c, float) for cid, c, d in union}
        robot_costs = self.graph.robot_costs(self.map, my_pos)

        def rc(ri, cid):
            if ri == 0:
                c = robot_costs.get(cid, math.inf)
                if math.isfinite(c):
                    return c
                return estimate_path_len(self.map, my_pos, cen[cid])
            return estimate_path_len(self.map, np.asarray(peer_pos, float), cen[cid])

        def cc(a, b):
            if a in self.graph.pos and b in self.graph.pos:
                c = self.graph.approx_cost(a, b)
                if math.isfinite(c):
                    return c
            return estimate_path_len(self.map, cen[a], cen[b])

        return rc, cc

    def _cell_partition(self, union, my_pos, peer_pos, peer_id):
        self.counters["cvrp_partition"] = self.counters.get("cvrp_partition", 0) + 1
        cells = [(cid, dem) for cid, cen, dem in union]
        rc, cc = self._cost_providers(union, my_pos, peer_pos)
        beta = self._beta_con()
        prev = {self.rid: self.prev_cp_first} if self.prev_cp_first is not None else None
        matrix, demands = build_avrp_matrix(cells, [self.rid, peer_id], rc, cc,
                                            prev_first=prev, beta_con=beta)
        ratio = self.cfg.routing.alpha_rho if self.cfg.variant == "Full" else 1.0
        mine_now = [i for i in matrix.task_nodes
                    if matrix.roles[i].ref in self.coord.owned]
        theirs_now = [i for i in matrix.task_nodes
                      if matrix.roles[i].ref not in self.coord.owned]
        sol = solve_cvrp(matrix, demands, capacity_ratio=ratio,
                         restarts=self.cfg.routing.restarts,
                         ils_iters=self.cfg.routing.ils_iters,
                         warm_start=[mine_now, theirs_now])
        refs = sol.task_refs(matrix)
        from .routing import _Reduced
        warm_cost = _Reduced(matrix, demands, ratio).objective([mine_now, theirs_now])
        self.log.append({
            "t": -1.0, "robot": self.rid, "kind": "partition_cost",
            "new": sol.total_cost, "old": warm_cost,
        })
        return refs[0], refs[1]

    def _bfs_partition(self, union, my_pos, peer_pos, peer_id):
        """Two-seed alternating BFS over cell adjacency, balanced by count."""
        self.counters["bfs_partition"] = self.counters.get("bfs_partition", 0) + 1
        cen = {cid: np.asarray(c, float) for cid, c, d in union}
        ids = sorted(cen.keys())
        link_dist = self.cfg.hgrid.coarsest_cell_m * 1.25
        adj = {a: [b for b in ids if b != a
                   and float(np.linalg.norm(cen[a] - cen[b])) <= link_dist]
               for a in ids}
        seed_me = min(ids, key=lambda c: (float(np.linalg.norm(cen[c] - my_pos)), c))
        seed_peer = min(ids, key=lambda c: (float(np.linalg.norm(cen[c] - np.asarray(peer_pos, float))), c))
        sides = {0: [seed_me], 1: [seed_peer] if seed_peer != seed_me else []}
        taken = {seed_me: 0}
        if seed_peer != seed_me:
            taken[seed_peer] = 1
        frontier = {0: list(sides[0]), 1: list(sides[1])}
        turn = 0
        while len(taken) < len(ids):
            progressed = False
            for side in (turn, 1 - turn):
                cands = []
                for f in frontier[side]:
                    for nb in adj[f]:
                        if nb not in taken:
                            cands.append(nb)
                if cands:
                    pick = min(cands)
                    taken[pick] = side
                    sides[side].append(pick)
                    frontier[side].append(pick)
                    progressed = True
                    break
            turn = 1 - turn
            if not progressed:
                rest = [c for c in ids if c not in taken]
                for c in rest:
                    dm = float(np.linalg.norm(cen[c] - my_pos))
                    dp = float(np.linalg.norm(cen[c] - np.asarray(peer_pos, float)))
                    side = 0 if dm <= dp else 1
                    taken[c] = side
                    sides[side].append(c)
                break
        return sides[0], sides[1]

    def _cluster_partition(self, union, my_pos, peer_pos, peer_id):
        """NoHgrid: 2-vehicle tour partitioning of frontier clusters."""
        self.counters["cluster_partition"] = self.counters.get("cluster_partition", 0) + 1
        cells = [(cid, dem) for cid, cen, dem in union]
        cen = {cid: np.asarray(c, float) for cid, c, d in union}

        def rc(ri, cid):
            origin = my_pos if ri == 0 else peer_pos
            return estimate_path_len(self.map, np.asarray(origin, float), cen[cid])

        def cc(a, b):
            return estimate_path_len(self.map, cen[a], cen[b])

        matrix, demands = build_avrp_matrix(cells, [self.rid, peer_id], rc, cc)
        sol = solve_cvrp(matrix, demands, capacity_ratio=1.0,
                         restarts=self.cfg.routing.restarts,
                         ils_iters=self.cfg.routing.ils_iters)
        refs = sol.task_refs(matrix)
        return refs[0], refs[1]

    def _beta_con(self) -> float:
        weights = [w for nbrs in self.graph.adj.values() for w in nbrs.values()]
        if not weights:
            return 0.0
        return self.cfg.routing.beta_con_frac * float(np.mean(weights))

    # -- planning ------------------------------------------------------------------

    def owned_active_cells(self) -> list:
        self.counters["cell_owner_reads"] = self.counters.get("cell_owner_reads", 0) + 1
        out = []
        for cid in sorted(self.coord.owned):
            cell = self.hgrid.active.get(cid)
            if cell is not None and cell.unknown_count > 0 and cell.centroid is not None:
                out.append((cid, cell.unknown_count))
        return out

    def replan(self, now: float) -> None:
        self.need_replan = False
        self.vp_queue = []
        self.target = None
        self.target_is_cell = False
        self.path_pts = None
        if self.uses_cells:
            self._replan_cells(now)
        else:
            self._replan_clusters(now)

    def _replan_cells(self, now: float) -> None:
        owned = self.owned_active_cells()
        if owned:
            self.counters["cp_solve"] = self.counters.get("cp_solve", 0) + 1
            self.cp = plan_coverage_path(
                self.rid, self.kin.position, owned, self.graph, self.map,
                prev_first=self.prev_cp_first, beta_con=self._beta_con(),
            )
            if self.cp:
                self.prev_cp_first = self.cp[0]
        else:
            self.cp = []
        window = [c for c in self.cp[: self.params.n_cp]]
        clusters = []
        for c in self.fis.active_clusters():
            if c.anchor_cell in window and c.viewpoints:
                clusters.append(c)
        if not clusters:
            self._fallback_target(now)
            return
        end_pos = None
        if len(self.cp) > self.params.n_cp:
            nxt = self.hgrid.active.get(self.cp[self.params.n_cp])
            if nxt is not None and nxt.centroid is not None:
                end_pos = np.asarray(nxt.centroid, float)
        local = [LocalCluster(c.cluster_id, tuple(c.viewpoints[0].position),
                              c.viewpoints[0].yaw) for c in clusters]
        order = plan_local_path(self.kin.position, self.kin.yaw, self.kin.velocity,
                                local, self.fis.pair_cost, end_pos, self.map, self.params)
        by_id = {c.cluster_id: c for c in clusters}
        sets = [by_id[cid].viewpoints for cid in order]
        picks = refine_viewpoints(self.kin.position, self.kin.yaw, sets, end_pos, self.params)
        self.vp_queue = picks
        self._advance_target()

    def _replan_clusters(self, now: float) -> None:
        keys = getattr(self, "_cluster_by_key", {})
        owned = [(k, keys[k]) for k in sorted(self.coord.owned_cells()) if k in keys]
        owned = [(k, c) for k, c in owned if c.viewpoints or c.in_active_area]
        clusters = [(k, c) for k, c in owned if c.viewpoints]
        if not clusters:
            self._fallback_target(now)
            return
        self.counters["cluster_tour_solve"] = self.counters.get("cluster_tour_solve", 0) + 1
        ids = [k for k, _ in clusters]
        pos = {k: np.asarray(c.viewpoints[0].position, float) for k, c in clusters}
        yaws = {k: c.viewpoints[0].yaw for k, c in clusters}
        rc = {k: estimate_path_len(self.map, self.kin.position, pos[k]) / self.params.v_max
              for k in ids}
        matrix = build_open_tsp_matrix(
            ids, rc,
            lambda a, b: float(np.linalg.norm(pos[a] - pos[b])) / self.params.v_max,
        )
        seq = solve_open_tsp(matrix)
        tour = [matrix.roles[i].ref for i in seq if matrix.roles[i].kind == "cluster"]
        window = tour[: self.params.n_cp]
        end_pos = pos[tour[self.params.n_cp]] if len(tour) > self.params.n_cp else None
        by_key = dict(clusters)
        sets = [by_key[k].viewpoints for k in window]
        picks = refine_viewpoints(self.kin.position, self.kin.yaw, sets, end_pos, self.params)
        self.cp = tour
        self.vp_queue = picks
        self._advance_target()

    def _fallback_target(self, now: float) -> None:
        """No clusters in the window: head for the first coverage cell, or
        adopt an orphan cluster so residual unknown space still gets swept."""
        if self.uses_cells and self.cp:
            cell = self.hgrid.active.get(self.cp[0])
            if cell is not None and cell.centroid is not None:
                yaw = math.atan2(cell.centroid[1] - self.kin.position[1],
                                 cell.centroid[0] - self.kin.position[0])
                self.target = Viewpoint(np.asarray(cell.centroid, float), yaw, 0)
                self.target_is_cell = True
                return
        orphans = [
            c for c in sorted(self.fis.clusters.values(), key=lambda c: c.cluster_id)
            if not c.in_active_area and c.viewpoints
        ]
        if self.uses_cells:
            claimed = set(self.coord.owned_cells())
            for pid in sorted(self.coord.peers):
                claimed |= set(self.coord.peers[pid].owned.keys())
            orphans = [c for c in orphans if c.anchor_cell is None or c.anchor_cell not in claimed]
        if orphans:
            best = min(orphans, key=lambda c: (
                float(np.linalg.norm(c.viewpoints[0].position - self.kin.position)),
                c.cluster_id,
            ))
            self.target = best.viewpoints[0]
            self.target_is_cell = False

    def _advance_target(self) -> None:
        self.path_pts = None
        self._path_tick = -(10 ** 9)
        if self.vp_queue:
            self.target = self.vp_queue.pop(0)
            self.target_is_cell = False
        else:
            self.target = None

    # -- motion ------------------------------------------------------------------

    def motion_tick(self, now: float, tick: int, peer_positions: dict, dt: float) -> None:
        if self.target is None:
            if self.need_replan:
                return
            self.need_replan = True
            return
        if self.path_pts and not self._path_still_free(self.path_pts):
            self.path_pts = None
        if self.path_pts is None and tick - self._path_tick >= 2:
            self._path_tick = tick
            path = self.map.search_path(self.kin.position, self.target.position,
                                        allow_unknown=True)
            if path is None:
                self.need_replan = True
                self.target = None
                return
            self.path_pts = self._free_prefix(path.points)
        status, rest = step_motion(self.kin, self.path_pts or [], self.target.yaw,
                                   peer_positions, self.rid, dt, self.params)
        self.path_pts = rest
        if status == "moving":
            self._progress_tick = tick
        elif status == "arrived":
            near = float(np.linalg.norm(self.kin.position - self.target.position)) <= 0.3
            if near:
                if self.vp_queue:
                    self._advance_target()
                else:
                    self.need_replan = True
                    self.target = None
            elif tick - self._progress_tick > int(4.0 / dt):
                # stuck short of the target with no map progress: give up on it
                self.need_replan = True
                self.target = None
            else:
                # the free prefix ended short: wait for sensing to open space
                self.path_pts = None

    def _path_still_free(self, pts: list) -> bool:
        grid = self.map.grid
        for p in pts[:40]:
            if grid[self.map.world_to_voxel(p)] != FREE:
                return False
        return True

    def _free_prefix(self, pts: list) -> list:
        out = []
        for p in pts[1:]:  # skip the robot's own voxel center
            if self.map.grid[self.map.world_to_voxel(p)] != FREE:
                break
            out.append(np.asarray(p, float))
        return out

    # -- completion ------------------------------------------------------------------

    def is_done(self) -> bool:
        if self.fis.clusters:
            return False
        if self.uses_cells:
            for cid in self.coord.owned_cells():
                cell = self.hgrid.active.get(cid)
                if cell is not None and cell.unknown_count > 0:
                    return False
        return True

    def reachable_unknown_count(self) -> int:
        from scipy import ndimage
        traversable = self.map.grid != 2
        labels, _ = ndimage.label(traversable, structure=np.ones((3, 3, 3), bool))
        rv = self.map.world_to_voxel(self.kin.position)
        if not self.map.in_bounds_voxel(rv) or labels[rv] == 0:
            return 0
        return int(np.count_nonzero((self.map.grid == UNKNOWN) & (labels == labels[rv])))

    def record_trace(self, now: float) -> None:
        self.trace.append((
            round(now, 6),
            float(self.kin.position[0]), float(self.kin.position[1]),
            float(self.kin.position[2]), float(self.kin.yaw),
            len(self.coord.owned_cells()), len(self.cp),
        ))
