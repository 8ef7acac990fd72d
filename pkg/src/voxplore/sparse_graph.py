"""Sparse cost graph embedded in the hgrid.

One node per active cell (at the cell's unknown-centroid), edges between
spatially adjacent cells weighted by the voxel-level path length searched
inside the union of the two cells' extents.  Pairwise cell costs are then
approximated by Dijkstra over this graph instead of O(n^2) full-map searches.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .hgrid import ChangeSet, Hgrid
from .voxel_map import Aabb, VoxelMap


def _extents_adjacent(lo1, hi1, lo2, hi2) -> bool:
    """Face- or edge-sharing test for half-open voxel ranges."""
    abut = 0
    for ax in range(3):
        if lo1[ax] < hi2[ax] and lo2[ax] < hi1[ax]:
            continue  # proper overlap on this axis
        if lo1[ax] == hi2[ax] or lo2[ax] == hi1[ax]:
            abut += 1
        else:
            return False  # positive gap
    return 1 <= abut <= 2


class CellGraph:
    def __init__(self):
        self.pos: dict[int, np.ndarray] = {}
        self.extent: dict[int, tuple] = {}  # cell id -> (vox_lo, vox_hi)
        self.adj: dict[int, dict[int, float]] = {}

    def node_ids(self):
        return sorted(self.pos.keys())

    def _drop_node(self, cid: int) -> None:
        self.pos.pop(cid, None)
        self.extent.pop(cid, None)
        for nb in self.adj.pop(cid, {}):
            self.adj.get(nb, {}).pop(cid, None)

    def refresh(self, hgrid: Hgrid, changes: ChangeSet, vmap: VoxelMap) -> None:
        """Apply an hgrid change set: drop dead nodes, re-link touched cells.

        For every touched or new cell the voxel path to each adjacent active
        cell is recomputed inside the union of the two extents; a blocked
        local corridor removes the edge even when a long detour exists.
        """
        for cid in changes.subdivided + changes.removed:
            self._drop_node(cid)
        touched = [cid for cid in changes.touched if cid in hgrid.active]
        for cid in touched:
            cell = hgrid.active[cid]
            self.extent[cid] = (cell.vox_lo, cell.vox_hi)
            if cell.centroid is not None:
                self.pos[cid] = np.asarray(cell.centroid, dtype=float)
            else:
                lo, hi = cell.vox_lo, cell.vox_hi
                center = (np.asarray(lo, float) + np.asarray(hi, float)) * 0.5
                self.pos[cid] = vmap.origin + center * vmap.resolution
            self.adj.setdefault(cid, {})
        # drop any stale nodes not active anymore (defensive sync)
        for cid in list(self.pos.keys()):
            if cid not in hgrid.active:
                self._drop_node(cid)

        done = set()
        for cid in touched:
            lo1, hi1 = self.extent[cid]
            for other in self.node_ids():
                if other == cid or (min(cid, other), max(cid, other)) in done:
                    continue
                lo2, hi2 = self.extent[other]
                if not _extents_adjacent(lo1, hi1, lo2, hi2):
                    continue
                done.add((min(cid, other), max(cid, other)))
                self._relink(cid, other, vmap)

    def _relink(self, a: int, b: int, vmap: VoxelMap) -> None:
        lo1, hi1 = self.extent[a]
        lo2, hi2 = self.extent[b]
        box = Aabb(
            tuple(min(lo1[ax], lo2[ax]) for ax in range(3)),
            tuple(max(hi1[ax], hi2[ax]) - 1 for ax in range(3)),
        )
        path = vmap.search_path(self.pos[a], self.pos[b], allow_unknown=True, box=box)
        if path is None:
            self.adj[a].pop(b, None)
            self.adj[b].pop(a, None)
        else:
            self.adj[a][b] = path.length_m
            self.adj[b][a] = path.length_m

    # -- queries ---------------------------------------------------------------

    def approx_cost(self, a: int, b: int) -> float:
        """Graph-shortest cost between two cells; inf when disconnected."""
        if a not in self.pos or b not in self.pos:
            raise ValueError(f"unknown cell id {a if a not in self.pos else b}")
        if a == b:
            return 0.0
        dist = self._dijkstra(a, stop_at=b)
        return dist.get(b, math.inf)

    def _dijkstra(self, src: int, stop_at: int | None = None) -> dict:
        dist = {src: 0.0}
        heap = [(0.0, src)]
        while heap:
            d, cur = heapq.heappop(heap)
            if d > dist.get(cur, math.inf):
                continue
            if stop_at is not None and cur == stop_at:
                return dist
            for nb, w in sorted(self.adj.get(cur, {}).items()):
                nd = d + w
                if nd < dist.get(nb, math.inf) - 1e-12:
                    dist[nb] = nd
                    heapq.heappush(heap, (nd, nb))
        return dist

    def _nearest_connected_cell(self, vmap: VoxelMap, robot_pos):
        """Closest cell (straight-line, then id) with a finite voxel path."""
        robot_pos = np.asarray(robot_pos, dtype=float)
        order = sorted(
            self.pos.keys(),
            key=lambda cid: (float(np.linalg.norm(self.pos[cid] - robot_pos)), cid),
        )
        for cid in order[:8]:
            path = vmap.search_path(robot_pos, self.pos[cid], allow_unknown=True)
            if path is not None:
                return cid, path.length_m
        return None, math.inf

    def robot_to_cell_cost(self, vmap: VoxelMap, robot_pos, target: int) -> float:
        """Voxel path to the nearest cell plus graph path onward to `target`."""
        if target not in self.pos:
            raise ValueError(f"unknown cell id {target}")
        nearest, direct = self._nearest_connected_cell(vmap, robot_pos)
        if nearest is None:
            return math.inf
        if nearest == target:
            return direct
        return direct + self.approx_cost(nearest, target)

    def robot_costs(self, vmap: VoxelMap, robot_pos) -> dict[int, float]:
        """Batched robot-to-cell costs for every node (single graph sweep)."""
        nearest, direct = self._nearest_connected_cell(vmap, robot_pos)
        if nearest is None:
            return {cid: math.inf for cid in self.pos}
        dist = self._dijkstra(nearest)
        return {cid: direct + dist.get(cid, math.inf) for cid in self.pos}

    def dump_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("cell_a,cell_b,weight\n")
            for a in self.node_ids():
                for b, w in sorted(self.adj.get(a, {}).items()):
                    if a < b:
                        fh.write(f"{a},{b},{w:.6f}\n")
