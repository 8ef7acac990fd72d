"""Incremental frontier information structures.

Frontier voxels (free, 6-adjacent to unknown) are grouped into clusters with
centroid, bounding box, sampled viewpoints, and cached pairwise travel-time
lower bounds.  Updates are incremental over changed map regions: stale
clusters are dropped, new ones flood-filled, and any existing cluster touched
by a growing component is absorbed so the resulting voxel partition equals a
batch re-clustering of the final map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .voxel_map import FREE, OCCUPIED, UNKNOWN, Aabb, SensorModel, VoxelMap, frontier_mask

_NEIGHBORS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def t_lb(q1_yaw: float, q2_yaw: float, path_len: float, v_max: float,
         yaw_rate_max: float) -> float:
    """Travel-time lower bound: translation versus wrapped yaw rotation."""
    if v_max <= 0 or yaw_rate_max <= 0:
        raise ValueError("dynamic limits must be positive")
    dyaw = abs(q1_yaw - q2_yaw)
    dyaw = min(dyaw, 2.0 * math.pi - dyaw)
    return max(path_len / v_max, dyaw / yaw_rate_max)


@dataclass
class Viewpoint:
    position: np.ndarray
    yaw: float  # in (-pi, pi]
    coverage: int


@dataclass
class FrontierCluster:
    cluster_id: int
    voxels: np.ndarray  # sorted linear indices
    aabb: Aabb
    centroid: np.ndarray
    viewpoints: list = field(default_factory=list)
    in_active_area: bool = False
    anchor_cell: int | None = None


@dataclass
class FrontierParams:
    min_voxels: int = 1          # clusters smaller than this are discarded
    max_viewpoints: int = 3
    r_min: float = 1.0
    r_max: float = 2.5
    n_angles: int = 12
    n_radii: int = 3
    z_offsets: tuple = (0.0,)
    coverage_frac: float = 0.3
    coverage_sample: int = 60    # visibility checked on at most this many voxels
    max_extent_m: float = 4.5    # split clusters wider than one sensor footprint
    v_max: float = 1.5
    yaw_rate_max: float = 0.9


def split_cluster(coords: np.ndarray, resolution: float, max_extent_m: float,
                  min_voxels: int) -> list:
    """Recursively bisect along the longest box axis at the centroid.

    Returns a partition of `coords` ((n,3) voxel array) into pieces whose
    AABB diagonals fit `max_extent_m`; pieces below `min_voxels` are merged
    into their nearest sibling.
    """

    def diag(c):
        span = c.max(axis=0) - c.min(axis=0)
        return float(np.linalg.norm(span)) * resolution

    def bisect(c):
        if len(c) <= 1 or diag(c) <= max_extent_m:
            return [c]
        span = c.max(axis=0) - c.min(axis=0)
        ax = int(np.argmax(span))
        center = c[:, ax].mean()
        left = c[c[:, ax] < center]
        right = c[c[:, ax] >= center]
        if len(left) == 0 or len(right) == 0:
            return [c]
        return bisect(left) + bisect(right)

    pieces = bisect(coords)
    if len(pieces) <= 1:
        return pieces
    big = [p for p in pieces if len(p) >= min_voxels]
    small = [p for p in pieces if len(p) < min_voxels]
    if not big:
        return pieces  # nothing to merge into; let the caller drop them
    for p in small:
        c = p.mean(axis=0)
        dists = [float(np.linalg.norm(b.mean(axis=0) - c)) for b in big]
        k = int(np.argmin(dists))
        big[k] = np.vstack([big[k], p])
    return big


class FrontierManager:
    """Per-robot incremental frontier bookkeeping."""

    def __init__(self, vmap: VoxelMap, sensor: SensorModel, params: FrontierParams | None = None):
        self.vmap = vmap
        self.sensor = sensor
        self.params = params or FrontierParams()
        self.clusters: dict[int, FrontierCluster] = {}
        self.voxel_owner: dict[int, int] = {}
        self.cost_cache: dict[tuple, float] = {}
        self.next_id = 0

    # -- queries -----------------------------------------------------------

    def active_clusters(self) -> list:
        return [c for _, c in sorted(self.clusters.items()) if c.in_active_area]

    def dormant_free(self) -> bool:
        return not self.clusters

    def total_frontier_voxels(self) -> int:
        return sum(len(c.voxels) for c in self.clusters.values())

    def pair_cost(self, a: int, b: int) -> float:
        if a == b:
            return 0.0
        return self.cost_cache.get((min(a, b), max(a, b)), math.inf)

    # -- update pass ---------------------------------------------------------

    def update(self, boxes: list, owned_cells=frozenset(), hgrid=None, graph=None) -> None:
        """Alg.-style incremental refresh over updated map regions."""
        if boxes:
            self._remove_stale(boxes)
            self._detect_new(boxes)
        self.refresh_membership(owned_cells, hgrid, graph)

    def _erase(self, cid: int) -> None:
        cluster = self.clusters.pop(cid)
        for v in cluster.voxels:
            self.voxel_owner.pop(int(v), None)
        for key in [k for k in self.cost_cache if cid in k]:
            del self.cost_cache[key]

    def _remove_stale(self, boxes: list) -> None:
        mask = frontier_mask(self.vmap.grid)
        flat = mask.ravel()
        inflated = [b.inflate(1) for b in boxes]
        for cid in sorted(self.clusters):
            cluster = self.clusters[cid]
            if not any(cluster.aabb.overlaps(b) for b in inflated):
                continue  # AABB prescreen: untouched by this update
            if not bool(flat[cluster.voxels].all()):
                self._erase(cid)
        self._mask_cache = mask

    def _detect_new(self, boxes: list) -> None:
        vmap = self.vmap
        mask = getattr(self, "_mask_cache", None)
        if mask is None:
            mask = frontier_mask(vmap.grid)
        flat = mask.ravel()
        nx, ny, nz = vmap.dims

        seeds = []
        for b in boxes:
            bb = b.inflate(1)
            lo = tuple(max(0, c) for c in bb.lo)
            hi = tuple(min(d - 1, c) for d, c in zip(vmap.dims, bb.hi))
            if any(l > h for l, h in zip(lo, hi)):
                continue
            sub = mask[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
            for c in np.argwhere(sub):
                v = (int(c[0]) + lo[0], int(c[1]) + lo[1], int(c[2]) + lo[2])
                lin = (v[0] * ny + v[1]) * nz + v[2]
                if lin not in self.voxel_owner:
                    seeds.append(lin)
        seeds = sorted(set(seeds))
        if not seeds:
            self._mask_cache = None
            return

        visited = set()
        components = []
        for seed in seeds:
            if seed in visited:
                continue
            comp = []
            stack = [seed]
            visited.add(seed)
            while stack:
                lin = stack.pop()
                comp.append(lin)
                x, y, z = lin // (ny * nz), (lin // nz) % ny, lin % nz
                for dx, dy, dz in _NEIGHBORS_26:
                    xx, yy, zz = x + dx, y + dy, z + dz
                    if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz):
                        continue
                    nlin = (xx * ny + yy) * nz + zz
                    if nlin in visited or not flat[nlin]:
                        continue
                    owner = self.voxel_owner.get(nlin)
                    if owner is not None:
                        # absorb the whole touched cluster and keep growing
                        absorbed = self.clusters[owner].voxels
                        self._erase(owner)
                        for av in absorbed:
                            av = int(av)
                            if av not in visited:
                                visited.add(av)
                                stack.append(av)
                        continue
                    visited.add(nlin)
                    stack.append(nlin)
            components.append(sorted(comp))
        self._mask_cache = None

        for comp in components:
            if len(comp) < self.params.min_voxels:
                continue  # discarded as too small; voxels stay unclustered
            arr = np.array(comp, dtype=np.int64)
            coords = np.stack([arr // (ny * nz), (arr // nz) % ny, arr % nz], axis=1)
            for piece in split_cluster(coords, vmap.resolution,
                                       self.params.max_extent_m, self.params.min_voxels):
                if len(piece) < self.params.min_voxels:
                    continue
                self._add_cluster(piece)

    def _add_cluster(self, coords: np.ndarray) -> None:
        vmap = self.vmap
        ny, nz = vmap.dims[1], vmap.dims[2]
        lins = np.sort((coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2])
        centroid = vmap.origin + (coords.mean(axis=0) + 0.5) * vmap.resolution
        cid = self.next_id
        self.next_id += 1
        cluster = FrontierCluster(
            cluster_id=cid,
            voxels=lins,
            aabb=Aabb.of_voxels(coords),
            centroid=centroid,
        )
        self.clusters[cid] = cluster
        for v in lins:
            self.voxel_owner[int(v)] = cid

    # -- membership, viewpoints, costs ---------------------------------------

    def _anchor_cell(self, cluster: FrontierCluster, hgrid) -> int | None:
        if hgrid is None:
            return None
        cvox = self.vmap.world_to_voxel(cluster.centroid)
        cid = hgrid.cell_containing_voxel(cvox)
        if cid is not None:
            return cid
        # fall back to the unknown side of the frontier: the first unknown
        # 6-neighbor (sorted order) that lies in an active cell
        ny, nz = self.vmap.dims[1], self.vmap.dims[2]
        grid = self.vmap.grid
        for lin in cluster.voxels:
            lin = int(lin)
            x, y, z = lin // (ny * nz), (lin // nz) % ny, lin % nz
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                xx, yy, zz = x + dx, y + dy, z + dz
                if not (0 <= xx < self.vmap.dims[0] and 0 <= yy < ny and 0 <= zz < nz):
                    continue
                if grid[xx, yy, zz] == UNKNOWN:
                    cell = hgrid.cell_containing_voxel((xx, yy, zz))
                    if cell is not None:
                        return cell
        return None

    def refresh_membership(self, owned_cells=frozenset(), hgrid=None, graph=None) -> None:
        """Re-split clusters into active/standby lists and refresh F_a data."""
        changed_active = []
        for cid in sorted(self.clusters):
            cluster = self.clusters[cid]
            cluster.anchor_cell = self._anchor_cell(cluster, hgrid)
            active = (hgrid is None) or (
                cluster.anchor_cell is not None and cluster.anchor_cell in owned_cells
            )
            if active and not cluster.viewpoints:
                cluster.viewpoints = self.sample_viewpoints(cluster)
                changed_active.append(cid)
            cluster.in_active_area = active
        self._refresh_cost_cache(changed_active, graph)

    def _refresh_cost_cache(self, changed: list, graph) -> None:
        active = [c for c in self.active_clusters() if c.viewpoints]
        active_ids = {c.cluster_id for c in active}
        for key in [k for k in self.cost_cache if k[0] not in active_ids or k[1] not in active_ids]:
            del self.cost_cache[key]
        for cid in changed:
            a = self.clusters.get(cid)
            if a is None or not a.viewpoints:
                continue
            for b in active:
                if b.cluster_id == cid:
                    continue
                key = (min(cid, b.cluster_id), max(cid, b.cluster_id))
                self.cost_cache[key] = self._viewpoint_cost(a, b, graph)

    def _viewpoint_cost(self, a: FrontierCluster, b: FrontierCluster, graph) -> float:
        va, vb = a.viewpoints[0], b.viewpoints[0]
        path_len = None
        if (
            graph is not None
            and a.anchor_cell is not None
            and b.anchor_cell is not None
            and a.anchor_cell != b.anchor_cell
            and a.anchor_cell in graph.pos
            and b.anchor_cell in graph.pos
        ):
            c = graph.approx_cost(a.anchor_cell, b.anchor_cell)
            if math.isfinite(c):
                path_len = c
        if path_len is None:
            box = Aabb.of_voxels(np.array([
                self.vmap.world_to_voxel(va.position),
                self.vmap.world_to_voxel(vb.position),
            ])).inflate(10)
            path = self.vmap.search_path(va.position, vb.position, allow_unknown=True, box=box)
            if path is not None:
                path_len = path.length_m
            else:
                path_len = float(np.linalg.norm(va.position - vb.position))
        return t_lb(va.yaw, vb.yaw, path_len, self.params.v_max, self.params.yaw_rate_max)

    def sample_viewpoints(self, cluster: FrontierCluster) -> list:
        """Cylindrical-shell candidates around the centroid, ranked by coverage."""
        p = self.params
        vmap = self.vmap
        centroid = cluster.centroid
        cands = []
        for ri in range(p.n_radii):
            r = p.r_min + (p.r_max - p.r_min) * ri / max(1, p.n_radii - 1)
            for k in range(p.n_angles):
                ang = 2.0 * math.pi * k / p.n_angles
                for dz in p.z_offsets:
                    pos = centroid + np.array([r * math.cos(ang), r * math.sin(ang), dz])
                    vox = vmap.world_to_voxel(pos)
                    if not vmap.in_bounds_voxel(vox) or vmap.grid[vox] != FREE:
                        continue
                    yaw = math.atan2(centroid[1] - pos[1], centroid[0] - pos[0])
                    cands.append((pos, yaw))
        if not cands:
            return []

        ny, nz = vmap.dims[1], vmap.dims[2]
        vox = cluster.voxels
        if len(vox) > p.coverage_sample:
            stride = len(vox) // p.coverage_sample + 1
            vox = vox[::stride]
        coords = np.stack([vox // (ny * nz), (vox // nz) % ny, vox % nz], axis=1)
        targets = vmap.origin + (coords + 0.5) * vmap.resolution  # (V, 3)

        scored = []
        scale = len(cluster.voxels) / len(vox)
        for idx, (pos, yaw) in enumerate(cands):
            visible = self._count_visible(pos, yaw, targets)
            coverage = int(round(visible * scale))
            scored.append((coverage, idx, pos, yaw))
        threshold = max(1, int(math.ceil(p.coverage_frac * len(cluster.voxels))))
        qualified = [s for s in scored if s[0] >= threshold]
        if not qualified:
            # keep the single best nonzero candidate so the cluster stays workable
            best = max(scored, key=lambda s: (s[0], -s[1]))
            if best[0] < 1:
                return []
            qualified = [best]
        qualified.sort(key=lambda s: (-s[0], s[1]))
        return [Viewpoint(pos, yaw, cov) for cov, _, pos, yaw in qualified[: p.max_viewpoints]]

    def _count_visible(self, pos: np.ndarray, yaw: float, targets: np.ndarray) -> int:
        sensor = self.sensor
        vmap = self.vmap
        delta = targets - pos[None, :]
        dist = np.linalg.norm(delta, axis=1)
        in_range = dist <= sensor.max_range
        az = np.arctan2(delta[:, 1], delta[:, 0]) - yaw
        az = (az + math.pi) % (2 * math.pi) - math.pi
        horiz = np.linalg.norm(delta[:, :2], axis=1)
        el = np.arctan2(delta[:, 2], np.maximum(horiz, 1e-9))
        in_fov = (
            (np.abs(az) <= math.radians(sensor.fov_h_deg) / 2)
            & (np.abs(el) <= math.radians(sensor.fov_v_deg) / 2)
        )
        cand = in_range & in_fov & (dist > 1e-9)
        if not cand.any():
            return 0
        tgt = targets[cand]
        d = dist[cand]
        steps = max(2, int(sensor.max_range / vmap.resolution))
        ts = np.linspace(0.05, 0.95, steps)  # strictly between endpoints
        pts = pos[None, None, :] + (tgt - pos[None, :])[:, None, :] * ts[None, :, None]
        vox = np.floor((pts - vmap.origin) / vmap.resolution).astype(np.int64)
        nx, ny, nz = vmap.dims
        np.clip(vox[..., 0], 0, nx - 1, out=vox[..., 0])
        np.clip(vox[..., 1], 0, ny - 1, out=vox[..., 1])
        np.clip(vox[..., 2], 0, nz - 1, out=vox[..., 2])
        lin = (vox[..., 0] * ny + vox[..., 1]) * nz + vox[..., 2]
        blocked = (vmap.states[lin] == OCCUPIED).any(axis=1)
        return int((~blocked).sum())
