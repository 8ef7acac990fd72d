"""Hierarchical grid decomposition of unknown space into task cells.

Cells of all levels live in one flat array addressed by a closed-form index;
the active list holds the current leaves of the decomposition: cells that
still contain unexplored, reachable voxels and have not been subdivided.
Updating walks only the cells overlapping changed map regions, subdividing
mostly-known cells 8-way and dropping exhausted or unreachable ones.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .voxel_map import UNKNOWN, Aabb, VoxelMap

_LABEL_STRUCTURE = np.ones((3, 3, 3), dtype=bool)


def grid_index(level: int, coords, dims_per_level) -> int:
    """Flat index of cell `coords` at 1-based `level`.

    Lays levels out back to back: within a level the ordering is
    i * hy * hz + j * hz + k, offset by the total cell count of all
    coarser levels.
    """
    if not 1 <= level <= len(dims_per_level):
        raise ValueError(f"level {level} out of range")
    hx, hy, hz = dims_per_level[level - 1]
    i, j, k = coords
    if not (0 <= i < hx and 0 <= j < hy and 0 <= k < hz):
        raise ValueError(f"coords {coords} outside level-{level} dims {dims_per_level[level - 1]}")
    offset = 0
    for l in range(level - 1):
        dx, dy, dz = dims_per_level[l]
        offset += dx * dy * dz
    return i * hy * hz + j * hz + k + offset


def grid_index_inverse(cell_id: int, dims_per_level) -> tuple[int, tuple[int, int, int]]:
    """Inverse of grid_index: cell id -> (level, coords)."""
    rem = cell_id
    for l, (hx, hy, hz) in enumerate(dims_per_level, start=1):
        count = hx * hy * hz
        if rem < count:
            i = rem // (hy * hz)
            j = (rem // hz) % hy
            k = rem % hz
            return l, (i, j, k)
        rem -= count
    raise ValueError(f"cell id {cell_id} out of range")


@dataclass
class HgridCell:
    cell_id: int
    level: int
    coords: tuple[int, int, int]
    vox_lo: tuple[int, int, int]  # inclusive
    vox_hi: tuple[int, int, int]  # exclusive
    unknown_count: int = 0
    centroid: np.ndarray | None = None
    owner: int | None = None

    def voxel_volume(self) -> int:
        return (
            max(0, self.vox_hi[0] - self.vox_lo[0])
            * max(0, self.vox_hi[1] - self.vox_lo[1])
            * max(0, self.vox_hi[2] - self.vox_lo[2])
        )

    def aabb(self) -> Aabb:
        return Aabb(self.vox_lo, tuple(h - 1 for h in self.vox_hi))


@dataclass
class ChangeSet:
    """Outcome of one hgrid update pass."""

    subdivided: list = field(default_factory=list)  # parents replaced by children
    removed: list = field(default_factory=list)     # exhausted or unreachable cells
    touched: list = field(default_factory=list)     # recomputed, still active (incl. new children)

    def is_empty(self) -> bool:
        return not (self.subdivided or self.removed or self.touched)


class Hgrid:
    """Multi-level decomposition bound to one robot's map."""

    def __init__(self, vmap: VoxelMap, levels: int, coarsest_cell_m: float):
        if levels < 1:
            raise ValueError("need at least one level")
        if coarsest_cell_m <= 0:
            raise ValueError("coarsest cell size must be positive")
        self.levels = levels
        self.map_dims = vmap.dims
        self.resolution = vmap.resolution
        self.origin = vmap.origin

        w1 = max(1, int(round(coarsest_cell_m / vmap.resolution)))
        self._w1 = (w1, w1, w1)
        base = tuple(-(-d // w1) for d in vmap.dims)  # ceil division
        self.dims_per_level = [
            tuple(c * (2 ** l) for c in base) for l in range(levels)
        ]
        self.active: dict[int, HgridCell] = {}
        h1x, h1y, h1z = self.dims_per_level[0]
        for i in range(h1x):
            for j in range(h1y):
                for k in range(h1z):
                    cell = self._make_cell(1, (i, j, k))
                    self._refresh_cell(cell, vmap)
                    self.active[cell.cell_id] = cell

    # -- geometry ------------------------------------------------------------

    def _axis_range(self, axis: int, level: int, c: int) -> tuple[int, int]:
        top = c >> (level - 1)
        lo = top * self._w1[axis]
        hi = min(lo + self._w1[axis], self.map_dims[axis])
        for b in range(level - 2, -1, -1):
            mid = lo + ((hi - lo) + 1) // 2
            if (c >> b) & 1:
                lo = mid
            else:
                hi = mid
        return lo, min(hi, self.map_dims[axis])

    def _make_cell(self, level: int, coords) -> HgridCell:
        lo = []
        hi = []
        for ax in range(3):
            l, h = self._axis_range(ax, level, coords[ax])
            lo.append(l)
            hi.append(h)
        return HgridCell(
            cell_id=grid_index(level, coords, self.dims_per_level),
            level=level,
            coords=tuple(coords),
            vox_lo=tuple(lo),
            vox_hi=tuple(hi),
        )

    def _refresh_cell(self, cell: HgridCell, vmap: VoxelMap) -> None:
        lo, hi = cell.vox_lo, cell.vox_hi
        sub = vmap.grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        unk = np.argwhere(sub == UNKNOWN)
        cell.unknown_count = len(unk)
        if len(unk):
            center = unk.mean(axis=0) + np.asarray(lo, dtype=float) + 0.5
            cell.centroid = self.origin + center * self.resolution
        else:
            cell.centroid = None

    def children_of(self, cell: HgridCell) -> list[HgridCell]:
        lvl = cell.level + 1
        i, j, k = cell.coords
        kids = []
        for di in (0, 1):
            for dj in (0, 1):
                for dk in (0, 1):
                    kids.append(self._make_cell(lvl, (2 * i + di, 2 * j + dj, 2 * k + dk)))
        kids.sort(key=lambda c: c.cell_id)
        return kids

    def cell_containing_voxel(self, voxel) -> int | None:
        """Active cell whose extent contains the voxel, if any (O(levels))."""
        if not all(0 <= voxel[ax] < self.map_dims[ax] for ax in range(3)):
            return None
        coords = [voxel[ax] // self._w1[ax] for ax in range(3)]
        for level in range(1, self.levels + 1):
            if level > 1:
                nxt = []
                for ax in range(3):
                    lo, hi = self._axis_range(ax, level - 1, coords[ax])
                    mid = lo + ((hi - lo) + 1) // 2
                    nxt.append(coords[ax] * 2 + (1 if voxel[ax] >= mid else 0))
                coords = nxt
            cid = grid_index(level, coords, self.dims_per_level)
            if cid in self.active:
                return cid
        return None

    def ancestors_of(self, cell_id: int) -> list[int]:
        level, coords = grid_index_inverse(cell_id, self.dims_per_level)
        out = []
        while level > 1:
            level -= 1
            coords = tuple(c // 2 for c in coords)
            out.append(grid_index(level, coords, self.dims_per_level))
        return out

    def descendants_of(self, cell_id: int, active_only: bool = True) -> list[int]:
        level, coords = grid_index_inverse(cell_id, self.dims_per_level)
        frontier = [(level, coords)]
        out = []
        while frontier:
            lvl, cds = frontier.pop()
            if lvl >= self.levels:
                continue
            for di in (0, 1):
                for dj in (0, 1):
                    for dk in (0, 1):
                        ccds = (2 * cds[0] + di, 2 * cds[1] + dj, 2 * cds[2] + dk)
                        cid = grid_index(lvl + 1, ccds, self.dims_per_level)
                        if not active_only or cid in self.active:
                            out.append(cid)
                        frontier.append((lvl + 1, ccds))
        return sorted(set(out) & set(self.active)) if active_only else sorted(out)

    def total_unknown(self) -> int:
        return sum(c.unknown_count for c in self.active.values())

    # -- the update pass ------------------------------------------------------

    def update(
        self,
        vmap: VoxelMap,
        boxes: list[Aabb],
        robot_pos,
        alpha_u: float = 0.5,
        delta_u: int = 10,
    ) -> ChangeSet:
        """Refine the active decomposition against updated map regions.

        For every active cell overlapping an update box: recount unknown
        voxels and recompute the centroid; subdivide when the known ratio
        reaches `alpha_u` (below the finest level); drop finest-level cells
        holding fewer than `delta_u` unknown voxels; drop cells that retain
        no unknown voxel reachable from the robot.  Newly created children
        are processed in the same pass.
        """
        changes = ChangeSet()
        if not boxes:
            return changes

        queue = deque()
        for cid in list(self.active.keys()):
            cell = self.active[cid]
            ext = cell.aabb()
            if any(ext.overlaps(b) for b in boxes):
                queue.append(cell)
        if not queue:
            return changes

        reach_labels = None
        robot_label = 0

        def robot_reachable_unknown(cell: HgridCell) -> bool:
            nonlocal reach_labels, robot_label
            if cell.unknown_count == 0:
                return False
            if reach_labels is None:
                traversable = vmap.grid != 2  # not occupied
                reach_labels, _ = ndimage.label(traversable, structure=_LABEL_STRUCTURE)
                rv = vmap.world_to_voxel(robot_pos)
                robot_label = int(reach_labels[rv]) if vmap.in_bounds_voxel(rv) else 0
            if robot_label == 0:
                return True  # degenerate robot pose: never drop work on its account
            lo, hi = cell.vox_lo, cell.vox_hi
            sub = vmap.grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            lab = reach_labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            return bool(np.any((sub == UNKNOWN) & (lab == robot_label)))

        touched = {}
        while queue:
            cell = queue.popleft()
            if cell.cell_id not in self.active:
                continue
            self._refresh_cell(cell, vmap)
            volume = cell.voxel_volume()
            if volume == 0:
                del self.active[cell.cell_id]
                changes.removed.append(cell.cell_id)
                touched.pop(cell.cell_id, None)
                continue
            known_ratio = 1.0 - cell.unknown_count / volume
            if known_ratio >= alpha_u and cell.level < self.levels:
                del self.active[cell.cell_id]
                changes.subdivided.append(cell.cell_id)
                touched.pop(cell.cell_id, None)
                for child in self.children_of(cell):
                    child.owner = cell.owner
                    self.active[child.cell_id] = child
                    queue.append(child)
                continue
            if cell.level == self.levels and cell.unknown_count < delta_u:
                del self.active[cell.cell_id]
                changes.removed.append(cell.cell_id)
                touched.pop(cell.cell_id, None)
                continue
            if not robot_reachable_unknown(cell):
                del self.active[cell.cell_id]
                changes.removed.append(cell.cell_id)
                touched.pop(cell.cell_id, None)
                continue
            touched[cell.cell_id] = True
        changes.touched = list(touched.keys())
        return changes

    # -- debug ---------------------------------------------------------------

    def dump_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("cell_id,level,i,j,k,unknown_count,owner\n")
            for cid in sorted(self.active):
                c = self.active[cid]
                owner = "" if c.owner is None else c.owner
                fh.write(
                    f"{cid},{c.level},{c.coords[0]},{c.coords[1]},{c.coords[2]},"
                    f"{c.unknown_count},{owner}\n"
                )
