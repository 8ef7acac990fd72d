"""Occupancy-grid world model with ideal depth sensing and voxel path search.

The map holds one byte per voxel (unknown / free / occupied).  Sensing is an
ideal raycast against a ground-truth map: traversed voxels become free, hit
voxels become occupied, and the diff is exported as an immutable chunk that
other robots can apply to their own maps.  Path search is 26-connected A*
with Euclidean edge weights.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

_MAP_MAGIC = b"VXPM"

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco

# 26-neighborhood offsets and their Euclidean step lengths (in voxels).
_NEIGHBOR_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]
_NEIGHBOR_COSTS = [math.sqrt(dx * dx + dy * dy + dz * dz) for dx, dy, dz in _NEIGHBOR_OFFSETS]


@dataclass(frozen=True)
class Aabb:
    """Inclusive axis-aligned box in integer voxel coordinates."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate aabb: {self.lo} > {self.hi}")

    def overlaps(self, other: "Aabb") -> bool:
        return all(self.lo[i] <= other.hi[i] and other.lo[i] <= self.hi[i] for i in range(3))

    def contains_voxel(self, v) -> bool:
        return all(self.lo[i] <= v[i] <= self.hi[i] for i in range(3))

    def inflate(self, r: int) -> "Aabb":
        return Aabb(tuple(c - r for c in self.lo), tuple(c + r for c in self.hi))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(
            tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(max(a, b) for a, b in zip(self.hi, other.hi)),
        )

    @staticmethod
    def of_voxels(coords: np.ndarray) -> "Aabb":
        """Bounding box of an (n, 3) voxel coordinate array."""
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        return Aabb(tuple(int(c) for c in lo), tuple(int(c) for c in hi))


@dataclass(frozen=True)
class SensorModel:
    """Ideal pinhole-style depth sensor: angular FOV, max range, ray density."""

    fov_h_deg: float = 80.0
    fov_v_deg: float = 60.0
    max_range: float = 4.5
    ray_density: float = 0.5  # rays per degree along each axis

    def __post_init__(self):
        if self.fov_h_deg <= 0 or self.fov_v_deg <= 0:
            raise ValueError("sensor FOV must be positive")
        if self.max_range <= 0:
            raise ValueError("sensor range must be positive")


@dataclass(frozen=True)
class MapChunk:
    """Immutable diff of newly observed voxels, identified per producer."""

    producer: int
    seq: int
    indices: np.ndarray  # linear voxel indices, int64, sorted
    values: np.ndarray   # uint8 states, aligned with indices

    @property
    def chunk_id(self) -> tuple[int, int]:
        return (self.producer, self.seq)

    def __len__(self) -> int:
        return len(self.indices)

    def nbytes(self) -> int:
        # wire-size estimate: id pair + 4B index + 1B state per voxel
        return 8 + 5 * len(self.indices)


@dataclass
class Path:
    """Voxel-grid path as world positions plus its metric length."""

    points: list
    length_m: float


# Cache of ray direction bundles keyed by sensor parameters.
_RAY_CACHE: dict = {}


def _base_ray_dirs(sensor: SensorModel) -> np.ndarray:
    key = (sensor.fov_h_deg, sensor.fov_v_deg, sensor.ray_density)
    dirs = _RAY_CACHE.get(key)
    if dirs is None:
        nh = max(2, int(round(sensor.fov_h_deg * sensor.ray_density)) + 1)
        nv = max(2, int(round(sensor.fov_v_deg * sensor.ray_density)) + 1)
        az = np.deg2rad(np.linspace(-sensor.fov_h_deg / 2, sensor.fov_h_deg / 2, nh))
        el = np.deg2rad(np.linspace(-sensor.fov_v_deg / 2, sensor.fov_v_deg / 2, nv))
        azg, elg = np.meshgrid(az, el, indexing="ij")
        dirs = np.stack(
            [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)], axis=-1
        ).reshape(-1, 3)
        _RAY_CACHE[key] = dirs
    return dirs


class VoxelMap:
    """Dense 3D occupancy grid with linear index layout ((x * ny) + y) * nz + z."""

    def __init__(self, origin, resolution: float, dims, fill: int = UNKNOWN):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(origin, dtype=float)
        self.resolution = float(resolution)
        self.dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        self.states = np.full(int(np.prod(self.dims)), fill, dtype=np.uint8)
        self.version = 0

    # -- index helpers -----------------------------------------------------

    @property
    def grid(self) -> np.ndarray:
        """3D view over the flat state array (shares memory)."""
        return self.states.reshape(self.dims)

    def in_bounds_voxel(self, v) -> bool:
        return all(0 <= v[i] < self.dims[i] for i in range(3))

    def in_bounds_world(self, p) -> bool:
        return self.in_bounds_voxel(self.world_to_voxel(p))

    def world_to_voxel(self, p) -> tuple[int, int, int]:
        v = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(int)
        return (int(v[0]), int(v[1]), int(v[2]))

    def voxel_center(self, v) -> np.ndarray:
        return self.origin + (np.asarray(v, dtype=float) + 0.5) * self.resolution

    def linear(self, v) -> int:
        nx, ny, nz = self.dims
        return (v[0] * ny + v[1]) * nz + v[2]

    def unlinear(self, idx: int) -> tuple[int, int, int]:
        ny, nz = self.dims[1], self.dims[2]
        z = idx % nz
        y = (idx // nz) % ny
        x = idx // (ny * nz)
        return (x, y, z)

    def unknown_count(self) -> int:
        return int(np.count_nonzero(self.states == UNKNOWN))

    def copy(self) -> "VoxelMap":
        m = VoxelMap(self.origin, self.resolution, self.dims)
        m.states[:] = self.states
        return m

    # -- sensing -----------------------------------------------------------

    def integrate_scan(
        self,
        position,
        yaw: float,
        sensor: SensorModel,
        ground_truth: "VoxelMap",
        producer: int = 0,
        seq: int = 0,
    ) -> tuple[MapChunk, Aabb | None]:
        """Raycast the FOV against ground truth and absorb the observed diff.

        Rays march at half-voxel steps; voxels crossed before the first
        ground-truth occupied sample become free, the hit voxel becomes
        occupied, and anything beyond max_range stays untouched.  Returns the
        newly-observed diff as a chunk plus its bounding box (None when
        nothing new was seen).
        """
        pos = np.asarray(position, dtype=float)
        if not self.in_bounds_world(pos):
            raise ValueError(f"sensor pose {pos} outside map bounds")

        dirs = _base_ray_dirs(sensor)
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        world_dirs = dirs @ rot.T

        step = self.resolution * 0.5
        ts = np.arange(step, sensor.max_range + step * 0.5, step)
        pts = pos[None, None, :] + world_dirs[:, None, :] * ts[None, :, None]
        vox = np.floor((pts - self.origin) / self.resolution).astype(np.int64)

        nx, ny, nz = self.dims
        inb = (
            (vox[..., 0] >= 0) & (vox[..., 0] < nx)
            & (vox[..., 1] >= 0) & (vox[..., 1] < ny)
            & (vox[..., 2] >= 0) & (vox[..., 2] < nz)
        )
        lin = (vox[..., 0] * ny + vox[..., 1]) * nz + vox[..., 2]
        lin_safe = np.where(inb, lin, 0)
        occ = (ground_truth.states[lin_safe] == OCCUPIED) & inb

        # A ray stops at its first occupied sample or on leaving the map.
        stop = occ | ~inb
        has_stop = stop.any(axis=1)
        first_stop = np.where(has_stop, stop.argmax(axis=1), stop.shape[1])
        sample_pos = np.arange(stop.shape[1])[None, :]
        before = sample_pos < first_stop[:, None]

        free_lin = lin_safe[before & inb]
        hit_rays = has_stop & occ[np.arange(occ.shape[0]), np.minimum(first_stop, occ.shape[1] - 1)]
        hit_lin = lin_safe[hit_rays, first_stop[hit_rays]] if hit_rays.any() else np.empty(0, np.int64)

        own = self.linear(self.world_to_voxel(pos))
        seen = np.concatenate([free_lin, hit_lin, np.array([own], dtype=np.int64)])
        seen = np.unique(seen)
        fresh = seen[self.states[seen] == UNKNOWN]
        values = ground_truth.states[fresh]
        self.states[fresh] = values
        self.version += 1

        chunk = MapChunk(producer, seq, fresh, values.copy())
        if len(fresh) == 0:
            return chunk, None
        coords = np.stack(
            [fresh // (ny * nz), (fresh // nz) % ny, fresh % nz], axis=1
        )
        return chunk, Aabb.of_voxels(coords)

    def apply_chunk(self, chunk: MapChunk) -> Aabb | None:
        """Apply a chunk idempotently; returns the AABB of touched voxels."""
        if len(chunk) == 0:
            return None
        if chunk.indices.min() < 0 or chunk.indices.max() >= len(self.states):
            raise IndexError("chunk index out of map bounds")
        self.states[chunk.indices] = chunk.values
        self.version += 1
        ny, nz = self.dims[1], self.dims[2]
        coords = np.stack(
            [chunk.indices // (ny * nz), (chunk.indices // nz) % ny, chunk.indices % nz], axis=1
        )
        return Aabb.of_voxels(coords)

    # -- path search ---------------------------------------------------------

    def search_path(self, a, b, allow_unknown: bool = False, box: Aabb | None = None) -> Path | None:
        """Shortest 26-connected voxel path avoiding occupied space.

        `a` and `b` are world positions.  Unknown voxels are traversable only
        when `allow_unknown` is set (used for cost estimation into unexplored
        space).  `box` restricts the search region when given.  Returns None
        when no path exists.
        """
        va = self.world_to_voxel(a)
        vb = self.world_to_voxel(b)
        if not self.in_bounds_voxel(va) or not self.in_bounds_voxel(vb):
            raise ValueError("path endpoints outside map bounds")
        if va == vb:
            return Path([self.voxel_center(va)], 0.0)

        grid = self.grid
        goal_state = grid[vb]
        if goal_state == OCCUPIED or (goal_state == UNKNOWN and not allow_unknown):
            return None

        if box is None:
            lox = loy = loz = 0
            hix, hiy, hiz = self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1
        else:
            lox, loy, loz = (max(0, c) for c in box.lo)
            hix, hiy, hiz = (min(d - 1, c) for d, c in zip(self.dims, box.hi))
            if not (lox <= va[0] <= hix and loy <= va[1] <= hiy and loz <= va[2] <= hiz):
                return None
            if not (lox <= vb[0] <= hix and loy <= vb[1] <= hiy and loz <= vb[2] <= hiz):
                return None

        # fast path: if the endpoints' bounding box holds no blocked voxel,
        # the optimal 26-connected path is a monotone staircase inside it
        slo = tuple(min(va[i], vb[i]) for i in range(3))
        shi = tuple(max(va[i], vb[i]) + 1 for i in range(3))
        sub = grid[slo[0]:shi[0], slo[1]:shi[1], slo[2]:shi[2]]
        clear = not bool(
            (sub == OCCUPIED).any() if allow_unknown else (sub != FREE).any()
        )
        if clear:
            return self._staircase_path(va, vb)

        res = self.resolution
        gx, gy, gz = vb
        g_cost: dict = {va: 0.0}
        parent: dict = {}
        counter = 0
        h0 = math.sqrt((va[0] - gx) ** 2 + (va[1] - gy) ** 2 + (va[2] - gz) ** 2)
        open_heap = [(h0, 0, va)]
        offsets = _NEIGHBOR_OFFSETS
        costs = _NEIGHBOR_COSTS

        while open_heap:
            f, _, cur = heapq.heappop(open_heap)
            gcur = g_cost[cur]
            if f - 1e-12 > gcur + math.sqrt(
                (cur[0] - gx) ** 2 + (cur[1] - gy) ** 2 + (cur[2] - gz) ** 2
            ):
                continue  # stale entry
            if cur == vb:
                vox_path = [cur]
                while cur in parent:
                    cur = parent[cur]
                    vox_path.append(cur)
                vox_path.reverse()
                pts = [self.voxel_center(v) for v in vox_path]
                return Path(pts, gcur * res)
            cx, cy, cz = cur
            for k in range(26):
                dx, dy, dz = offsets[k]
                nxk, nyk, nzk = cx + dx, cy + dy, cz + dz
                if not (lox <= nxk <= hix and loy <= nyk <= hiy and loz <= nzk <= hiz):
                    continue
                st = grid[nxk, nyk, nzk]
                if st == OCCUPIED or (st == UNKNOWN and not allow_unknown):
                    continue
                nb = (nxk, nyk, nzk)
                ng = gcur + costs[k]
                old = g_cost.get(nb)
                if old is None or ng < old - 1e-12:
                    g_cost[nb] = ng
                    parent[nb] = cur
                    counter += 1
                    h = math.sqrt((nxk - gx) ** 2 + (nyk - gy) ** 2 + (nzk - gz) ** 2)
                    heapq.heappush(open_heap, (ng + h, counter, nb))
        return None

    def _staircase_path(self, va, vb) -> Path:
        """Canonical diagonal-first shortest path through open space."""
        cur = list(va)
        pts = [self.voxel_center(va)]
        length = 0.0
        while tuple(cur) != vb:
            step2 = 0.0
            for ax in range(3):
                d = vb[ax] - cur[ax]
                if d != 0:
                    cur[ax] += 1 if d > 0 else -1
                    step2 += 1.0
            pts.append(self.voxel_center(cur))
            length += math.sqrt(step2)
        return Path(pts, length * self.resolution)

    def reachable(self, from_pos, to_pos) -> bool:
        """True iff a path exists treating unknown voxels as traversable.

        Searched from the target backwards so that sealed pockets (e.g.
        hollows inside thick walls) exhaust quickly.
        """
        va = self.world_to_voxel(from_pos)
        vb = self.world_to_voxel(to_pos)
        if not self.in_bounds_voxel(va) or not self.in_bounds_voxel(vb):
            raise ValueError("reachable() endpoints outside map bounds")
        if self.grid[vb] == OCCUPIED:
            return False
        return self.search_path(to_pos, from_pos, allow_unknown=True) is not None

    # -- persistence ---------------------------------------------------------

    def dump_bytes(self) -> bytes:
        """Flat byte dump with a 32-byte header (magic, dims, resolution, origin)."""
        header = struct.pack(
            "<4s3I1f3f",
            _MAP_MAGIC,
            *self.dims,
            self.resolution,
            *(float(c) for c in self.origin),
        )
        return header + self.states.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VoxelMap":
        magic, dx, dy, dz, res, ox, oy, oz = struct.unpack_from("<4s3I1f3f", blob, 0)
        if magic != _MAP_MAGIC:
            raise ValueError("bad map magic")
        m = cls((ox, oy, oz), res, (dx, dy, dz))
        body = np.frombuffer(blob, dtype=np.uint8, offset=32)
        if len(body) != len(m.states):
            raise ValueError("map payload size mismatch")
        m.states[:] = body
        return m


def ground_truth_from_scene(scene: dict) -> VoxelMap:
    """Build a fully-known ground-truth map from a scene description.

    Scene keys: `resolution` (m/voxel), `bounds` ([[min], [max]] in meters),
    optional `dims` (voxels, validated against bounds), and `obstacles`
    (list of [[lo], [hi]] meter boxes rasterized as occupied).
    """
    res = float(scene["resolution"])
    bounds = scene["bounds"]
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    dims = tuple(int(round(c)) for c in np.ceil((hi - lo) / res - 1e-9))
    if "dims" in scene and tuple(scene["dims"]) != dims:
        raise ValueError(f"scene dims {scene['dims']} inconsistent with bounds (expect {dims})")
    gt = VoxelMap(lo, res, dims, fill=FREE)
    grid = gt.grid
    for box in scene.get("obstacles", []):
        blo = np.asarray(box[0], dtype=float)
        bhi = np.asarray(box[1], dtype=float)
        v0 = np.maximum(np.floor((blo - lo) / res).astype(int), 0)
        v1 = np.minimum(np.ceil((bhi - lo) / res).astype(int), dims)
        if np.any(v0 >= v1):
            continue
        grid[v0[0]:v1[0], v0[1]:v1[1], v0[2]:v1[2]] = OCCUPIED
    return gt


def frontier_mask(grid: np.ndarray) -> np.ndarray:
    """Boolean mask of frontier voxels: free with a 6-adjacent unknown."""
    free = grid == FREE
    unk = grid == UNKNOWN
    near_unknown = np.zeros_like(unk)
    near_unknown[1:, :, :] |= unk[:-1, :, :]
    near_unknown[:-1, :, :] |= unk[1:, :, :]
    near_unknown[:, 1:, :] |= unk[:, :-1, :]
    near_unknown[:, :-1, :] |= unk[:, 1:, :]
    near_unknown[:, :, 1:] |= unk[:, :, :-1]
    near_unknown[:, :, :-1] |= unk[:, :, 1:]
    return free & near_unknown
