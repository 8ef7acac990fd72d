"""Procedural benchmark scenes and scene-file loading.

Two desk-scale scene families mirror the usual benchmarks: `pillar` scatters
random square columns through an open volume, `office` builds walled rooms
joined by door gaps.  Both guarantee clear spawn corners and full
connectivity of free space.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .voxel_map import VoxelMap, ground_truth_from_scene

PILLAR_SIZE = (20.0, 20.0, 3.0)
OFFICE_SIZE = (16.0, 16.0, 2.8)
RESOLUTION = 0.2


def pillar_scene(seed: int, size=PILLAR_SIZE, resolution=RESOLUTION,
                 n_pillars: int = 14) -> dict:
    """Random square columns (full height), corners kept clear for spawns."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    obstacles = []
    clear = spawn_points(size)
    tries = 0
    while len(obstacles) < n_pillars and tries < 400:
        tries += 1
        half = float(rng.uniform(0.25, 0.55))
        cx = float(rng.uniform(1.5, sx - 1.5))
        cy = float(rng.uniform(1.5, sy - 1.5))
        if any((cx - p[0]) ** 2 + (cy - p[1]) ** 2 < (1.4 + half) ** 2 for p in clear):
            continue
        obstacles.append([[cx - half, cy - half, 0.0], [cx + half, cy + half, sz]])
    return {
        "name": f"pillar-{seed}",
        "resolution": resolution,
        "bounds": [[0.0, 0.0, 0.0], [sx, sy, sz]],
        "obstacles": obstacles,
    }


def office_scene(seed: int, size=OFFICE_SIZE, resolution=RESOLUTION,
                 room_m: float = 5.2) -> dict:
    """Rooms on a grid with randomized door positions along every wall."""
    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    wall_t = resolution
    door_w = 1.2
    wall_h = sz
    obstacles = []
    xs = np.arange(room_m, sx - 0.5, room_m)
    ys = np.arange(room_m, sy - 0.5, room_m)
    for x in xs:
        # vertical wall with one door per room span
        y0 = 0.0
        for y1 in list(ys) + [sy]:
            span = y1 - y0
            door = y0 + float(rng.uniform(0.3, max(0.31, span - door_w - 0.3)))
            obstacles.append([[x, y0, 0.0], [x + wall_t, door, wall_h]])
            obstacles.append([[x, door + door_w, 0.0], [x + wall_t, y1, wall_h]])
            y0 = y1
    for y in ys:
        x0 = 0.0
        for x1 in list(xs) + [sx]:
            span = x1 - x0
            door = x0 + float(rng.uniform(0.3, max(0.31, span - door_w - 0.3)))
            obstacles.append([[x0, y, 0.0], [door, y + wall_t, wall_h]])
            obstacles.append([[door + door_w, y, 0.0], [x1, y + wall_t, wall_h]])
            x0 = x1
    return {
        "name": f"office-{seed}",
        "resolution": resolution,
        "bounds": [[0.0, 0.0, 0.0], [sx, sy, sz]],
        "obstacles": obstacles,
    }


def spawn_points(size) -> list:
    sx, sy, _ = size
    inset = 1.0
    return [
        (inset, inset),
        (sx - inset, sy - inset),
        (inset, sy - inset),
        (sx - inset, inset),
    ]


def default_start_poses(scene: dict, n_robots: int) -> list:
    """Corner spawn poses facing the scene center, z = 1.0 m."""
    (lo, hi) = scene["bounds"]
    size = (hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2])
    pts = spawn_points(size)
    cx, cy = size[0] / 2, size[1] / 2
    poses = []
    for k in range(n_robots):
        x, y = pts[k % len(pts)]
        x += lo[0] + 0.3 * (k // len(pts))
        y += lo[1]
        yaw = math.atan2(cy - y, cx - x)
        poses.append([float(x), float(y), 1.0, float(yaw)])
    return poses


def build_scene(name_or_path: str, seed: int) -> dict:
    if name_or_path == "pillar":
        return pillar_scene(seed)
    if name_or_path == "office":
        return office_scene(seed)
    if name_or_path == "tiny":
        # small open room for fast protocol-level runs
        return pillar_scene(seed, size=(8.0, 8.0, 2.0), n_pillars=3)
    with open(name_or_path) as fh:
        return json.load(fh)


def ground_truth(scene: dict) -> VoxelMap:
    return ground_truth_from_scene(scene)
