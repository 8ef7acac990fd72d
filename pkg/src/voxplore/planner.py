"""Per-robot exploration planning: coverage path, local cluster tour,
viewpoint refinement, and kinematic path following.

The coverage path orders the robot's owned cells by an open-route solve; the
local layer tours the frontier clusters inside the next few coverage cells
with a fixed-endpoint TSP (the endpoint pulls the tour toward the following
cell); refinement then picks concrete viewpoints per cluster with a layered
shortest path.  Motion is kinematic path-following with speed and yaw-rate
caps plus a priority separation rule instead of trajectory optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frontier import Viewpoint, t_lb
from .routing import build_avrp_matrix, build_open_tsp_matrix, solve_open_tsp
from .voxel_map import Aabb, VoxelMap


@dataclass
class PlannerParams:
    n_cp: int = 3
    w_con: float = 0.5       # weight of the flight-direction-change penalty (s/rad)
    v_max: float = 1.5
    yaw_rate_max: float = 0.9
    d_min: float = 0.8
    arrive_tol: float = 0.12
    yaw_tol: float = 0.15


@dataclass
class RobotKinematics:
    position: np.ndarray
    yaw: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    path_traveled: float = 0.0


@dataclass(frozen=True)
class LocalCluster:
    """Minimal view of a frontier cluster for local planning."""

    cluster_id: int
    position: tuple   # first (best) viewpoint position
    yaw: float        # first viewpoint yaw


def estimate_path_len(vmap: VoxelMap, a, b, box_margin: int = 12) -> float:
    """Box-restricted voxel path length with a straight-line fallback."""
    va = vmap.world_to_voxel(a)
    vb = vmap.world_to_voxel(b)
    if not vmap.in_bounds_voxel(va) or not vmap.in_bounds_voxel(vb):
        return float(np.linalg.norm(np.asarray(b, float) - np.asarray(a, float)))
    box = Aabb.of_voxels(np.array([va, vb])).inflate(box_margin)
    path = vmap.search_path(a, b, allow_unknown=True, box=box)
    if path is not None:
        return path.length_m
    return float(np.linalg.norm(np.asarray(b, float) - np.asarray(a, float)))


# ---------------------------------------------------------------------------
# coverage path
# ---------------------------------------------------------------------------


def plan_coverage_path(robot_id: int, robot_pos, owned, graph, vmap,
                       prev_first: int | None = None, beta_con: float = 0.0,
                       rng_seed: int = 0) -> list:
    """Order the owned cells into an open coverage route from the robot.

    `owned` is a list of (cell_id, demand).  Cells with no finite cost from
    the robot are appended after the solved route in id order.
    """
    if not owned:
        return []
    robot_costs = graph.robot_costs(vmap, robot_pos)
    reachable = [c for c in owned if math.isfinite(robot_costs.get(c[0], math.inf))]
    stranded = sorted(c[0] for c in owned if not math.isfinite(robot_costs.get(c[0], math.inf)))
    if not reachable:
        return stranded
    prev = {robot_id: prev_first} if prev_first is not None else None
    matrix, demands = build_avrp_matrix(
        reachable,
        [robot_id],
        lambda ri, cid: robot_costs[cid],
        lambda a, b: graph.approx_cost(a, b),
        prev_first=prev,
        beta_con=beta_con,
    )
    seq = solve_open_tsp(matrix, rng_seed=rng_seed)
    ordered = [matrix.roles[i].ref for i in seq if matrix.roles[i].kind == "cell"]
    return ordered + stranded


# ---------------------------------------------------------------------------
# CP-guided local path
# ---------------------------------------------------------------------------


def local_tour_matrix(pose_pos, pose_yaw, velocity, clusters, pair_cost,
                      end_pos, vmap, params: PlannerParams):
    """Fixed start / optional fixed end tour matrix over local clusters.

    Robot->cluster entries combine the travel-time lower bound with the
    direction-change penalty (zero when hovering); cluster->end entries are
    translation time toward the next coverage cell.
    """
    ids = [c.cluster_id for c in clusters]
    by_id = {c.cluster_id: c for c in clusters}
    pos = np.asarray(pose_pos, float)
    vel = np.asarray(velocity, float)
    speed = float(np.linalg.norm(vel))

    robot_costs = {}
    for cid in ids:
        c = by_id[cid]
        target = np.asarray(c.position, float)
        plen = estimate_path_len(vmap, pos, target)
        cost = t_lb(pose_yaw, c.yaw, plen, params.v_max, params.yaw_rate_max)
        if speed > 1e-6:
            to_c = target - pos
            nrm = float(np.linalg.norm(to_c))
            if nrm > 1e-9:
                cosang = float(np.dot(to_c, vel)) / (nrm * speed)
                cost += params.w_con * math.acos(max(-1.0, min(1.0, cosang)))
        robot_costs[cid] = cost

    end_costs = None
    if end_pos is not None:
        end_costs = {}
        for cid in ids:
            c = by_id[cid]
            plen = estimate_path_len(vmap, np.asarray(c.position, float), end_pos)
            end_costs[cid] = plen / params.v_max

    def task_cost(a, b):
        c = pair_cost(a, b)
        if not math.isfinite(c):
            va = np.asarray(by_id[a].position, float)
            vb = np.asarray(by_id[b].position, float)
            c = t_lb(by_id[a].yaw, by_id[b].yaw,
                     float(np.linalg.norm(va - vb)), params.v_max, params.yaw_rate_max)
        return c

    return build_open_tsp_matrix(ids, robot_costs, task_cost, end_costs)


def plan_local_path(pose_pos, pose_yaw, velocity, clusters, pair_cost,
                    end_pos, vmap, params: PlannerParams, rng_seed: int = 0) -> list:
    """Cluster visiting order for the local window; [] when no clusters."""
    if not clusters:
        return []
    matrix = local_tour_matrix(pose_pos, pose_yaw, velocity, clusters, pair_cost,
                               end_pos, vmap, params)
    seq = solve_open_tsp(matrix, rng_seed=rng_seed)
    return [matrix.roles[i].ref for i in seq if matrix.roles[i].kind == "cluster"]


# ---------------------------------------------------------------------------
# viewpoint refinement
# ---------------------------------------------------------------------------


def refine_viewpoints(pose_pos, pose_yaw, ordered_viewpoint_sets, end_pos,
                      params: PlannerParams) -> list:
    """Pick one viewpoint per cluster via a layered shortest path.

    `ordered_viewpoint_sets` is a list (per cluster, in visiting order) of
    Viewpoint lists.  The final layer is the next coverage cell's centroid
    when given, whose edges carry translation time only.
    """
    if not ordered_viewpoint_sets:
        return []
    pos0 = np.asarray(pose_pos, float)

    def edge(p1, y1, p2, y2):
        d = float(np.linalg.norm(np.asarray(p2, float) - np.asarray(p1, float)))
        return t_lb(y1, y2, d, params.v_max, params.yaw_rate_max)

    # dp over layers: cost to reach each viewpoint of layer k
    first = ordered_viewpoint_sets[0]
    costs = [edge(pos0, pose_yaw, v.position, v.yaw) for v in first]
    back: list[list[int]] = [[-1] * len(first)]
    for k in range(1, len(ordered_viewpoint_sets)):
        layer = ordered_viewpoint_sets[k]
        prev = ordered_viewpoint_sets[k - 1]
        nxt_costs = []
        nxt_back = []
        for v in layer:
            best, arg = math.inf, -1
            for i, u in enumerate(prev):
                c = costs[i] + edge(u.position, u.yaw, v.position, v.yaw)
                if c < best - 1e-12:
                    best, arg = c, i
            nxt_costs.append(best)
            nxt_back.append(arg)
        costs = nxt_costs
        back.append(nxt_back)

    if end_pos is not None:
        endp = np.asarray(end_pos, float)
        last = ordered_viewpoint_sets[-1]
        finals = [
            costs[i] + float(np.linalg.norm(endp - np.asarray(v.position, float))) / params.v_max
            for i, v in enumerate(last)
        ]
    else:
        finals = costs
    j = int(np.argmin(finals))
    picks = []
    for k in range(len(ordered_viewpoint_sets) - 1, -1, -1):
        picks.append(ordered_viewpoint_sets[k][j])
        j = back[k][j]
    picks.reverse()
    return picks


def sequence_cost(pose_pos, pose_yaw, viewpoints, end_pos, params: PlannerParams) -> float:
    """t_lb cost of visiting the given concrete viewpoints in order."""
    total = 0.0
    p, y = np.asarray(pose_pos, float), pose_yaw
    for v in viewpoints:
        d = float(np.linalg.norm(np.asarray(v.position, float) - p))
        total += t_lb(y, v.yaw, d, params.v_max, params.yaw_rate_max)
        p, y = np.asarray(v.position, float), v.yaw
    if end_pos is not None and viewpoints:
        total += float(np.linalg.norm(np.asarray(end_pos, float) - p)) / params.v_max
    return total


# ---------------------------------------------------------------------------
# kinematic motion
# ---------------------------------------------------------------------------


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def step_motion(kin: RobotKinematics, waypoints: list, target_yaw: float,
                peers: dict, my_id: int, dt: float, params: PlannerParams):
    """Advance along the waypoint polyline under speed/yaw-rate caps.

    Separation: a step is cancelled if it would bring the robot within d_min
    of any peer; against lower-id (higher-priority) peers an extra step-sized
    margin applies, so the higher id brakes first in head-on encounters.
    Returns (status, remaining_waypoints) with status in
    {"arrived", "moving", "waiting"}.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    budget = params.v_max * dt
    pos = np.asarray(kin.position, float).copy()
    pts = list(waypoints)
    while budget > 1e-12 and pts:
        seg = np.asarray(pts[0], float) - pos
        d = float(np.linalg.norm(seg))
        if d <= 1e-9:
            pts.pop(0)
            continue
        if d <= budget:
            pos = np.asarray(pts[0], float)
            budget -= d
            pts.pop(0)
        else:
            pos = pos + seg * (budget / d)
            budget = 0.0

    new_pos = pos
    blocked_by_peer = False
    for pid in sorted(peers):
        if pid == my_id:
            continue
        margin = params.d_min + (params.v_max * dt if pid < my_id else 0.0)
        if float(np.linalg.norm(new_pos - np.asarray(peers[pid], float))) < margin:
            cur = float(np.linalg.norm(kin.position - np.asarray(peers[pid], float)))
            nxt = float(np.linalg.norm(new_pos - np.asarray(peers[pid], float)))
            if nxt < cur - 1e-12 or nxt < params.d_min:
                blocked_by_peer = True
                break

    old_pos = np.asarray(kin.position, float).copy()
    if blocked_by_peer:
        new_pos = old_pos
    moved = float(np.linalg.norm(new_pos - old_pos))

    if moved > 1e-6:
        desired = math.atan2(new_pos[1] - old_pos[1], new_pos[0] - old_pos[0])
    else:
        desired = target_yaw
    dyaw = wrap_angle(desired - kin.yaw)
    max_dyaw = params.yaw_rate_max * dt
    dyaw = max(-max_dyaw, min(max_dyaw, dyaw))

    kin.position = new_pos
    kin.yaw = wrap_angle(kin.yaw + dyaw)
    kin.velocity = (new_pos - old_pos) / dt
    kin.path_traveled += moved

    if blocked_by_peer:
        return "waiting", pts
    if not pts and abs(wrap_angle(kin.yaw - target_yaw)) <= params.yaw_tol:
        return "arrived", pts
    return "moving", pts
