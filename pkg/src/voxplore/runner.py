"""Scenario orchestration: deterministic event loop, metrics, variants,
and the centralized-vs-pairwise suboptimality benchmark."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import Robot
from .config import SimConfig, config_to_dict
from .coordination import assert_no_overlapping_interactions
from .netsim import Channel
from .routing import build_avrp_matrix, solve_cvrp, solve_open_tsp
from .scenes import build_scene, default_start_poses, ground_truth
from .voxel_map import FREE


@dataclass
class RunMetrics:
    exploration_time: float
    completed: bool
    per_robot_path_m: list
    coverage: list                  # (t, known fraction of all voxels)
    messages: dict                  # kind -> {sent: [n, bytes], delivered: [n, bytes]}
    interactions: dict
    counters: dict
    violations: list
    reachable_unknown_final: int
    ownership_conflicts: int
    scene_name: str = ""

    def to_dict(self) -> dict:
        return {
            "exploration_time": self.exploration_time,
            "completed": self.completed,
            "per_robot_path_m": self.per_robot_path_m,
            "coverage_final": self.coverage[-1][1] if self.coverage else 0.0,
            "messages": self.messages,
            "interactions": self.interactions,
            "counters": self.counters,
            "violations": self.violations,
            "reachable_unknown_final": self.reachable_unknown_final,
            "ownership_conflicts": self.ownership_conflicts,
            "scene_name": self.scene_name,
        }


def _ticks(period: float, dt: float) -> int:
    return max(1, int(round(period / dt)))


def run_scenario(cfg: SimConfig, out_dir=None) -> RunMetrics:
    """Deterministic tick loop; same config + seed gives identical outputs."""
    cfg.validate()
    scene = build_scene(cfg.scene, cfg.scene_seed if cfg.scene_seed is not None else cfg.seed)
    gt = ground_truth(scene)
    poses = cfg.start_poses or default_start_poses(scene, cfg.robots)
    for k, pose in enumerate(poses[: cfg.robots]):
        if gt.grid[gt.world_to_voxel(pose[:3])] != FREE:
            raise ValueError(f"robot {k} start {pose[:3]} is not in free space")

    log: list = []
    counters: dict = {}
    robots = [Robot(r, cfg, gt, poses[r], log, counters) for r in range(cfg.robots)]
    channel = Channel(cfg.net.range_m, cfg.net.loss, tuple(cfg.net.latency_s),
                      rng_seed=cfg.seed)

    # initial allocation: every cell to the robot with the closest start pose
    if cfg.variant != "NoHgrid":
        starts = np.array([p[:3] for p in poses[: cfg.robots]], dtype=float)
        for robot in robots:
            for cid in sorted(robot.hgrid.active):
                cell = robot.hgrid.active[cid]
                if cell.centroid is None:
                    continue
                d = np.linalg.norm(starts - cell.centroid[None, :], axis=1)
                owner = int(np.argmin(d))
                if owner == robot.rid:
                    robot.coord.claim(cid, tuple(cell.centroid), cell.unknown_count, 0.0)

    dt = cfg.dt
    sense_ticks = _ticks(cfg.sense_period, dt)
    update_ticks = _ticks(cfg.update_period, dt)
    coord_ticks = _ticks(cfg.coord_period, dt)
    state_ticks = _ticks(cfg.net.state_period_s, dt)
    bk_ticks = _ticks(cfg.net.bookkeeping_period_s, dt)
    replan_ticks = _ticks(cfg.replan_period, dt)
    check_ticks = _ticks(2.0, dt)
    max_ticks = int(round(cfg.max_time / dt))

    total_vox = len(gt.states)
    union_known = np.zeros(total_vox, dtype=bool)
    for robot in robots:
        union_known |= robot.map.states != 0
    coverage = []
    violations: list = []
    completed = False
    end_time = cfg.max_time

    def positions():
        return {r.rid: r.kin.position.copy() for r in robots}

    def send_all(src, msgs, now):
        pos = positions()
        for m in msgs:
            channel.broadcast(src, m, now, pos)

    tick = 0
    for tick in range(max_ticks):
        now = tick * dt
        for dst, msg in channel.step(now):
            replies = robots[dst].handle(msg, now)
            send_all(dst, replies, now)
        for robot in robots:
            rid = robot.rid
            if (tick + rid) % sense_ticks == 0:
                msgs = robot.sense(now)
                for m in msgs:
                    union_known[m.payload.indices] = True
                send_all(rid, msgs, now)
            if (tick + rid) % update_ticks == 0:
                robot.update_world(now)
            if (tick + 2 * rid) % coord_ticks == 0:
                send_all(rid, robot.coordination_tick(now), now)
            if (tick + rid) % state_ticks == 0:
                send_all(rid, [robot.coord.state_message(now, robot.kin.position)], now)
            if (tick + rid) % bk_ticks == 0 and robot.chunks:
                send_all(rid, [robot.bookkeeping_message()], now)
            if robot.need_replan or robot.target is None or (tick + rid) % replan_ticks == 0:
                robot.replan(now)
            before = robot.kin.position.copy()
            robot.motion_tick(now, tick, positions(), dt)
            moved = float(np.linalg.norm(robot.kin.position - before))
            if moved > cfg.planner.v_max * dt + 1e-6:
                violations.append(f"t={now:.2f} robot {rid} speed cap violated: {moved / dt:.3f}")
            robot.record_trace(now)
        # pairwise separation check (ground truth positions)
        pos = positions()
        for a in range(cfg.robots):
            for b in range(a + 1, cfg.robots):
                d = float(np.linalg.norm(pos[a] - pos[b]))
                if d < cfg.planner.d_min - 1e-6:
                    violations.append(f"t={now:.2f} separation {a}-{b}: {d:.3f}")
        if tick % 5 == 0:
            frac = float(np.count_nonzero(union_known)) / total_vox
            if coverage and frac < coverage[-1][1] - 1e-12:
                violations.append(f"t={now:.2f} coverage decreased")
            coverage.append((round(now, 6), frac))
        if tick % check_ticks == 0 and all(r.is_done() for r in robots):
            stranded = [(r, r.reachable_unknown_count()) for r in robots]
            if all(n == 0 for _, n in stranded):
                completed = True
                end_time = now
                break
            # residual unknown without frontier: nudge the nearest robot at it
            for robot, n in stranded:
                if n > 0:
                    _endgame_nudge(robot)

    frac = float(np.count_nonzero(union_known)) / total_vox
    coverage.append((round(end_time, 6), frac))

    # quiescence: lossless broadcast-only grace period for ownership settling
    if cfg.quiesce_time > 0:
        channel.loss_prob = 0.0
        base = tick + 1
        for extra in range(int(round(cfg.quiesce_time / dt))):
            now = (base + extra) * dt
            for dst, msg in channel.step(now):
                send_all(dst, robots[dst].handle(msg, now), now)
            for robot in robots:
                if (base + extra + robot.rid) % state_ticks == 0:
                    send_all(robot.rid,
                             [robot.coord.state_message(now, robot.kin.position)], now)
                if (base + extra + robot.rid) % bk_ticks == 0 and robot.chunks:
                    send_all(robot.rid, [robot.bookkeeping_message()], now)

    try:
        assert_no_overlapping_interactions(log, [r.rid for r in robots])
    except AssertionError as exc:
        violations.append(str(exc))

    conflicts = _ownership_conflicts(robots, cfg)
    messages = {}
    for (bucket, kind), (n, nbytes) in sorted(channel.counters.items()):
        messages.setdefault(kind, {})[bucket] = [n, nbytes]
    interactions = {
        "requests": sum(1 for e in log if e["kind"] == "request_sent"),
        "commits": sum(1 for e in log if e["kind"] == "commit"),
        "fails": sum(1 for e in log if e["kind"] == "respond_fail"),
        "timeouts": sum(1 for e in log if e["kind"] == "timeout"),
        "claims": sum(1 for e in log if e["kind"] == "claim"),
    }
    metrics = RunMetrics(
        exploration_time=end_time,
        completed=completed,
        per_robot_path_m=[round(r.kin.path_traveled, 6) for r in robots],
        coverage=coverage,
        messages=messages,
        interactions=interactions,
        counters=dict(sorted(counters.items())),
        violations=violations,
        reachable_unknown_final=max(r.reachable_unknown_count() for r in robots),
        ownership_conflicts=conflicts,
        scene_name=scene.get("name", cfg.scene),
    )
    if out_dir is not None:
        _write_artifacts(out_dir, cfg, metrics, robots, channel, log)
    return metrics


def _endgame_nudge(robot) -> None:
    """Target the free voxel beside the nearest reachable unknown voxel."""
    from scipy import ndimage

    vmap = robot.map
    traversable = vmap.grid != 2
    labels, _ = ndimage.label(traversable, structure=np.ones((3, 3, 3), bool))
    rv = vmap.world_to_voxel(robot.kin.position)
    if labels[rv] == 0:
        return
    unk = np.argwhere((vmap.grid == 0) & (labels == labels[rv]))
    if len(unk) == 0:
        return
    rpos = np.asarray(rv)
    order = np.argsort(((unk - rpos[None, :]) ** 2).sum(axis=1), kind="stable")
    target_vox = unk[order[0]]
    # nearest free voxel adjacent (26) to that unknown voxel
    best = None
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                v = (int(target_vox[0] + dx), int(target_vox[1] + dy), int(target_vox[2] + dz))
                if not vmap.in_bounds_voxel(v) or vmap.grid[v] != FREE:
                    continue
                d = (v[0] - rv[0]) ** 2 + (v[1] - rv[1]) ** 2 + (v[2] - rv[2]) ** 2
                if best is None or d < best[0]:
                    best = (d, v)
    if best is None:
        return
    from .frontier import Viewpoint

    pos = vmap.voxel_center(best[1])
    upos = vmap.voxel_center(target_vox)
    yaw = math.atan2(upos[1] - pos[1], upos[0] - pos[0])
    robot.target = Viewpoint(pos, yaw, 0)
    robot.target_is_cell = True
    robot.path_pts = None
    robot.need_replan = False


def _ownership_conflicts(robots, cfg) -> int:
    """Double claims between robots in the same comm component (id-aware)."""
    n = len(robots)
    rng_range = cfg.net.range_m
    comp = list(range(n))

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    for a in range(n):
        for b in range(a + 1, n):
            d = float(np.linalg.norm(robots[a].kin.position - robots[b].kin.position))
            if d <= rng_range:
                comp[find(a)] = find(b)
    conflicts = 0
    for a in range(n):
        for b in range(a + 1, n):
            if find(a) != find(b):
                continue
            ca = robots[a].coord.owned_cells()
            cb = robots[b].coord.owned_cells()
            overlap = ca & cb
            if robots[a].uses_cells:
                related = robots[a]._cells_related
                overlap = {x for x in ca for y in cb if related(x, y)}
            conflicts += len(overlap)
    return conflicts


def run_variant(cfg: SimConfig, variant: str, out_dir=None) -> RunMetrics:
    cfg.variant = variant
    return run_scenario(cfg, out_dir=out_dir)


def _write_artifacts(out_dir, cfg, metrics: RunMetrics, robots, channel, log) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "coverage.csv"), "w") as fh:
        fh.write("time_s,coverage\n")
        for t, c in metrics.coverage:
            fh.write(f"{t},{c:.9f}\n")
    channel.dump_log(os.path.join(out_dir, "net_log.csv"))
    with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
    for robot in robots:
        path = os.path.join(out_dir, f"trace_{robot.rid}.csv")
        with open(path, "w") as fh:
            fh.write("time_s,x,y,z,yaw,owned,cp_len\n")
            for row in robot.trace:
                fh.write(",".join(str(v) for v in row) + "\n")
        if robot.uses_cells:
            robot.hgrid.dump_csv(os.path.join(out_dir, f"cells_{robot.rid}.csv"))
            robot.graph.dump_csv(os.path.join(out_dir, f"graph_{robot.rid}.csv"))


# ---------------------------------------------------------------------------
# suboptimality benchmark (centralized vs one round of pairwise interactions)
# ---------------------------------------------------------------------------


def _euclid_matrix(robot_xy, target_xy, assignments=None):
    cells = [(100 + i, 1) for i in range(len(target_xy))]
    pos = {100 + i: np.asarray(p, float) for i, p in enumerate(target_xy)}

    def rc(ri, cid):
        return float(np.linalg.norm(np.asarray(robot_xy[ri], float) - pos[cid]))

    def cc(a, b):
        return float(np.linalg.norm(pos[a] - pos[b]))

    return build_avrp_matrix(cells, list(range(len(robot_xy))), rc, cc)


def suboptimality_bench(n_targets: int, robot_counts, seeds: int,
                        box: float = 20.0, verbose: bool = False) -> list:
    """Path-length ratio of pairwise-decentralized over centralized routing.

    Random planar targets and robots; the centralized side solves one
    multi-vehicle open-route problem over everything, the decentralized side
    starts from closest-robot allocation and runs one full round of pairwise
    repartitions (every robot pair once, in order), then sums per-robot tours.
    """
    rows = []
    for nr in robot_counts:
        len1s, len2s, ratios = [], [], []
        for s in range(seeds):
            rng = np.random.default_rng((nr, s, 1234))
            targets = rng.random((n_targets, 2)) * box
            robots = rng.random((nr, 2)) * box

            matrix, demands = _euclid_matrix(robots, targets)
            sol = solve_cvrp(matrix, demands, capacity_ratio=1.0,
                             restarts=3, ils_iters=24)
            len1 = sol.total_cost

            # decentralized: closest-robot allocation, one round of pair fixes
            assign = {}
            for i, t in enumerate(targets):
                d = np.linalg.norm(robots - t[None, :], axis=1)
                assign[i] = int(np.argmin(d))
            for a in range(nr):
                for b in range(a + 1, nr):
                    mine = [i for i in range(n_targets) if assign[i] == a]
                    his = [i for i in range(n_targets) if assign[i] == b]
                    union = mine + his
                    if not union:
                        continue
                    sub_targets = [targets[i] for i in union]
                    m2, d2 = _euclid_matrix([robots[a], robots[b]], sub_targets)
                    warm = [
                        [m2.task_nodes[k] for k, i in enumerate(union) if assign[i] == a],
                        [m2.task_nodes[k] for k, i in enumerate(union) if assign[i] == b],
                    ]
                    s2 = solve_cvrp(m2, d2, capacity_ratio=1.0, restarts=2,
                                    ils_iters=8, warm_start=warm, exact_max=8)
                    for route_v, owner in zip(s2.task_refs(m2), (a, b)):
                        for ref in route_v:
                            assign[union[ref - 100]] = owner
            len2 = 0.0
            for r in range(nr):
                own = [i for i in range(n_targets) if assign[i] == r]
                if not own:
                    continue
                m3, _ = _euclid_matrix([robots[r]], [targets[i] for i in own])
                seq = solve_open_tsp(m3, restarts=2, ils_iters=8)
                len2 += sum(m3.costs[x, y] for x, y in zip(seq, seq[1:]))
            len1s.append(len1)
            len2s.append(len2)
            ratios.append(len2 / len1)
        row = {
            "targets": n_targets,
            "robots": nr,
            "len1_avg": float(np.mean(len1s)),
            "len1_std": float(np.std(len1s)),
            "len2_avg": float(np.mean(len2s)),
            "len2_std": float(np.std(len2s)),
            "ratio_avg": float(np.mean(ratios)),
            "ratio_std": float(np.std(ratios)),
        }
        rows.append(row)
        if verbose:
            print(
                f"targets={n_targets} robots={nr} "
                f"len1={row['len1_avg']:.2f}+-{row['len1_std']:.2f} "
                f"len2={row['len2_avg']:.2f}+-{row['len2_std']:.2f} "
                f"ratio={row['ratio_avg']:.3f}+-{row['ratio_std']:.3f}"
            )
    return rows
