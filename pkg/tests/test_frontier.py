import math

import numpy as np
import pytest

from voxplore.frontier import (
    FrontierManager,
    FrontierParams,
    split_cluster,
    t_lb,
)
from voxplore.voxel_map import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    Aabb,
    SensorModel,
    VoxelMap,
    frontier_mask,
)


def test_t_lb_identical_viewpoints():
    assert t_lb(0.3, 0.3, 0.0, 1.5, 0.9) == 0.0


def test_t_lb_translation_only():
    assert t_lb(0.0, 0.0, 3.0, 1.5, 0.9) == pytest.approx(2.0)


def test_t_lb_yaw_wrap_branch():
    # 3.0 vs -3.0 rad wraps the short way: (2*pi - 6.0) / 0.9
    want = (2 * math.pi - 6.0) / 0.9
    assert t_lb(3.0, -3.0, 0.0, 1.5, 0.9) == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(0.3146, abs=2e-4)


def test_t_lb_rejects_bad_limits():
    with pytest.raises(ValueError):
        t_lb(0, 0, 1.0, 0.0, 0.9)


def test_split_noop_when_small():
    coords = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    out = split_cluster(coords, 0.2, max_extent_m=4.5, min_voxels=1)
    assert len(out) == 1 and len(out[0]) == 3


def test_split_line_in_half():
    coords = np.array([[i, 0, 0] for i in range(20)])
    out = split_cluster(coords, 0.2, max_extent_m=2.0, min_voxels=1)
    assert len(out) == 2
    assert sorted(len(p) for p in out) == [10, 10]


def test_split_preserves_voxels():
    rng = np.random.default_rng(3)
    coords = np.unique(rng.integers(0, 25, size=(120, 3)), axis=0)
    out = split_cluster(coords, 0.2, max_extent_m=1.5, min_voxels=3)
    merged = np.vstack(out)
    assert len(merged) == len(coords)
    a = set(map(tuple, coords.tolist()))
    b = set(map(tuple, merged.tolist()))
    assert a == b


def wall_map(nx=24, ny=24, nz=6):
    """Free half-space [0:12) with unknown beyond: frontier plane at x=11."""
    m = VoxelMap((0, 0, 0), 0.2, (nx, ny, nz))
    m.grid[0:12, :, :] = FREE
    return m


def full_box(m):
    return Aabb((0, 0, 0), tuple(d - 1 for d in m.dims))


def manager(m, **kw):
    params = FrontierParams(**kw) if kw else FrontierParams()
    return FrontierManager(m, SensorModel(), params)


def test_detect_wall_frontier():
    m = wall_map()
    fm = manager(m, max_extent_m=100.0)
    fm.update([full_box(m)])
    assert len(fm.clusters) == 1
    (cluster,) = fm.clusters.values()
    mask = frontier_mask(m.grid)
    assert len(cluster.voxels) == int(mask.sum())


def test_boxes_not_overlapping_leave_clusters_untouched():
    m = wall_map()
    fm = manager(m, max_extent_m=100.0)
    fm.update([full_box(m)])
    ids = set(fm.clusters.keys())
    far = Aabb((0, 0, 0), (2, 2, 2))  # far from the frontier plane at x=11
    fm.update([far])
    assert set(fm.clusters.keys()) == ids


def test_small_cluster_discarded():
    m = VoxelMap((0, 0, 0), 0.2, (10, 10, 3))
    m.grid[0:2, 0:1, 0:1] = FREE  # 2 frontier voxels at most
    fm = manager(m, min_voxels=5)
    fm.update([full_box(m)])
    assert len(fm.clusters) == 0


def test_changed_cluster_is_rebuilt():
    m = wall_map()
    fm = manager(m, max_extent_m=100.0)
    fm.update([full_box(m)])
    # advance the known region: old frontier voxels stop being frontier
    m.grid[12:14, :, :] = FREE
    fm.update([Aabb((11, 0, 0), (14, 23, 5))])
    for c in fm.clusters.values():
        coords = c.voxels
        mask = frontier_mask(m.grid).ravel()
        assert mask[coords].all()
    assert fm.total_frontier_voxels() == int(frontier_mask(m.grid).sum())


def test_frontier_soundness_and_completeness_random():
    rng = np.random.default_rng(8)
    gt = VoxelMap((0, 0, 0), 0.25, (16, 16, 6), fill=FREE)
    for _ in range(4):
        p = rng.integers(0, 12, size=3)
        gt.grid[p[0]:p[0] + 3, p[1]:p[1] + 3, :] = OCCUPIED
    m = VoxelMap(gt.origin, gt.resolution, gt.dims)
    fm = manager(m, min_voxels=1, max_extent_m=100.0)
    sensor = SensorModel(max_range=2.5, ray_density=1.0)
    for k in range(10):
        pose = rng.random(3) * np.array([4, 4, 1.4]) + 0.05
        if gt.grid[gt.world_to_voxel(pose)] != FREE:
            continue
        _, aabb = m.integrate_scan(pose, rng.random() * 6.28, sensor, gt)
        if aabb is None:
            continue
        fm.update([aabb])
        mask = frontier_mask(m.grid)
        flat = mask.ravel()
        # soundness: every stored voxel is frontier
        for c in fm.clusters.values():
            assert flat[c.voxels].all()
        # completeness (min_voxels=1): every frontier voxel is owned
        assert fm.total_frontier_voxels() == int(mask.sum())
        owners = set()
        for c in fm.clusters.values():
            for v in c.voxels:
                assert int(v) not in owners, "voxel in two clusters"
                owners.add(int(v))


def test_incremental_equals_batch_partition():
    rng = np.random.default_rng(21)
    for trial in range(4):
        gt = VoxelMap((0, 0, 0), 0.25, (12, 12, 6), fill=FREE)
        for _ in range(3):
            p = rng.integers(0, 9, size=3)
            gt.grid[p[0]:p[0] + 2, p[1]:p[1] + 2, :] = OCCUPIED
        inc_map = VoxelMap(gt.origin, gt.resolution, gt.dims)
        fm_inc = manager(inc_map, min_voxels=2, max_extent_m=1.2)
        sensor = SensorModel(max_range=2.0, ray_density=1.5)
        for k in range(8):
            pose = rng.random(3) * np.array([2.6, 2.6, 1.2]) + 0.1
            if gt.grid[gt.world_to_voxel(pose)] != FREE:
                continue
            _, aabb = inc_map.integrate_scan(pose, rng.random() * 6.28, sensor, gt)
            if aabb is not None:
                fm_inc.update([aabb])
        # batch detection over the final map state
        batch_map = inc_map.copy()
        fm_batch = manager(batch_map, min_voxels=2, max_extent_m=1.2)
        fm_batch.update([full_box(batch_map)])
        part_inc = {frozenset(int(v) for v in c.voxels) for c in fm_inc.clusters.values()}
        part_batch = {frozenset(int(v) for v in c.voxels) for c in fm_batch.clusters.values()}
        assert part_inc == part_batch, f"trial {trial}: partitions diverge"


def test_viewpoints_face_wall_and_are_sorted():
    m = wall_map()
    fm = manager(m, max_extent_m=100.0, r_min=0.6, r_max=1.4)
    fm.update([full_box(m)])
    (cluster,) = fm.clusters.values()
    assert cluster.viewpoints, "open wall frontier must have viewpoints"
    covs = [v.coverage for v in cluster.viewpoints]
    assert covs == sorted(covs, reverse=True)
    best = cluster.viewpoints[0]
    # viewpoint yaw points at the centroid
    want = math.atan2(cluster.centroid[1] - best.position[1],
                      cluster.centroid[0] - best.position[0])
    assert best.yaw == pytest.approx(want)
    # and it sits on the free side of the frontier
    assert m.grid[m.world_to_voxel(best.position)] == FREE


def test_all_shell_positions_blocked_gives_no_viewpoints():
    m = VoxelMap((0, 0, 0), 0.2, (30, 30, 6), fill=OCCUPIED)
    # tiny free pocket with a frontier voxel; shell radii all land in occupied
    m.grid[10, 10, 2] = FREE
    m.grid[11, 10, 2] = UNKNOWN
    fm = manager(m, r_min=1.0, r_max=2.0)
    fm.update([full_box(m)])
    (cluster,) = fm.clusters.values()
    assert cluster.viewpoints == []


def test_membership_split_by_ownership():
    from voxplore.hgrid import Hgrid

    m = VoxelMap((0, 0, 0), 0.2, (40, 20, 6))
    m.grid[0:40, :, :][np.zeros((40, 20, 6), bool)] = FREE  # no-op, readability
    m.grid[0:8, :, :] = FREE
    hg = Hgrid(m, levels=1, coarsest_cell_m=4.0)  # 2x1x1 cells of 20 voxels
    fm = manager(m, max_extent_m=1.5)
    left_cell = hg.cell_containing_voxel((8, 10, 2))
    right_cell = hg.cell_containing_voxel((30, 10, 2))
    assert left_cell != right_cell
    fm.update([full_box(m)], owned_cells={left_cell}, hgrid=hg)
    assert fm.clusters
    for c in fm.clusters.values():
        assert c.anchor_cell == left_cell
        assert c.in_active_area
    # ownership flips: clusters move to the standby list, viewpoints retained
    vps_before = {cid: list(c.viewpoints) for cid, c in fm.clusters.items()}
    fm.refresh_membership(owned_cells={right_cell}, hgrid=hg)
    for cid, c in fm.clusters.items():
        assert not c.in_active_area
        assert c.viewpoints == vps_before[cid]


def test_cost_cache_symmetric_and_consistent():
    m = VoxelMap((0, 0, 0), 0.2, (40, 24, 6))
    m.grid[0:10, :, :] = FREE
    m.grid[0:40, 0:10, 0:6][:, :, :] = np.where(
        m.grid[0:40, 0:10, 0:6] == FREE, FREE, m.grid[0:40, 0:10, 0:6]
    )
    fm = manager(m, max_extent_m=1.0, r_min=0.4, r_max=1.2)
    fm.update([full_box(m)])
    act = [c for c in fm.active_clusters() if c.viewpoints]
    assert len(act) >= 2
    for a in act:
        for b in act:
            if a.cluster_id >= b.cluster_id:
                continue
            c_ab = fm.pair_cost(a.cluster_id, b.cluster_id)
            c_ba = fm.pair_cost(b.cluster_id, a.cluster_id)
            assert c_ab == c_ba
            assert math.isfinite(c_ab)
            recomputed = fm._viewpoint_cost(a, b, None)
            assert c_ab == pytest.approx(recomputed, abs=1e-9)
