import itertools
import math

import numpy as np
import pytest

from voxplore.routing import (
    CostMatrix,
    Role,
    build_avrp_matrix,
    build_open_tsp_matrix,
    embed_closed_tours,
    oracle_solve,
    solve_cvrp,
    solve_open_tsp,
)
from voxplore import routing


def euclid_instance(robot_xy, cell_xy, demands=None, prev_first=None, beta_con=0.0):
    """Planar instance helper: cells are ids 100, 101, ..."""
    cells = [(100 + i, 1 if demands is None else demands[i]) for i in range(len(cell_xy))]
    pos = {100 + i: np.array(p, dtype=float) for i, p in enumerate(cell_xy)}
    rpos = [np.array(p, dtype=float) for p in robot_xy]

    def robot_cost(ri, cid):
        return float(np.linalg.norm(rpos[ri] - pos[cid]))

    def cell_cost(a, b):
        return float(np.linalg.norm(pos[a] - pos[b]))

    return build_avrp_matrix(
        cells, list(range(len(robot_xy))), robot_cost, cell_cost,
        prev_first=prev_first, beta_con=beta_con,
    )


def test_matrix_block_shape_one_cell_two_robots():
    matrix, demands = euclid_instance([(0, 0), (5, 0)], [(1, 1)])
    assert matrix.n == 4
    assert matrix.roles[0].kind == "depot"
    assert [r.kind for r in matrix.roles] == ["depot", "robot", "robot", "cell"]
    # depot -> robots carry the huge negative sentinel; everything else >= 0
    assert matrix.costs[0, 1] == -matrix.m_inf
    assert matrix.costs[0, 2] == -matrix.m_inf
    mask = np.ones_like(matrix.costs, dtype=bool)
    mask[0, 1] = mask[0, 2] = False
    assert np.all(matrix.costs[mask] >= 0)
    assert demands[3] == 1 and demands[:3].sum() == 0


def test_cell_block_symmetric():
    rng = np.random.default_rng(0)
    pts = rng.random((6, 2)) * 10
    matrix, _ = euclid_instance([(0, 0), (9, 9)], pts)
    ch = matrix.costs[3:, 3:]
    assert np.allclose(ch, ch.T)


def test_consistency_term_prefers_previous_first_cell():
    # robot 0 was directly connected to cell 100 in the last CP: every other
    # robot->cell entry gains beta_con, so the previous first edge is the
    # relatively cheapest among cost-equal patterns
    beta = 0.5
    matrix, _ = euclid_instance(
        [(0, 0), (4, 0)], [(2, 1), (2, -1)], prev_first={0: 100}, beta_con=beta,
    )
    base01 = float(np.hypot(2, 1))
    # entry (robot0, cell100) carries no consistency surcharge ...
    assert matrix.costs[1, 3] == pytest.approx(base01)
    # ... while the competing entries do
    assert matrix.costs[1, 4] == pytest.approx(base01 + beta)
    assert matrix.costs[2, 3] == pytest.approx(base01 + beta)
    assert matrix.costs[2, 4] == pytest.approx(base01 + beta)


def test_consistency_term_reproduces_previous_pattern_under_ties():
    # two mirror-image optimal patterns; the consistency bonus must lock in
    # whichever pattern was used previously
    robots = [(0, 0), (4, 0)]
    cells = [(2, 1), (2, -1)]
    for prev_cell, expect_first in ((100, 100), (101, 101)):
        matrix, demands = euclid_instance(
            robots, cells, prev_first={0: prev_cell}, beta_con=0.3,
        )
        sol = solve_cvrp(matrix, demands, capacity_ratio=1.0)
        refs = sol.task_refs(matrix)
        assert refs[0][0] == expect_first


def test_degenerate_instance_rejected():
    def robot_cost(ri, cid):
        return math.inf if ri == 0 else 1.0

    def cell_cost(a, b):
        return 1.0

    with pytest.raises(ValueError):
        build_avrp_matrix([(1, 1)], [0, 1], robot_cost, cell_cost)


def test_unreachable_replaced_by_large_finite():
    def robot_cost(ri, cid):
        if ri == 1 and cid == 101:
            return math.inf
        return 1.0

    def cell_cost(a, b):
        return 2.0

    matrix, _ = build_avrp_matrix([(100, 1), (101, 1)], [0, 1], robot_cost, cell_cost)
    entry = matrix.costs[2, 4]  # robot 1 -> cell 101
    assert np.isfinite(entry)
    assert entry > 100  # deferred, not dropped
    assert entry < matrix.m_inf


def test_single_cell_goes_to_closer_robot():
    matrix, demands = euclid_instance([(0, 0), (5, 0)], [(3, 0)])
    # robot 0 cost 3, robot 1 cost 2 -> assigned to robot 1
    sol = solve_cvrp(matrix, demands, capacity_ratio=1.0)
    refs = sol.task_refs(matrix)
    assert refs == [[], [100]]
    assert sol.total_cost == pytest.approx(2.0)


def test_six_cells_on_line_split_in_half():
    robot_xy = [(0, 0), (7, 0)]
    cell_xy = [(x, 0) for x in range(1, 7)]
    matrix, demands = euclid_instance(robot_xy, cell_xy)
    sol = solve_cvrp(matrix, demands, capacity_ratio=0.5)
    refs = sol.task_refs(matrix)
    assert refs[0] == [100, 101, 102]
    assert refs[1] == [105, 104, 103]
    oracle = oracle_solve(matrix, demands, capacity_ratio=0.5)
    assert sol.total_cost == pytest.approx(oracle.total_cost, abs=1e-9)


def test_capacity_binding_moves_cell_to_far_robot():
    robot_xy = [(0, 0), (10, 0)]
    cell_xy = [(1, 0), (1, 1), (2, 0)]
    matrix, demands = euclid_instance(robot_xy, cell_xy, demands=[10, 10, 10])
    sol = solve_cvrp(matrix, demands, capacity_ratio=0.4)
    refs = sol.task_refs(matrix)
    assert len(refs[1]) >= 1, "capacity penalty must push work to the far robot"
    oracle = oracle_solve(matrix, demands, capacity_ratio=0.4)
    assert sol.total_cost == pytest.approx(oracle.total_cost, rel=1e-9)


def tsp_matrix(robot_xy, cluster_xy, end_xy=None):
    ids = list(range(len(cluster_xy)))
    pos = {i: np.array(p, float) for i, p in enumerate(cluster_xy)}
    robot = np.array(robot_xy, float)
    rc = {i: float(np.linalg.norm(robot - pos[i])) for i in ids}
    ec = None
    if end_xy is not None:
        end = np.array(end_xy, float)
        ec = {i: float(np.linalg.norm(end - pos[i])) for i in ids}
    return build_open_tsp_matrix(
        ids, rc, lambda a, b: float(np.linalg.norm(pos[a] - pos[b])), ec
    )


def test_open_tsp_no_intermediates_with_end():
    matrix = tsp_matrix((0, 0), [], end_xy=(1, 1))
    seq = solve_open_tsp(matrix)
    assert [matrix.roles[i].kind for i in seq] == ["robot", "endcell"]


def test_open_tsp_three_clusters_matches_enumeration():
    clusters = [(3, 0), (1, 0), (5, 0)]
    matrix = tsp_matrix((0, 0), clusters, end_xy=(6, 0))
    seq = solve_open_tsp(matrix)
    refs = [matrix.roles[i].ref for i in seq if matrix.roles[i].kind == "cluster"]
    # brute-force all 3! orders including the end leg
    pos = {i: np.array(p, float) for i, p in enumerate(clusters)}
    robot, end = np.array((0, 0), float), np.array((6, 0), float)
    best = None
    for perm in itertools.permutations(range(3)):
        pts = [robot] + [pos[i] for i in perm] + [end]
        c = sum(float(np.linalg.norm(a - b)) for a, b in zip(pts, pts[1:]))
        if best is None or c < best[0] - 1e-12:
            best = (c, list(perm))
    assert refs == best[1]


def test_open_tsp_without_end_is_open_path():
    matrix = tsp_matrix((0, 0), [(1, 0), (2, 0), (4, 0)])
    seq = solve_open_tsp(matrix)
    kinds = [matrix.roles[i].kind for i in seq]
    assert kinds[0] == "robot" and "endcell" not in kinds
    refs = [matrix.roles[i].ref for i in seq[1:]]
    assert refs == [0, 1, 2]


def test_end_cell_flips_optimal_order():
    # going far-first is optimal when the route must finish near the start
    clusters = [(1, 0), (4, 0)]
    m_no_end = tsp_matrix((0, 0), clusters)
    seq1 = [m_no_end.roles[i].ref for i in solve_open_tsp(m_no_end)[1:]]
    assert seq1 == [0, 1]
    m_end = tsp_matrix((0, 0), clusters, end_xy=(0.5, 0))
    seq2 = [m_end.roles[i].ref for i in solve_open_tsp(m_end)[1:-1]]
    assert seq2 == [1, 0]


def test_empty_cell_set_round_trips():
    matrix = tsp_matrix((0, 0), [])
    assert solve_open_tsp(matrix) == [1]


def test_solver_matches_oracle_random_small():
    rng = np.random.default_rng(42)
    for trial in range(25):
        n = int(rng.integers(1, 8))
        robot_xy = rng.random((2, 2)) * 10
        cell_xy = rng.random((n, 2)) * 10
        demands = rng.integers(1, 30, size=n).tolist()
        ratio = float(rng.uniform(0.5, 1.0))
        matrix, dem = euclid_instance(robot_xy, cell_xy, demands=demands)
        sol = solve_cvrp(matrix, dem, capacity_ratio=ratio)
        oracle = oracle_solve(matrix, dem, capacity_ratio=ratio)
        assert sol.total_cost == pytest.approx(oracle.total_cost, rel=1e-9), (
            f"trial {trial}: solver {sol.total_cost} vs oracle {oracle.total_cost}"
        )
        assert sol.total_cost >= oracle.total_cost - 1e-9


def test_partition_property():
    rng = np.random.default_rng(1)
    cell_xy = rng.random((7, 2)) * 10
    matrix, dem = euclid_instance([(0, 0), (10, 10)], cell_xy)
    sol = solve_cvrp(matrix, dem, capacity_ratio=0.6)
    seen = []
    for route in sol.routes:
        assert matrix.roles[route[0]].kind == "robot"
        seen += route[1:]
    assert sorted(seen) == matrix.task_nodes


def test_virtual_depot_reduction_uses_sentinel_edges():
    # on the optimal closed ATSP tour of a 1-robot instance, the depot's
    # outgoing edge is the -M_inf edge to the robot
    matrix = tsp_matrix((0, 0), [(1, 0), (2, 1), (0, 2)])
    n = matrix.n
    best = None
    for perm in itertools.permutations(range(1, n)):
        tour = (0,) + perm + (0,)
        c = sum(matrix.costs[a, b] for a, b in zip(tour, tour[1:]))
        if best is None or c < best[0] - 1e-9:
            best = (c, tour)
    _, tour = best
    assert matrix.roles[tour[1]].kind == "robot", "depot must hand off to the robot"
    seq = solve_open_tsp(matrix)
    embedded = [0] + seq + [0]
    got = sum(matrix.costs[a, b] for a, b in zip(embedded, embedded[1:]))
    assert got == pytest.approx(best[0], rel=1e-12)


def test_embed_closed_tours_depot_adjacency():
    matrix, dem = euclid_instance([(0, 0), (6, 0)], [(1, 0), (5, 0), (3, 2)])
    sol = solve_cvrp(matrix, dem, capacity_ratio=0.7)
    for tour in embed_closed_tours(matrix, sol):
        assert matrix.roles[tour[0]].kind == "depot"
        assert matrix.roles[tour[1]].kind == "robot"
        assert tour[-1] == tour[0]


def test_determinism_same_seed_same_routes():
    rng = np.random.default_rng(5)
    cell_xy = rng.random((12, 2)) * 20  # beyond the exact-DP threshold
    matrix, dem = euclid_instance([(0, 0), (20, 20)], cell_xy)
    a = solve_cvrp(matrix, dem, capacity_ratio=0.6, rng_seed=3)
    b = solve_cvrp(matrix, dem, capacity_ratio=0.6, rng_seed=3)
    assert a.routes == b.routes
    assert a.total_cost == b.total_cost


def test_warm_start_never_worse():
    rng = np.random.default_rng(8)
    cell_xy = rng.random((14, 2)) * 20
    matrix, dem = euclid_instance([(0, 0), (20, 0)], cell_xy)
    tasks = matrix.task_nodes
    warm = [tasks[:7], tasks[7:]]
    red = routing._Reduced(matrix, dem, 0.6)
    warm_cost = red.objective(warm)
    sol = solve_cvrp(matrix, dem, capacity_ratio=0.6, warm_start=warm)
    assert sol.total_cost <= warm_cost + 1e-9


def test_heuristic_close_to_oracle_at_threshold():
    rng = np.random.default_rng(13)
    gaps = []
    for _ in range(10):
        cell_xy = rng.random((9, 2)) * 10
        matrix, dem = euclid_instance([(0, 0), (10, 10)], cell_xy)
        red = routing._Reduced(matrix, dem, 0.8)
        heur = routing._solve_heuristic(red, rng_seed=0, restarts=6)
        oracle = oracle_solve(matrix, dem, capacity_ratio=0.8)
        gaps.append(heur.total_cost / oracle.total_cost - 1.0)
    assert max(gaps) <= 0.01


def test_oracle_too_large_rejected():
    rng = np.random.default_rng(2)
    cell_xy = rng.random((10, 2)) * 10
    matrix, dem = euclid_instance([(0, 0), (1, 1)], cell_xy)
    with pytest.raises(ValueError):
        oracle_solve(matrix, dem, capacity_ratio=1.0)
