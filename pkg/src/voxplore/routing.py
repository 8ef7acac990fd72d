"""Asymmetric open-route VRP/TSP with a virtual depot, plus an exact oracle.

Open coverage routes (start fixed at each vehicle, free end) are reduced to a
standard routing problem by a virtual depot whose edges to the vehicle nodes
carry a huge negative cost, forcing the depot next to the vehicles in any
optimal tour.  Capacity is a soft penalty so an answer always exists.  Small
instances are solved exactly by dynamic programming over subsets; larger ones
by seeded multi-restart local search (2-opt, or-opt, relocate, swap).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

M_INF_SCALE = 1.0e6
UNREACHABLE_SCALE = 1.0e3
LAMBDA_CAP_SCALE = 10.0
EXACT_MAX_TASKS = 9
ORACLE_MAX_TASKS = 9


@dataclass(frozen=True)
class Role:
    kind: str  # depot | robot | cell | cluster | endcell
    ref: int | None = None


@dataclass
class CostMatrix:
    costs: np.ndarray
    roles: list
    m_inf: float

    @property
    def n(self) -> int:
        return len(self.roles)

    def nodes_of(self, kind: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r.kind == kind]

    @property
    def robot_nodes(self) -> list[int]:
        return self.nodes_of("robot")

    @property
    def task_nodes(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r.kind in ("cell", "cluster")]

    @property
    def endcell_node(self) -> int | None:
        nodes = self.nodes_of("endcell")
        return nodes[0] if nodes else None


@dataclass
class RouteSolution:
    routes: list  # per-vehicle node-index lists, each starting at its robot node
    total_cost: float
    demands_served: list

    def task_refs(self, matrix: CostMatrix) -> list:
        return [
            [matrix.roles[i].ref for i in route[1:] if matrix.roles[i].kind in ("cell", "cluster")]
            for route in self.routes
        ]


# ---------------------------------------------------------------------------
# matrix builders
# ---------------------------------------------------------------------------


def build_avrp_matrix(
    cells,
    robots,
    robot_cell_cost,
    cell_cell_cost,
    prev_first: dict | None = None,
    beta_con: float = 0.0,
):
    """Assemble the (n_cells + n_robots + 1)^2 block cost matrix.

    `cells` is a sequence of (cell_id, demand); `robots` a sequence of robot
    ids; the two cost callables may return inf for unreachable pairs.  The
    consistency term adds `beta_con` to every robot->cell entry except the
    cell that robot was directly connected to in the previous coverage path
    (`prev_first`: robot id -> cell id), so ties resolve toward the previous
    pattern while all entries stay non-negative.

    Returns (CostMatrix, demands) with demands aligned to matrix nodes.
    """
    if not cells:
        raise ValueError("need at least one cell")
    cell_ids = [c[0] for c in cells]
    v = len(robots)
    n = len(cells)
    prev_first = prev_first or {}

    qh = np.zeros((v, n))
    for i, rid in enumerate(robots):
        for h, cid in enumerate(cell_ids):
            qh[i, h] = robot_cell_cost(i, cid)
        if not np.any(np.isfinite(qh[i])):
            raise ValueError(f"robot {rid} cannot reach any cell: degenerate instance")

    ch = np.zeros((n, n))
    for h1 in range(n):
        for h2 in range(h1 + 1, n):
            c = cell_cell_cost(cell_ids[h1], cell_ids[h2])
            ch[h1, h2] = c
            ch[h2, h1] = c

    finite_vals = np.concatenate([qh[np.isfinite(qh)].ravel(), ch[np.isfinite(ch)].ravel()])
    max_fin = float(finite_vals.max()) if len(finite_vals) else 1.0
    unreach = UNREACHABLE_SCALE * (max_fin + 1.0)
    m_inf = M_INF_SCALE * (max_fin + 1.0)
    qh = np.where(np.isfinite(qh), qh, unreach)
    ch = np.where(np.isfinite(ch), ch, unreach)

    for i, rid in enumerate(robots):
        prev = prev_first.get(rid)
        for h, cid in enumerate(cell_ids):
            if cid != prev:
                qh[i, h] += beta_con

    size = 1 + v + n
    costs = np.zeros((size, size))
    costs[0, 1:1 + v] = -m_inf
    costs[1:1 + v, 1 + v:] = qh
    costs[1 + v:, 1:1 + v] = qh.T
    costs[1 + v:, 1 + v:] = ch

    roles = [Role("depot")] + [Role("robot", r) for r in robots] + [
        Role("cell", cid) for cid in cell_ids
    ]
    demands_list = [0] * (1 + v) + [int(c[1]) for c in cells]
    return CostMatrix(costs, roles, m_inf), np.asarray(demands_list, dtype=np.int64)


def build_open_tsp_matrix(task_ids, robot_costs, task_costs, end_costs=None, kind="cluster"):
    """Fixed-start (optionally fixed-end) TSP matrix in the paper block form.

    `robot_costs[k]` is the robot-to-task cost, `task_costs(a, b)` the
    symmetric task connection cost, and `end_costs[k]` (when given) the
    task-to-terminal cost, adding an end node tied to the depot by the
    -M_inf sentinel.
    """
    n = len(task_ids)
    qf = np.array([robot_costs[t] for t in task_ids], dtype=float)
    cf = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            c = task_costs(task_ids[a], task_ids[b])
            cf[a, b] = c
            cf[b, a] = c
    hf = None
    if end_costs is not None:
        hf = np.array([end_costs[t] for t in task_ids], dtype=float)

    pool = [qf[np.isfinite(qf)], cf[np.isfinite(cf)].ravel()]
    if hf is not None:
        pool.append(hf[np.isfinite(hf)])
    finite_vals = np.concatenate(pool) if pool else np.zeros(1)
    max_fin = float(finite_vals.max()) if len(finite_vals) else 1.0
    unreach = UNREACHABLE_SCALE * (max_fin + 1.0)
    m_inf = M_INF_SCALE * (max_fin + 1.0)
    qf = np.where(np.isfinite(qf), qf, unreach)
    cf = np.where(np.isfinite(cf), cf, unreach)
    if hf is not None:
        hf = np.where(np.isfinite(hf), hf, unreach)

    size = 2 + n + (1 if hf is not None else 0)
    costs = np.zeros((size, size))
    costs[0, 1] = -m_inf
    costs[1, 2:2 + n] = qf
    costs[2:2 + n, 1] = qf
    costs[2:2 + n, 2:2 + n] = cf
    roles = [Role("depot"), Role("robot", 0)] + [Role(kind, t) for t in task_ids]
    if hf is not None:
        costs[-1, 0] = -m_inf
        costs[2:2 + n, -1] = hf
        costs[-1, 2:2 + n] = hf
        roles.append(Role("endcell"))
    return CostMatrix(costs, roles, m_inf)


# ---------------------------------------------------------------------------
# objective plumbing
# ---------------------------------------------------------------------------


class _Reduced:
    """Open-route view of a CostMatrix: starts, tasks, optional end node."""

    def __init__(self, matrix: CostMatrix, demands=None, capacity_ratio: float = 1.0):
        self.matrix = matrix
        self.D = matrix.costs
        self.starts = matrix.robot_nodes
        self.tasks = matrix.task_nodes
        self.end = matrix.endcell_node
        if demands is None:
            demands = np.zeros(matrix.n, dtype=np.int64)
        self.demands = np.asarray(demands)
        total = int(self.demands[self.tasks].sum()) if self.tasks else 0
        self.capacity = capacity_ratio * total
        finite = self.D[np.abs(self.D) < matrix.m_inf * 0.5]
        self.lam_cap = LAMBDA_CAP_SCALE * float(finite.max()) if len(finite) else 0.0

    def route_cost(self, start: int, seq) -> float:
        c = 0.0
        prev = start
        for t in seq:
            c += self.D[prev, t]
            prev = t
        if self.end is not None:
            c += self.D[prev, self.end]
        return c

    def penalty(self, served: float) -> float:
        return self.lam_cap * max(0.0, served - self.capacity)

    def objective(self, task_routes) -> float:
        total = 0.0
        for v, seq in enumerate(task_routes):
            total += self.route_cost(self.starts[v], seq)
            total += self.penalty(float(self.demands[list(seq)].sum()) if seq else 0.0)
        return total

    def solution(self, task_routes) -> RouteSolution:
        routes = []
        served = []
        for v, seq in enumerate(task_routes):
            routes.append([self.starts[v]] + list(seq))
            served.append(int(self.demands[list(seq)].sum()) if seq else 0)
        return RouteSolution(routes, self.objective(task_routes), served)


# ---------------------------------------------------------------------------
# exact DP over subsets
# ---------------------------------------------------------------------------


_MASK_LAYERS: dict = {}


def _masks_by_popcount(n: int):
    if n not in _MASK_LAYERS:
        layers = [[] for _ in range(n + 1)]
        for m in range(1 << n):
            layers[bin(m).count("1")].append(m)
        _MASK_LAYERS[n] = [np.array(x, dtype=np.int64) for x in layers]
    return _MASK_LAYERS[n]


def _path_dp(red: _Reduced, start: int):
    """dp[S][j]: cheapest path start -> (visit S) ending at task j.

    Held-Karp forward pass vectorized layer by layer over all masks of equal
    popcount.  Returns (dp, parent) arrays over bitmasks; tasks indexed by
    position in red.tasks.
    """
    tasks = red.tasks
    n = len(tasks)
    Dt = red.D[np.ix_(tasks, tasks)].astype(float)
    D0 = red.D[start, tasks].astype(float)
    full = 1 << n
    dp = np.full((full, n), np.inf)
    parent = np.full((full, n), -1, dtype=np.int32)
    idx = np.arange(n)
    dp[1 << idx, idx] = D0
    layers = _masks_by_popcount(n)
    for k in range(1, n):
        layer = layers[k]
        for j in range(n):
            bit = 1 << j
            pm = layer[(layer & bit) == 0]
            if len(pm) == 0:
                continue
            cand = dp[pm] + Dt[:, j][None, :]  # invalid ends are inf already
            amin = np.argmin(cand, axis=1)
            vals = cand[np.arange(len(pm)), amin]
            new = pm | bit
            cur = dp[new, j]
            better = vals < cur - 1e-12
            if better.any():
                dp[new[better], j] = vals[better]
                parent[new[better], j] = amin[better]
    return dp, parent


def _dp_route(red: _Reduced, dp, parent, mask: int, start: int) -> tuple[float, list]:
    """Best open route over the task subset `mask` (end leg included)."""
    tasks = red.tasks
    if mask == 0:
        if red.end is not None:
            return float(red.D[start, red.end]), []
        return 0.0, []
    n = len(tasks)
    best = np.inf
    arg = -1
    for j in range(n):
        if not mask & (1 << j):
            continue
        cand = dp[mask, j]
        if red.end is not None:
            cand = cand + red.D[tasks[j], red.end]
        if cand < best - 1e-12 or (abs(cand - best) <= 1e-12 and j < arg):
            best = cand
            arg = j
    seq = []
    S, j = mask, arg
    while j >= 0:
        seq.append(tasks[j])
        nj = parent[S, j]
        S ^= 1 << j
        j = nj
    seq.reverse()
    return float(best), seq


def _solve_exact(red: _Reduced) -> RouteSolution:
    tasks = red.tasks
    n = len(tasks)
    v = len(red.starts)
    if v == 1:
        dp, parent = _path_dp(red, red.starts[0])
        full = (1 << n) - 1
        cost, seq = _dp_route(red, dp, parent, full, red.starts[0])
        return red.solution([seq])
    if v == 2:
        dp0, par0 = _path_dp(red, red.starts[0])
        dp1, par1 = _path_dp(red, red.starts[1])
        full = (1 << n) - 1
        # vectorized combine: best open-route cost per subset, both vehicles
        ends = [red.D[tasks, red.end] if red.end is not None else np.zeros(n) for _ in (0, 1)]
        best0 = np.min(dp0 + ends[0][None, :], axis=1)
        best1 = np.min(dp1 + ends[1][None, :], axis=1)
        empty0 = red.D[red.starts[0], red.end] if red.end is not None else 0.0
        empty1 = red.D[red.starts[1], red.end] if red.end is not None else 0.0
        best0[0] = empty0
        best1[0] = empty1
        dem = np.array([red.demands[t] for t in tasks], dtype=float)
        subset_dem = np.zeros(full + 1)
        for S in range(1, full + 1):
            low = S & -S
            subset_dem[S] = subset_dem[S ^ low] + dem[low.bit_length() - 1]
        pen0 = red.lam_cap * np.maximum(0.0, subset_dem - red.capacity)
        pen1 = red.lam_cap * np.maximum(0.0, subset_dem[::-1] - red.capacity)
        total = best0 + best1[::-1] + pen0 + pen1
        S = int(np.argmin(total))
        _, seq0 = _dp_route(red, dp0, par0, S, red.starts[0])
        _, seq1 = _dp_route(red, dp1, par1, full ^ S, red.starts[1])
        return red.solution([seq0, seq1])
    raise ValueError("exact solver supports 1 or 2 vehicles")


# ---------------------------------------------------------------------------
# local-search heuristic
# ---------------------------------------------------------------------------


def _construct(red: _Reduced, rng: np.random.Generator | None) -> list:
    """Greedy attraction-based assignment, then nearest-neighbor ordering."""
    tasks = list(red.tasks)
    v = len(red.starts)
    D = red.D
    n = len(tasks)
    dem = red.demands[tasks].astype(float)
    attract = np.stack([D[s, tasks] for s in red.starts])  # (v, n)
    if rng is not None:
        attract = attract * (1.0 + 0.3 * rng.random(attract.shape))
    members: list[list[int]] = [[] for _ in range(v)]
    loads = np.zeros(v)
    open_mask = np.ones(n, dtype=bool)
    lam, cap = red.lam_cap, red.capacity
    for _ in range(n):
        pen = lam * (
            np.maximum(0.0, loads[:, None] + dem[None, :] - cap)
            - np.maximum(0.0, loads[:, None] - cap)
        )
        score = attract + pen
        score[:, ~open_mask] = np.inf
        w, t = np.unravel_index(int(np.argmin(score)), score.shape)
        members[int(w)].append(int(t))
        loads[int(w)] += dem[t]
        open_mask[t] = False
        attract[int(w)] = np.minimum(attract[int(w)], D[tasks[t], tasks])
    routes = []
    for w in range(v):
        seq = []
        cur = red.starts[w]
        rest = list(members[w])
        while rest:
            costs = [(float(D[cur, tasks[j]]), j) for j in rest]
            _, nxt = min(costs)
            seq.append(tasks[nxt])
            cur = tasks[nxt]
            rest.remove(nxt)
        routes.append(seq)
    return routes


class _SearchState:
    """Array view of a route set for vectorized move scans.

    Works on an extended matrix with a trailing END sentinel column so the
    open end of a route (or the fixed terminal node) costs uniformly.
    """

    def __init__(self, red: _Reduced):
        self.red = red
        size = red.matrix.n
        self.END = size
        Dx = np.zeros((size + 1, size + 1))
        Dx[:size, :size] = red.D
        if red.end is not None:
            Dx[:size, self.END] = red.D[:, red.end]
        self.Dx = Dx
        self.dem_node = np.zeros(size + 1)
        self.dem_node[:size] = red.demands.astype(float)
        t = red.tasks
        if t:
            block = red.D[np.ix_(t, t)]
            self.tasks_sym = bool(np.allclose(block, block.T))
        else:
            self.tasks_sym = True

    def rebuild(self, routes):
        red = self.red
        flat, prv, nxt, troute = [], [], [], []
        ea, eb, eroute = [], [], []
        loads = []
        for vi, seq in enumerate(routes):
            prev = red.starts[vi]
            for i, tnode in enumerate(seq):
                flat.append(tnode)
                prv.append(prev)
                nxt.append(seq[i + 1] if i + 1 < len(seq) else self.END)
                troute.append(vi)
                ea.append(prev)
                eb.append(tnode)
                prev = tnode
            ea.append(prev)
            eb.append(self.END)
            eroute.append([vi] * (len(seq) + 1))
            loads.append(float(self.dem_node[seq].sum()) if seq else 0.0)
        self.flat = np.array(flat, dtype=np.int64) if flat else np.empty(0, np.int64)
        self.prv = np.array(prv, dtype=np.int64) if prv else np.empty(0, np.int64)
        self.nxt = np.array(nxt, dtype=np.int64) if nxt else np.empty(0, np.int64)
        self.troute = np.array(troute, dtype=np.int64) if troute else np.empty(0, np.int64)
        self.ea = np.array(ea, dtype=np.int64)
        self.eb = np.array(eb, dtype=np.int64)
        self.eroute = np.concatenate([np.array(r, dtype=np.int64) for r in eroute])
        self.loads = np.array(loads)

    def pen_delta(self, src_route, seg_dem):
        """(n_items, n_edges) capacity-penalty change for cross-route moves."""
        lam, cap = self.red.lam_cap, self.red.capacity
        le = self.loads[self.eroute]  # (E,)
        lt = self.loads[src_route]    # (S,)
        gain_dst = lam * (
            np.maximum(0.0, le[None, :] + seg_dem[:, None] - cap)
            - np.maximum(0.0, le[None, :] - cap)
        )
        gain_src = lam * (
            np.maximum(0.0, lt - seg_dem - cap) - np.maximum(0.0, lt - cap)
        )
        delta = gain_dst + gain_src[:, None]
        same = src_route[:, None] == self.eroute[None, :]
        return np.where(same, 0.0, delta)


def _scan_segment_moves(st: _SearchState, length: int):
    """Best or-opt move of `length`-task segments; returns (delta, move)."""
    n = len(st.flat)
    if n < length:
        return None
    if length == 1:
        seg_start = np.arange(n)
    else:
        # flat entries are laid out route by route, so a segment is any run of
        # `length` consecutive entries whose ends share a route
        seg_start = np.nonzero(st.troute[:n - length + 1] == st.troute[length - 1:])[0]
        if len(seg_start) == 0:
            return None
    s_first = st.flat[seg_start]
    s_last = st.flat[seg_start + length - 1]
    s_prev = st.prv[seg_start]
    s_next = st.nxt[seg_start + length - 1]
    s_route = st.troute[seg_start]
    Dx = st.Dx
    seg_dem = np.zeros(len(seg_start))
    for k in range(length):
        seg_dem += st.dem_node[st.flat[seg_start + k]]

    removed = Dx[s_prev, s_first] + Dx[s_last, s_next] - Dx[s_prev, s_next]
    cut = Dx[st.ea, st.eb][None, :]
    pen = st.pen_delta(s_route, seg_dem)
    ins = Dx[st.ea[None, :], s_first[:, None]] + Dx[s_last[:, None], st.eb[None, :]] - cut
    delta = ins - removed[:, None] + pen

    # mask edges touching the segment itself or its enclosing edges
    bad = np.zeros(delta.shape, dtype=bool)
    for k in range(length):
        node = st.flat[seg_start + k]
        bad |= st.ea[None, :] == node[:, None]
        bad |= st.eb[None, :] == node[:, None]
    delta = np.where(bad, np.inf, delta)

    flip = False
    if length > 1 and st.tasks_sym:
        ins_f = Dx[st.ea[None, :], s_last[:, None]] + Dx[s_first[:, None], st.eb[None, :]] - cut
        delta_f = np.where(bad, np.inf, ins_f - removed[:, None] + pen)
        if delta_f.min(initial=np.inf) < delta.min(initial=np.inf):
            delta = delta_f
            flip = True
    flat_idx = int(np.argmin(delta))
    si, ei = divmod(flat_idx, delta.shape[1])
    if not np.isfinite(delta[si, ei]):
        return None
    return float(delta[si, ei]), ("oropt", length, int(seg_start[si]), int(ei), flip)


def _scan_swap(st: _SearchState):
    n = len(st.flat)
    if n < 2:
        return None
    Dx = st.Dx
    f, p, nx = st.flat, st.prv, st.nxt
    # replacing t1 by t2 in t1's slot, elementwise over pairs (t1, t2)
    rep = Dx[p[:, None], f[None, :]] + Dx[f[None, :], nx[:, None]] \
        - (Dx[p, f] + Dx[f, nx])[:, None]
    delta = rep + rep.T
    lam, cap = st.red.lam_cap, st.red.capacity
    d = st.dem_node[f]
    l1 = st.loads[st.troute]
    pen_new = lam * np.maximum(0.0, l1[:, None] - d[:, None] + d[None, :] - cap)
    pen_old = lam * np.maximum(0.0, l1 - cap)
    delta = delta + (pen_new - pen_old[:, None]) + (pen_new.T - pen_old[None, :])
    same = st.troute[:, None] == st.troute[None, :]
    delta = np.where(same, np.inf, delta)
    idx = int(np.argmin(delta))
    i, j = divmod(idx, n)
    if not np.isfinite(delta[i, j]):
        return None
    return float(delta[i, j]), ("swap", int(i), int(j))


def _scan_2opt(st: _SearchState, routes):
    if not st.tasks_sym:
        return None
    best = (np.inf, None)
    Dx = st.Dx
    for vi, seq in enumerate(routes):
        m = len(seq)
        if m < 3:
            continue
        nodes = np.array([st.red.starts[vi]] + seq + [st.END], dtype=np.int64)
        # reversing seq[i..j] (1-based over nodes): delta computed on boundary edges
        i_idx = np.arange(1, m)
        j_idx = np.arange(2, m + 1)
        ii, jj = np.meshgrid(i_idx, j_idx, indexing="ij")
        valid = jj > ii
        a = nodes[ii - 1]
        b = nodes[ii]
        c = nodes[jj]
        dnode = nodes[jj + 1]
        delta = Dx[a, c] + Dx[b, dnode] - Dx[a, b] - Dx[c, dnode]
        delta = np.where(valid, delta, np.inf)
        k = int(np.argmin(delta))
        x, y = divmod(k, delta.shape[1])
        if np.isfinite(delta[x, y]) and delta[x, y] < best[0]:
            best = (float(delta[x, y]), ("2opt", vi, int(ii[x, y]), int(jj[x, y])))
    return None if best[1] is None else best


def _apply_move(st: _SearchState, routes, move):
    kind = move[0]
    if kind == "oropt":
        _, length, seg_start, edge_idx, flip = move
        src_route = int(st.troute[seg_start])
        # locate segment inside its route by node identity
        first_node = int(st.flat[seg_start])
        seq = routes[src_route]
        i = seq.index(first_node)
        seg = seq[i:i + length]
        if flip:
            seg = seg[::-1]
        dst_route = int(st.eroute[edge_idx])
        ea = int(st.ea[edge_idx])
        del seq[i:i + length]
        dseq = routes[dst_route]
        if ea == st.red.starts[dst_route]:
            pos = 0
        else:
            pos = dseq.index(ea) + 1
        dseq[pos:pos] = seg
    elif kind == "swap":
        _, i, j = move
        t1, t2 = int(st.flat[i]), int(st.flat[j])
        r1, r2 = int(st.troute[i]), int(st.troute[j])
        a = routes[r1].index(t1)
        b = routes[r2].index(t2)
        routes[r1][a], routes[r2][b] = t2, t1
    elif kind == "2opt":
        _, vi, i, j = move
        seq = routes[vi]
        seq[i - 1:j] = reversed(seq[i - 1:j])
    return routes


def _improve(red: _Reduced, routes: list) -> list:
    """Vectorized best-improvement local search until a local optimum."""
    st = _SearchState(red)
    eps = -1e-6
    for _ in range(10000):
        st.rebuild(routes)
        candidates = []
        for L in (1, 2, 3):
            mv = _scan_segment_moves(st, L)
            if mv:
                candidates.append(mv)
        mv = _scan_swap(st)
        if mv:
            candidates.append(mv)
        mv = _scan_2opt(st, routes)
        if mv:
            candidates.append(mv)
        if not candidates:
            break
        delta, move = min(candidates, key=lambda x: x[0])
        if delta >= eps:
            break
        routes = _apply_move(st, routes, move)
    return routes


def _perturb(red: _Reduced, routes: list, rng: np.random.Generator) -> list:
    """Kick move for iterated local search: relocate a few random tasks."""
    routes = [list(seq) for seq in routes]
    flat = [(vi, t) for vi, seq in enumerate(routes) for t in seq]
    if len(flat) < 2:
        return routes
    k = min(len(flat), int(rng.integers(2, 5)))
    picks = rng.choice(len(flat), size=k, replace=False)
    moved = [flat[i][1] for i in sorted(int(p) for p in picks)]
    for vi in range(len(routes)):
        routes[vi] = [t for t in routes[vi] if t not in moved]
    for t in moved:
        w = int(rng.integers(0, len(routes)))
        pos = int(rng.integers(0, len(routes[w]) + 1))
        routes[w].insert(pos, t)
    return routes


def _solve_heuristic(red: _Reduced, rng_seed: int, restarts: int,
                     warm_start=None, ils_iters: int | None = None) -> RouteSolution:
    rng = np.random.default_rng(rng_seed)
    candidates = []
    base = _construct(red, None)
    candidates.append(base)
    if warm_start is not None:
        candidates.append([list(seq) for seq in warm_start])
    for _ in range(max(0, restarts - len(candidates))):
        candidates.append(_construct(red, rng))
    best = (math.inf, None)

    def consider(routes):
        nonlocal best
        cost = red.objective(routes)
        key_routes = [tuple(r) for r in routes]
        if cost < best[0] - 1e-9 or (
            abs(cost - best[0]) <= 1e-9 and best[1] is not None
            and key_routes < [tuple(r) for r in best[1]]
        ):
            best = (cost, routes)

    for cand in candidates:
        consider(_improve(red, [list(seq) for seq in cand]))
    if ils_iters is None:
        ils_iters = max(6, len(red.tasks) // 2)
    for _ in range(ils_iters):
        kicked = _perturb(red, best[1], rng)
        consider(_improve(red, kicked))
    return red.solution(best[1])


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------


def solve_cvrp(matrix: CostMatrix, demands, capacity_ratio: float,
               rng_seed: int = 0, restarts: int = 6, warm_start=None,
               ils_iters: int | None = None, exact_max: int = EXACT_MAX_TASKS) -> RouteSolution:
    """Open-route CVRP over the matrix's robot nodes (capacity as soft penalty).

    `warm_start` (per-vehicle task-node lists) seeds one local-search restart,
    guaranteeing the result is never worse than the warm pattern's objective.
    """
    red = _Reduced(matrix, demands, capacity_ratio)
    if not red.tasks:
        return red.solution([[] for _ in red.starts])
    if len(red.starts) <= 2 and len(red.tasks) <= exact_max:
        return _solve_exact(red)
    return _solve_heuristic(red, rng_seed, restarts, warm_start, ils_iters)


def solve_open_tsp(matrix: CostMatrix, rng_seed: int = 0, restarts: int = 4,
                   ils_iters: int | None = None, exact_max: int = EXACT_MAX_TASKS) -> list:
    """Single open route robot -> tasks (-> endcell); returns node sequence."""
    red = _Reduced(matrix)
    start = red.starts[0]
    if not red.tasks:
        seq: list[int] = []
    elif len(red.tasks) <= exact_max:
        seq = _solve_exact(red).routes[0][1:]
    else:
        seq = _solve_heuristic(red, rng_seed, restarts, None, ils_iters).routes[0][1:]
    out = [start] + list(seq)
    if red.end is not None:
        out.append(red.end)
    return out


_PERM_TABLES: dict = {}


def _perm_table(k: int) -> np.ndarray:
    tab = _PERM_TABLES.get(k)
    if tab is None:
        tab = np.array(list(itertools.permutations(range(k))), dtype=np.int16)
        _PERM_TABLES[k] = tab
    return tab


def oracle_solve(matrix: CostMatrix, demands=None, capacity_ratio: float = 1.0) -> RouteSolution:
    """Exhaustive enumeration over all assignments x permutations (<= 9 tasks)."""
    red = _Reduced(matrix, demands, capacity_ratio)
    tasks = red.tasks
    n = len(tasks)
    if n > ORACLE_MAX_TASKS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_TASKS} tasks, got {n}")
    v = len(red.starts)
    if n == 0:
        return red.solution([[] for _ in red.starts])

    memo: dict = {}

    def best_order(start_node: int, subset: tuple) -> tuple[float, tuple]:
        key = (start_node, subset)
        if key in memo:
            return memo[key]
        if not subset:
            cost = 0.0 if red.end is None else float(red.D[start_node, red.end])
            memo[key] = (cost, ())
            return memo[key]
        k = len(subset)
        perms = _perm_table(k)
        nodes = np.asarray(subset, dtype=np.int64)
        seqs = nodes[perms]  # (k!, k)
        costs = red.D[start_node, seqs[:, 0]].astype(float)
        for i in range(k - 1):
            costs = costs + red.D[seqs[:, i], seqs[:, i + 1]]
        if red.end is not None:
            costs = costs + red.D[seqs[:, -1], red.end]
        cmin = float(costs.min())
        ties = np.nonzero(costs <= cmin + 1e-12)[0]
        best_perm = min(tuple(int(x) for x in seqs[t]) for t in ties)
        memo[key] = (cmin, best_perm)
        return memo[key]

    best_total = (math.inf, None)
    for assign in itertools.product(range(v), repeat=n):
        total = 0.0
        routes = []
        for w in range(v):
            subset = tuple(tasks[j] for j in range(n) if assign[j] == w)
            c, perm = best_order(red.starts[w], subset)
            served = float(red.demands[list(subset)].sum()) if subset else 0.0
            total += c + red.penalty(served)
            routes.append(list(perm))
        key_routes = [tuple(r) for r in routes]
        if total < best_total[0] - 1e-9 or (
            abs(total - best_total[0]) <= 1e-9 and best_total[1] is not None
            and key_routes < [tuple(r) for r in best_total[1]]
        ):
            best_total = (total, routes)
    return red.solution(best_total[1])


def embed_closed_tours(matrix: CostMatrix, solution: RouteSolution) -> list:
    """Reconstruct the pre-stripping closed tours through the virtual depot."""
    depot = matrix.nodes_of("depot")[0]
    tours = []
    for route in solution.routes:
        tour = [depot] + list(route)
        if matrix.endcell_node is not None:
            tour.append(matrix.endcell_node)
        tour.append(depot)
        tours.append(tour)
    return tours
