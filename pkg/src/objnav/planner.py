"""Fast-marching distance fields, goal selection, waypoint extraction and trap handling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from ._heap import pop_min, push_or_decrease
from .mapping import EXPLORED, OBSTACLE, VISITED, SemanticMap
from .world import FORWARD_STEP, Action, Pose


@dataclass(frozen=True)
class PlannerConfig:
    lam: float = 2.0
    stop_distance: float = 0.9
    obstacle_dilation: int = 2
    trap_patience: int = 3
    turn_tolerance_deg: float = 15.0

    def __post_init__(self):
        if self.lam <= 0 or self.stop_distance <= 0 or self.obstacle_dilation < 0 or self.trap_patience < 1:
            raise ValueError("planner parameters must be positive")


@dataclass(eq=False)
class DistanceField:
    d: np.ndarray
    sources: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def at(self, x: float, y: float) -> float:
        i, j = self.cell_of(x, y)
        h, w = self.d.shape
        if not (0 <= i < h and 0 <= j < w):
            return math.inf
        return float(self.d[i, j])

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((y - self.origin[1]) / self.resolution)),
            int(math.floor((x - self.origin[0]) / self.resolution)),
        )

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin[0] + (j + 0.5) * self.resolution, self.origin[1] + (i + 0.5) * self.resolution)


@numba.njit(cache=True)
def _solve_pair(a, b, h):
    if a > b:
        a, b = b, a
    if a == np.inf:
        return np.inf
    if b - a >= h:
        return a + h
    return 0.5 * (a + b + math.sqrt(2.0 * h * h - (a - b) * (a - b)))


@numba.njit(cache=True)
def _local_update(u, frozen, trav, i, j, n_rows, n_cols, h):
    inf = np.inf
    k = i * n_cols + j
    # axis stencil
    a = inf
    if i > 0 and frozen[k - n_cols]:
        a = u[k - n_cols]
    if i < n_rows - 1 and frozen[k + n_cols] and u[k + n_cols] < a:
        a = u[k + n_cols]
    b = inf
    if j > 0 and frozen[k - 1]:
        b = u[k - 1]
    if j < n_cols - 1 and frozen[k + 1] and u[k + 1] < b:
        b = u[k + 1]
    best = _solve_pair(a, b, h)
    # diagonal stencil, only through corners whose side cells are open
    c = inf
    e = inf
    for di in (-1, 1):
        ni = i + di
        if ni < 0 or ni >= n_rows:
            continue
        for dj in (-1, 1):
            nj = j + dj
            if nj < 0 or nj >= n_cols:
                continue
            kk = ni * n_cols + nj
            if not frozen[kk] or not (trav[ni * n_cols + j] and trav[k + dj]):
                continue
            if di == dj:
                if u[kk] < c:
                    c = u[kk]
            elif u[kk] < e:
                e = u[kk]
    diag = _solve_pair(c, e, h * 1.4142135623730951)
    return min(best, diag)


@numba.njit(cache=True)
def _box_clear(trav, n_cols, i0, j0, i1, j1):
    # the whole bounding box is open, so the straight segment is unobstructed
    for i in range(min(i0, i1), max(i0, i1) + 1):
        for j in range(min(j0, j1), max(j0, j1) + 1):
            if not trav[i * n_cols + j]:
                return False
    return True


@numba.njit(cache=True)
def _fmm(trav2d, src_i, src_j, h, max_dist, init_radius, stop_k):
    n_rows, n_cols = trav2d.shape
    n = n_rows * n_cols
    trav = trav2d.ravel()
    u = np.full(n, np.inf)
    frozen = np.zeros(n, dtype=np.bool_)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    size = 0
    r = init_radius
    for s in range(src_i.shape[0]):
        si = src_i[s]
        sj = src_j[s]
        k = si * n_cols + sj
        u[k] = 0.0
        size = push_or_decrease(heap, pos, u, size, k)
        # exact distances in a small open disc around each source
        for i in range(max(si - r, 0), min(si + r + 1, n_rows)):
            for j in range(max(sj - r, 0), min(sj + r + 1, n_cols)):
                kk = i * n_cols + j
                dd = h * math.sqrt((i - si) ** 2 + (j - sj) ** 2)
                if dd > r * h or dd >= u[kk] or not trav[kk]:
                    continue
                if _box_clear(trav, n_cols, si, sj, i, j):
                    u[kk] = dd
                    size = push_or_decrease(heap, pos, u, size, kk)
    while size > 0:
        k, size = pop_min(heap, pos, u, size)
        if u[k] > max_dist:
            break
        frozen[k] = True
        if k == stop_k:
            # everything downhill of the stop cell is settled already
            max_dist = min(max_dist, u[k] + 1e-9)
        i = k // n_cols
        j = k % n_cols
        for di in range(-1, 2):
            ni = i + di
            if ni < 0 or ni >= n_rows:
                continue
            for dj in range(-1, 2):
                nj = j + dj
                if nj < 0 or nj >= n_cols or (di == 0 and dj == 0):
                    continue
                kk = ni * n_cols + nj
                if frozen[kk] or not trav[kk]:
                    continue
                cand = _local_update(u, frozen, trav, ni, nj, n_rows, n_cols, h)
                if cand < u[kk]:
                    u[kk] = cand
                    size = push_or_decrease(heap, pos, u, size, kk)
    for k in range(n):
        if not frozen[k]:
            u[k] = np.inf
    return u.reshape(n_rows, n_cols)


def fmm(traversible: np.ndarray, sources, resolution: float, origin=(0.0, 0.0),
        max_dist: float = math.inf, init_radius: int = 5, stop_at=None) -> DistanceField:
    """First-order fast marching solve of ``|grad d| = 1`` from ``sources``.

    Each narrow-band update takes the smaller of the axis-aligned and the
    45-degree-rotated upwind stencils.  Cells within ``init_radius`` cells of a
    source whose bounding box with it is fully open start from their exact Euclidean distance.
    Cells farther than ``max_dist`` are left at ``inf``.  With ``stop_at`` the
    march ends once that cell is settled, which is all steepest descent from
    it needs.
    """
    src = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    if len(src) == 0:
        raise ValueError("fmm needs at least one source cell")
    trav = np.ascontiguousarray(traversible, dtype=np.bool_)
    if not trav[src[:, 0], src[:, 1]].all():
        raise ValueError("source cells must be traversible")
    stop_k = -1 if stop_at is None else int(stop_at[0]) * trav.shape[1] + int(stop_at[1])
    d = _fmm(trav, src[:, 0].copy(), src[:, 1].copy(), float(resolution), float(max_dist), int(init_radius), stop_k)
    return DistanceField(d, src, float(resolution), tuple(origin))


def select_goal(z: np.ndarray, d: DistanceField | np.ndarray, cfg: PlannerConfig = PlannerConfig()) -> tuple[int, int]:
    """Cell maximizing ``exp(-d/lam) * z`` over reachable cells.

    Scores are compared in the log domain to avoid underflow; ties go to the
    smaller distance, then to row-major order.
    """
    dd = d.d if isinstance(d, DistanceField) else np.asarray(d)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != dd.shape:
        raise ValueError("probability and distance maps differ in shape")
    reach = np.isfinite(dd)
    if not reach.any():
        raise ValueError("no reachable cell to select")
    with np.errstate(divide="ignore"):
        score = np.where(reach & (z > 0), np.log(np.where(z > 0, z, 1.0)) - dd / cfg.lam, -np.inf)
    best = score.max()
    if best == -np.inf:
        cand = reach
    else:
        cand = score == best
    dmin = dd[cand].min()
    flat = np.flatnonzero(cand & (dd == dmin))
    i, j = np.unravel_index(flat[0], dd.shape)
    return int(i), int(j)


_NEIGHBORS = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]


def descent_path(d_goal: DistanceField, start: tuple[int, int], length: float) -> list[tuple[int, int]]:
    """Steepest-descent cells from ``start`` until arc length reaches ``length`` or d hits 0."""
    d = d_goal.d
    h, w = d.shape
    cur = start
    path = [cur]
    arc = 0.0
    res = d_goal.resolution
    while d[cur] > 0 and arc < length - 1e-9:
        best, best_slope = None, 0.0
        for di, dj in _NEIGHBORS:
            ni, nj = cur[0] + di, cur[1] + dj
            if not (0 <= ni < h and 0 <= nj < w) or not np.isfinite(d[ni, nj]):
                continue
            step = res * (math.sqrt(2.0) if di and dj else 1.0)
            slope = (d[cur] - d[ni, nj]) / step
            if slope > best_slope:
                best, best_slope = (ni, nj), slope
        if best is None:
            break
        arc += res * (math.sqrt(2.0) if best[0] != cur[0] and best[1] != cur[1] else 1.0)
        cur = best
        path.append(cur)
    return path


def extract_waypoint(d_goal: DistanceField, pose: Pose, step: float = FORWARD_STEP) -> tuple[float, float]:
    start = d_goal.cell_of(pose.x, pose.y)
    if not np.isfinite(d_goal.at(pose.x, pose.y)):
        raise ValueError("agent cell is unreachable in the goal field")
    path = descent_path(d_goal, start, step)
    if len(path) == 1:
        return pose.x, pose.y
    return d_goal.cell_center(*path[-1])


def wrap_deg(a: float) -> float:
    a = math.fmod(a, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


def waypoint_to_action(pose: Pose, waypoint, cfg: PlannerConfig = PlannerConfig()) -> Action:
    dx, dy = waypoint[0] - pose.x, waypoint[1] - pose.y
    if math.hypot(dx, dy) < 1e-9:
        # reached: look around
        return Action.TURN_LEFT
    err = wrap_deg(math.degrees(math.atan2(dy, dx)) - pose.theta)
    if abs(err) <= cfg.turn_tolerance_deg:
        return Action.MOVE_FORWARD
    return Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def traversible_map(m: SemanticMap, pose: Pose, dilation: int, open_cells: np.ndarray | None = None) -> np.ndarray:
    """Planning mask: dilated obstacles blocked, trail and the agent's 3x3 neighbourhood reopened."""
    obst = m.data[OBSTACLE] > 0
    blocked = ndimage.binary_dilation(obst, structure=_disk(dilation)) if dilation > 0 else obst.copy()
    trav = ~blocked | (m.data[VISITED] > 0)
    ai, aj = m.world_to_cell(pose.x, pose.y)
    h, w = m.shape
    trav[max(ai - 1, 0):min(ai + 2, h), max(aj - 1, 0):min(aj + 2, w)] = True
    trav &= ~obst
    if open_cells is not None:
        trav |= open_cells
    if m.in_bounds(ai, aj):
        trav[ai, aj] = True
    return trav


def goal_sources_mask(m: SemanticMap, cells, dilation: int) -> np.ndarray:
    """Goal cells plus their dilation halo, so goals on or near obstacles stay reachable."""
    mask = np.zeros(m.shape, dtype=bool)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    mask[cells[:, 0], cells[:, 1]] = True
    if dilation > 0:
        halo = ndimage.binary_dilation(mask, structure=_disk(dilation + 1)) & ~(m.data[OBSTACLE] > 0)
        mask |= halo
    return mask


def should_stop(m: SemanticMap, pose: Pose, target: int, cfg: PlannerConfig = PlannerConfig()) -> bool:
    """True iff a mapped cell of ``target`` lies within ``stop_distance`` along free space."""
    tgt = m.category(target) > 0
    if not tgt.any():
        return False
    ai, aj = m.world_to_cell(pose.x, pose.y)
    trav = (~(m.data[OBSTACLE] > 0)) | tgt
    trav[ai, aj] = True
    field = fmm(trav, [(ai, aj)], m.resolution, m.origin, max_dist=cfg.stop_distance + m.resolution)
    return bool((field.d[tgt] <= cfg.stop_distance).any())


@dataclass
class TrapState:
    collisions: int = 0
    pose: Pose | None = None


def trap_handler(state: TrapState, collided: bool, pose: Pose, m: SemanticMap,
                 cfg: PlannerConfig = PlannerConfig()) -> tuple[int, int] | None:
    """Count consecutive collisions at one pose; after ``trap_patience`` return a cell to stamp.

    The stamped cell is the first cell ahead of the agent (within one forward
    step) that is not already an obstacle in the map.
    """
    if not collided:
        state.collisions = 0
        state.pose = None
        return None
    if state.pose == pose:
        state.collisions += 1
    else:
        state.collisions = 1
        state.pose = pose
    if state.collisions < cfg.trap_patience:
        return None
    state.collisions = 0
    th = math.radians(pose.theta)
    own = m.world_to_cell(pose.x, pose.y)
    n = int(math.ceil(FORWARD_STEP / (0.5 * m.resolution)))
    for k in range(1, n + 1):
        t = 0.5 * m.resolution * k
        cell = m.world_to_cell(pose.x + t * math.cos(th), pose.y + t * math.sin(th))
        if cell == own or not m.in_bounds(*cell):
            continue
        if m.data[OBSTACLE][cell] == 0:
            return cell
    return None


def stamp_obstacle(m: SemanticMap, cell: tuple[int, int]) -> None:
    m.data[OBSTACLE][cell] = 1.0
    m.data[EXPLORED][cell] = 1.0
