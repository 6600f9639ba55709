"""Synthetic indoor floorplans, agent kinematics and a ray-cast depth/semantic sensor.

Coordinates: ``x`` runs along grid columns, ``y`` along grid rows; cell ``(i, j)``
covers ``x in [j*res, (j+1)*res)`` and ``y in [i*res, (i+1)*res)``.  Headings are
integer degrees, counter-clockwise from ``+x``.
"""

from __future__ import annotations

import base64
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage

from ._heap import pop_min, push_or_decrease

FREE = 0
WALL = -1

FORWARD_STEP = 0.25
TURN_DEG = 30
FLOORPLAN_FORMAT_VERSION = 1


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: int = 0

    def __post_init__(self):
        if self.theta % TURN_DEG != 0 or not 0 <= self.theta < 360:
            raise ValueError(f"theta must be a multiple of {TURN_DEG} in [0, 360), got {self.theta}")

    def cell(self, resolution: float) -> tuple[int, int]:
        return int(math.floor(self.y / resolution)), int(math.floor(self.x / resolution))


@dataclass(frozen=True)
class WorldConfig:
    size: int | tuple[int, int] = 176
    room_count: int = 6
    n_categories: int = 16
    n_targets: int = 6
    object_density: float = 0.03
    seed: int = 0
    resolution: float = 0.05
    door_width: int = 16
    min_room: int = 24

    @property
    def shape(self) -> tuple[int, int]:
        if isinstance(self.size, int):
            return self.size, self.size
        return int(self.size[0]), int(self.size[1])


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 64
    fov_deg: float = 79.0
    max_range: float = 5.0
    label_noise: float = 0.0

    def __post_init__(self):
        if self.n_rays < 2:
            raise ValueError("n_rays must be >= 2")
        if self.max_range <= 0 or not 0 < self.fov_deg < 360:
            raise ValueError("invalid sensor geometry")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must lie in [0, 1]")

    def relative_angles_deg(self) -> np.ndarray:
        """Ray offsets from the heading, most clockwise first."""
        i = np.arange(self.n_rays, dtype=np.float64)
        return -self.fov_deg / 2.0 + i * self.fov_deg / (self.n_rays - 1)


@dataclass(frozen=True, eq=False)
class Floorplan:
    cells: np.ndarray
    resolution: float
    n_categories: int
    n_targets: int
    spawn_candidates: np.ndarray = field(repr=False)
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def wall_category(self) -> int:
        """Walls are reported as the last of the non-target categories."""
        return self.n_categories

    def is_free(self, i: int, j: int) -> bool:
        h, w = self.cells.shape
        return 0 <= i < h and 0 <= j < w and self.cells[i, j] == FREE

    def point_is_free(self, x: float, y: float) -> bool:
        return self.is_free(int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution)))

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (j + 0.5) * self.resolution, (i + 0.5) * self.resolution

    def __eq__(self, other):
        if not isinstance(other, Floorplan):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.n_categories == other.n_categories
            and self.n_targets == other.n_targets
            and np.array_equal(self.cells, other.cells)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DepthScan:
    ranges: np.ndarray
    fov_deg: float
    max_range: float


@dataclass(frozen=True, eq=False)
class SemanticScan:
    labels: np.ndarray  # int16, 0 means no label


# ---------------------------------------------------------------------------
# generation


def _spawn_cells(cells: np.ndarray, clearance: float = 4.0) -> np.ndarray:
    dist = ndimage.distance_transform_edt(cells == FREE)
    ii, jj = np.nonzero(dist > clearance)
    return np.stack([ii, jj], axis=1).astype(np.int32)


def _free_components(cells: np.ndarray) -> int:
    _, n = ndimage.label(cells == FREE)
    return n


def _split_rooms(cells, reserved, cfg: WorldConfig, rng) -> list[tuple[int, int, int, int]]:
    h, w = cells.shape
    rooms = [(1, 1, h - 2, w - 2)]  # inclusive (r0, c0, r1, c1)
    while len(rooms) < cfg.room_count:
        order = sorted(range(len(rooms)), key=lambda k: -((rooms[k][2] - rooms[k][0] + 1) * (rooms[k][3] - rooms[k][1] + 1)))
        done = False
        for k in order:
            r0, c0, r1, c1 = rooms[k]
            rh, rw = r1 - r0 + 1, c1 - c0 + 1
            horizontal = rh >= rw
            span = rh if horizontal else rw
            if span < 2 * cfg.min_room + 1:
                continue
            along = rw if horizontal else rh
            if along < cfg.door_width + 4:
                continue
            for _ in range(32):
                s = int(rng.integers(cfg.min_room, span - cfg.min_room))
                if horizontal:
                    line = (slice(r0 + s, r0 + s + 1), slice(c0, c1 + 1))
                else:
                    line = (slice(r0, r1 + 1), slice(c0 + s, c0 + s + 1))
                if reserved[line].any():
                    continue
                cells[line] = WALL
                d0 = int(rng.integers(2, along - cfg.door_width - 1))
                if horizontal:
                    door = (slice(r0 + s, r0 + s + 1), slice(c0 + d0, c0 + d0 + cfg.door_width))
                    new = [(r0, c0, r0 + s - 1, c1), (r0 + s + 1, c0, r1, c1)]
                else:
                    door = (slice(r0 + d0, r0 + d0 + cfg.door_width), slice(c0 + s, c0 + s + 1))
                    new = [(r0, c0, r1, c0 + s - 1), (r0, c0 + s + 1, r1, c1)]
                cells[door] = FREE
                zone = np.zeros_like(reserved)
                zone[door] = True
                reserved |= ndimage.binary_dilation(zone, iterations=8)
                rooms[k:k + 1] = new
                done = True
                break
            if done:
                break
        if not done:
            raise ValueError(
                f"cannot split the floor into {cfg.room_count} rooms of at least {cfg.min_room} cells"
            )
    return rooms


def _place_object(cells, reserved, rooms, category, rng, margin=6, attempts=200) -> bool:
    h, w = cells.shape
    for _ in range(attempts):
        r0, c0, r1, c1 = rooms[int(rng.integers(len(rooms)))]
        thick = int(rng.integers(1, 3))
        length = int(rng.integers(3, 11))
        oh, ow = (thick, length) if rng.random() < 0.5 else (length, thick)
        if r1 - r0 + 1 < oh + 2 * margin or c1 - c0 + 1 < ow + 2 * margin:
            continue
        i = int(rng.integers(r0 + margin, r1 - margin - oh + 2))
        j = int(rng.integers(c0 + margin, c1 - margin - ow + 2))
        box = (slice(max(i - margin, 0), min(i + oh + margin, h)), slice(max(j - margin, 0), min(j + ow + margin, w)))
        if (cells[box] != FREE).any() or reserved[box].any():
            continue
        cells[i:i + oh, j:j + ow] = category
        if _free_components(cells) != 1:
            cells[i:i + oh, j:j + ow] = FREE
            continue
        return True
    return False


def generate_world(cfg: WorldConfig) -> Floorplan:
    """Build a connected multi-room floorplan with object footprints.

    Rooms come from recursive splitting with one door per dividing wall, so the
    free space is a tree of rooms and stays connected.  Objects are thin
    rectangles (at most two cells thick) kept ``margin`` cells away from anything
    else.  Raises ``ValueError`` when the requested layout cannot be realised.
    """
    h, w = cfg.shape
    if h < 32 or w < 32:
        raise ValueError("world must be at least 32x32 cells")
    if cfg.room_count < 1:
        raise ValueError("room_count must be >= 1")
    if not 1 <= cfg.n_targets <= cfg.n_categories - 1:
        raise ValueError("need 1 <= n_targets < n_categories (the last category is 'wall')")
    if cfg.object_density < 0:
        raise ValueError("object_density must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    cells = np.zeros((h, w), dtype=np.int16)
    cells[0, :] = cells[-1, :] = WALL
    cells[:, 0] = cells[:, -1] = WALL
    reserved = np.zeros((h, w), dtype=bool)
    rooms = _split_rooms(cells, reserved, cfg, rng)

    categories = list(range(1, cfg.n_targets + 1))
    n_extra = int(round(cfg.object_density * float((cells == FREE).sum()) / 13.0))
    categories += [int(c) for c in rng.integers(1, cfg.n_categories, size=n_extra)]
    for cat in categories:
        if not _place_object(cells, reserved, rooms, cat, rng):
            raise ValueError(
                f"cannot place object of category {cat}: {len(categories)} objects "
                f"(n_targets={cfg.n_targets}, object_density={cfg.object_density}) do not fit "
                f"a {h}x{w} world with {cfg.room_count} rooms"
            )
    cells.flags.writeable = False
    spawn = _spawn_cells(cells)
    spawn.flags.writeable = False
    return Floorplan(cells, cfg.resolution, cfg.n_categories, cfg.n_targets, spawn, cfg.seed)


# ---------------------------------------------------------------------------
# sensing and kinematics


@numba.njit(cache=True)
def _cast_rays(cells, res, x, y, angles, max_range, out_range, out_code):
    h, w = cells.shape
    for k in range(angles.shape[0]):
        dx = math.cos(angles[k])
        dy = math.sin(angles[k])
        j = int(math.floor(x / res))
        i = int(math.floor(y / res))
        if dx > 0:
            step_j = 1
            t_max_x = ((j + 1) * res - x) / dx
            t_dx = res / dx
        elif dx < 0:
            step_j = -1
            t_max_x = (j * res - x) / dx
            t_dx = -res / dx
        else:
            step_j = 0
            t_max_x = np.inf
            t_dx = np.inf
        if dy > 0:
            step_i = 1
            t_max_y = ((i + 1) * res - y) / dy
            t_dy = res / dy
        elif dy < 0:
            step_i = -1
            t_max_y = (i * res - y) / dy
            t_dy = -res / dy
        else:
            step_i = 0
            t_max_y = np.inf
            t_dy = np.inf
        out_range[k] = max_range
        out_code[k] = 0
        while True:
            if t_max_x < t_max_y:
                t = t_max_x
                j += step_j
                t_max_x += t_dx
            else:
                t = t_max_y
                i += step_i
                t_max_y += t_dy
            if t > max_range:
                break
            if i < 0 or i >= h or j < 0 or j >= w:
                out_range[k] = t
                out_code[k] = -1
                break
            c = cells[i, j]
            if c != 0:
                out_range[k] = t
                out_code[k] = c
                break


def observe(world: Floorplan, pose: Pose, sensor: SensorConfig = SensorConfig(), rng: np.random.Generator | None = None):
    """Ray-cast a depth scan and the matching per-ray category labels.

    Ray ``i`` points at ``theta - fov/2 + i*fov/(R-1)``.  The range is the
    distance to the first boundary of a wall/object cell (clamped to
    ``max_range``); walls are labelled with ``world.wall_category``.
    """
    if not world.point_is_free(pose.x, pose.y):
        raise ValueError(f"pose {pose} is not on a free cell")
    angles = np.radians(pose.theta + sensor.relative_angles_deg())
    ranges = np.empty(sensor.n_rays, dtype=np.float64)
    codes = np.empty(sensor.n_rays, dtype=np.int64)
    _cast_rays(world.cells, world.resolution, pose.x, pose.y, angles, sensor.max_range, ranges, codes)
    labels = np.where(codes < 0, world.wall_category, codes).astype(np.int16)
    if sensor.label_noise > 0:
        if rng is None:
            raise ValueError("label noise requires an rng")
        flip = (labels > 0) & (rng.random(labels.shape) < sensor.label_noise)
        labels[flip] = rng.integers(1, world.n_categories + 1, size=int(flip.sum()))
    ranges.flags.writeable = False
    labels.flags.writeable = False
    return DepthScan(ranges, sensor.fov_deg, sensor.max_range), SemanticScan(labels)


def _round_pos(v: float) -> float:
    # micrometre lattice keeps returning trajectories exactly repeatable
    return round(v, 6) + 0.0


def step(world: Floorplan, pose: Pose, action: Action) -> tuple[Pose, bool]:
    action = Action(action)
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.theta + TURN_DEG) % 360), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.theta - TURN_DEG) % 360), False
    if action == Action.STOP:
        return pose, False
    a = math.radians(pose.theta)
    ranges = np.empty(1)
    codes = np.empty(1, dtype=np.int64)
    _cast_rays(world.cells, world.resolution, pose.x, pose.y, np.array([a]), FORWARD_STEP, ranges, codes)
    if codes[0] != 0:
        return pose, True
    nx = _round_pos(pose.x + FORWARD_STEP * math.cos(a))
    ny = _round_pos(pose.y + FORWARD_STEP * math.sin(a))
    if not world.point_is_free(nx, ny):
        return pose, True
    return Pose(nx, ny, pose.theta), False


# ---------------------------------------------------------------------------
# geodesic oracle


@numba.njit(cache=True)
def _dijkstra8(free2d, src_i, src_j, res):
    h, w = free2d.shape
    n = h * w
    free = free2d.ravel()
    dist = np.full(n, np.inf)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    size = 0
    for s in range(src_i.shape[0]):
        k = src_i[s] * w + src_j[s]
        dist[k] = 0.0
        size = push_or_decrease(heap, pos, dist, size, k)
    diag = math.sqrt(2.0) * res
    while size > 0:
        k, size = pop_min(heap, pos, dist, size)
        i = k // w
        j = k % w
        d = dist[k]
        for di in range(-1, 2):
            ni = i + di
            if ni < 0 or ni >= h:
                continue
            for dj in range(-1, 2):
                nj = j + dj
                if nj < 0 or nj >= w or (di == 0 and dj == 0):
                    continue
                kk = ni * w + nj
                if not free[kk] or pos[kk] == -2:
                    continue
                if di != 0 and dj != 0:
                    if not (free[ni * w + j] and free[i * w + nj]):
                        continue
                    nd = d + diag
                else:
                    nd = d + res
                if nd < dist[kk]:
                    dist[kk] = nd
                    size = push_or_decrease(heap, pos, dist, size, kk)
    return dist.reshape(h, w)


def dijkstra_field(free: np.ndarray, sources, resolution: float) -> np.ndarray:
    """8-connected shortest-path field; diagonal steps may not cut obstacle corners.

    Source cells expand into ``free`` cells even if they are not free themselves,
    which lets object cells act as targets.
    """
    src = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    f = np.ascontiguousarray(free, dtype=np.bool_).copy()
    f[src[:, 0], src[:, 1]] = True
    return _dijkstra8(f, src[:, 0].copy(), src[:, 1].copy(), float(resolution))


def geodesic_distance(world: Floorplan, a: Sequence[float], b: Sequence[float]) -> float:
    """Shortest obstacle-avoiding path length in meters between two points."""
    res = world.resolution
    ca = (int(math.floor(a[1] / res)), int(math.floor(a[0] / res)))
    cb = (int(math.floor(b[1] / res)), int(math.floor(b[0] / res)))
    if not (world.is_free(*ca) and world.is_free(*cb)):
        raise ValueError("both points must lie on free cells")
    if ca == cb:
        return 0.0
    return float(dijkstra_field(world.cells == FREE, [ca], res)[cb])


def category_distance_field(world: Floorplan, category: int) -> np.ndarray:
    """Geodesic distance from every free cell to the nearest cell of ``category``."""
    src = np.argwhere(world.cells == category)
    if len(src) == 0:
        return np.full(world.shape, np.inf)
    return dijkstra_field(world.cells == FREE, src, world.resolution)


# ---------------------------------------------------------------------------
# serialization


def floorplan_to_dict(world: Floorplan) -> dict:
    cells = np.ascontiguousarray(world.cells, dtype="<i2")
    return {
        "format": "objnav.floorplan",
        "version": FLOORPLAN_FORMAT_VERSION,
        "shape": list(world.shape),
        "resolution": world.resolution,
        "n_categories": world.n_categories,
        "n_targets": world.n_targets,
        "seed": world.seed,
        "cells": base64.b64encode(cells.tobytes()).decode("ascii"),
    }


def floorplan_from_dict(d: dict) -> Floorplan:
    if d.get("format") != "objnav.floorplan" or d.get("version") != FLOORPLAN_FORMAT_VERSION:
        raise ValueError("unsupported floorplan format")
    cells = np.frombuffer(base64.b64decode(d["cells"]), dtype="<i2").astype(np.int16).reshape(d["shape"])
    cells.flags.writeable = False
    spawn = _spawn_cells(cells)
    spawn.flags.writeable = False
    return Floorplan(cells, float(d["resolution"]), int(d["n_categories"]), int(d["n_targets"]), spawn, int(d["seed"]))


def save_floorplan(world: Floorplan, path) -> None:
    with open(path, "w") as f:
        json.dump(floorplan_to_dict(world), f, sort_keys=True)
        f.write("\n")


def load_floorplan(path) -> Floorplan:
    with open(path) as f:
        return floorplan_from_dict(json.load(f))
