"""Allocentric semantic map: scan rasterization, max-fusion and update magnitude.

Channel layout of a map with ``N`` categories: 0 obstacle, 1 explored, 2 current
agent cell, 3 visited cells, ``4 + k - 1`` category ``k`` (``k = 1..N``).
"""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .world import DepthScan, Floorplan, Pose, SemanticScan, SensorConfig

log = logging.getLogger(__name__)

OBSTACLE, EXPLORED, CURRENT, VISITED = 0, 1, 2, 3
N_BASE_CHANNELS = 4
MAP_FORMAT_VERSION = 1
HIT_PUSH = 0.1  # ray endpoints move this many cells past the surface before binning


@dataclass(eq=False)
class SemanticMap:
    data: np.ndarray
    resolution: float = 0.05
    origin: tuple[float, float] = (0.0, 0.0)
    _warned_clip: bool = field(default=False, repr=False)

    @property
    def n_categories(self) -> int:
        return self.data.shape[0] - N_BASE_CHANNELS

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def explored(self) -> np.ndarray:
        return self.data[EXPLORED]

    @property
    def obstacle(self) -> np.ndarray:
        return self.data[OBSTACLE]

    def category(self, k: int) -> np.ndarray:
        """Channel of category ``k`` (1-based)."""
        return self.data[N_BASE_CHANNELS + k - 1]

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((y - self.origin[1]) / self.resolution)),
            int(math.floor((x - self.origin[0]) / self.resolution)),
        )

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return (
            self.origin[0] + (j + 0.5) * self.resolution,
            self.origin[1] + (i + 0.5) * self.resolution,
        )

    def in_bounds(self, i: int, j: int) -> bool:
        h, w = self.shape
        return 0 <= i < h and 0 <= j < w

    def copy(self) -> "SemanticMap":
        return SemanticMap(self.data.copy(), self.resolution, self.origin)


def empty_map(n_categories: int, size: int | tuple[int, int] = 192, resolution: float = 0.05,
              origin: tuple[float, float] = (0.0, 0.0)) -> SemanticMap:
    h, w = (size, size) if isinstance(size, int) else size
    return SemanticMap(np.zeros((N_BASE_CHANNELS + n_categories, h, w), dtype=np.float32), resolution, origin)


def map_offset(world: Floorplan, size: int) -> tuple[int, int]:
    """Cell offset that centers ``world`` inside a ``size`` x ``size`` map."""
    h, w = world.shape
    if size < max(h, w):
        raise ValueError(f"map size {size} cannot hold a {h}x{w} world")
    return (size - h) // 2, (size - w) // 2


def map_for_world(world: Floorplan, size: int = 192) -> SemanticMap:
    oi, oj = map_offset(world, size)
    res = world.resolution
    return empty_map(world.n_categories, size, res, (-oj * res, -oi * res))


@dataclass(eq=False)
class LocalMap:
    """Egocentric patch; the agent sits at the center cell looking toward +row.

    ``hits`` optionally keeps the exact ray endpoints as ``(lx, ly, label)``
    rows (right, forward, category).  When present, ``integrate`` projects
    them straight into the map instead of resampling the raster obstacle
    cells, which avoids a second rounding.
    """

    data: np.ndarray
    resolution: float
    hits: np.ndarray | None = None

    @property
    def center(self) -> int:
        return self.data.shape[1] // 2


@functools.lru_cache(maxsize=8)
def _patch_geometry(n_rays: int, fov_deg: float, max_range: float, res: float):
    half = int(math.ceil(max_range / res)) + 1
    idx = np.arange(-half, half + 1, dtype=np.float64) * res
    ly, lx = np.meshgrid(idx, idx, indexing="ij")
    rho = np.hypot(lx, ly)
    alpha = np.degrees(np.arctan2(-lx, ly))
    in_fov = np.abs(alpha) <= fov_deg / 2.0
    q = (alpha + fov_deg / 2.0) / (fov_deg / (n_rays - 1))
    k = np.clip(np.floor(q).astype(np.int64), 0, n_rays - 2)
    cells = np.nonzero(in_fov.ravel())[0]
    for a in (rho, k, cells):
        a.flags.writeable = False
    return half, rho.ravel()[cells], k.ravel()[cells], cells


def scan_to_local(depth: DepthScan, sem: SemanticScan, sensor: SensorConfig, map_res: float,
                  n_categories: int) -> LocalMap:
    """Rasterize a scan into an egocentric patch.

    Free space between rays is filled up to the shorter of the two bracketing
    ranges, so the explored region is a solid wedge.  Each ray that hits
    something marks the cell half a cell beyond its range as obstacle and
    sets its category.
    """
    r = np.asarray(depth.ranges, dtype=np.float64)
    labels = np.asarray(sem.labels)
    if r.size == 0 or r.size != labels.size:
        raise ValueError("depth and semantic scans must be non-empty and of equal length")
    if r.size != sensor.n_rays:
        raise ValueError(f"expected {sensor.n_rays} rays, got {r.size}")
    half, rho, k, cells = _patch_geometry(sensor.n_rays, float(sensor.fov_deg), float(sensor.max_range), float(map_res))
    size = 2 * half + 1
    data = np.zeros((N_BASE_CHANNELS + n_categories, size, size), dtype=np.float32)
    limit = np.minimum(r[k], r[k + 1])
    explored = data[EXPLORED].reshape(-1)
    explored[cells[rho <= limit]] = 1.0
    data[EXPLORED, half, half] = 1.0

    hit = r < sensor.max_range
    if hit.any():
        a = np.radians(sensor.relative_angles_deg()[hit])
        t = r[hit] + 0.5 * map_res
        u = np.rint(t * np.cos(a) / map_res).astype(np.int64) + half
        v = np.rint(-t * np.sin(a) / map_res).astype(np.int64) + half
        ok = (u >= 0) & (u < size) & (v >= 0) & (v < size)
        u, v, lab = u[ok], v[ok], labels[hit][ok].astype(np.int64)
        data[OBSTACLE, u, v] = 1.0
        data[EXPLORED, u, v] = 1.0
        good = lab > 0
        data[N_BASE_CHANNELS + lab[good] - 1, u[good], v[good]] = 1.0
        tt = r[hit] + HIT_PUSH * map_res
        hits = np.stack([-tt * np.sin(a), tt * np.cos(a), labels[hit].astype(np.float64)], axis=1)
    else:
        hits = np.zeros((0, 3))
    data[OBSTACLE, half, half] = 0.0
    return LocalMap(data, map_res, hits)


def mark_pose(m: SemanticMap, pose: Pose) -> float:
    """Rewrite the current-location channel and extend the trail; returns the trail change."""
    i, j = m.world_to_cell(pose.x, pose.y)
    m.data[CURRENT].fill(0.0)
    if not m.in_bounds(i, j):
        return 0.0
    m.data[CURRENT, i, j] = 1.0
    before = float(m.data[VISITED, i, j])
    m.data[VISITED, i, j] = 1.0
    return 1.0 - before


def integrate(m: SemanticMap, local: LocalMap, pose: Pose) -> tuple[SemanticMap, float]:
    """Fuse ``local`` into ``m`` in place at ``pose``.

    Each map cell near the agent takes the value of the patch cell nearest to
    its rotated/translated center; channels 0, 1 and the category channels are
    merged with elementwise max.  Returns ``(m, delta_l1)`` where ``delta_l1``
    excludes the current-location channel.
    """
    if local.resolution != m.resolution:
        raise ValueError("local patch and map resolutions differ")
    if local.data.shape[0] != m.data.shape[0]:
        raise ValueError("channel count mismatch")
    ai, aj = m.world_to_cell(pose.x, pose.y)
    if not m.in_bounds(ai, aj):
        raise ValueError(f"pose {pose} lies outside the map")
    size = local.data.shape[1]
    c = local.center
    reach = c + 2
    h, w = m.shape
    i0, i1 = max(ai - reach, 0), min(ai + reach + 1, h)
    j0, j1 = max(aj - reach, 0), min(aj + reach + 1, w)
    res = m.resolution
    yw = m.origin[1] + (np.arange(i0, i1) + 0.5) * res - pose.y
    xw = m.origin[0] + (np.arange(j0, j1) + 0.5) * res - pose.x
    th = math.radians(pose.theta)
    s, co = math.sin(th), math.cos(th)
    lx = xw[None, :] * s - yw[:, None] * co
    ly = xw[None, :] * co + yw[:, None] * s
    u = np.rint(ly / res).astype(np.int64) + c
    v = np.rint(lx / res).astype(np.int64) + c
    ok = (u >= 0) & (u < size) & (v >= 0) & (v < size)
    flat = np.where(ok, u * size + v, 0)

    src = local.data.reshape(local.data.shape[0], -1)
    if local.hits is None:
        channels = [OBSTACLE, EXPLORED] + [
            ch for ch in range(N_BASE_CHANNELS, local.data.shape[0]) if src[ch].any()
        ]
    else:
        channels = [EXPLORED]
    if (i0, j0, i1, j1) != (ai - reach, aj - reach, ai + reach + 1, aj + reach + 1) and not m._warned_clip:
        if _patch_leaks(local, pose, m):
            log.warning("local patch extends outside the %dx%d map; clipped cells dropped", h, w)
            m._warned_clip = True
    block = m.data[channels, i0:i1, j0:j1]
    patch = np.where(ok, src[channels][:, flat], 0.0)
    fused = np.maximum(block, patch)
    delta = float(np.sum(fused - block, dtype=np.float64))
    m.data[channels, i0:i1, j0:j1] = fused
    if local.hits is not None and len(local.hits):
        delta += _stamp_hits(m, local.hits, pose)
    delta += mark_pose(m, pose)
    return m, delta


def _stamp_hits(m: SemanticMap, hits: np.ndarray, pose: Pose) -> float:
    th = math.radians(pose.theta)
    lx, ly = hits[:, 0], hits[:, 1]
    x = pose.x + lx * math.sin(th) + ly * math.cos(th)
    y = pose.y - lx * math.cos(th) + ly * math.sin(th)
    i = np.floor((y - m.origin[1]) / m.resolution).astype(np.int64)
    j = np.floor((x - m.origin[0]) / m.resolution).astype(np.int64)
    lab = hits[:, 2].astype(np.int64)
    h, w = m.shape
    ok = (i >= 0) & (i < h) & (j >= 0) & (j < w)
    if not ok.all() and not m._warned_clip:
        log.warning("ray endpoints fall outside the %dx%d map; dropped", h, w)
        m._warned_clip = True
    i, j, lab = i[ok], j[ok], lab[ok]
    ai, aj = m.world_to_cell(pose.x, pose.y)
    keep = (i != ai) | (j != aj)
    i, j, lab = i[keep], j[keep], lab[keep]
    # unique cells so repeated hits are counted once
    delta = 0.0
    cells = np.unique(i * w + j)
    for ch in (OBSTACLE, EXPLORED):
        flat = m.data[ch].reshape(-1)
        delta += float(np.sum(1.0 - flat[cells], dtype=np.float64))
        flat[cells] = 1.0
    good = lab > 0
    if good.any():
        keys = np.unique((N_BASE_CHANNELS + lab[good] - 1) * (h * w) + i[good] * w + j[good])
        flat = m.data.reshape(-1)
        delta += float(np.sum(1.0 - flat[keys], dtype=np.float64))
        flat[keys] = 1.0
    return delta


def _patch_leaks(local: LocalMap, pose: Pose, m: SemanticMap) -> bool:
    c = local.center
    uu, vv = np.nonzero(local.data.any(axis=0))
    th = math.radians(pose.theta)
    lx, ly = (vv - c) * local.resolution, (uu - c) * local.resolution
    x = pose.x + lx * math.sin(th) + ly * math.cos(th)
    y = pose.y - lx * math.cos(th) + ly * math.sin(th)
    i = np.floor((y - m.origin[1]) / m.resolution)
    j = np.floor((x - m.origin[0]) / m.resolution)
    h, w = m.shape
    return bool(((i < 0) | (i >= h) | (j < 0) | (j >= w)).any())


def map_l1(m: SemanticMap | np.ndarray, m_prev: SemanticMap | np.ndarray) -> float:
    a = m.data if isinstance(m, SemanticMap) else np.asarray(m)
    b = m_prev.data if isinstance(m_prev, SemanticMap) else np.asarray(m_prev)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    return float(diff.sum() - diff[CURRENT].sum())


def active_fraction(m: SemanticMap) -> float:
    """Fraction of spatial cells with any nonzero channel."""
    return float(m.data.any(axis=0).mean())


# ---------------------------------------------------------------------------
# serialization: flat little-endian float32 blob plus a JSON header


def map_header(m: SemanticMap) -> dict:
    h, w = m.shape
    return {
        "format": "objnav.semantic_map",
        "version": MAP_FORMAT_VERSION,
        "channels": int(m.data.shape[0]),
        "H": h,
        "W": w,
        "resolution": m.resolution,
        "origin": list(m.origin),
    }


def save_map(m: SemanticMap, stem) -> None:
    stem = str(stem)
    with open(stem + ".json", "w") as f:
        json.dump(map_header(m), f, sort_keys=True)
        f.write("\n")
    np.ascontiguousarray(m.data, dtype="<f4").tofile(stem + ".bin")


def load_map(stem) -> SemanticMap:
    stem = str(stem)
    with open(stem + ".json") as f:
        hdr = json.load(f)
    if hdr.get("format") != "objnav.semantic_map" or hdr.get("version") != MAP_FORMAT_VERSION:
        raise ValueError("unsupported map format")
    data = np.fromfile(stem + ".bin", dtype="<f4").astype(np.float32)
    data = data.reshape(hdr["channels"], hdr["H"], hdr["W"])
    return SemanticMap(data, float(hdr["resolution"]), tuple(hdr["origin"]))
