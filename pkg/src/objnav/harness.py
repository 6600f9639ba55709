"""Closed-loop episodes, suites, metrics and variant comparison."""

from __future__ import annotations

import functools
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import planner as pl
from .mapping import VISITED, active_fraction, integrate, map_for_world, mark_pose, scan_to_local
from .scar import ScarNetwork, forward_pass, oracle_predictor
from .scar.accounting import peak_live_bytes
from .scar.autodiff import Tape
from .skip import HarvestStep, JudgeModel, PoseHistory, SkipType, classify_skip
from .world import Action, Floorplan, Pose, SensorConfig, WorldConfig, category_distance_field, generate_world, observe
from .world import step as world_step

STAGES = ("mapping", "skip_classify", "predict", "goal_select", "local_plan")
SKIP_MODES = ("off", "naive_forward", "adaptive")
PREDICTORS = ("oracle", "scar", "dense_baseline")


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: int
    world_seed: int
    start: Pose
    target: int
    max_steps: int = 500
    success_radius: float = 1.0


@dataclass(frozen=True, eq=False)
class AgentConfig:
    skip_mode: str = "off"
    predictor: str = "oracle"
    planner: pl.PlannerConfig = pl.PlannerConfig()
    judge: JudgeModel | None = None
    revisit_radius: float = 0.1
    network: ScarNetwork | None = None
    map_size: int = 192
    goal_interval: int = 10
    sensor: SensorConfig = SensorConfig()
    record_trajectory: bool = False
    name: str = ""

    def __post_init__(self):
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}")
        if self.predictor != "oracle" and self.network is None:
            raise ValueError(f"predictor {self.predictor!r} needs a network")
        if self.goal_interval < 1:
            raise ValueError("goal_interval must be >= 1")


@dataclass
class EpisodeResult:
    episode_id: int
    success: bool
    steps: int
    path_length: float
    shortest_length: float
    initial_distance: float
    final_distance: float
    skip_counts: dict[str, int]
    predict_calls: int
    flops_total: int
    peak_memory: int
    max_active_fraction: float
    stopped: bool
    map_digest: str = ""
    stage_timings: dict[str, float] = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    harvest: list = field(default_factory=list, repr=False)
    snapshots: list = field(default_factory=list, repr=False)

    def record(self, with_timings: bool = False) -> dict:
        """Deterministic JSON view; wall-clock timings only on request."""
        d = asdict(self)
        d.pop("harvest")
        d.pop("snapshots")
        if not with_timings:
            d.pop("stage_timings")
        if not self.trajectory:
            d.pop("trajectory")
        return d


# ---------------------------------------------------------------------------
# suites


@functools.lru_cache(maxsize=64)
def _world(world_cfg: WorldConfig, seed: int) -> Floorplan:
    return generate_world(replace(world_cfg, seed=seed))


@functools.lru_cache(maxsize=256)
def _target_field(world_cfg: WorldConfig, seed: int, target: int) -> np.ndarray:
    return category_distance_field(_world(world_cfg, seed), target)


def world_for(spec: EpisodeSpec, world_cfg: WorldConfig) -> Floorplan:
    return _world(world_cfg, spec.world_seed)


def make_suite(n: int, seed: int, world_cfg: WorldConfig, max_steps: int = 500, success_radius: float = 1.0,
               min_distance: float = 2.0, world_seeds: Sequence[int] | None = None) -> list[EpisodeSpec]:
    """Seeded episodes on freshly generated worlds; specs with unreachable or too-close targets are redrawn."""
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(n):
        wseed = int(world_seeds[k % len(world_seeds)]) if world_seeds else int(seed * 100_003 + k)
        world = _world(world_cfg, wseed)
        for _ in range(1000):
            target = int(rng.integers(1, world.n_targets + 1))
            cand = world.spawn_candidates
            i, j = cand[int(rng.integers(len(cand)))]
            d0 = _target_field(world_cfg, wseed, target)[i, j]
            if math.isfinite(d0) and d0 >= min_distance:
                break
        else:
            raise ValueError(f"world {wseed}: no start at least {min_distance} m from a reachable target")
        x, y = world.cell_center(int(i), int(j))
        theta = int(rng.integers(12)) * 30
        specs.append(EpisodeSpec(k, wseed, Pose(x, y, theta), target, max_steps, success_radius))
    return specs


# ---------------------------------------------------------------------------
# episode loop


class _GoalPlanner:
    """Goal-sourced distance field, recomputed only when its inputs change."""

    def __init__(self):
        self.key = None
        self.field = None

    def field_for(self, m, pose, goal_mask, dilation, map_version, goal_version):
        agent = m.world_to_cell(pose.x, pose.y)
        key = (map_version, goal_version, dilation, agent)
        if key != self.key:
            trav = pl.traversible_map(m, pose, dilation)
            trav |= goal_mask
            src = np.argwhere(goal_mask & trav)
            self.field = pl.fmm(trav, src, m.resolution, m.origin, stop_at=agent) if len(src) else None
            self.key = key
        return self.field


def _timed(timings, stage):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *a):
            timings[stage] += time.perf_counter() - self.t

    return _T()


def run_episode(spec: EpisodeSpec, agent: AgentConfig, world_cfg: WorldConfig, harvest: bool = False,
                snapshot_every: int = 0) -> EpisodeResult:
    """Run one closed-loop episode.

    ``harvest`` logs ``(action, ranges, map delta)`` per step for judge
    training; ``snapshot_every > 0`` keeps copies of the map tensor every that
    many steps for predictor training.
    """
    world = world_for(spec, world_cfg)
    if not world.point_is_free(spec.start.x, spec.start.y):
        raise ValueError(f"episode {spec.episode_id}: start is not on a free cell")
    tfield = _target_field(world_cfg, spec.world_seed, spec.target)
    si, sj = spec.start.cell(world.resolution)
    d0 = float(tfield[si, sj])
    if not math.isfinite(d0):
        raise ValueError(f"episode {spec.episode_id}: target unreachable")
    cfg = agent.planner
    sensor = agent.sensor
    rng = np.random.default_rng(spec.world_seed * 7919 + spec.episode_id)
    m = map_for_world(world, agent.map_size)
    pose = spec.start
    hist = PoseHistory()
    timings = {s: 0.0 for s in STAGES}
    counts = {t.name: 0 for t in SkipType}
    traj, harvest_log, snaps = [], [], []
    prev_depth = None
    last_action = None
    map_version = 0
    goal_version = 0
    goal_mask = None
    goal_from_target = False
    planner_cache = _GoalPlanner()
    cached_key = cached_action = None
    trap = pl.TrapState()
    path = 0.0
    predict_calls = flops = peak_mem = 0
    max_active = 0.0
    stopped = False
    steps = 0
    z = None

    for t in range(spec.max_steps):
        steps += 1
        depth, sem = observe(world, pose, sensor, rng)
        with _timed(timings, "skip_classify"):
            if agent.skip_mode == "off" or last_action is None:
                st = SkipType.NONE
            elif agent.skip_mode == "naive_forward":
                st = SkipType.SKIP_FORWARD if last_action == Action.MOVE_FORWARD else SkipType.NONE
            else:
                st = classify_skip(hist, pose, last_action, depth, prev_depth, agent.judge, agent.revisit_radius)
        counts[st.name] += 1
        with _timed(timings, "mapping"):
            if st == SkipType.NONE:
                local = scan_to_local(depth, sem, sensor, m.resolution, world.n_categories)
                _, delta = integrate(m, local, pose)
            else:
                delta = mark_pose(m, pose)
        if delta > 0:
            map_version += 1
        if harvest:
            harvest_log.append(HarvestStep(last_action, np.asarray(depth.ranges), float(delta)))
        hist.push(pose)
        prev_depth = depth
        if snapshot_every and t % snapshot_every == 0:
            snaps.append(m.data.copy())

        # prediction and goal selection every goal_interval steps; a mapped target overrides the goal
        if t % agent.goal_interval == 0:
            with _timed(timings, "predict"):
                z, f_inv, mem = _predict(agent, world, m, spec.target)
            predict_calls += 1
            flops += f_inv
            peak_mem = max(peak_mem, mem)
            max_active = max(max_active, active_fraction(m))
            with _timed(timings, "goal_select"):
                goal = _select(m, pose, z, cfg)
            if goal is not None and not goal_from_target:
                goal_mask = np.zeros(m.shape, dtype=bool)
                goal_mask[goal] = True
                goal_version += 1
        if delta > 0 or not goal_from_target:
            tgt = m.category(spec.target) > 0
            if tgt.any():
                goal_mask = pl.goal_sources_mask(m, np.argwhere(tgt), cfg.obstacle_dilation)
                goal_from_target = True
                goal_version += 1

        with _timed(timings, "local_plan"):
            plan_key = (pose, map_version, goal_version)
            if st == SkipType.LOSSLESS and plan_key == cached_key:
                action = cached_action
            elif pl.should_stop(m, pose, spec.target, cfg):
                action = Action.STOP
            else:
                action = _plan_action(m, pose, goal_mask, cfg, planner_cache, map_version, goal_version)
            cached_key, cached_action = plan_key, action
        if agent.record_trajectory:
            traj.append([pose.x, pose.y, pose.theta, int(action), st.name])
        if action == Action.STOP:
            stopped = True
            break
        new_pose, collided = world_step(world, pose, action)
        if action == Action.MOVE_FORWARD and not collided:
            path += math.hypot(new_pose.x - pose.x, new_pose.y - pose.y)
        cell = pl.trap_handler(trap, collided, new_pose, m, cfg)
        if cell is not None:
            pl.stamp_obstacle(m, cell)
            map_version += 1
        pose = new_pose
        last_action = action

    fi, fj = pose.cell(world.resolution)
    d_final = float(tfield[fi, fj])
    success = stopped and d_final <= spec.success_radius
    return EpisodeResult(
        episode_id=spec.episode_id,
        success=bool(success),
        steps=steps,
        path_length=round(path, 6),
        shortest_length=d0,
        initial_distance=d0,
        final_distance=d_final,
        skip_counts=counts,
        predict_calls=predict_calls,
        flops_total=int(flops),
        peak_memory=int(peak_mem),
        max_active_fraction=max_active,
        stopped=stopped,
        map_digest=hashlib.sha256(np.ascontiguousarray(m.data).tobytes()).hexdigest()[:16],
        stage_timings=timings,
        trajectory=traj,
        harvest=harvest_log,
        snapshots=snaps,
    )


def _predict(agent: AgentConfig, world: Floorplan, m, target: int):
    if agent.predictor == "oracle":
        return oracle_predictor(world, m)[target - 1], 0, 0
    net = agent.network
    tape = Tape(record=False)
    res = forward_pass(net, m.data, tape)
    f = sum(op.flops for op in tape.ops)
    mem = 4 * net.n_params + peak_live_bytes(tape)
    return res.prob.value[target - 1], f, mem


def _select(m, pose, z, cfg: pl.PlannerConfig):
    # cells already stood on cannot hide the target; never pick them as goals
    z = np.where(m.data[VISITED] > 0, 0.0, z)
    ai, aj = m.world_to_cell(pose.x, pose.y)
    for dil in _dilations(cfg.obstacle_dilation):
        trav = pl.traversible_map(m, pose, dil)
        d = pl.fmm(trav, [(ai, aj)], m.resolution, m.origin)
        if np.isfinite(d.d).sum() > 1:
            return pl.select_goal(z, d, cfg)
    return None


def _dilations(d: int):
    return list(range(d, -1, -1))


def _plan_action(m, pose, goal_mask, cfg, cache: _GoalPlanner, map_version, goal_version) -> Action:
    if goal_mask is None:
        return Action.TURN_LEFT
    for dil in _dilations(cfg.obstacle_dilation):
        f = cache.field_for(m, pose, goal_mask, dil, map_version, goal_version)
        if f is not None and math.isfinite(f.at(pose.x, pose.y)):
            wp = pl.extract_waypoint(f, pose)
            return pl.waypoint_to_action(pose, wp, cfg)
    return Action.TURN_LEFT


# ---------------------------------------------------------------------------
# metrics


def spl(results: Sequence[EpisodeResult]) -> float:
    if not results:
        return 0.0
    tot = 0.0
    for r in results:
        if r.success:
            l = r.shortest_length
            if l <= 0:
                raise ValueError("SPL needs a positive shortest length")
            tot += l / max(r.path_length, l)
    return tot / len(results)


def soft_progress(r: EpisodeResult) -> float:
    d0 = r.initial_distance
    if d0 <= 0:
        raise ValueError("soft progress needs a positive initial distance")
    return min(max(1.0 - r.final_distance / d0, 0.0), 1.0)


def soft_spl(results: Sequence[EpisodeResult]) -> float:
    if not results:
        return 0.0
    tot = 0.0
    for r in results:
        l = r.shortest_length
        tot += soft_progress(r) * l / max(r.path_length, l)
    return tot / len(results)


def skip_ratio(r: EpisodeResult) -> float:
    if r.steps <= 0:
        raise ValueError("skip ratio needs at least one step")
    c = r.skip_counts
    return (c["LOSSLESS"] + c["AGGR_REVISIT"] + c["SKIP_FORWARD"]) / r.steps


@dataclass
class SuiteMetrics:
    episodes: int
    SR: float
    SPL: float
    SoftSPL: float
    skip_ratio: float
    flops_per_step: float
    peak_memory: float
    steps: float
    stage_timings: dict[str, float] = field(default_factory=dict)

    def record(self, with_timings: bool = False) -> dict:
        d = asdict(self)
        if not with_timings:
            d.pop("stage_timings")
        return d


def suite_metrics(results: Sequence[EpisodeResult]) -> SuiteMetrics:
    n = len(results)
    if n == 0:
        raise ValueError("empty suite")
    stepped = [r for r in results if r.steps > 0]
    total_steps = sum(r.steps for r in results)
    # global skip ratio: skipped steps over all steps
    skipped = sum(r.steps * skip_ratio(r) for r in stepped)
    timings = {s: sum(r.stage_timings.get(s, 0.0) for r in results) / max(total_steps, 1) for s in STAGES}
    return SuiteMetrics(
        episodes=n,
        SR=sum(r.success for r in results) / n,
        SPL=spl(results),
        SoftSPL=soft_spl(results),
        skip_ratio=skipped / total_steps if total_steps else 0.0,
        flops_per_step=sum(r.flops_total for r in results) / max(total_steps, 1),
        peak_memory=float(max(r.peak_memory for r in results)),
        steps=total_steps / n,
        stage_timings=timings,
    )


def _run_one(args):
    return run_episode(*args)


def run_suite(specs: Sequence[EpisodeSpec], agent: AgentConfig, world_cfg: WorldConfig, jobs: int = 1,
              harvest: bool = False, progress: Callable | None = None, snapshot_every: int = 0) -> list[EpisodeResult]:
    """Run episodes in spec order; with ``jobs > 1`` episodes go to worker processes."""
    args = [(s, agent, world_cfg, harvest, snapshot_every) for s in specs]
    out = []
    if jobs <= 1:
        for a in args:
            out.append(_run_one(a))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for r in ex.map(_run_one, args):
            out.append(r)
            if progress:
                progress(r)
    return out


def compare(variants: dict[str, Sequence[EpisodeResult]], baseline: str) -> list[dict]:
    """Per-variant metrics with ratios against ``baseline`` (episode sets must match)."""
    if baseline not in variants:
        raise ValueError(f"unknown baseline {baseline!r}")
    ids = [r.episode_id for r in variants[baseline]]
    base = suite_metrics(variants[baseline])
    rows = []
    for name, res in variants.items():
        if [r.episode_id for r in res] != ids:
            raise ValueError(f"variant {name!r} ran a different episode set")
        mtr = suite_metrics(res)
        rows.append({
            "variant": name,
            **mtr.record(),
            "rel_SPL": _ratio(mtr.SPL, base.SPL),
            "rel_SoftSPL": _ratio(mtr.SoftSPL, base.SoftSPL),
            "rel_flops": _ratio(mtr.flops_per_step, base.flops_per_step),
            "rel_memory": _ratio(mtr.peak_memory, base.peak_memory),
        })
    return rows


def timing_rows(variants: dict[str, Sequence[EpisodeResult]], baseline: str) -> list[dict]:
    """Wall-clock ratios; kept apart from the deterministic comparison table."""
    base = suite_metrics(variants[baseline]).stage_timings
    rows = []
    for name, res in variants.items():
        t = suite_metrics(res).stage_timings
        step_t, base_t = sum(t.values()), sum(base.values())
        rows.append({
            "variant": name,
            **{f"{s}_s_per_step": t[s] for s in STAGES},
            "rel_step_time": _ratio(step_t, base_t),
            "rel_mapping_time": _ratio(t["mapping"], base["mapping"]),
        })
    return rows


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def profile(specs: Sequence[EpisodeSpec], agents: dict[str, AgentConfig], world_cfg: WorldConfig,
            baseline: str, jobs: int = 1):
    """Run every variant on the same episodes; returns ``(comparison, timings, results)``."""
    if len(agents) < 2:
        raise ValueError("profiling needs at least two variants")
    results = {name: run_suite(specs, ag, world_cfg, jobs) for name, ag in agents.items()}
    return compare(results, baseline), timing_rows(results, baseline), results
