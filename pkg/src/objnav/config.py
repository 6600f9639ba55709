"""Versioned, schema-validated run configuration."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .planner import PlannerConfig
from .scar import ScarConfig
from .scar.network import dense_baseline, scar_mini
from .skip import ForestParams
from .world import SensorConfig, WorldConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldSection(_Strict):
    size: int = 176
    room_count: int = 6
    n_categories: int = 16
    n_targets: int = 6
    object_density: float = 0.03
    resolution: float = 0.05
    door_width: int = 16
    min_room: int = 24

    def build(self, seed: int = 0) -> WorldConfig:
        return WorldConfig(seed=seed, **self.model_dump())


class SensorSection(_Strict):
    n_rays: int = 64
    fov_deg: float = 79.0
    max_range: float = 5.0
    label_noise: float = 0.0

    def build(self) -> SensorConfig:
        return SensorConfig(**self.model_dump())


class ForestSection(_Strict):
    trees: int = 64
    max_depth: int = 12
    min_leaf: int = 1
    vote_threshold: float = 0.5
    seed: int = 0


class SkipSection(_Strict):
    mode: Literal["off", "naive_forward", "adaptive"] = "adaptive"
    threshold: float = 25.0
    revisit_radius: float = Field(0.1, ge=0.0)
    n_bins: int = Field(50, ge=1)
    forest: ForestSection = ForestSection()
    judge: str | None = None  # path to a trained judge JSON

    def forest_params(self, threshold: float | None = None) -> ForestParams:
        t = self.threshold if threshold is None else threshold
        return ForestParams(threshold=t, **self.forest.model_dump())


class PlannerSection(_Strict):
    lam: float = 2.0
    stop_distance: float = 0.9
    obstacle_dilation: int = 2
    trap_patience: int = 3
    turn_tolerance_deg: float = 15.0

    def build(self) -> PlannerConfig:
        return PlannerConfig(**self.model_dump())


class SuiteSection(_Strict):
    episodes: int = Field(100, ge=1)
    seed: int = 0
    max_steps: int = Field(500, ge=0)
    success_radius: float = 1.0
    min_distance: float = 2.0


class PredictorSection(_Strict):
    kind: Literal["oracle", "scar", "dense_baseline"] = "oracle"
    network: Union[Literal["scar_mini", "dense_baseline"], dict] = "scar_mini"
    checkpoint: str | None = None

    def scar_config(self, in_channels: int, n_classes: int) -> ScarConfig:
        if self.network == "scar_mini":
            return scar_mini(in_channels, n_classes)
        if self.network == "dense_baseline":
            return dense_baseline(in_channels, n_classes)
        return ScarConfig.from_dict(self.network)


class TrainSection(_Strict):
    episodes: int = Field(20, ge=1)
    seed: int = 1
    snapshot_every: int = Field(10, ge=1)
    steps: int = Field(200, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = 5e-4
    aux_weight: float = 0.4
    smoothing_window: int = Field(500, ge=1)


class SearchSection(_Strict):
    budget: int = Field(12, ge=1)
    seed: int = 0
    steps: int = Field(24, ge=1)
    batch_size: int = Field(2, ge=1)
    crop: int = Field(96, ge=16)
    lr: float = 5e-4


class ProfileSection(_Strict):
    variants: tuple[Literal["off", "naive_forward", "adaptive"], ...] = ("off", "naive_forward", "adaptive")
    baseline: Literal["off", "naive_forward", "adaptive"] = "off"
    thresholds: tuple[float, ...] = ()
    radii: tuple[float, ...] = ()
    dataset: str | None = None  # harvest CSV used to train one judge per threshold

    @field_validator("variants")
    @classmethod
    def _distinct(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("variants must be distinct")
        return v


class RunConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    world: WorldSection = WorldSection()
    sensor: SensorSection = SensorSection()
    map_size: int = 192
    goal_interval: int = Field(10, ge=1)
    skip: SkipSection = SkipSection()
    planner: PlannerSection = PlannerSection()
    predictor: PredictorSection = PredictorSection()
    suite: SuiteSection = SuiteSection()
    harvest: SuiteSection = SuiteSection(episodes=100, seed=1)
    train: TrainSection = TrainSection()
    search: SearchSection = SearchSection()
    profile: ProfileSection = ProfileSection()
    record_trajectory: bool = False
    output_dir: str = "out"


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    # output_dir does not affect results, so moving outputs keeps the hash
    d = cfg.model_dump(mode="json")
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate_json(Path(path).read_text())


def provenance(cfg: RunConfig) -> dict:
    return {"tool": "objnav", "version": __version__, "config_hash": config_hash(cfg)}
