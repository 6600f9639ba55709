"""Seeded random architecture search scored on (training loss, logical memory)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .accounting import count_memory
from .network import ScarConfig, StageSpec, init_network
from .train import Sample, train


@dataclass(frozen=True)
class SearchSpace:
    sparse_stage_counts: tuple[int, ...] = (2, 3, 4)
    dense_stage_counts: tuple[int, ...] = (1, 2, 3)
    blocks: tuple[int, ...] = (1, 2)
    expansions: tuple[int, ...] = (1, 2)
    decode_channels: tuple[int, ...] = (8, 16, 32)
    fuse: tuple[str, ...] = ("add", "concat")
    sparse_channels: tuple[int, ...] = (16, 32, 64, 64)
    dense_channels: tuple[int, ...] = (8, 16, 32)


def sample_config(space: SearchSpace, rng: np.random.Generator, in_channels: int, n_classes: int) -> ScarConfig:
    n_s = int(rng.choice(space.sparse_stage_counts))
    n_d = int(rng.choice([d for d in space.dense_stage_counts if d <= n_s] or [1]))
    def stages(n, chans):
        blocks = int(rng.choice(space.blocks))
        return tuple(StageSpec(blocks, chans[min(i, len(chans) - 1)], i > 0) for i in range(n))
    return ScarConfig(
        in_channels, n_classes,
        sparse_stages=stages(n_s, space.sparse_channels),
        dense_stages=stages(n_d, space.dense_channels),
        sparse_expansion=int(rng.choice(space.expansions)),
        dense_expansion=int(rng.choice(space.expansions)),
        decode_channels=int(rng.choice(space.decode_channels)),
        fuse=str(rng.choice(space.fuse)),
    )


@dataclass(frozen=True)
class Candidate:
    index: int
    config: ScarConfig
    loss: float
    memory: int
    curve: tuple[float, ...] = field(default=(), repr=False)


def dominates(a: Candidate, b: Candidate) -> bool:
    return a.loss <= b.loss and a.memory <= b.memory and (a.loss < b.loss or a.memory < b.memory)


def pareto_front(cands: Sequence[Candidate]) -> list[Candidate]:
    """Non-dominated candidates, sorted by memory then loss.

    One sweep in memory order: a point survives if its loss is the minimum of
    its memory group and beats every strictly cheaper point.
    """
    order = sorted(cands, key=lambda c: (c.memory, c.loss, c.index))
    front, best_cheaper = [], np.inf
    k = 0
    while k < len(order):
        mem = order[k].memory
        group = []
        while k < len(order) and order[k].memory == mem:
            group.append(order[k])
            k += 1
        lo = group[0].loss
        if lo < best_cheaper:
            front += [c for c in group if c.loss == lo]
            best_cheaper = lo
    return front


def final_third_mean(curve: Sequence[float]) -> float:
    n = len(curve)
    return float(np.mean(curve[n - max(1, n // 3):]))


def arch_search(samples: Sequence[Sample], budget: int, seed: int = 0, steps: int = 24, batch_size: int = 2,
                space: SearchSpace = SearchSpace(), lr: float = 5e-4, memory_shape=(192, 192),
                progress=None) -> tuple[list[Candidate], list[Candidate]]:
    """Train ``budget`` sampled configs briefly; returns ``(pareto_set, all_evaluated)``."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    in_c, n_cls = samples[0].m.shape[0], samples[0].M.shape[0]
    done = []
    for k in range(budget):
        cfg = sample_config(space, rng, in_c, n_cls)
        net = init_network(cfg, seed + k)
        curve = train(net, samples, steps, batch_size, lr, seed + k)
        mem = count_memory(cfg, None, memory_shape)["total"]
        done.append(Candidate(k, cfg, final_third_mean(curve), mem, tuple(curve)))
        if progress:
            progress(done[-1])
    return pareto_front(done), done
