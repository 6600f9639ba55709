"""Training targets, masked BCE, Adam with poly decay, and a ground-truth oracle predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..mapping import EXPLORED, SemanticMap, map_offset
from ..world import Floorplan
from .autodiff import LOG_CLAMP, Tape
from .network import ScarNetwork, forward_pass

ORACLE_FLOOR = 1e-6


def ground_truth(world: Floorplan, m: SemanticMap) -> np.ndarray:
    """Binary ``(C, H, W)`` map of target instances (categories 1..C) in the map frame."""
    h, w = m.shape
    oi = int(round(-m.origin[1] / m.resolution))
    oj = int(round(-m.origin[0] / m.resolution))
    wh, ww = world.shape
    out = np.zeros((world.n_targets, h, w), dtype=np.float32)
    i0, j0 = max(oi, 0), max(oj, 0)
    i1, j1 = min(oi + wh, h), min(oj + ww, w)
    if i1 <= i0 or j1 <= j0:
        return out
    block = world.cells[i0 - oi:i1 - oi, j0 - oj:j1 - oj]
    for c in range(1, world.n_targets + 1):
        out[c - 1, i0:i1, j0:j1] = block == c
    return out


def masked_targets(M: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Targets restricted to unexplored space: ``(1 - e) * M``."""
    M = np.asarray(M)
    e = np.asarray(e)
    if M.shape[1:] != e.shape:
        raise ValueError(f"target {M.shape} and exploration mask {e.shape} disagree")
    return (1.0 - e)[None] * M


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    a = np.maximum(pred, LOG_CLAMP)
    b = np.maximum(1.0 - pred, LOG_CLAMP)
    return float(-np.mean(target * np.log(a) + (1.0 - target) * np.log(b)))


def oracle_predictor(world: Floorplan, m: SemanticMap, radius: int = 3, floor: float = ORACLE_FLOOR) -> np.ndarray:
    """Masked ground truth, box-blurred and mapped into ``[floor, 1 - floor]``."""
    t = masked_targets(ground_truth(world, m), m.data[EXPLORED] > 0).astype(np.float64)
    if radius > 0:
        t = ndimage.uniform_filter(t, size=(1, 2 * radius + 1, 2 * radius + 1), mode="constant")
    return floor + (1.0 - 2.0 * floor) * t


# ---------------------------------------------------------------------------
# optimization


@dataclass
class Adam:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    power: float = 0.9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        frac = min(self.t / max(self.total_steps, 1), 1.0)
        return self.lr * (1.0 - frac) ** self.power

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        lr = self.current_lr()
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            if lr != 0.0:
                params[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)
        return lr


@dataclass(frozen=True, eq=False)
class Sample:
    m: np.ndarray  # (in_channels, H, W)
    M: np.ndarray  # (C, H, W)
    e: np.ndarray  # (H, W)


def loss_and_grads(net: ScarNetwork, sample: Sample, aux_weight: float | None = None):
    """Total loss of one sample and the gradient of every parameter."""
    cfg = net.config
    w_aux = cfg.aux_weight if aux_weight is None else aux_weight
    tape = Tape(record=True)
    res = forward_pass(net, sample.m, tape, with_aux=cfg.aux_head and w_aux != 0)
    target = masked_targets(sample.M, sample.e)
    loss = tape.bce(res.prob, target)
    if res.aux_prob is not None:
        loss = tape.add(loss, tape.scale(tape.bce(res.aux_prob, target), w_aux))
    tape.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in res.leaves.items()}
    for k in net.params:
        grads.setdefault(k, np.zeros_like(net.params[k]))
    return float(loss.value), grads


def train_step(net: ScarNetwork, opt: Adam, batch: Sequence[Sample], aux_weight: float | None = None) -> float:
    """One Adam update on the batch-mean loss; mutates ``net.params`` and returns the loss."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in net.params.items()}
    for s in batch:
        loss, grads = loss_and_grads(net, s, aux_weight)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {opt.t}")
        total += loss
        for k, g in grads.items():
            acc[k] += g
    n = len(batch)
    for k in acc:
        acc[k] /= n
    opt.step(net.params, acc)
    return total / n


def train(net: ScarNetwork, samples: Sequence[Sample], steps: int, batch_size: int = 8, lr: float = 5e-4,
          seed: int = 0, aux_weight: float | None = None) -> list[float]:
    """Minibatch training with a seeded sample order; returns the per-step loss curve."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr, total_steps=steps)
    losses = []
    order = np.array([], dtype=np.int64)
    for _ in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        idx, order = order[:batch_size], order[batch_size:]
        losses.append(train_step(net, opt, [samples[i] for i in idx], aux_weight))
    return losses
