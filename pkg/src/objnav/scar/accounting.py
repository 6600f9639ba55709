"""FLOP and logical-memory accounting from the recorded op schedule of one forward pass."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .network import ScarConfig, count_params, forward_pass, init_network

BRANCHES = ("sparse", "dense", "compression", "decode")


def _input(cfg: ScarConfig, m, shape) -> np.ndarray:
    if m is None:
        # every site active
        return np.ones((cfg.in_channels,) + tuple(shape))
    data = m.data if hasattr(m, "data") else np.asarray(m)
    return np.asarray(data, dtype=np.float64)


def _trace(cfg: ScarConfig, m, shape) -> Tape:
    tape = Tape(record=False)
    forward_pass(init_network(cfg, 0), _input(cfg, m, shape), tape)
    return tape


def count_flops(cfg: ScarConfig, m=None, shape=(192, 192)) -> dict:
    """FLOPs per branch for one inference on ``m`` (all sites active when ``m`` is None)."""
    tape = _trace(cfg, m, shape)
    out = {b: 0 for b in BRANCHES}
    layers = []
    for op in tape.ops:
        out[op.branch] = out.get(op.branch, 0) + op.flops
        layers.append((op.branch, op.name, op.flops))
    out["total"] = sum(out[b] for b in BRANCHES)
    out["layers"] = layers
    return out


def peak_live_bytes(tape: Tape) -> int:
    """Largest sum of live activation bytes over the op schedule.

    A tensor is live from the op that creates it through its last consumer;
    the network input is live from the start.
    """
    ops = tape.ops
    produced = {op.out: t for t, op in enumerate(ops)}
    last = {}
    for t, op in enumerate(ops):
        for v in op.inputs:
            last[v] = t
    events = np.zeros(len(ops) + 1, dtype=np.int64)
    for vid, size in tape.sizes.items():
        start = produced.get(vid, 0)
        end = max(last.get(vid, start), start)
        events[start] += size
        events[end + 1] -= size
    return int(np.cumsum(events).max()) if len(ops) else int(sum(tape.sizes.values()))


def count_memory(cfg: ScarConfig, m=None, shape=(192, 192)) -> dict:
    """Logical bytes for single-sample inference: 32-bit parameters plus peak live activations."""
    params = 4 * count_params(cfg)
    peak = peak_live_bytes(_trace(cfg, m, shape))
    return {"params": params, "peak_activations": peak, "total": params + peak}
