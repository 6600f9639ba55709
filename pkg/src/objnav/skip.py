"""Adaptive skipping of the scan-processing stage.

Three kinds of skip, checked in order: the pose exactly repeats a recent pose
(lossless), the pose lies within a small radius of a recent pose with the
same heading (approximate revisit), or the agent just moved forward and a
random-forest judge predicts that the new scan adds little map information.
"""

from __future__ import annotations

import collections
import csv
import enum
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .world import Action, DepthScan, Pose

POSE_HISTORY = 20
DEFAULT_BINS = 50
JUDGE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1


class SkipType(enum.IntEnum):
    NONE = 0
    LOSSLESS = 1
    AGGR_REVISIT = 2
    SKIP_FORWARD = 3


class PoseHistory:
    """The last ``capacity`` poses, iterated most recent first."""

    def __init__(self, capacity: int = POSE_HISTORY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._buf: collections.deque[Pose] = collections.deque(maxlen=capacity)

    @property
    def capacity(self) -> int:
        return self._buf.maxlen

    def push(self, pose: Pose) -> None:
        self._buf.appendleft(pose)

    def __iter__(self):
        return iter(self._buf)

    def __len__(self):
        return len(self._buf)

    def __getitem__(self, k):
        return self._buf[k]


def depth_histogram(scan: DepthScan | np.ndarray, n: int = DEFAULT_BINS, max_range: float | None = None) -> np.ndarray:
    """Normalized histogram of ranges over ``[0, max_range]`` with ``n`` equal bins.

    Bins are half-open except the last, which also takes ``max_range`` itself.
    """
    if isinstance(scan, DepthScan):
        r = np.asarray(scan.ranges, dtype=np.float64)
        if max_range is None:
            max_range = scan.max_range
    else:
        r = np.asarray(scan, dtype=np.float64).ravel()
    if n < 1:
        raise ValueError("need at least one bin")
    if r.size == 0:
        raise ValueError("empty scan")
    if max_range is None or max_range <= 0:
        raise ValueError("max_range must be positive")
    edges = np.arange(n + 1, dtype=np.float64) * max_range / n
    idx = np.searchsorted(edges, r, side="right") - 1
    np.clip(idx, 0, n - 1, out=idx)
    return np.bincount(idx, minlength=n).astype(np.float64) / r.size


# ---------------------------------------------------------------------------
# dataset


@dataclass(eq=False)
class SkipDataset:
    features: np.ndarray  # (rows, 2n): [D_n | D_n']
    l_m: np.ndarray
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, 2 * self.n_bins)
        self.l_m = np.asarray(self.l_m, dtype=np.float64).ravel()
        if len(self.l_m) != len(self.features):
            raise ValueError("feature and target row counts differ")
        if not np.isfinite(self.l_m).all() or (self.l_m < 0).any():
            raise ValueError("l_m must be finite and non-negative")

    def __len__(self):
        return len(self.l_m)

    def labels(self, threshold: float) -> np.ndarray:
        """1 where the step is worth skipping (``l_m < threshold``)."""
        return (self.l_m < threshold).astype(np.int8)

    def subset(self, idx) -> "SkipDataset":
        return SkipDataset(self.features[idx], self.l_m[idx], self.n_bins)

    @staticmethod
    def concat(parts: Sequence["SkipDataset"], n_bins: int = DEFAULT_BINS) -> "SkipDataset":
        if not parts:
            return SkipDataset(np.zeros((0, 2 * n_bins)), np.zeros(0), n_bins)
        if len({p.n_bins for p in parts}) != 1:
            raise ValueError("datasets use different bin counts")
        return SkipDataset(
            np.concatenate([p.features for p in parts]), np.concatenate([p.l_m for p in parts]), parts[0].n_bins
        )


@dataclass(frozen=True)
class HarvestStep:
    """One logged step of a skip-free run: the action that led here, the scan, the map change."""

    action: Action
    ranges: np.ndarray
    delta: float


def harvest(episodes: Iterable[Sequence[HarvestStep]], n: int = DEFAULT_BINS, max_range: float = 5.0) -> SkipDataset:
    feats, targets = [], []
    for steps in episodes:
        for prev, cur in zip(steps, steps[1:]):
            if cur.action != Action.MOVE_FORWARD:
                continue
            feats.append(np.concatenate([depth_histogram(cur.ranges, n, max_range),
                                         depth_histogram(prev.ranges, n, max_range)]))
            targets.append(cur.delta)
    if not feats:
        return SkipDataset(np.zeros((0, 2 * n)), np.zeros(0), n)
    return SkipDataset(np.stack(feats), np.asarray(targets), n)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: SkipDataset, path, header: str = "") -> None:
    n = ds.n_bins
    cols = [f"d{i}" for i in range(n)] + [f"dprev{i}" for i in range(n)] + ["l_m"]
    with open(path, "w", newline="") as f:
        f.write(f"# objnav.skip_dataset v{DATASET_FORMAT_VERSION} {header}".rstrip() + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row, l in zip(ds.features, ds.l_m):
            w.writerow([_fmt(v) for v in row] + [_fmt(l)])


def load_dataset(path) -> SkipDataset:
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(io.StringIO("".join(lines))))
    if not rows:
        raise ValueError(f"{path}: no header row")
    head, body = rows[0], rows[1:]
    if not head or head[-1] != "l_m" or (len(head) - 1) % 2:
        raise ValueError(f"{path}: unexpected columns")
    n = (len(head) - 1) // 2
    arr = np.array(body, dtype=np.float64).reshape(-1, 2 * n + 1)
    return SkipDataset(arr[:, :-1], arr[:, -1], n)


# ---------------------------------------------------------------------------
# balanced random forest


@dataclass(frozen=True)
class ForestParams:
    threshold: float = 25.0
    trees: int = 64
    max_depth: int = 12
    min_leaf: int = 1
    vote_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("trees >= 1, max_depth >= 0 and min_leaf >= 1 required")
        if not 0.0 < self.vote_threshold <= 1.0:
            raise ValueError("vote_threshold must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf.  ``x[f] <= t`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@numba.njit(cache=True)
def _gini(n0, n1):
    n = n0 + n1
    if n == 0:
        return 0.0
    p = n1 / n
    return 2.0 * p * (1.0 - p)


@numba.njit(cache=True)
def _best_split(X, y, idx, feats, n_try, min_leaf):
    """Best Gini split over the first ``n_try`` features of ``feats``, drawing more if none split."""
    n = idx.shape[0]
    best_f = -1
    best_t = 0.0
    best_score = np.inf
    vals = np.empty(n)
    labs = np.empty(n, dtype=np.int64)
    tried = 0
    for q in range(feats.shape[0]):
        if tried >= n_try and best_f >= 0:
            break
        f = feats[q]
        tried += 1
        for a in range(n):
            vals[a] = X[idx[a], f]
            labs[a] = y[idx[a]]
        order = np.argsort(vals, kind="mergesort")
        tot1 = 0
        for a in range(n):
            tot1 += labs[a]
        tot0 = n - tot1
        l0 = 0
        l1 = 0
        for a in range(n - 1):
            if labs[order[a]] == 1:
                l1 += 1
            else:
                l0 += 1
            v = vals[order[a]]
            w = vals[order[a + 1]]
            if w <= v:
                continue
            nl = a + 1
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            score = nl * _gini(l0, l1) + nr * _gini(tot0 - l0, tot1 - l1)
            if score < best_score:
                best_score = score
                best_f = f
                t = 0.5 * (v + w)
                # midpoint can round up to w for adjacent floats
                best_t = t if t < w else v
    return best_f, best_t


@numba.njit(cache=True)
def _grow(X, y, sample, n_try, max_depth, min_leaf, seed):
    np.random.seed(seed)
    n_feat = X.shape[1]
    cap = 2 * sample.shape[0] + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    label = np.zeros(cap, dtype=np.int64)
    # stack of (node, start, stop, depth) over a permutation buffer of sample indices
    buf = sample.copy()
    st_node = np.empty(cap, dtype=np.int64)
    st_a = np.empty(cap, dtype=np.int64)
    st_b = np.empty(cap, dtype=np.int64)
    st_d = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0], st_a[0], st_b[0], st_d[0] = 0, 0, buf.shape[0], 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node, a, b, depth = st_node[top], st_a[top], st_b[top], st_d[top]
        idx = buf[a:b]
        c1 = 0
        for k in range(idx.shape[0]):
            c1 += y[idx[k]]
        c0 = idx.shape[0] - c1
        # ties go to "process", the conservative class
        label[node] = 1 if c1 > c0 else 0
        if c0 == 0 or c1 == 0 or depth >= max_depth or idx.shape[0] < 2 * min_leaf:
            continue
        feats = np.random.permutation(n_feat)
        f, t = _best_split(X, y, idx, feats, n_try, min_leaf)
        if f < 0:
            continue
        # partition idx in place
        lo = a
        hi = b - 1
        while lo <= hi:
            if X[buf[lo], f] <= t:
                lo += 1
            else:
                tmp = buf[lo]
                buf[lo] = buf[hi]
                buf[hi] = tmp
                hi -= 1
        feature[node] = f
        threshold[node] = t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top], st_a[top], st_b[top], st_d[top] = n_nodes + 1, lo, b, depth + 1
        top += 1
        st_node[top], st_a[top], st_b[top], st_d[top] = n_nodes, a, lo, depth + 1
        top += 1
        n_nodes += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], label[:n_nodes]


def balanced_bootstrap(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices with ``m`` draws (with replacement) from each class, ``m`` the minority count."""
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    m = min(len(pos), len(neg))
    return np.concatenate([rng.choice(neg, m, replace=True), rng.choice(pos, m, replace=True)])


@dataclass(frozen=True, eq=False)
class JudgeModel:
    trees: tuple[Tree, ...]
    n_bins: int
    max_range: float
    vote_threshold: float = 0.5
    threshold: float = 25.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a judge needs at least one tree")
        for t in self.trees:
            if (t.feature >= 2 * self.n_bins).any():
                raise ValueError("split feature outside the 2n feature vector")
        # packed copy for the numba kernel
        off = np.cumsum([0] + [t.n_nodes for t in self.trees])
        packed = (
            np.concatenate([t.feature for t in self.trees]).astype(np.int64),
            np.concatenate([t.threshold for t in self.trees]).astype(np.float64),
            np.concatenate([t.left + o for t, o in zip(self.trees, off)]).astype(np.int64),
            np.concatenate([t.right + o for t, o in zip(self.trees, off)]).astype(np.int64),
            np.concatenate([t.label for t in self.trees]).astype(np.int64),
            off[:-1].astype(np.int64),
        )
        object.__setattr__(self, "_packed", packed)

    @property
    def n_features(self) -> int:
        return 2 * self.n_bins

    def votes(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting "skip" for each row of ``X``."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _forest_votes(X, *self._packed)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.votes(X) >= self.vote_threshold


@numba.njit(cache=True)
def _forest_votes(X, feature, threshold, left, right, label, roots):
    n, n_trees = X.shape[0], roots.shape[0]
    out = np.zeros(n)
    for r in range(n):
        s = 0
        for t in range(n_trees):
            k = roots[t]
            while feature[k] >= 0:
                k = left[k] if X[r, feature[k]] <= threshold[k] else right[k]
            s += label[k]
        out[r] = s / n_trees
    return out


def train_judge(data: SkipDataset, params: ForestParams = ForestParams(), max_range: float = 5.0) -> JudgeModel:
    y = data.labels(params.threshold)
    if len(y) == 0 or y.min() == y.max():
        raise ValueError(
            f"both classes are needed to train a judge (threshold {params.threshold}: "
            f"{int(y.sum())} skip / {int(len(y) - y.sum())} process rows)"
        )
    X = np.ascontiguousarray(data.features, dtype=np.float64)
    y64 = y.astype(np.int64)
    n_try = math.ceil(math.sqrt(X.shape[1]))
    rng = np.random.default_rng(params.seed)
    trees = []
    for _ in range(params.trees):
        sample = balanced_bootstrap(y64, rng)
        assert 2 * y64[sample].sum() == len(sample)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        arrs = _grow(X, y64, sample.astype(np.int64), n_try, params.max_depth, params.min_leaf, tree_seed)
        trees.append(Tree(*[a.copy() for a in arrs]))
    return JudgeModel(tuple(trees), data.n_bins, float(max_range), params.vote_threshold, params.threshold,
                      dict(params.__dict__))


def judge_predict(model: JudgeModel, d_hist: np.ndarray, d_prev_hist: np.ndarray) -> bool:
    x = np.concatenate([np.asarray(d_hist, dtype=np.float64), np.asarray(d_prev_hist, dtype=np.float64)])
    if x.shape[0] != model.n_features:
        raise ValueError(f"expected two histograms of {model.n_bins} bins, got {len(d_hist)} and {len(d_prev_hist)}")
    return bool(model.votes(x)[0] >= model.vote_threshold)


def evaluate_judge(model: JudgeModel, data: SkipDataset) -> dict:
    """Accuracy figures on ``data`` labelled at the model's own threshold."""
    y = data.labels(model.threshold).astype(bool)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = model.predict(data.features)
    recalls = [float((pred[y == c] == c).mean()) for c in (False, True) if (y == c).any()]
    pos = float(y.mean())
    return {
        "rows": int(len(y)),
        "skip_fraction": pos,
        "accuracy": float((pred == y).mean()),
        "balanced_accuracy": float(np.mean(recalls)),
        "majority_accuracy": max(pos, 1.0 - pos),
        "predicted_skip_fraction": float(pred.mean()),
    }


def judge_to_dict(model: JudgeModel) -> dict:
    return {
        "format": "objnav.judge",
        "version": JUDGE_FORMAT_VERSION,
        "n_bins": model.n_bins,
        "max_range": model.max_range,
        "vote_threshold": model.vote_threshold,
        "threshold": model.threshold,
        "params": model.params,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "label": t.label.tolist(),
            }
            for t in model.trees
        ],
    }


def judge_from_dict(d: dict) -> JudgeModel:
    if d.get("format") != "objnav.judge" or d.get("version") != JUDGE_FORMAT_VERSION:
        raise ValueError("unsupported judge format")
    trees = tuple(
        Tree(
            np.asarray(t["feature"], dtype=np.int64),
            np.asarray(t["threshold"], dtype=np.float64),
            np.asarray(t["left"], dtype=np.int64),
            np.asarray(t["right"], dtype=np.int64),
            np.asarray(t["label"], dtype=np.int64),
        )
        for t in d["trees"]
    )
    return JudgeModel(trees, int(d["n_bins"]), float(d["max_range"]), float(d["vote_threshold"]),
                      float(d["threshold"]), dict(d.get("params", {})))


def save_judge(model: JudgeModel, path, extra: dict | None = None) -> None:
    d = judge_to_dict(model)
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, sort_keys=True)
        f.write("\n")


def load_judge(path) -> JudgeModel:
    with open(path) as f:
        return judge_from_dict(json.load(f))


def judge_digest(model: JudgeModel) -> str:
    return hashlib.sha256(json.dumps(judge_to_dict(model), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# skip decision


def classify_skip(p_hist: PoseHistory, p: Pose, a: Action, d: DepthScan, d_prev: DepthScan | None,
                  model: JudgeModel | None, r: float) -> SkipType:
    """Decide whether to skip processing the scan taken at ``p``.

    ``a`` is the action that brought the agent to ``p``; ``p_hist`` holds
    earlier poses only.
    """
    for q in p_hist:
        if q == p:
            return SkipType.LOSSLESS
    if r > 0:
        for q in p_hist:
            if q.theta == p.theta and math.hypot(q.x - p.x, q.y - p.y) < r:
                return SkipType.AGGR_REVISIT
    if a != Action.MOVE_FORWARD or model is None or d_prev is None:
        return SkipType.NONE
    h = depth_histogram(d, model.n_bins, model.max_range)
    hp = depth_histogram(d_prev, model.n_bins, model.max_range)
    return SkipType.SKIP_FORWARD if judge_predict(model, h, hp) else SkipType.NONE
