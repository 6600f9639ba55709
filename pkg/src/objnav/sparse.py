"""2-D sparse tensors, rulebooks and sparse convolutions (submanifold and strided).

Offsets are cross-correlation offsets: output site ``o`` reads input site
``s*o - p + (di, dj)`` through weight ``W[:, :, di, dj]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class SparseTensor2D:
    coords: np.ndarray  # (nnz, 2) int64, unique, row-major sorted
    feats: np.ndarray  # (C, nnz)
    shape: tuple[int, int, int]  # (C, H, W)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        f = np.asarray(self.feats)
        if f.ndim != 2 or f.shape[1] != len(c) or f.shape[0] != self.shape[0]:
            raise ValueError(f"feats {f.shape} inconsistent with {len(c)} coords and shape {self.shape}")
        _, h, w = self.shape
        if len(c) and ((c < 0).any() or (c[:, 0] >= h).any() or (c[:, 1] >= w).any()):
            raise ValueError("coordinates out of bounds")
        key = c[:, 0] * w + c[:, 1]
        if len(key) > 1 and not (np.diff(key) > 0).all():
            raise ValueError("coordinates must be unique and row-major sorted (use from_coords)")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "feats", f)

    @property
    def nnz(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.shape[1], self.shape[2]

    def with_feats(self, feats: np.ndarray) -> "SparseTensor2D":
        feats = np.asarray(feats)
        return SparseTensor2D(self.coords, feats, (feats.shape[0],) + self.spatial)

    def __eq__(self, other):
        if not isinstance(other, SparseTensor2D):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.feats, other.feats))

    __hash__ = None


def from_coords(coords, feats, shape) -> SparseTensor2D:
    """Build a tensor from unordered unique coordinates, sorting into canonical order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    f = np.asarray(feats)
    order = np.lexsort((c[:, 1], c[:, 0]))
    c, f = c[order], f[:, order]
    if len(c) > 1 and not (np.diff(c[:, 0] * shape[2] + c[:, 1]) > 0).all():
        raise ValueError("duplicate coordinates")
    return SparseTensor2D(c, f, tuple(shape))


def from_dense(dense: np.ndarray) -> SparseTensor2D:
    dense = np.asarray(dense)
    if dense.ndim != 3:
        raise ValueError("expected a C x H x W array")
    if not np.isfinite(dense).all():
        raise ValueError("non-finite values")
    active = np.any(dense != 0, axis=0)
    ii, jj = np.nonzero(active)  # row-major already
    return SparseTensor2D(np.stack([ii, jj], axis=1), dense[:, ii, jj].copy(), dense.shape)


def to_dense(x: SparseTensor2D) -> np.ndarray:
    out = np.zeros(x.shape, dtype=x.feats.dtype if x.feats.size else np.float64)
    out[:, x.coords[:, 0], x.coords[:, 1]] = x.feats
    return out


# ---------------------------------------------------------------------------
# rulebooks


@dataclass(frozen=True, eq=False)
class Rulebook:
    kernel: int
    stride: int
    padding: int
    offsets: tuple[tuple[int, int], ...]
    in_idx: tuple[np.ndarray, ...]
    out_idx: tuple[np.ndarray, ...]
    n_in: int
    out_coords: np.ndarray
    out_shape: tuple[int, int]

    @property
    def n_out(self) -> int:
        return len(self.out_coords)

    @property
    def n_pairs(self) -> int:
        return int(sum(len(a) for a in self.in_idx))

    def pairs(self, offset: tuple[int, int]) -> list[tuple[int, int]]:
        k = self.offsets.index(tuple(offset))
        return list(zip(self.in_idx[k].tolist(), self.out_idx[k].tolist()))


def _index_grid(coords: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # direct-address table: grid cell -> position in coords, -1 if inactive
    grid = np.full(shape, -1, dtype=np.int64)
    grid[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    return grid


def build_rulebook(in_coords, out_coords, k: int, s: int, p: int, in_shape: tuple[int, int],
                   out_shape: tuple[int, int] | None = None) -> Rulebook:
    if k % 2 != 1 or k < 1:
        raise ValueError("kernel size must be odd")
    if s not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    ic = np.asarray(in_coords, dtype=np.int64).reshape(-1, 2)
    oc = np.asarray(out_coords, dtype=np.int64).reshape(-1, 2)
    if out_shape is None:
        out_shape = ((in_shape[0] + 2 * p - k) // s + 1, (in_shape[1] + 2 * p - k) // s + 1)
    grid = _index_grid(ic, in_shape)
    h, w = in_shape
    offsets, ins, outs = [], [], []
    base = s * oc - p
    for di in range(k):
        for dj in range(k):
            src = base + (di, dj)
            ok = (src[:, 0] >= 0) & (src[:, 0] < h) & (src[:, 1] >= 0) & (src[:, 1] < w)
            o = np.flatnonzero(ok)
            i = grid[src[o, 0], src[o, 1]]
            hit = i >= 0
            offsets.append((di, dj))
            ins.append(i[hit])
            outs.append(o[hit])
    return Rulebook(k, s, p, tuple(offsets), tuple(ins), tuple(outs), len(ic), oc, tuple(out_shape))


def subm_rulebook(x: SparseTensor2D, k: int = 3) -> Rulebook:
    return build_rulebook(x.coords, x.coords, k, 1, (k - 1) // 2, x.spatial, x.spatial)


def strided_out_shape(h: int, w: int) -> tuple[int, int]:
    return (h + 1) // 2, (w + 1) // 2


def strided_active(coords: np.ndarray, shape: tuple[int, int], k: int = 3, s: int = 2, p: int = 1) -> np.ndarray:
    """Output sites (row-major) whose receptive field holds at least one active input."""
    ho, wo = (shape[0] + 2 * p - k) // s + 1, (shape[1] + 2 * p - k) // s + 1
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    hit = np.zeros((ho, wo), dtype=bool)
    for di in range(k):
        for dj in range(k):
            num = c + p - (di, dj)
            ok = (num % s == 0).all(axis=1)
            o = num[ok] // s
            ok2 = (o[:, 0] >= 0) & (o[:, 0] < ho) & (o[:, 1] >= 0) & (o[:, 1] < wo)
            hit[o[ok2, 0], o[ok2, 1]] = True
    ii, jj = np.nonzero(hit)
    return np.stack([ii, jj], axis=1)


def strided_rulebook(x: SparseTensor2D) -> Rulebook:
    h, w = x.spatial
    out = strided_active(x.coords, (h, w))
    return build_rulebook(x.coords, out, 3, 2, 1, (h, w), strided_out_shape(h, w))


def shortcut_rulebook(x: SparseTensor2D, out_coords: np.ndarray, out_shape: tuple[int, int]) -> Rulebook:
    """1x1 stride-2 rulebook onto a given output active set."""
    return build_rulebook(x.coords, out_coords, 1, 2, 0, x.spatial, out_shape)


# ---------------------------------------------------------------------------
# convolution


def apply_rulebook(rb: Rulebook, feats: np.ndarray, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    cout, cin = W.shape[:2]
    if feats.shape[0] != cin:
        raise ValueError(f"input has {feats.shape[0]} channels, weights expect {cin}")
    if W.shape[2:] != (rb.kernel, rb.kernel):
        raise ValueError("weight kernel does not match the rulebook")
    dtype = np.result_type(feats, W)
    out = np.zeros((cout, rb.n_out), dtype=dtype)
    for (di, dj), i, o in zip(rb.offsets, rb.in_idx, rb.out_idx):
        if len(i):
            # each output appears at most once per offset, so plain indexing is safe
            out[:, o] += W[:, :, di, dj] @ feats[:, i]
    if b is not None:
        out += np.asarray(b, dtype=dtype)[:, None]
    return out


def apply_rulebook_backward(rb: Rulebook, feats: np.ndarray, W: np.ndarray, gout: np.ndarray):
    """Gradients ``(d feats, d W, d b)`` of ``apply_rulebook`` given ``d out``."""
    gin = np.zeros_like(feats, dtype=np.result_type(feats, gout))
    gW = np.zeros_like(W, dtype=np.result_type(W, gout))
    for (di, dj), i, o in zip(rb.offsets, rb.in_idx, rb.out_idx):
        if len(i):
            g = gout[:, o]
            gW[:, :, di, dj] = g @ feats[:, i].T
            gin[:, i] += W[:, :, di, dj].T @ g
    return gin, gW, gout.sum(axis=1)


def subm_conv(x: SparseTensor2D, W: np.ndarray, b: np.ndarray | None = None,
              rulebook: Rulebook | None = None) -> SparseTensor2D:
    W = np.asarray(W)
    if W.shape[1] != x.channels:
        raise ValueError(f"input has {x.channels} channels, weights expect {W.shape[1]}")
    rb = rulebook if rulebook is not None else subm_rulebook(x, W.shape[2])
    return SparseTensor2D(x.coords, apply_rulebook(rb, x.feats, W, b), (W.shape[0],) + x.spatial)


def strided_conv(x: SparseTensor2D, W: np.ndarray, b: np.ndarray | None = None, stride: int = 2,
                 rulebook: Rulebook | None = None) -> SparseTensor2D:
    W = np.asarray(W)
    if stride != 2 or W.shape[2:] != (3, 3):
        raise ValueError("strided convolution is fixed to k=3, s=2, p=1")
    if W.shape[1] != x.channels:
        raise ValueError(f"input has {x.channels} channels, weights expect {W.shape[1]}")
    rb = rulebook if rulebook is not None else strided_rulebook(x)
    return SparseTensor2D(rb.out_coords, apply_rulebook(rb, x.feats, W, b), (W.shape[0],) + rb.out_shape)


# ---------------------------------------------------------------------------
# FLOP accounting (one multiply-add = 2 FLOPs; bias add = 2 per output value)


def flops_sparse(rb: Rulebook, cin: int, cout: int) -> int:
    return 2 * rb.n_pairs * cin * cout + 2 * cout * rb.n_out


def flops_dense(k: int, cin: int, cout: int, hout: int, wout: int) -> int:
    return 2 * hout * wout * k * k * cin * cout + 2 * cout * hout * wout
