"""A small reverse-mode tape over numpy arrays, with just the ops the predictor needs.

``Tape.var`` wraps a leaf; every op returns a ``Var`` and, when the tape is
recording, pushes a backward closure.  ``Tape.backward`` replays them in
reverse.  Each op also appends an ``OpRecord`` (FLOPs, output size, inputs) so
the same forward pass drives FLOP and memory accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import sparse as sp

LOGIT_CLAMP = 15.0
LOG_CLAMP = 1e-7


class Var:
    __slots__ = ("value", "grad", "id", "kind", "meta")

    def __init__(self, value, vid: int, kind: str = "dense", meta=None):
        self.value = value
        self.grad = None
        self.id = vid
        self.kind = kind  # dense | sparse | param | scalar
        self.meta = meta  # sparse: (coords, spatial shape)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class OpRecord:
    name: str
    branch: str
    flops: int
    out: int  # var id
    inputs: tuple[int, ...]


@dataclass
class Tape:
    record: bool = True
    ops: list[OpRecord] = field(default_factory=list)
    sizes: dict[int, int] = field(default_factory=dict)  # var id -> accounted bytes
    branch: str = ""
    _back: list = field(default_factory=list)
    _n: int = 0

    # -- bookkeeping ----------------------------------------------------
    def _new(self, value, kind="dense", meta=None) -> Var:
        v = Var(value, self._n, kind, meta)
        self._n += 1
        if kind == "sparse":
            coords = meta[0]
            self.sizes[v.id] = 12 * len(coords) + 4 * value.shape[0] * value.shape[1]
        elif kind != "param":
            self.sizes[v.id] = 4 * int(np.prod(value.shape))
        return v

    def var(self, value, kind="dense", meta=None) -> Var:
        return self._new(value, kind, meta)

    def param(self, value) -> Var:
        return self._new(value, "param")

    def _op(self, name, out: Var, inputs, flops, back):
        self.ops.append(OpRecord(name, self.branch, int(flops), out.id, tuple(v.id for v in inputs)))
        if self.record and back is not None:
            self._back.append((out, back))
        return out

    @staticmethod
    def _acc(v: Var, g):
        if v.grad is None:
            v.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            v.grad += g

    def backward(self, loss: Var) -> None:
        loss.grad = np.ones_like(loss.value)
        for out, back in reversed(self._back):
            if out.grad is not None:  # skip ops that do not reach the loss
                back()

    # -- dense ops ------------------------------------------------------
    def conv2d(self, x: Var, W: Var, b: Var | None, stride: int = 1, pad: int | None = None) -> Var:
        cout, cin, k, _ = W.value.shape
        if pad is None:
            pad = (k - 1) // 2
        xv = x.value
        if xv.shape[0] != cin:
            raise ValueError(f"conv expects {cin} input channels, got {xv.shape[0]}")
        c, h, w = xv.shape
        xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # C,Ho,Wo,k,k
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
        Wm = W.value.reshape(cout, -1)
        y = Wm @ cols
        if b is not None:
            y += b.value[:, None]
        out = self._new(y.reshape(cout, ho, wo))

        def back():
            g = out.grad.reshape(cout, -1)
            self._acc(W, (g @ cols.T).reshape(W.value.shape))
            if b is not None:
                self._acc(b, g.sum(axis=1))
            gcols = (Wm.T @ g).reshape(cin, k, k, ho, wo)
            gp = np.zeros_like(xp, dtype=np.float64)
            for di in range(k):
                for dj in range(k):
                    gp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
            self._acc(x, gp[:, pad:pad + h, pad:pad + w] if pad else gp)

        return self._op(f"conv{k}x{k}/s{stride}", out, (x,), sp.flops_dense(k, cin, cout, ho, wo), back)

    def affine(self, x: Var, scale: Var, shift: Var) -> Var:
        shp = (-1,) + (1,) * (x.value.ndim - 1)
        s, t = scale.value.reshape(shp), shift.value.reshape(shp)
        y = x.value * s + t
        out = self._new(y, x.kind, x.meta)
        axes = tuple(range(1, x.value.ndim))

        def back():
            g = out.grad
            self._acc(x, g * s)
            self._acc(scale, (g * x.value).sum(axis=axes))
            self._acc(shift, g.sum(axis=axes))

        return self._op("affine", out, (x,), 2 * x.value.size, back)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        out = self._new(np.where(mask, x.value, 0.0), x.kind, x.meta)

        def back():
            self._acc(x, out.grad * mask)

        return self._op("relu", out, (x,), x.value.size, back)

    def add(self, a: Var, b: Var) -> Var:
        if a.value.shape != b.value.shape:
            raise ValueError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")
        out = self._new(a.value + b.value, a.kind, a.meta)

        def back():
            self._acc(a, out.grad)
            self._acc(b, out.grad)

        return self._op("add", out, (a, b), a.value.size, back)

    def concat(self, a: Var, b: Var) -> Var:
        if a.value.shape[1:] != b.value.shape[1:]:
            raise ValueError("concat spatial mismatch")
        ca = a.value.shape[0]
        out = self._new(np.concatenate([a.value, b.value], axis=0))

        def back():
            self._acc(a, out.grad[:ca])
            self._acc(b, out.grad[ca:])

        return self._op("concat", out, (a, b), 0, back)

    def avgpool(self, x: Var, f: int) -> Var:
        """Mean over ``f x f`` windows with a ceil-sized output; edge windows average the cells they cover."""
        if f == 1:
            return x
        c, h, w = x.value.shape
        ho, wo = -(-h // f), -(-w // f)
        xp = np.zeros((c, ho * f, wo * f))
        xp[:, :h, :w] = x.value
        cnt = np.zeros((ho * f, wo * f))
        cnt[:h, :w] = 1.0
        n = cnt.reshape(ho, f, wo, f).sum(axis=(1, 3))
        y = xp.reshape(c, ho, f, wo, f).sum(axis=(2, 4)) / n
        out = self._new(y)

        def back():
            g = out.grad / n
            gx = np.repeat(np.repeat(g, f, axis=1), f, axis=2)[:, :h, :w]
            self._acc(x, gx)

        return self._op(f"avgpool{f}", out, (x,), x.value.size, back)

    def upsample(self, x: Var, f: int, size: tuple[int, int]) -> Var:
        """Nearest-neighbour upsampling by ``f``, cropped to ``size``."""
        c, h, w = x.value.shape
        H, W = size
        if h * f < H or w * f < W:
            raise ValueError("upsampled map is smaller than the requested size")
        y = np.repeat(np.repeat(x.value, f, axis=1), f, axis=2)[:, :H, :W]
        out = self._new(y)

        def back():
            g = np.zeros((c, h * f, w * f))
            g[:, :H, :W] = out.grad
            self._acc(x, g.reshape(c, h, f, w, f).sum(axis=(2, 4)))

        return self._op(f"upsample{f}", out, (x,), 0, back)

    def sigmoid(self, z: Var) -> Var:
        zc = np.clip(z.value, -LOGIT_CLAMP, LOGIT_CLAMP)
        p = 1.0 / (1.0 + np.exp(-zc))
        inside = np.abs(z.value) <= LOGIT_CLAMP
        out = self._new(p)

        def back():
            self._acc(z, out.grad * p * (1.0 - p) * inside)

        return self._op("sigmoid", out, (z,), 4 * z.value.size, back)

    def bce(self, p: Var, t: np.ndarray) -> Var:
        pv = p.value
        a = np.maximum(pv, LOG_CLAMP)
        b = np.maximum(1.0 - pv, LOG_CLAMP)
        n = pv.size
        loss = -np.sum(t * np.log(a) + (1.0 - t) * np.log(b)) / n
        out = self._new(np.asarray(loss), "scalar")

        def back():
            g = -(t / a * (pv > LOG_CLAMP) - (1.0 - t) / b * ((1.0 - pv) > LOG_CLAMP)) / n
            self._acc(p, out.grad * g)

        return self._op("bce", out, (p,), 6 * n, back)

    def scale(self, x: Var, c: float) -> Var:
        out = self._new(x.value * c, x.kind, x.meta)

        def back():
            self._acc(x, out.grad * c)

        return self._op("scale", out, (x,), x.value.size, back)

    # -- sparse ops -----------------------------------------------------
    def sparse_input(self, t: sp.SparseTensor2D) -> Var:
        return self._new(np.asarray(t.feats, dtype=np.float64), "sparse", (t.coords, t.spatial))

    def sparse_conv(self, x: Var, rb: sp.Rulebook, W: Var, b: Var | None) -> Var:
        cout, cin = W.value.shape[:2]
        y = sp.apply_rulebook(rb, x.value, W.value, None if b is None else b.value)
        out = self._new(y, "sparse", (rb.out_coords, rb.out_shape))

        def back():
            gin, gW, gb = sp.apply_rulebook_backward(rb, x.value, W.value, out.grad)
            self._acc(x, gin)
            self._acc(W, gW)
            if b is not None:
                self._acc(b, gb)

        k = rb.kernel
        return self._op(f"sparse_conv{k}x{k}/s{rb.stride}", out, (x,), sp.flops_sparse(rb, cin, cout), back)

    def to_dense(self, x: Var) -> Var:
        coords, (h, w) = x.meta
        c = x.value.shape[0]
        y = np.zeros((c, h, w))
        y[:, coords[:, 0], coords[:, 1]] = x.value
        out = self._new(y)

        def back():
            self._acc(x, out.grad[:, coords[:, 0], coords[:, 1]])

        return self._op("to_dense", out, (x,), 0, back)
