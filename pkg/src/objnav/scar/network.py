"""Hybrid sparse/dense residual predictor: configuration, parameters and forward pass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .. import sparse as sp
from .autodiff import Tape, Var

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    strided: bool = False

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1:
            raise ValueError("a stage needs at least one block and one channel")


def _stages(v) -> tuple[StageSpec, ...]:
    return tuple(s if isinstance(s, StageSpec) else StageSpec(*s) if isinstance(s, (list, tuple)) else StageSpec(**s)
                 for s in v)


@dataclass(frozen=True)
class ScarConfig:
    in_channels: int
    n_classes: int
    sparse_stages: tuple[StageSpec, ...]
    dense_stages: tuple[StageSpec, ...]
    sparse_expansion: int = 1
    dense_expansion: int = 1
    decode_channels: int = 32
    fuse: str = "add"
    aux_head: bool = True
    aux_weight: float = 0.4
    sparse_compress: int | None = None
    dense_compress: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sparse_stages", _stages(self.sparse_stages))
        object.__setattr__(self, "dense_stages", _stages(self.dense_stages))
        if self.fuse not in ("add", "concat"):
            raise ValueError(f"fuse must be 'add' or 'concat', got {self.fuse!r}")
        if self.in_channels < 1 or self.n_classes < 1 or self.decode_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.sparse_expansion < 1 or self.dense_expansion < 1:
            raise ValueError("expansion must be >= 1")
        if not self.dense_stages:
            raise ValueError("the dense branch needs at least one stage")
        if self.sparse_stages:
            if self.pool_factor < 1:
                raise ValueError("the dense branch downsamples more than the sparse branch")
            if self.fuse == "add" and self.compress_channels[0] != self.compress_channels[1]:
                raise ValueError("fuse='add' needs equal compression channels on both branches")

    @property
    def has_sparse(self) -> bool:
        return bool(self.sparse_stages)

    @property
    def compress_channels(self) -> tuple[int, int]:
        s = self.sparse_compress or self.decode_channels
        d = self.dense_compress or self.decode_channels
        return s, d

    @property
    def sparse_stride(self) -> int:
        return 2 ** sum(s.strided for s in self.sparse_stages)

    @property
    def dense_stride(self) -> int:
        return 2 ** sum(s.strided for s in self.dense_stages)

    @property
    def pool_factor(self) -> int:
        """Downsampling of the map before the dense branch so both branches meet at one resolution."""
        if not self.has_sparse:
            return 1
        return self.sparse_stride // self.dense_stride

    @property
    def output_stride(self) -> int:
        return self.sparse_stride if self.has_sparse else self.dense_stride

    @property
    def fused_channels(self) -> int:
        s, d = self.compress_channels
        if not self.has_sparse:
            return d
        return d if self.fuse == "add" else s + d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparse_stages"] = [asdict(s) for s in self.sparse_stages]
        d["dense_stages"] = [asdict(s) for s in self.dense_stages]
        return d

    @staticmethod
    def from_dict(d: dict) -> "ScarConfig":
        return ScarConfig(**d)


def scar_mini(in_channels: int, n_classes: int, **kw) -> ScarConfig:
    """Reference hybrid: deep sparse branch, shallow dense branch."""
    return ScarConfig(
        in_channels, n_classes,
        sparse_stages=(StageSpec(2, 16), StageSpec(2, 32, True), StageSpec(2, 64, True), StageSpec(2, 64, True)),
        dense_stages=(StageSpec(1, 8), StageSpec(1, 16, True), StageSpec(1, 32, True)),
        **{"decode_channels": 32, "fuse": "add", **kw},
    )


def dense_baseline(in_channels: int, n_classes: int, **kw) -> ScarConfig:
    """All-dense network with the hybrid's deep-branch layout, the comparison arm."""
    return ScarConfig(
        in_channels, n_classes, sparse_stages=(),
        dense_stages=(StageSpec(2, 16), StageSpec(2, 32, True), StageSpec(2, 64, True), StageSpec(2, 64, True)),
        **{"decode_channels": 32, **kw},
    )


# ---------------------------------------------------------------------------
# parameters


def _block_units(prefix: str, cin: int, cout: int, strided: bool, expansion: int):
    """(name, cin, cout, k) conv units of one residual block, shortcut last."""
    units = []
    if expansion == 1:
        units += [(f"{prefix}.conv1", cin, cout, 3), (f"{prefix}.conv2", cout, cout, 3)]
    else:
        mid = max(1, cout // expansion)
        units += [(f"{prefix}.conv1", cin, mid, 1), (f"{prefix}.conv2", mid, mid, 3), (f"{prefix}.conv3", mid, cout, 1)]
    if strided or cin != cout:
        units.append((f"{prefix}.short", cin, cout, 1))
    return units


def _branch_units(name: str, stages: Sequence[StageSpec], cin: int, expansion: int):
    units = []
    c = cin
    for si, st in enumerate(stages):
        for bi in range(st.blocks):
            units += _block_units(f"{name}.s{si}.b{bi}", c, st.channels, st.strided and bi == 0, expansion)
            c = st.channels
    return units, c


def conv_units(cfg: ScarConfig) -> list[tuple[str, int, int, int, bool]]:
    """Every conv unit as (name, cin, cout, k, has_affine), in checkpoint order."""
    out = []
    sc, dc = cfg.compress_channels
    if cfg.has_sparse:
        su, s_last = _branch_units("sparse", cfg.sparse_stages, cfg.in_channels, cfg.sparse_expansion)
        out += [u + (True,) for u in su]
        out.append(("sparse.compress", s_last, sc, 1, True))
    du, d_last = _branch_units("dense", cfg.dense_stages, cfg.in_channels, cfg.dense_expansion)
    out += [u + (True,) for u in du]
    out.append(("dense.compress", d_last, dc, 1, True))
    out.append(("decode.conv1", cfg.fused_channels, cfg.decode_channels, 3, True))
    out.append(("decode.cls", cfg.decode_channels, cfg.n_classes, 3, False))
    if cfg.aux_head:
        out.append(("aux.conv1", d_last, cfg.decode_channels, 3, True))
        out.append(("aux.cls", cfg.decode_channels, cfg.n_classes, 1, False))
    return out


def param_shapes(cfg: ScarConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for name, cin, cout, k, aff in conv_units(cfg):
        shapes.append((f"{name}.weight", (cout, cin, k, k)))
        shapes.append((f"{name}.bias", (cout,)))
        if aff:
            shapes.append((f"{name}.scale", (cout,)))
            shapes.append((f"{name}.shift", (cout,)))
    return shapes


def count_params(cfg: ScarConfig) -> int:
    return int(sum(np.prod(s) for _, s in param_shapes(cfg)))


@dataclass(eq=False)
class ScarNetwork:
    config: ScarConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ScarNetwork":
        return ScarNetwork(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)


def _residual_last_units(cfg: ScarConfig) -> set[str]:
    last = {"sparse": "conv2" if cfg.sparse_expansion == 1 else "conv3",
            "dense": "conv2" if cfg.dense_expansion == 1 else "conv3"}
    return {n for n, *_ in conv_units(cfg) if n.count(".") == 3 and n.endswith("." + last[n.split(".")[0]])}


def init_network(cfg: ScarConfig, seed: int = 0) -> ScarNetwork:
    """He-normal convolutions; each residual branch ends in a zero-scale affine and the
    classifiers start near zero so the untrained net is well conditioned without normalization."""
    rng = np.random.default_rng(seed)
    last_units = _residual_last_units(cfg)
    params = {}
    for name, shape in param_shapes(cfg):
        unit = name.rsplit(".", 1)[0]
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            std = 0.01 if unit.endswith(".cls") else np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape)
        elif name.endswith(".scale"):
            params[name] = np.zeros(shape) if unit in last_units else np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ScarNetwork(cfg, params, seed)


# ---------------------------------------------------------------------------
# forward


class _Pass:
    """State of one forward pass: the tape, parameter leaves and rulebook cache."""

    def __init__(self, net: ScarNetwork, tape: Tape):
        self.net = net
        self.tape = tape
        self.leaves: dict[str, Var] = {}
        self.rb: dict = {}

    def p(self, name: str) -> Var:
        v = self.leaves.get(name)
        if v is None:
            v = self.tape.param(self.net.params[name])
            self.leaves[name] = v
        return v

    def has(self, name: str) -> bool:
        return f"{name}.weight" in self.net.params

    # dense -----------------------------------------------------------
    def dunit(self, x: Var, name: str, stride: int = 1, affine: bool = True) -> Var:
        y = self.tape.conv2d(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"), stride)
        if affine:
            y = self.tape.affine(y, self.p(f"{name}.scale"), self.p(f"{name}.shift"))
        return y

    def dblock(self, x: Var, prefix: str, strided: bool, expansion: int) -> Var:
        t = self.tape
        s = 2 if strided else 1
        if expansion == 1:
            h = t.relu(self.dunit(x, f"{prefix}.conv1", s))
            h = self.dunit(h, f"{prefix}.conv2")
        else:
            h = t.relu(self.dunit(x, f"{prefix}.conv1"))
            h = t.relu(self.dunit(h, f"{prefix}.conv2", s))
            h = self.dunit(h, f"{prefix}.conv3")
        sc = self.dunit(x, f"{prefix}.short", s) if self.has(f"{prefix}.short") else x
        return t.relu(t.add(h, sc))

    # sparse ----------------------------------------------------------
    def _subm_rb(self, coords, shape, k):
        key = ("subm", shape, k)
        if key not in self.rb:
            self.rb[key] = sp.build_rulebook(coords, coords, k, 1, (k - 1) // 2, shape, shape)
        return self.rb[key]

    def sunit(self, x: Var, name: str, rb: sp.Rulebook) -> Var:
        y = self.tape.sparse_conv(x, rb, self.p(f"{name}.weight"), self.p(f"{name}.bias"))
        return self.tape.affine(y, self.p(f"{name}.scale"), self.p(f"{name}.shift"))

    def sblock(self, x: Var, prefix: str, strided: bool, expansion: int) -> Var:
        t = self.tape
        coords, shape = x.meta
        if strided:
            out_shape = sp.strided_out_shape(*shape)
            out_coords = sp.strided_active(coords, shape)
            rb_down = sp.build_rulebook(coords, out_coords, 3, 2, 1, shape, out_shape)
        else:
            out_shape, out_coords = shape, coords
        rb3 = self._subm_rb(out_coords, out_shape, 3)
        if expansion == 1:
            h = t.relu(self.sunit(x, f"{prefix}.conv1", rb_down if strided else rb3))
            h = self.sunit(h, f"{prefix}.conv2", rb3)
        else:
            h = t.relu(self.sunit(x, f"{prefix}.conv1", self._subm_rb(coords, shape, 1)))
            h = t.relu(self.sunit(h, f"{prefix}.conv2", rb_down if strided else rb3))
            h = self.sunit(h, f"{prefix}.conv3", self._subm_rb(out_coords, out_shape, 1))
        if self.has(f"{prefix}.short"):
            rb_s = (sp.build_rulebook(coords, out_coords, 1, 2, 0, shape, out_shape) if strided
                    else self._subm_rb(coords, shape, 1))
            sc = self.sunit(x, f"{prefix}.short", rb_s)
        else:
            sc = x
        return t.relu(t.add(h, sc))


def _run_branch(ps: _Pass, x: Var, name: str, stages, expansion: int, sparse: bool) -> Var:
    block = ps.sblock if sparse else ps.dblock
    for si, st in enumerate(stages):
        for bi in range(st.blocks):
            x = block(x, f"{name}.s{si}.b{bi}", st.strided and bi == 0, expansion)
    return x


@dataclass
class ForwardResult:
    prob: Var
    logits: Var
    aux_prob: Var | None
    tape: Tape
    leaves: dict[str, Var] = field(default_factory=dict)


def forward_pass(net: ScarNetwork, m: np.ndarray, tape: Tape | None = None, *, with_aux: bool = False,
                 dense_only: bool = False) -> ForwardResult:
    """Run the network on a ``(in_channels, H, W)`` map.

    ``dense_only`` drops the sparse branch (allowed only with additive fusion,
    where it equals adding zeros).  ``with_aux`` also evaluates the auxiliary
    head, which inference never needs.
    """
    cfg = net.config
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or m.shape[0] != cfg.in_channels:
        raise ValueError(f"expected a ({cfg.in_channels}, H, W) map, got {m.shape}")
    for k, v in net.params.items():
        if not np.isfinite(v).all():
            raise ValueError(f"non-finite parameter {k}")
    if dense_only and cfg.has_sparse and cfg.fuse != "add":
        raise ValueError("dense_only needs additive fusion")
    tape = tape if tape is not None else Tape(record=False)
    ps = _Pass(net, tape)
    H, W = m.shape[1:]
    x_in = tape.var(m)

    branch_out = []
    if cfg.has_sparse and not dense_only:
        tape.branch = "sparse"
        xs = tape.sparse_input(sp.from_dense(m))
        xs = _run_branch(ps, xs, "sparse", cfg.sparse_stages, cfg.sparse_expansion, True)
        tape.branch = "compression"
        cs = ps.sunit(xs, "sparse.compress", ps._subm_rb(xs.meta[0], xs.meta[1], 1))
        branch_out.append(tape.to_dense(cs))

    tape.branch = "dense"
    xd = tape.avgpool(x_in, cfg.pool_factor)
    xd = _run_branch(ps, xd, "dense", cfg.dense_stages, cfg.dense_expansion, False)
    tape.branch = "compression"
    cd = ps.dunit(xd, "dense.compress")

    tape.branch = "decode"
    if branch_out:
        sd = branch_out[0]
        if sd.value.shape[1:] != cd.value.shape[1:]:
            raise ValueError(f"branch outputs disagree: {sd.value.shape} vs {cd.value.shape}")
        fused = tape.add(cd, sd) if cfg.fuse == "add" else tape.concat(cd, sd)
    else:
        fused = cd
    h = tape.relu(ps.dunit(fused, "decode.conv1"))
    z = ps.dunit(h, "decode.cls", affine=False)
    z = tape.upsample(z, cfg.output_stride, (H, W))
    prob = tape.sigmoid(z)

    aux = None
    if with_aux and cfg.aux_head:
        tape.branch = "aux"
        a = tape.relu(ps.dunit(xd, "aux.conv1"))
        a = ps.dunit(a, "aux.cls", affine=False)
        aux = tape.sigmoid(tape.upsample(a, cfg.output_stride, (H, W)))
    tape.branch = ""
    return ForwardResult(prob, z, aux, tape, ps.leaves)


def forward(net: ScarNetwork, m, *, dense_only: bool = False) -> np.ndarray:
    """Target probabilities ``(n_classes, H, W)`` in the open interval (0, 1)."""
    data = m.data if hasattr(m, "data") else m
    return forward_pass(net, data, dense_only=dense_only).prob.value


# ---------------------------------------------------------------------------
# checkpoints: JSON header + little-endian float32 blob in parameter order


def save_checkpoint(net: ScarNetwork, stem, extra: dict | None = None) -> None:
    stem = str(stem)
    shapes = param_shapes(net.config)
    header = {
        "format": "objnav.scar_checkpoint",
        "version": CHECKPOINT_FORMAT_VERSION,
        "seed": net.seed,
        "config": net.config.to_dict(),
        "params": [[n, list(s)] for n, s in shapes],
    }
    if extra:
        header.update(extra)
    with open(stem + ".json", "w") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
    blob = np.concatenate([net.params[n].ravel() for n, _ in shapes]).astype("<f4")
    blob.tofile(stem + ".bin")


def load_checkpoint(stem) -> ScarNetwork:
    stem = str(stem)
    with open(stem + ".json") as f:
        header = json.load(f)
    if header.get("format") != "objnav.scar_checkpoint" or header.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format")
    cfg = ScarConfig.from_dict(header["config"])
    shapes = param_shapes(cfg)
    if [[n, list(s)] for n, s in shapes] != header["params"]:
        raise ValueError("checkpoint parameter layout does not match its config")
    blob = np.fromfile(stem + ".bin", dtype="<f4").astype(np.float64)
    total = sum(int(np.prod(s)) for _, s in shapes)
    if blob.size != total:
        raise ValueError(f"checkpoint blob holds {blob.size} values, expected {total}")
    params, off = {}, 0
    for n, s in shapes:
        k = int(np.prod(s))
        params[n] = blob[off:off + k].reshape(s)
        off += k
    return ScarNetwork(cfg, params, int(header.get("seed", 0)))
