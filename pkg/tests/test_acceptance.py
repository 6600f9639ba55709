"""End-to-end acceptance checks; one summary line per criterion is printed at the end of the run."""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from objnav import cli
from objnav import harness as H
from objnav import planner as pl
from objnav import sparse as sp
from objnav.config import RunConfig
from objnav.mapping import active_fraction, integrate, map_for_world, scan_to_local
from objnav.scar import ScarConfig, count_flops, init_network, scar_mini, train
from objnav.scar.autodiff import Tape
from objnav.scar.network import forward_pass
from objnav.scar.search import arch_search, pareto_front
from objnav.scar.train import Sample, loss_and_grads
from objnav.skip import ForestParams, depth_histogram, evaluate_judge, harvest, judge_predict, train_judge
from objnav.world import Pose, SensorConfig, WorldConfig, dijkstra_field, observe

WC = WorldConfig()
THRESHOLD, RADIUS = 25.0, 0.1


# ---------------------------------------------------------------------------
# shared suites (expensive; computed once per module)


@pytest.fixture(scope="module")
def judge_data():
    t0 = time.perf_counter()
    specs = H.make_suite(100, 1, WC)
    res = H.run_suite(specs, H.AgentConfig(), WC, harvest=True)
    ds = harvest([r.harvest for r in res])
    return ds, time.perf_counter() - t0


@pytest.fixture(scope="module")
def judges(judge_data):
    ds, _ = judge_data
    out = {}
    for t in (10.0, 15.0, 25.0):
        t0 = time.perf_counter()
        out[t] = (train_judge(ds, ForestParams(threshold=t)), time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def arms(judge_data, judges):
    specs = H.make_suite(100, 2, WC)
    judge, t_train = judges[THRESHOLD]
    variants = {
        "off": H.AgentConfig(skip_mode="off"),
        "naive_forward": H.AgentConfig(skip_mode="naive_forward"),
        "adaptive": H.AgentConfig(skip_mode="adaptive", judge=judge, revisit_radius=RADIUS),
    }
    t0 = time.perf_counter()
    results = {k: H.run_suite(specs, a, WC) for k, a in variants.items()}
    elapsed = time.perf_counter() - t0 + judge_data[1] + t_train
    return results, elapsed


@pytest.fixture(scope="module")
def lossless_pair():
    specs = H.make_suite(50, 5, WC)
    off = H.run_suite(specs, H.AgentConfig(skip_mode="off", record_trajectory=True), WC)
    ll = H.run_suite(specs, H.AgentConfig(skip_mode="adaptive", judge=None, revisit_radius=0.0,
                                          record_trajectory=True), WC)
    return off, ll


# ---------------------------------------------------------------------------
# 1. sparse convolution against dense oracles


def _dense_conv_same(x, W, b):
    cout, cin, k, _ = W.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    h, w = x.shape[1:]
    out = np.zeros((cout, h, w))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("oc,chw->ohw", W[:, :, di, dj], xp[:, di:di + h, dj:dj + w])
    return out + b[:, None, None]


def _brute_strided_active(active):
    h, w = active.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = []
    for oi in range(ho):
        for oj in range(wo):
            if any(0 <= 2 * oi - 1 + di < h and 0 <= 2 * oj - 1 + dj < w and active[2 * oi - 1 + di, 2 * oj - 1 + dj]
                   for di in range(3) for dj in range(3)):
                out.append((oi, oj))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def _random_sparse(rng, max_hw=32, max_c=8):
    h, w = rng.integers(1, max_hw + 1, size=2)
    c = int(rng.integers(1, max_c + 1))
    density = rng.uniform(0.05, 1.0)
    active = rng.random((h, w)) < density
    if not active.any():
        active[rng.integers(h), rng.integers(w)] = True
    ii, jj = np.nonzero(active)
    feats = rng.normal(size=(c, len(ii)))
    return sp.from_coords(np.stack([ii, jj], 1), feats, (c, h, w)), active


def test_c01_sparse_conv_oracle(verdict):
    with verdict.section(1, "subm/strided vs oracles") as v:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(200):
            x, active = _random_sparse(rng)
            cout = int(rng.integers(1, 9))
            W = rng.normal(size=(cout, x.channels, 3, 3))
            b = rng.normal(size=cout)
            y = sp.subm_conv(x, W, b)
            ref = _dense_conv_same(sp.to_dense(x), W, b)
            assert np.array_equal(y.coords, x.coords)
            worst = max(worst, float(np.abs(y.feats - ref[:, x.coords[:, 0], x.coords[:, 1]]).max()))
            assert np.array_equal(sp.strided_active(x.coords, x.spatial), _brute_strided_active(active))
            assert np.array_equal(sp.strided_conv(x, W, b).coords, _brute_strided_active(active))
        dt = time.perf_counter() - t0
        v["detail"] = f"max abs err {worst:.2e}, {dt:.1f} s"
        assert worst <= 1e-6
        assert dt < 10.0


# ---------------------------------------------------------------------------
# 2. FLOP accounting


def _instrumented_conv(coords_in, feats, W, b, out_coords, stride, pad):
    """Scalar sparse conv that counts every multiply-accumulate it performs."""
    active = {(int(i), int(j)): n for n, (i, j) in enumerate(coords_in)}
    cout, cin, k, _ = W.shape
    macs = 0
    bias_ops = 0
    out = np.zeros((cout, len(out_coords)))
    for n, (oi, oj) in enumerate(out_coords):
        for di in range(k):
            for dj in range(k):
                src = active.get((stride * int(oi) - pad + di, stride * int(oj) - pad + dj))
                if src is None:
                    continue
                for co in range(cout):
                    for ci in range(cin):
                        out[co, n] += W[co, ci, di, dj] * feats[ci, src]
                        macs += 1
        for co in range(cout):
            out[co, n] += b[co]
            bias_ops += 1
    return out, 2 * macs + 2 * bias_ops


def test_c02_flops_match_instrumented_counter(verdict):
    with verdict.section(2, "flops_sparse == instrumented counter (50 cases)"):
        rng = np.random.default_rng(2)
        for case in range(50):
            x, _ = _random_sparse(rng, max_hw=10, max_c=3)
            cout = int(rng.integers(1, 4))
            W = rng.normal(size=(cout, x.channels, 3, 3))
            b = rng.normal(size=cout)
            rb = sp.subm_rulebook(x) if case % 2 == 0 else sp.strided_rulebook(x)
            ref, counted = _instrumented_conv(x.coords, x.feats, W, b, rb.out_coords, rb.stride, rb.padding)
            assert np.allclose(sp.apply_rulebook(rb, x.feats, W, b), ref)
            assert sp.flops_sparse(rb, x.channels, cout) == counted


def test_c02_flops_dense_hand_value(verdict):
    got = sp.flops_dense(3, 4, 8, 16, 16)
    formula = 2 * 256 * 9 * 4 * 8 + 2 * 8 * 256
    verdict.check(2, "flops_dense equals its closed form", got == formula, f"{got} vs {formula}")
    ok = verdict.check(2, "flops_dense(3x3,16x16,4->8) == 1,183,744", got == 1_183_744,
                       f"got {got}; the closed form 2*256*9*4*8 + 2*8*256 evaluates to {formula}")
    assert got == formula
    assert ok


def test_c02_sparse_branch_fraction(verdict):
    with verdict.section(2, "sparse branch <= 25% (+10 pp) of all-active at <=10% density") as v:
        spec = H.make_suite(1, 7, WC)[0]
        res = H.run_episode(H.replace(spec, max_steps=20), H.AgentConfig(), WC, snapshot_every=5)
        world = H.world_for(spec, WC)
        m = map_for_world(world)
        m.data[:] = res.snapshots[-1]
        dens = active_fraction(m)
        cfg = scar_mini(m.data.shape[0], world.n_targets)
        sparse_part = count_flops(cfg, m)["sparse"]
        full = count_flops(cfg, None, m.shape)["sparse"]
        frac = sparse_part / full
        v["detail"] = f"density {dens:.1%}, sparse branch {frac:.1%} of all-active"
        assert dens <= 0.10
        assert frac <= 0.25 + 0.10


# ---------------------------------------------------------------------------
# 3. gradients and overfitting

TINY = [
    dict(sparse_stages=[(1, 4), (1, 4, True)], dense_stages=[(1, 3)], sparse_expansion=1, dense_expansion=1,
         decode_channels=4, fuse="add"),
    dict(sparse_stages=[(1, 4), (1, 4, True)], dense_stages=[(1, 3)], sparse_expansion=2, dense_expansion=2,
         decode_channels=4, fuse="concat"),
]


def _param_class(name):
    parts = name.split(".")
    area = parts[0]
    if "compress" in parts:
        area += ".compress"
    elif area in ("decode", "aux"):
        area += ".cls" if "cls" in parts else ".conv"
    return f"{area}.{parts[-1]}"


def _margin_point(net, rng, H):
    """Parameters and input placed away from ReLU kinks and the logit clamp.

    Central differences with a step of 1e-3 straddle a kink whenever a
    pre-activation lies within 1e-3 of zero; positive weights, biases and
    inputs keep every pre-activation positive, and rescaling the classifiers
    keeps logits far inside the clamp.
    """
    for k, p in net.params.items():
        kind = k.rsplit(".", 1)[-1]
        if kind == "weight":
            fan = int(np.prod(p.shape[1:]))
            p[...] = rng.normal(0, 1, p.shape) if ".cls." in k else np.abs(rng.normal(0, 1, p.shape)) / fan
        elif kind == "bias":
            p[...] = rng.uniform(0.1, 0.5, p.shape)
        elif kind == "scale":
            p[...] = rng.uniform(0.5, 1.5, p.shape)
        else:
            p[...] = rng.uniform(0.5, 1.0, p.shape)
    c = net.config.in_channels
    m = np.zeros((c, H, H))
    mask = rng.random((H, H)) < 0.3
    m[:, mask] = rng.random((c, int(mask.sum())))
    r = forward_pass(net, m, Tape(record=False), with_aux=True)
    zmax = np.abs(r.logits.value).max()
    pa = r.aux_prob.value
    za = np.abs(np.log(pa / (1 - pa))).max()
    for k in ("decode.cls.weight", "decode.cls.bias"):
        net.params[k] /= zmax
    for k in ("aux.cls.weight", "aux.cls.bias"):
        net.params[k] /= za
    M = (rng.random((net.config.n_classes, H, H)) < 0.2).astype(float)
    e = (rng.random((H, H)) < 0.5).astype(float)
    return Sample(m, M, e)


def test_c03_gradients_and_overfit(verdict):
    t0 = time.perf_counter()
    eps = 1e-3
    worst = {}
    for i, kw in enumerate(TINY):
        net = init_network(ScarConfig(5, 2, **kw), 1)
        sample = _margin_point(net, np.random.default_rng(i), 8)
        _, grads = loss_and_grads(net, sample)
        fd_all, an_all = {}, {}
        for k, p in net.params.items():
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                lp, _ = loss_and_grads(net, sample)
                p[idx] = old - eps
                lm, _ = loss_and_grads(net, sample)
                p[idx] = old
                fd[idx] = (lp - lm) / (2 * eps)
            cls = _param_class(k)
            fd_all.setdefault(cls, []).append(fd.ravel())
            an_all.setdefault(cls, []).append(grads[k].ravel())
        for cls in fd_all:
            a, b = np.concatenate(fd_all[cls]), np.concatenate(an_all[cls])
            rel = np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
            worst[cls] = max(worst.get(cls, 0.0), rel)
    top = max(worst, key=worst.get)
    ok_fd = verdict.check(3, f"finite differences ({len(worst)} parameter classes)", max(worst.values()) <= 1e-4,
                          f"worst {top} rel err {worst[top]:.1e}")

    cfg = ScarConfig(5, 2, sparse_stages=[(1, 16), (1, 16)], dense_stages=[(1, 16)], decode_channels=16)
    net = init_network(cfg, 0)
    rng = np.random.default_rng(0)
    m = np.zeros((5, 16, 16))
    mask = rng.random((16, 16)) < 0.3
    m[:, mask] = rng.random((5, int(mask.sum())))
    M = (rng.random((2, 16, 16)) < 0.1).astype(float)
    e = (rng.random((16, 16)) < 0.3).astype(float)
    curve = train(net, [Sample(m, M, e)], 200, 1, 1e-2, 0)
    hit = next((i for i, x in enumerate(curve) if x < 0.01), None)
    ok_fit = verdict.check(3, "single-sample overfit < 0.01 in 200 steps", hit is not None,
                           f"first below 0.01 at step {hit}, final {curve[-1]:.4f}")
    dt = time.perf_counter() - t0
    ok_t = verdict.check(3, "runtime < 60 s", dt < 60.0, f"{dt:.1f} s")
    assert ok_fd and ok_fit and ok_t


# ---------------------------------------------------------------------------
# 4. FMM


def test_c04_fmm(verdict):
    with verdict.section(4, "radial error <= 2% beyond 5 cells") as v:
        n, c = 81, 40
        d = pl.fmm(np.ones((n, n), bool), [(c, c)], 1.0).d
        ii, jj = np.mgrid[0:n, 0:n]
        r = np.hypot(ii - c, jj - c)
        far = r > 5
        err = float((np.abs(d[far] - r[far]) / r[far]).max())
        v["detail"] = f"max rel err {err:.2%}"
        assert err <= 0.02
    with verdict.section(4, "Euclid <= FMM <= Dijkstra-8 on 20 maps; unreachable = inf") as v:
        rng = np.random.default_rng(4)
        for _ in range(20):
            free = np.ones((48, 48), bool)
            for _ in range(int(rng.integers(3, 9))):
                i, j = rng.integers(0, 44, size=2)
                hh, ww = rng.integers(1, 12, size=2)
                free[i:i + hh, j:j + ww] = False
            free[rng.random(free.shape) < 0.05] = False
            cand = np.argwhere(free)
            s = cand[rng.integers(len(cand))]
            f = pl.fmm(free, [tuple(s)], 0.05).d
            dj = dijkstra_field(free, [tuple(s)], 0.05)
            eu = 0.05 * np.hypot(*(np.mgrid[0:48, 0:48] - s[:, None, None]))
            fin = np.isfinite(dj)
            assert np.array_equal(np.isfinite(f), fin)
            assert (eu[fin] <= f[fin] + 1e-9).all()
            assert (f[fin] <= dj[fin] + 1e-9).all()
            assert np.isinf(f[~free]).all()
        sealed = np.ones((20, 20), bool)
        sealed[5:12, 5:12] = False
        sealed[7:10, 7:10] = True
        f = pl.fmm(sealed, [(0, 0)], 1.0).d
        assert np.isinf(f[8, 8])


# ---------------------------------------------------------------------------
# 5. lossless invariance


def _replay_view(r):
    d = r.record()
    d.pop("skip_counts")
    d["trajectory"] = [t[:4] for t in d["trajectory"]]
    return json.dumps(d, sort_keys=True)


def test_c05_lossless_invariance(verdict, lossless_pair):
    off, ll = lossless_pair
    same = sum(_replay_view(a) == _replay_view(b) for a, b in zip(off, ll))
    n_lossless = sum(r.skip_counts["LOSSLESS"] for r in ll)
    other = sum(r.skip_counts["AGGR_REVISIT"] + r.skip_counts["SKIP_FORWARD"] for r in ll)
    ma, mb = H.suite_metrics(off).record(), H.suite_metrics(ll).record()
    ma.pop("skip_ratio"), mb.pop("skip_ratio")
    ok1 = verdict.check(5, "trajectory, final map and metrics identical", same == len(off) and ma == mb,
                        f"{same}/{len(off)} episodes identical")
    ok2 = verdict.check(5, "LOSSLESS count > 0", n_lossless > 0 and other == 0, f"{n_lossless} lossless skips")
    assert ok1 and ok2


# ---------------------------------------------------------------------------
# 6. adaptive-skip tradeoff


def test_c06_adaptive_tradeoff(verdict, arms):
    results, elapsed = arms
    rows = {r["variant"]: r for r in H.compare(results, "off")}
    ad, nv = rows["adaptive"], rows["naive_forward"]
    checks = [
        verdict.check(6, "adaptive relative SPL >= 0.98", ad["rel_SPL"] >= 0.98, f"{ad['rel_SPL']:.4f}"),
        verdict.check(6, "adaptive skip ratio >= 0.20", ad["skip_ratio"] >= 0.20, f"{ad['skip_ratio']:.4f}"),
        verdict.check(6, "naive skips more", nv["skip_ratio"] > ad["skip_ratio"],
                      f"{nv['skip_ratio']:.4f} vs {ad['skip_ratio']:.4f}"),
        verdict.check(6, "naive has lower relative SPL", nv["rel_SPL"] < ad["rel_SPL"],
                      f"{nv['rel_SPL']:.4f} vs {ad['rel_SPL']:.4f}"),
        verdict.check(6, "runtime < 15 min", elapsed < 900.0, f"{elapsed:.0f} s"),
    ]
    assert all(checks)


# ---------------------------------------------------------------------------
# 7. judge quality and overhead


def test_c07_judge_quality(verdict, judges):
    judge, _ = judges[THRESHOLD]
    specs = H.make_suite(40, 3, WC)
    held = harvest([r.harvest for r in H.run_suite(specs, H.AgentConfig(), WC, harvest=True)])
    ev = evaluate_judge(judge, held)
    bal, maj = ev["balanced_accuracy"], ev["majority_accuracy"]
    checks = [
        verdict.check(7, "balanced accuracy > 0.5", bal > 0.5, f"{bal:.3f} on {ev['rows']} held-out rows"),
        verdict.check(7, "balanced accuracy > majority-class accuracy", bal > maj,
                      f"{bal:.4f} vs {maj:.4f}; plain accuracy {ev['accuracy']:.4f}; "
                      f"skip fraction {ev['skip_fraction']:.3f}"),
        verdict.check(7, "target >= 0.70", bal >= 0.70, f"{bal:.3f}"),
    ]

    sensor = SensorConfig()
    world = H.world_for(specs[0], WC)
    rng = np.random.default_rng(7)
    cand = world.spawn_candidates[rng.choice(len(world.spawn_candidates), 200)]
    scans = [observe(world, Pose(*world.cell_center(i, j), int(rng.integers(12)) * 30), sensor) for i, j in cand]
    m = map_for_world(world)
    t0 = time.perf_counter()
    for (d, s), (i, j) in zip(scans, cand):
        pose = Pose(*world.cell_center(i, j), 0)
        integrate(m, scan_to_local(d, s, sensor, m.resolution, world.n_categories), pose)
    t_map = (time.perf_counter() - t0) / len(scans)
    judge_predict(judge, depth_histogram(scans[0][0]), depth_histogram(scans[1][0]))
    t0 = time.perf_counter()
    for a, b in itertools.pairwise(scans):
        judge_predict(judge, depth_histogram(a[0], judge.n_bins, judge.max_range),
                      depth_histogram(b[0], judge.n_bins, judge.max_range))
    t_judge = (time.perf_counter() - t0) / (len(scans) - 1)
    checks.append(verdict.check(7, "judge time <= 5% of mapping time", t_judge <= 0.05 * t_map,
                                f"{t_judge * 1e6:.0f} us vs {t_map * 1e3:.2f} ms ({t_judge / t_map:.1%})"))
    assert all(checks)


# ---------------------------------------------------------------------------
# 8. metrics


def _result(success, p, l, d_final=None, d0=None):
    d0 = l if d0 is None else d0
    return H.EpisodeResult(0, success, 1, p, l, d0, d0 if d_final is None else d_final, {"NONE": 1, "LOSSLESS": 0,
                           "AGGR_REVISIT": 0, "SKIP_FORWARD": 0}, 0, 0, 0, 0.0, success)


def test_c08_metrics(verdict, arms, lossless_pair):
    with verdict.section(8, "SPL/SoftSPL unit cases"):
        assert H.spl([_result(True, 3.0, 3.0)]) == 1.0
        assert H.spl([_result(True, 6.0, 3.0)]) == 0.5
        assert H.spl([_result(False, 3.0, 3.0)]) == 0.0
        assert H.spl([_result(True, 6.0, 3.0), _result(False, 1.0, 3.0)]) == 0.25
        assert H.soft_spl([_result(False, 0.0, 3.0, d_final=3.0)]) == 0.0
    with verdict.section(8, "SPL <= SR on every suite") as v:
        suites = list(arms[0].values()) + list(lossless_pair)
        for res in suites:
            m = H.suite_metrics(res)
            assert m.SPL <= m.SR + 1e-12
            assert 0.0 <= m.SPL <= 1.0 and 0.0 <= m.SoftSPL <= 1.0
        v["detail"] = f"{len(suites)} suites"


# ---------------------------------------------------------------------------
# 9. goal selection


def _brute_goal(z, d, lam):
    best, best_key = None, None
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            if not np.isfinite(d[i, j]):
                continue
            key = (math.exp(-d[i, j] / lam) * z[i, j], -d[i, j], -i, -j)
            if best_key is None or key > best_key:
                best, best_key = (i, j), key
    return best


def test_c09_goal_selection(verdict):
    rng = np.random.default_rng(9)
    with verdict.section(9, "scaling invariance (1000 trials)"):
        for _ in range(1000):
            z = rng.random((12, 12))
            d = rng.random((12, 12)) * 10
            d[rng.random((12, 12)) < 0.2] = np.inf
            d[0, 0] = 0.0
            c = 10 ** rng.uniform(-3, 3)
            assert pl.select_goal(z, d) == pl.select_goal(z * c, d)
    with verdict.section(9, "lambda -> inf equals argmax"):
        for _ in range(200):
            z = rng.random((10, 10))
            d = rng.random((10, 10)) * 10
            d[rng.random((10, 10)) < 0.2] = np.inf
            d[3, 3] = 0.0
            zr = np.where(np.isfinite(d), z, -1)
            assert pl.select_goal(z, d, pl.PlannerConfig(lam=1e9)) == np.unravel_index(zr.argmax(), z.shape)
    with verdict.section(9, "4x4 brute-force agreement"):
        for trial in range(500):
            z = rng.integers(0, 4, (4, 4)) / 3.0 if trial % 2 else rng.random((4, 4))
            d = rng.integers(0, 5, (4, 4)).astype(float)
            d[rng.random((4, 4)) < 0.2] = np.inf
            d[0, 0] = 0.0
            lam = float(rng.choice([0.5, 2.0, 8.0]))
            assert pl.select_goal(z, d, pl.PlannerConfig(lam=lam)) == _brute_goal(z, d, lam)


# ---------------------------------------------------------------------------
# 10. threshold / radius sweep


def test_c10_sweep_monotone(verdict, judges):
    specs = H.make_suite(40, 4, WC)
    grid = {}
    for t in (10.0, 15.0, 25.0):
        for r in (0.0, 0.05, 0.1):
            res = H.run_suite(specs, H.AgentConfig(skip_mode="adaptive", judge=judges[t][0], revisit_radius=r), WC)
            grid[t, r] = H.suite_metrics(res).skip_ratio
    in_t = all(grid[10.0, r] <= grid[15.0, r] <= grid[25.0, r] for r in (0.0, 0.05, 0.1))
    in_r = all(grid[t, 0.0] <= grid[t, 0.05] <= grid[t, 0.1] for t in (10.0, 15.0, 25.0))
    table = " ".join(f"T{t:g}/r{r:g}={v:.3f}" for (t, r), v in grid.items())
    ok1 = verdict.check(10, "nondecreasing in Threshold", in_t, table)
    ok2 = verdict.check(10, "nondecreasing in r", in_r)
    assert ok1 and ok2


# ---------------------------------------------------------------------------
# 11. architecture search


def _brute_pareto(cands):
    keep = []
    for a in cands:
        if not any(b.loss <= a.loss and b.memory <= a.memory and (b.loss < a.loss or b.memory < a.memory)
                   for b in cands):
            keep.append(a.index)
    return sorted(keep)


def test_c11_arch_search(verdict):
    with verdict.section(11, "Pareto set equals brute force (12 configs)") as v:
        t0 = time.perf_counter()
        cfg = RunConfig.model_validate({"train": {"episodes": 3, "snapshot_every": 10}})
        samples = cli.training_samples(cfg, crop=cfg.search.crop)
        front, everything = arch_search(samples, 12, seed=0, steps=cfg.search.steps, batch_size=cfg.search.batch_size)
        dt = time.perf_counter() - t0
        v["detail"] = f"{len(front)} of {len(everything)} on the front, {dt:.0f} s"
        assert len(everything) == 12
        assert sorted(c.index for c in front) == _brute_pareto(everything)
        assert sorted(c.index for c in pareto_front(everything[::-1])) == _brute_pareto(everything)
        assert dt < 600.0


# ---------------------------------------------------------------------------
# 12. CLI determinism

SMALL = {
    "suite": {"episodes": 4, "seed": 0},
    "harvest": {"episodes": 10, "seed": 1},
    "train": {"episodes": 1, "steps": 2, "batch_size": 1},
    "search": {"budget": 2, "steps": 2, "batch_size": 1, "crop": 32},
    "profile": {"thresholds": [10, 25], "radii": [0, 0.1]},
}


def _cli_round(cfg_path: Path, force: bool):
    extra = ["--force"] if force else []
    for cmd in ("gen-worlds", "harvest", "train-judge", "run", "profile", "train-scar", "arch-search"):
        assert cli.main([cmd, "--config", str(cfg_path)] + extra) == 0, cmd


def _snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c12_cli_determinism(verdict, tmp_path, monkeypatch):
    with verdict.section(12, "CLI reruns byte-identical") as v:
        out = tmp_path / "out"
        monkeypatch.setenv(cli.OUTPUT_ENV, str(out))
        cfg = json.loads(json.dumps(SMALL))
        cfg["skip"] = {"judge": str(out / "judge.json")}
        cfg["profile"]["dataset"] = str(out / "harvest.csv")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        _cli_round(path, force=False)
        first = _snapshot(out)
        _cli_round(path, force=True)
        second = _snapshot(out)
        assert sorted(first) == sorted(second)
        differ = [k for k in first if first[k] != second[k]]
        v["detail"] = f"{len(first)} files compared"
        assert not differ, differ
