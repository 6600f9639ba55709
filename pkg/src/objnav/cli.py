"""``objnav`` command-line entry point.

Every command reads one JSON run configuration, writes its outputs (plus the
resolved configuration) into the output directory and refuses to overwrite
existing files unless ``--force`` is given.

Exit codes: 0 success, 2 configuration error, 3 infeasible experiment.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import harness as H
from .config import RunConfig, canonical_json, load_config, provenance
from .mapping import EXPLORED, SemanticMap, map_for_world
from .scar import Sample, ground_truth, init_network, train
from .scar.network import load_checkpoint, save_checkpoint
from .scar.search import SearchSpace, arch_search
from .skip import (
    evaluate_judge,
    harvest,
    judge_digest,
    load_dataset,
    load_judge,
    save_dataset,
    save_judge,
    train_judge,
)
from .world import floorplan_to_dict

log = logging.getLogger("objnav")

OUTPUT_ENV = "OBJNAV_OUTPUT_DIR"


class ConfigError(Exception):
    """Bad or inconsistent configuration (exit code 2)."""


class InfeasibleError(Exception):
    """The configured experiment cannot be carried out (exit code 3)."""


# ---------------------------------------------------------------------------
# output plumbing


class Outputs:
    """Collects files in memory and writes them only after the command succeeds."""

    def __init__(self, cfg: RunConfig, command: str, force: bool):
        self.dir = Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)
        self.cfg = cfg
        self.command = command
        self.force = force
        self.files: dict[str, str] = {}
        self.add(f"{command}.config.json", json.dumps(
            {"provenance": provenance(cfg), "config": json.loads(canonical_json(cfg))}, indent=2, sort_keys=True))

    def path(self, name: str) -> Path:
        return self.dir / name

    def add(self, name: str, text: str) -> None:
        self.files[name] = text if text.endswith("\n") else text + "\n"

    def add_csv(self, name: str, rows: list[dict], columns: list[str] | None = None) -> None:
        buf = io.StringIO()
        p = provenance(self.cfg)
        buf.write(f"# {p['tool']} {p['version']} config={p['config_hash']}\n")
        if rows:
            cols = columns or list(rows[0])
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(r.get(k)) for k in cols})
        self.add(name, buf.getvalue())

    def check(self, names) -> None:
        if self.force:
            return
        clash = [n for n in names if self.path(n).exists()]
        if clash:
            raise ConfigError(f"refusing to overwrite {', '.join(str(self.path(n)) for n in clash)} (use --force)")

    def commit(self) -> list[Path]:
        self.check(list(self.files))
        self.dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.files.items():
            p = self.path(name)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
            written.append(p)
        return written


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list, tuple)):
        return json.dumps(v, sort_keys=True)
    return v


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# ---------------------------------------------------------------------------
# shared building blocks


def _world_cfg(cfg: RunConfig):
    return cfg.world.build()


def _suite(cfg: RunConfig, section=None):
    s = section or cfg.suite
    return H.make_suite(s.episodes, s.seed, _world_cfg(cfg), s.max_steps, s.success_radius, s.min_distance)


def _network(cfg: RunConfig):
    pred = cfg.predictor
    if pred.kind == "oracle":
        return None
    if pred.checkpoint is None:
        raise ConfigError(f"predictor {pred.kind!r} needs predictor.checkpoint")
    net = load_checkpoint(pred.checkpoint)
    want = pred.scar_config(4 + cfg.world.n_categories, cfg.world.n_targets)
    if net.config != want:
        raise ConfigError("checkpoint architecture does not match predictor.network")
    return net


def _judge(cfg: RunConfig, mode: str):
    if mode != "adaptive":
        return None
    if cfg.skip.judge is None:
        raise ConfigError("adaptive skipping needs skip.judge (a judge JSON from train-judge)")
    return load_judge(cfg.skip.judge)


def _agent(cfg: RunConfig, mode: str | None = None, judge=None, radius: float | None = None, network=None):
    mode = mode or cfg.skip.mode
    return H.AgentConfig(
        skip_mode=mode,
        predictor=cfg.predictor.kind,
        planner=cfg.planner.build(),
        judge=judge,
        revisit_radius=cfg.skip.revisit_radius if radius is None else radius,
        network=network,
        map_size=cfg.map_size,
        goal_interval=cfg.goal_interval,
        sensor=cfg.sensor.build(),
        record_trajectory=cfg.record_trajectory,
    )


def _tag(records: list[dict], cfg: RunConfig) -> list[dict]:
    p = provenance(cfg)
    return [{**r, "version": p["version"], "config_hash": p["config_hash"]} for r in records]


def _suite_row(name: str, results) -> dict:
    return {"variant": name, **H.suite_metrics(results).record()}


def training_samples(cfg: RunConfig, crop: int | None = None) -> list[Sample]:
    """Map snapshots from skip-free oracle runs, paired with their ground truth."""
    ts = cfg.train
    wc = _world_cfg(cfg)
    specs = H.make_suite(ts.episodes, ts.seed, wc, cfg.suite.max_steps, cfg.suite.success_radius,
                         cfg.suite.min_distance)
    agent = _agent(cfg, mode="off")
    agent = H.replace(agent, predictor="oracle", network=None)
    samples = []
    for spec, res in zip(specs, H.run_suite(specs, agent, wc, snapshot_every=ts.snapshot_every)):
        world = H.world_for(spec, wc)
        ref = map_for_world(world, cfg.map_size)
        for data in res.snapshots:
            m = SemanticMap(data, ref.resolution, ref.origin)
            M = ground_truth(world, m)
            e = (data[EXPLORED] > 0).astype(np.float64)
            x = data.astype(np.float64)
            if crop:
                x, M, e = _crop(x, M, e, crop)
            samples.append(Sample(x, M.astype(np.float64), e))
    if not samples:
        raise InfeasibleError("no training snapshots collected")
    return samples


def _crop(x, M, e, size):
    h, w = e.shape
    size = min(size, h, w)
    ii, jj = np.nonzero(e)
    ci, cj = (int(ii.mean()), int(jj.mean())) if len(ii) else (h // 2, w // 2)
    i0 = min(max(ci - size // 2, 0), h - size)
    j0 = min(max(cj - size // 2, 0), w - size)
    s = (slice(i0, i0 + size), slice(j0, j0 + size))
    return x[(slice(None),) + s], M[(slice(None),) + s], e[s]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_worlds(cfg: RunConfig, out: Outputs, args) -> None:
    specs = _suite(cfg)
    wc = _world_cfg(cfg)
    seeds = sorted({s.world_seed for s in specs})
    for s in seeds:
        world = H.world_for(next(x for x in specs if x.world_seed == s), wc)
        out.add(f"worlds/world_{s}.json", json.dumps(floorplan_to_dict(world), sort_keys=True))
    recs = [{"episode_id": s.episode_id, "world_seed": s.world_seed, "start": [s.start.x, s.start.y, s.start.theta],
             "target": s.target, "max_steps": s.max_steps, "success_radius": s.success_radius} for s in specs]
    out.add("suite.jsonl", _jsonl(_tag(recs, cfg)))
    out.commit()
    print(f"wrote {len(seeds)} worlds and {len(specs)} episode specs to {out.dir}")


def cmd_harvest(cfg: RunConfig, out: Outputs, args) -> None:
    specs = _suite(cfg, cfg.harvest)
    res = H.run_suite(specs, _agent(cfg, mode="off", network=_network(cfg)), _world_cfg(cfg), args.jobs, harvest=True)
    ds = harvest([r.harvest for r in res], cfg.skip.n_bins, cfg.sensor.max_range)
    out.check(["harvest.csv"])
    out.commit()
    p = provenance(cfg)
    save_dataset(ds, out.path("harvest.csv"), header=f"{p['tool']} {p['version']} config={p['config_hash']}")
    print(f"harvested {len(ds)} forward steps into {out.path('harvest.csv')}")


def cmd_train_judge(cfg: RunConfig, out: Outputs, args) -> None:
    path = args.dataset or str(out.path("harvest.csv"))
    if not Path(path).exists():
        raise ConfigError(f"dataset {path} not found (run harvest first or pass --dataset)")
    ds = load_dataset(path)
    n_hold = int(round(args.holdout * len(ds)))
    train_set, hold = ds.subset(slice(0, len(ds) - n_hold)), ds.subset(slice(len(ds) - n_hold, len(ds)))
    try:
        model = train_judge(train_set, cfg.skip.forest_params(), cfg.sensor.max_range)
    except ValueError as e:
        raise InfeasibleError(str(e)) from e
    report = {"train": evaluate_judge(model, train_set), "digest": judge_digest(model), **provenance(cfg)}
    if len(hold):
        report["holdout"] = evaluate_judge(model, hold)
    out.check(["judge.json", "judge_eval.json"])
    out.commit()
    save_judge(model, out.path("judge.json"), extra={"provenance": provenance(cfg)})
    out.path("judge_eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"judge {report['digest']} trained on {len(train_set)} rows -> {out.path('judge.json')}")


def cmd_train_scar(cfg: RunConfig, out: Outputs, args) -> None:
    ts = cfg.train
    samples = training_samples(cfg)
    net = init_network(cfg.predictor.scar_config(samples[0].m.shape[0], samples[0].M.shape[0]), ts.seed)
    curve = train(net, samples, ts.steps, ts.batch_size, ts.lr, ts.seed, ts.aux_weight)
    win = min(ts.smoothing_window, len(curve))
    smooth = np.convolve(curve, np.ones(win) / win, mode="full")[:len(curve)]
    smooth[:win] = np.cumsum(curve[:win]) / np.arange(1, win + 1)
    rows = [{"step": i, "loss": float(l), "smoothed": float(s)} for i, (l, s) in enumerate(zip(curve, smooth))]
    out.add_csv("scar_loss.csv", rows)
    out.check(["scar.json", "scar.bin"])
    out.commit()
    save_checkpoint(net, out.path("scar"), extra={"provenance": provenance(cfg), "samples": len(samples)})
    print(f"trained {net.n_params} parameters for {ts.steps} steps on {len(samples)} samples; "
          f"final loss {curve[-1]:.4f}")


def cmd_run(cfg: RunConfig, out: Outputs, args) -> None:
    agent = _agent(cfg, judge=_judge(cfg, cfg.skip.mode), network=_network(cfg))
    res = H.run_suite(_suite(cfg), agent, _world_cfg(cfg), args.jobs)
    out.add("episodes.jsonl", _jsonl(_tag([r.record() for r in res], cfg)))
    out.add_csv("suite.csv", [_suite_row(cfg.skip.mode, res)])
    if args.timings:
        out.add_csv("run_timings.csv", [{"episode_id": r.episode_id, **r.stage_timings} for r in res])
    out.commit()
    m = H.suite_metrics(res)
    print(f"{m.episodes} episodes: SR {m.SR:.3f} SPL {m.SPL:.3f} SoftSPL {m.SoftSPL:.3f} skip {m.skip_ratio:.3f}")


def cmd_profile(cfg: RunConfig, out: Outputs, args) -> None:
    pc = cfg.profile
    if pc.baseline not in pc.variants:
        raise ConfigError("profile.baseline must be one of profile.variants")
    network = _network(cfg)
    specs = _suite(cfg)
    wc = _world_cfg(cfg)
    judges = {}

    def judge_for(threshold):
        if threshold not in judges:
            if pc.dataset is None:
                if threshold != cfg.skip.threshold:
                    raise ConfigError("threshold sweeps need profile.dataset to train one judge per threshold")
                judges[threshold] = _judge(cfg, "adaptive")
            else:
                try:
                    judges[threshold] = train_judge(load_dataset(pc.dataset), cfg.skip.forest_params(threshold),
                                                    cfg.sensor.max_range)
                except ValueError as e:
                    raise InfeasibleError(str(e)) from e
        return judges[threshold]

    agents = {}
    for v in pc.variants:
        judge = judge_for(cfg.skip.threshold) if v == "adaptive" else None
        agents[v] = _agent(cfg, mode=v, judge=judge, network=network)
    if len(agents) < 2:
        raise ConfigError("profile needs at least two variants")
    rows, timing, results = H.profile(specs, agents, wc, pc.baseline, args.jobs)
    out.add_csv("profile.csv", rows)
    if args.timings:
        out.add_csv("profile_timings.csv", timing)

    if pc.thresholds or pc.radii:
        thresholds = pc.thresholds or (cfg.skip.threshold,)
        radii = pc.radii or (cfg.skip.revisit_radius,)
        base = H.suite_metrics(results[pc.baseline])
        grid = []
        for t in thresholds:
            for r in radii:
                res = H.run_suite(specs, _agent(cfg, "adaptive", judge_for(t), r, network), wc, args.jobs)
                mtr = H.suite_metrics(res)
                grid.append({"threshold": float(t), "radius": float(r), **mtr.record(),
                             "rel_SPL": H._ratio(mtr.SPL, base.SPL)})
        out.add_csv("sweep.csv", grid)
    out.commit()
    for r in rows:
        print(f"{r['variant']:>14}: SPL {r['SPL']:.4f} (rel {r['rel_SPL']:.4f}) skip {r['skip_ratio']:.4f}")


def cmd_arch_search(cfg: RunConfig, out: Outputs, args) -> None:
    sc = cfg.search
    budget = args.budget or sc.budget
    samples = training_samples(cfg, crop=sc.crop)
    pareto, everything = arch_search(samples, budget, sc.seed, sc.steps, sc.batch_size, SearchSpace(), sc.lr,
                                     (cfg.map_size, cfg.map_size))
    on_front = {c.index for c in pareto}

    def row(c):
        return {"index": c.index, "loss": c.loss, "memory": c.memory, "pareto": int(c.index in on_front),
                "config": c.config.to_dict()}

    out.add_csv("search_all.csv", [row(c) for c in everything])
    out.add_csv("pareto.csv", [row(c) for c in pareto])
    out.commit()
    print(f"{len(pareto)} of {len(everything)} configs are Pareto-optimal")


COMMANDS = {
    "gen-worlds": (cmd_gen_worlds, "generate floorplans and episode specs for the suite"),
    "harvest": (cmd_harvest, "log skip-free runs into a judge training set"),
    "train-judge": (cmd_train_judge, "fit the forwarding-skip judge"),
    "train-scar": (cmd_train_scar, "train the target-probability predictor"),
    "run": (cmd_run, "run the episode suite"),
    "profile": (cmd_profile, "compare skip variants and sweep threshold/radius"),
    "arch-search": (cmd_arch_search, "random architecture search with Pareto filtering"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objnav", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {provenance(RunConfig())['version']}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--jobs", type=int, default=1, help="parallel episode workers")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train-judge":
            sp.add_argument("--dataset", help="harvest CSV (default: <output>/harvest.csv)")
            sp.add_argument("--holdout", type=float, default=0.2, help="trailing fraction kept for evaluation")
        if name in ("run", "profile"):
            sp.add_argument("--timings", action="store_true", help="also write wall-clock timing CSVs")
        if name == "arch-search":
            sp.add_argument("--budget", type=int, help="number of configs (overrides search.budget)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if getattr(args, "holdout", 0.0) is not None and not 0.0 <= getattr(args, "holdout", 0.0) < 1.0:
            raise ConfigError("--holdout must lie in [0, 1)")
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {e.filename}") from e
        except ValidationError as e:
            raise ConfigError(f"invalid config:\n{e}") from e
        fn, _ = COMMANDS[args.command]
        out = Outputs(cfg, args.command, args.force)
        t0 = time.perf_counter()
        try:
            fn(cfg, out, args)
        except FileNotFoundError as e:
            raise ConfigError(f"input file not found: {e.filename}") from e
        except (ValueError, FloatingPointError) as e:
            raise InfeasibleError(str(e)) from e
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    except ConfigError as e:
        print(f"objnav: config error: {e}", file=sys.stderr)
        return 2
    except InfeasibleError as e:
        print(f"objnav: infeasible: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
