"""Batch command-line pipeline.

Every command reads files, writes files plus a ``manifest.json`` into
``--out``, and is deterministic given its config and seed. Per-rally work
can be spread over processes with ``--jobs``.

Trajectories are ``<name>.traj.jsonl`` (one sample per line). Stage
outputs are JSONL files with one record per rally, keyed by ``name``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import camera as camlib
from .ballistics import BallState, integrate_flight
from .config import RunConfig, load_config
from .curation import (CurationVerdict, curate, emit_statistics, fit_segments,
                       rejection_table)
from .errors import ConfigError, TTBallError
from .racket import StrokeProblem, run_trial, solve_stroke, summarize_trials
from .rallygen import FailedPoint, build_pools, generate_rally
from .segmentation import RallyAnnotation, annotate_rally
from .trajectory import Trajectory, read_jsonl, write_json, write_jsonl
from .trajectory_fit import FitResult, ode_fit

TRAJ_SUFFIX = ".traj.jsonl"
GT_SUFFIX = ".gt.jsonl"


class CommandError(Exception):
    """A failure with its file (and line) context, reported by main()."""


# ---------------------------------------------------------------------------
# file helpers


def rally_name(path: Path) -> str:
    return path.name[: -len(TRAJ_SUFFIX)]


def trajectory_files(path) -> list:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*" + TRAJ_SUFFIX))
        if not files:
            raise CommandError(f"{path}: no *{TRAJ_SUFFIX} files")
        return files
    if not path.exists():
        raise CommandError(f"{path}: no such file or directory")
    return [path]


def load_trajectory(path: Path) -> Trajectory:
    try:
        return Trajectory.from_records(read_jsonl(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"{path}: {exc}") from exc


def load_keyed(path) -> dict:
    """Records of a stage output file indexed by rally name."""
    out = {}
    for lineno, rec in enumerate(read_jsonl(path), 1):
        if "name" not in rec:
            raise CommandError(f"{path}:{lineno}: record has no 'name'")
        out[rec["name"]] = rec
    return out


def load_sidecar(traj_path: Path):
    gt = traj_path.with_name(rally_name(traj_path) + GT_SUFFIX)
    if not gt.exists():
        return None
    recs = read_jsonl(gt)
    return recs[0] if recs else None


class _InContext:
    """Wrap a per-file worker so failures name the file they came from."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, task):
        try:
            return self.fn(task)
        except CommandError:
            raise
        except (TTBallError, ValueError, KeyError, TypeError) as exc:
            raise CommandError(f"{task[0]}: {type(exc).__name__}: {exc}") from exc


def run_map(fn, items, jobs: int):
    fn = _InContext(fn)
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


class Run:
    """Collects outputs and tallies for a command's manifest."""

    def __init__(self, command: str, cfg: RunConfig, args):
        self.command = command
        self.cfg = cfg
        self.out = Path(args.out)
        self.seed = getattr(args, "seed", None)
        self.inputs = []
        self.outputs = []
        self.counts = {}
        self.rejections = {}
        self.extra = {}
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        return self.out / name

    def jsonl(self, name: str, records) -> Path:
        p = self.path(name)
        write_jsonl(p, records)
        self.outputs.append(name)
        return p

    def json(self, name: str, obj, sort_keys: bool = True) -> Path:
        p = self.path(name)
        write_json(p, obj, sort_keys)
        self.outputs.append(name)
        return p

    def finish(self) -> dict:
        manifest = {
            "command": self.command,
            "config_fingerprint": self.cfg.fingerprint(),
            "seed": self.seed,
            "inputs": [str(p) for p in self.inputs],
            "outputs": sorted(self.outputs),
            "counts": self.counts,
            "rejections": self.rejections,
            "wall_time_s": time.perf_counter() - self.t0,
        }
        manifest.update(self.extra)
        write_json(self.path("manifest.json"), manifest)
        return manifest


# ---------------------------------------------------------------------------
# simulate


def _random_start(rng: np.random.Generator, cfg: RunConfig) -> BallState:
    """A shot from behind a random end line towards the other half."""
    w = cfg.world
    side = -1.0 if rng.uniform() < 0.5 else 1.0
    p = [side * (w.half_length + rng.uniform(0.0, 1.0)),
         rng.uniform(-w.half_width, w.half_width),
         w.table_height + rng.uniform(0.1, 0.5)]
    speed = rng.uniform(3.0, 10.0)
    elev = np.radians(rng.uniform(-5.0, 20.0))
    head = np.radians(rng.uniform(-10.0, 10.0))
    v = speed * np.array([-side * np.cos(elev) * np.cos(head), np.cos(elev) * np.sin(head),
                          np.sin(elev)])
    omega = rng.uniform(-1.0, 1.0, 3) * 2 * np.pi * 40.0
    return BallState(0.0, p, v, omega)


def cmd_simulate(args, cfg: RunConfig) -> dict:
    run = Run("simulate", cfg, args)
    g = cfg.gen
    if args.state is not None:
        starts = [BallState.from_record(json.loads(args.state))]
    else:
        starts = [_random_start(np.random.default_rng([args.seed, i]), cfg)
                  for i in range(args.n)]
    total_bounces = 0
    for i, s in enumerate(starts):
        traj, bounces = integrate_flight(s, g.simulate_duration, g.simulate_dt, cfg.world,
                                         cfg.aero, cfg.table)
        total_bounces += len(bounces)
        run.jsonl(f"flight_{i:05d}{TRAJ_SUFFIX}", traj.to_records())
    run.counts = {"flights": len(starts), "bounces": total_bounces}
    return run.finish()


# ---------------------------------------------------------------------------
# gen


def _player_centroids(rng: np.random.Generator, world) -> list:
    """Ground-plane centroids of two players standing behind opposite ends."""
    out = []
    for side in (-1.0, 1.0):
        x = side * (world.half_length + rng.uniform(0.5, 1.5))
        y = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.4)
        out.append([float(x), float(y)])
    return out


def _gen_one(task):
    seed, pools, cfg = task
    g = cfg.gen
    res = generate_rally(seed, pools, cfg.world, cfg.aero, cfg.table, g.max_segments,
                         g.max_attempts)
    if isinstance(res, FailedPoint):
        return seed, None, None, res.stage
    traj = res.sampled(g.sample_rate_hz)
    cam = camlib.broadcast_camera(np.random.default_rng([seed, 1]), cfg.world)
    traj = traj.replace(p2d=camlib.project_points(cam, traj.p3d))
    gt = res.ground_truth()
    gt["camera"] = cam.to_record()
    gt["human_centroids"] = _player_centroids(np.random.default_rng([seed, 2]), cfg.world)
    gt["sample_rate_hz"] = g.sample_rate_hz
    return seed, traj.to_records(), gt, None


def cmd_gen(args, cfg: RunConfig) -> dict:
    run = Run("gen", cfg, args)
    g = cfg.gen
    t0 = time.perf_counter()
    pools = build_pools(g.pool_size, cfg.world, cfg.aero, cfg.table, args.seed, cfg.pools)
    pool_time = time.perf_counter() - t0
    ss = np.random.SeedSequence(args.seed)
    t1 = time.perf_counter()
    made, failed, attempt, emitted = 0, {}, 0, []
    pool_records = [rec for k in pools for rec in pools[k].to_records()]
    run.jsonl("pools.jsonl", pool_records)
    while made < args.n:
        batch = args.n - made
        children = ss.spawn(batch)
        seeds = [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
        attempt += batch
        for seed, recs, gt, stage in run_map(_gen_one, [(s, pools, cfg) for s in seeds],
                                             args.jobs):
            if recs is None:
                failed[stage] = failed.get(stage, 0) + 1
                continue
            name = f"rally_{made:05d}"
            emitted.append({"name": name, "seed": seed})
            run.jsonl(name + TRAJ_SUFFIX, recs)
            run.jsonl(name + GT_SUFFIX, [gt])
            made += 1
        if attempt > 20 * args.n + 100:
            raise CommandError("gen: too many failed rallies; check the pool configuration")
    gen_time = time.perf_counter() - t1
    run.counts = {"rallies": made, "failed_points": sum(failed.values()),
                  "attempts": attempt, "pool_entries": len(pool_records)}
    run.rejections = {"failed_stitch_" + k: v for k, v in sorted(failed.items())}
    run.extra = {"rallies_per_s": made / gen_time if gen_time > 0 else None,
                 "generation_time_s": gen_time, "pool_build_time_s": pool_time,
                 "sample_rate_hz": g.sample_rate_hz, "rallies": emitted,
                 "pool_fingerprints": {k: pools[k].fingerprint() for k in pools}}
    return run.finish()


# ---------------------------------------------------------------------------
# segment / fit / curate / stats


def _segment_one(task):
    path, cfg = task
    ann = annotate_rally(load_trajectory(path), cfg.world, cfg.hits)
    return {"name": rally_name(path), **ann.to_record()}


def cmd_segment(args, cfg: RunConfig) -> dict:
    run = Run("segment", cfg, args)
    files = trajectory_files(args.input)
    run.inputs = files
    recs = run_map(_segment_one, [(p, cfg) for p in files], args.jobs)
    run.jsonl("annotations.jsonl", recs)
    bad = [r for r in recs if not r["valid"]]
    run.counts = {"rallies": len(recs), "valid": len(recs) - len(bad),
                  "hits": sum(len(r["hits"]) for r in recs),
                  "bounces": sum(len(r["bounces"]) for r in recs)}
    for r in bad:
        run.rejections[r["reason"]] = run.rejections.get(r["reason"], 0) + 1
    return run.finish()


def _fit_one(task):
    path, ann_rec, cfg = task
    traj = load_trajectory(path)
    if ann_rec is None:
        try:
            fits = [ode_fit(traj, cfg.world, cfg.aero, cfg.table, cfg.fit)]
        except TTBallError:
            fits = [None]
    else:
        fits = fit_segments(traj, RallyAnnotation.from_record(ann_rec), cfg.world, cfg.aero,
                            cfg.table, cfg.fit)
    return {"name": rally_name(path),
            "fits": [None if f is None else f.to_record() for f in fits]}


def cmd_fit(args, cfg: RunConfig) -> dict:
    run = Run("fit", cfg, args)
    files = trajectory_files(args.input)
    run.inputs = list(files)
    anns = {}
    if args.annotations:
        anns = load_keyed(args.annotations)
        run.inputs.append(Path(args.annotations))
    tasks = []
    for p in files:
        name = rally_name(p)
        if args.annotations and name not in anns:
            raise CommandError(f"{args.annotations}: no annotation for {name}")
        tasks.append((p, anns.get(name), cfg))
    recs = run_map(_fit_one, tasks, args.jobs)
    run.jsonl("fits.jsonl", recs)
    fits = [f for r in recs for f in r["fits"]]
    run.counts = {"rallies": len(recs), "fits": sum(f is not None for f in fits),
                  "converged": sum(bool(f and f["converged"]) for f in fits)}
    run.rejections = {"too_few_samples": sum(f is None for f in fits)}
    return run.finish()


def _fit_from_record(rec):
    if rec is None:
        return None
    return FitResult(BallState.from_record(rec["x0"]), None, rec["rmse"], rec["max_error"],
                     rec["n_bounces"], rec["converged"], rec["iterations"],
                     rec.get("objective", float("nan")))


def _curate_one(task):
    path, ann_rec, fit_rec, cfg = task
    traj = load_trajectory(path)
    side = load_sidecar(path)
    cam = camlib.CameraModel.from_record(side["camera"]) if side and "camera" in side else None
    fits = None if fit_rec is None else [_fit_from_record(f) for f in fit_rec["fits"]]
    centroids = side.get("human_centroids") if side else None
    v = curate(traj, RallyAnnotation.from_record(ann_rec), cam, fits, centroids,
               cfg.curation, cfg.world)
    return {"name": rally_name(path), **v.to_record()}


def cmd_curate(args, cfg: RunConfig) -> dict:
    run = Run("curate", cfg, args)
    files = trajectory_files(args.input)
    anns = load_keyed(args.annotations)
    fits = load_keyed(args.fits) if args.fits else {}
    run.inputs = list(files) + [Path(args.annotations)] + ([Path(args.fits)] if args.fits else [])
    tasks = []
    for p in files:
        name = rally_name(p)
        if name not in anns:
            raise CommandError(f"{args.annotations}: no annotation for {name}")
        tasks.append((p, anns[name], fits.get(name), cfg))
    recs = run_map(_curate_one, tasks, args.jobs)
    run.jsonl("verdicts.jsonl", recs)
    table = rejection_table([CurationVerdict(r["accepted"], r["reason"]) for r in recs])
    run.json("rejection_table.json", table, sort_keys=False)
    run.counts = {"rallies": len(recs), "accepted": sum(r["accepted"] for r in recs)}
    run.rejections = {k: v for k, v in table.items() if k != "success"}
    return run.finish()


def cmd_stats(args, cfg: RunConfig) -> dict:
    run = Run("stats", cfg, args)
    files = trajectory_files(args.input)
    anns = load_keyed(args.annotations)
    keep = None
    if args.verdicts:
        keep = {k for k, v in load_keyed(args.verdicts).items() if v["accepted"]}
    pairs = []
    for p in files:
        name = rally_name(p)
        if keep is not None and name not in keep:
            continue
        if name not in anns:
            raise CommandError(f"{args.annotations}: no annotation for {name}")
        pairs.append((load_trajectory(p), RallyAnnotation.from_record(anns[name])))
    run.inputs = list(files)
    st = emit_statistics(pairs)
    run.jsonl("statistics.jsonl", st.to_records())
    run.counts = {"rallies": st.n_rallies}
    return run.finish()


# ---------------------------------------------------------------------------
# racket / mc-racket / calib


def _racket_one(task):
    rec, cfg = task
    pb = StrokeProblem.from_record(rec)
    st = solve_stroke(pb, cfg.racket, cfg.aero, cfg.table, cfg.world, cfg.solver)
    return st.to_record()


def cmd_racket(args, cfg: RunConfig) -> dict:
    run = Run("racket", cfg, args)
    run.inputs = [Path(args.input)]
    problems = read_jsonl(args.input)
    for lineno, rec in enumerate(problems, 1):
        try:
            StrokeProblem.from_record(rec).validate(cfg.world)
        except (KeyError, TypeError, ValueError, TTBallError) as exc:
            raise CommandError(f"{args.input}:{lineno}: {type(exc).__name__}: {exc}") from exc
    recs = run_map(_racket_one, [(r, cfg) for r in problems], args.jobs)
    run.jsonl("strokes.jsonl", recs)
    run.counts = {"problems": len(recs), "converged": sum(r["converged"] for r in recs)}
    return run.finish()


def _mc_one(task):
    seed, i, cfg = task
    return run_trial(seed, i, cfg.mc, cfg.solver, 1e-3, cfg.racket, cfg.aero, cfg.table,
                     cfg.world)


def cmd_mc_racket(args, cfg: RunConfig) -> dict:
    run = Run("mc-racket", cfg, args)
    trials = run_map(_mc_one, [(args.seed, i, cfg) for i in range(args.n)], args.jobs)
    summary = summarize_trials(trials)
    run.jsonl("trials.jsonl", trials)
    run.json("summary.json", summary)
    run.counts = {"trials": len(trials), "successes": sum(t["success"] for t in trials)}
    run.extra = {"success_rate": summary["success_rate"]}
    return run.finish()


def cmd_calib(args, cfg: RunConfig) -> dict:
    run = Run("calib", cfg, args)
    if args.corners_file:
        run.inputs = [Path(args.corners_file)]
        with open(args.corners_file, "r", encoding="utf-8") as fh:
            corners = json.load(fh)
    else:
        corners = [float(v) for v in args.corners.split(",")]
    corners = np.asarray(corners, dtype=float).reshape(4, 2)
    cam, rms = camlib.calibrate_from_corners(corners, tuple(args.image_size), cfg.world)
    run.json("camera.json", {**cam.to_record(), "rms_px": rms})
    run.counts = {"cameras": 1}
    return run.finish()


# ---------------------------------------------------------------------------
# argument parsing


def _override_flags(parser, section: str, names=None):
    """Add ``--field-name`` flags for the scalar fields of one config section."""
    default = getattr(RunConfig(), section)
    for f in fields(default):
        if names is not None and f.name not in names:
            continue
        value = getattr(default, f.name)
        flag = "--" + f.name.replace("_", "-")
        kw = dict(dest=f"ovr__{section}__{f.name}", default=None, metavar=f.name.upper())
        if isinstance(value, bool):
            parser.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), **kw)
        elif isinstance(value, int):
            parser.add_argument(flag, type=int, **kw)
        elif isinstance(value, float):
            parser.add_argument(flag, type=float, **kw)
        elif isinstance(value, tuple) and len(value) == 2:
            kw["metavar"] = ("LO", "HI")
            parser.add_argument(flag, type=float, nargs=2, **kw)


def _collect_overrides(args) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith("ovr__") and value is not None:
            _, section, name = key.split("__", 2)
            out[f"{section}.{name}"] = list(value) if isinstance(value, list) else value
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ttball", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=False, jobs=True):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if jobs:
            p.add_argument("--jobs", type=int, default=1)
        return p

    p = common(sub.add_parser("simulate", help="integrate ball flights"), seed=True, jobs=False)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--state", help="initial state as a JSON record instead of random starts")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("gen", help="generate a synthetic rally dataset"), seed=True)
    p.add_argument("--n", type=int, default=10)
    _override_flags(p, "gen", ("pool_size", "max_segments", "sample_rate_hz"))
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("segment", help="detect hits and bounces"))
    p.add_argument("input")
    _override_flags(p, "hits")
    p.set_defaults(func=cmd_segment)

    p = common(sub.add_parser("fit", help="fit physical trajectories"))
    p.add_argument("input")
    p.add_argument("--annotations", help="annotations.jsonl; fits one window per segment")
    _override_flags(p, "fit", ("huber_delta", "max_iterations", "multistart_count",
                                "multistart_spin_hz", "rk4_dt", "reject_factor"))
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("curate", help="filter rallies"))
    p.add_argument("input")
    p.add_argument("--annotations", required=True)
    p.add_argument("--fits")
    _override_flags(p, "curation")
    p.set_defaults(func=cmd_curate)

    p = common(sub.add_parser("stats", help="histogram statistics of rallies"), jobs=False)
    p.add_argument("input")
    p.add_argument("--annotations", required=True)
    p.add_argument("--verdicts", help="keep only rallies accepted in this verdicts.jsonl")
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("racket", help="solve racket strokes for stroke problems"))
    p.add_argument("input", help="JSONL of stroke problems")
    _override_flags(p, "solver", ("node_count", "multistart", "start_spread", "landing_tol"))
    p.set_defaults(func=cmd_racket)

    p = common(sub.add_parser("mc-racket", help="Monte-Carlo test of the racket solver"),
               seed=True)
    p.add_argument("--n", type=int, default=500)
    _override_flags(p, "solver", ("node_count", "multistart"))
    p.set_defaults(func=cmd_mc_racket)

    p = common(sub.add_parser("calib", help="calibrate a camera from table corners"),
               jobs=False)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--corners", help="x1,y1,...,x4,y4 in corner order")
    g.add_argument("--corners-file", help="JSON list of four [x, y] pixels")
    p.add_argument("--image-size", type=int, nargs=2, default=(1920, 1080))
    p.set_defaults(func=cmd_calib)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        ovr = _collect_overrides(args)
        if ovr:
            cfg = cfg.with_overrides(ovr)
        if getattr(args, "jobs", 1) < 1:
            raise CommandError("--jobs must be at least 1")
        manifest = args.func(args, cfg)
    except (CommandError, ConfigError) as exc:
        print(f"ttball {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TTBallError, ValueError, KeyError, OSError) as exc:
        print(f"ttball {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary = {k: manifest[k] for k in ("counts", "rejections") if manifest.get(k)}
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
