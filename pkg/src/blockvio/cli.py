"""Command-line front: synthesize datasets, run the estimator, score runs,
and sweep parameters.

Configuration is a plain ``key = value`` file with ``[window]``,
``[scenario]`` and ``[run]`` sections mirroring :class:`WindowConfig`,
:class:`SimScenario` and the run-level settings; unknown sections or keys
are rejected by name so typos fail loudly.  Every command is deterministic
given its config and seed — floats are written with round-trip ``repr`` and
nothing time- or host-dependent enters the data files.  Reports carry the
config hash, a git-style version string, and the seed so any output can be
traced back to what produced it.

Exit codes: 0 success, 2 invalid configuration, 3 missing or broken
dataset/files, 4 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import subprocess
import sys
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import (DatasetIncomplete, DivergedSolve, InsufficientPairs,
                     InvalidConfig, InvalidScenario, NonMonotoneTimestamps,
                     SingularEliminationBlock, SingularSystem)
from .evaluate import (ALIGN_MODES, Trajectory, evaluate_trajectory,
                       load_trajectory, summarize_timings)
from .geometry import Pose
from .sim import FrameObs, SimDataset, SimScenario, simulate
from .solver.dense import dense_solve
from .solver.tree import TreeSolver
from .window import SlidingWindow, WindowConfig

GT_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz",
              "vx", "vy", "vz")
EST_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz")
TIMING_COLUMNS = ("frame", "t", "keyframe", "assemble_ms", "eliminate_ms",
                  "back_substitute_ms", "total_ms", "skipped_blocks")

CAPACITY_GRID = (20, 30, 50, 100, 200, 300)
BLOCK_SIZE_GRID = (2, 3, 5, 10, 20, 33, 50)
K_GRID = (2, 5, 10, 20, 50, 100)
SKIP_GRID = (0.0, 1e-4, 1e-3, 1e-2)
SWEEPS = ("capacity", "block-size", "k-sweep", "skip")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunSettings:
    """The ``[run]`` section: where outputs go and how runs are scored."""

    out: str = "out"
    oracle_check: bool = False
    align: str = "sim3"
    seeds: int = 1               # seeds per setting in bench sweeps

    def validate(self) -> None:
        if self.align not in ALIGN_MODES:
            raise InvalidConfig(
                f"align must be one of {ALIGN_MODES}, not {self.align!r}")
        if self.seeds < 1:
            raise InvalidConfig("seeds must be at least 1")


@dataclass
class RunConfig:
    """Everything one invocation needs, across all three sections."""

    window: WindowConfig = field(default_factory=WindowConfig)
    scenario: SimScenario = field(default_factory=SimScenario)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        self.window.validate()
        self.scenario.validate()
        self.run.validate()


_SECTIONS = {"window": WindowConfig, "scenario": SimScenario,
             "run": RunSettings}


def _convert(section: str, key: str, hint, raw: str):
    """Parse one config value according to its dataclass field type."""
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union and type(None) in args:
            if raw.lower() in ("", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _convert(section, key, inner, raw)
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            parts = [p for p in raw.replace(",", " ").split() if p]
            if len(args) and args[-1] is not Ellipsis \
                    and len(parts) != len(args):
                raise ValueError(
                    f"expected {len(args)} values, got {len(parts)}")
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {section}.{key}: {exc}") from exc
    raise InvalidConfig(
        f"no parser for {section}.{key} of type {hint}")  # pragma: no cover


def load_config(path=None) -> RunConfig:
    """Read a sectioned key = value file; missing path means all defaults."""
    config = RunConfig()
    if path is None:
        return config
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r") as handle:
            parser.read_file(handle)
    except FileNotFoundError:
        raise
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise InvalidConfig(
                f"unknown config section [{section}]; "
                f"expected one of {sorted(_SECTIONS)}")
        cls = _SECTIONS[section]
        hints = typing.get_type_hints(cls)
        target = getattr(config, "run" if section == "run" else section)
        known = {f.name for f in dataclasses.fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise InvalidConfig(
                    f"unknown config key {section}.{key}")
            setattr(target, key, _convert(section, key, hints[key], raw))
    config.validate()
    return config


def apply_flag_overrides(config: RunConfig, args) -> RunConfig:
    """Fold command-line flags over the file values; flags win."""
    if getattr(args, "out", None) is not None:
        config.run.out = args.out
    if getattr(args, "threads", None) is not None:
        config.window.threads = args.threads
    if getattr(args, "seed", None) is not None:
        config.scenario.seed = args.seed
    if getattr(args, "oracle_check", False):
        config.run.oracle_check = True
    if getattr(args, "align", None) is not None:
        config.run.align = args.align
    if getattr(args, "seeds", None) is not None:
        config.run.seeds = args.seeds
    config.validate()
    return config


def config_dict(config: RunConfig) -> Dict[str, Dict[str, object]]:
    """Every setting that shapes output bytes; the output path is a sink
    location, not a setting, so it stays out (and out of the hash)."""
    run = dataclasses.asdict(config.run)
    run.pop("out")
    return {"window": dataclasses.asdict(config.window),
            "scenario": dataclasses.asdict(config.scenario),
            "run": run}


def config_hash(config: RunConfig) -> str:
    """Stable digest of every setting, for output provenance."""
    canon = json.dumps(config_dict(config), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def version_string() -> str:
    """Package version, plus the working-tree id when run from a checkout."""
    root = Path(__file__).resolve().parents[2]
    try:
        probe = subprocess.run(
            ["git", "-C", str(root), "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5.0)
        if probe.returncode == 0 and probe.stdout.strip():
            return f"{__version__}+g{probe.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# dataset files


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: SimDataset, out: Path, config: RunConfig) -> None:
    """Write one simulated dataset in the on-disk layout the runner reads."""
    out.mkdir(parents=True, exist_ok=True)
    gt = ds.gt
    with open(out / "gt.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GT_COLUMNS)
        for i in range(gt.frame_ts.size):
            writer.writerow([_fmt(v) for v in
                             (gt.frame_ts[i], *gt.cam_p[i], *gt.cam_q[i],
                              *gt.cam_v[i])])
    with open(out / "imu.jsonl", "w") as fh:
        for i in range(ds.imu_ts.size):
            fh.write(json.dumps({
                "t": float(ds.imu_ts[i]),
                "gyro": [float(v) for v in ds.imu_gyro[i]],
                "accel": [float(v) for v in ds.imu_accel[i]],
            }) + "\n")
    with open(out / "frames.jsonl", "w") as fh:
        for fr in ds.frames:
            fh.write(json.dumps({
                "t": float(fr.t),
                "frame": int(fr.index),
                "obs": [{"id": int(i), "u": float(u), "v": float(v)}
                        for i, u, v in fr.obs],
            }) + "\n")
    with open(out / "landmarks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lid", "px", "py", "pz", "cls"])
        for lm in ds.landmarks:
            writer.writerow([lm.lid, *[_fmt(v) for v in lm.position],
                             lm.cls])
    manifest = {
        "seed": ds.scenario.seed,
        "config_hash": config_hash(config),
        "version": version_string(),
        "config": config_dict(config),
        "frames": len(ds.frames),
        "imu_samples": int(ds.imu_ts.size),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class DiskDataset:
    """A dataset read back from its files, in the in-memory stream shape."""

    gt: Trajectory
    gt_velocities: np.ndarray
    frames: List[FrameObs]
    imu_ts: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    manifest: Dict


def read_dataset(path) -> DiskDataset:
    path = Path(path)
    for name in ("gt.csv", "imu.jsonl", "frames.jsonl", "manifest.json"):
        if not (path / name).exists():
            raise DatasetIncomplete(f"{path} is missing {name}")
    gt = load_trajectory(path / "gt.csv")
    velocities = []
    with open(path / "gt.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            velocities.append([float(row.get(c, 0.0) or 0.0)
                               for c in ("vx", "vy", "vz")])
    ts, gyro, accel = [], [], []
    with open(path / "imu.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            ts.append(rec["t"])
            gyro.append(rec["gyro"])
            accel.append(rec["accel"])
    frames: List[FrameObs] = []
    with open(path / "frames.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            frames.append(FrameObs(
                index=int(rec["frame"]), t=float(rec["t"]),
                obs=[(int(o["id"]), float(o["u"]), float(o["v"]))
                     for o in rec["obs"]]))
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    return DiskDataset(
        gt=gt, gt_velocities=np.array(velocities, dtype=float),
        frames=frames, imu_ts=np.array(ts, dtype=float),
        imu_gyro=np.array(gyro, dtype=float).reshape(-1, 3),
        imu_accel=np.array(accel, dtype=float).reshape(-1, 3),
        manifest=manifest)


# ---------------------------------------------------------------------------
# running the estimator over a frame stream


class OracleCheckedSolver(TreeSolver):
    """Tree solver that shadows every solve with the dense reference.

    Records, per solve, the worst increment difference divided by the
    larger of the reference's largest increment and one state unit — the
    floor keeps a fully converged solve (increments at float noise, where
    any two factorization orders differ by ~100% of nothing) from reading
    as a disagreement.  The report surfaces the maximum over the run.
    Strictly a validation tool — the tree increments are the ones applied.
    """

    def __init__(self, opts):
        super().__init__(opts)
        self.deviations: List[float] = []

    def solve(self, graph, fset, plan):
        delta, report = super().solve(graph, fset, plan)
        reference = dense_solve(graph, fset, self.opts)
        worst = 0.0
        scale = 0.0
        for key, ref in reference.items():
            ref = np.atleast_1d(np.asarray(ref, dtype=float))
            got = np.atleast_1d(np.asarray(delta[key], dtype=float))
            worst = max(worst, float(np.max(np.abs(got - ref))))
            scale = max(scale, float(np.max(np.abs(ref))))
        self.deviations.append(worst / max(scale, 1.0))
        return delta, report


def make_window(window_cfg: WindowConfig, q0, p0, v0, gyro_bias, accel_bias,
                oracle_check: bool = False) -> SlidingWindow:
    """A sliding window primed with the dataset's starting state."""
    sw = SlidingWindow(
        window_cfg,
        initial_pose=Pose(np.asarray(q0, dtype=float).copy(),
                          np.asarray(p0, dtype=float).copy()),
        initial_velocity=np.asarray(v0, dtype=float).copy(),
        initial_gyro_bias=np.asarray(gyro_bias, dtype=float).copy(),
        initial_accel_bias=np.asarray(accel_bias, dtype=float).copy())
    if oracle_check:
        sw.solver.close()
        sw.solver = OracleCheckedSolver(sw.opts)
    return sw


def drive_frames(sw: SlidingWindow, frames: Sequence[FrameObs],
                 imu_ts: np.ndarray, imu_gyro: np.ndarray,
                 imu_accel: np.ndarray, limit: Optional[int] = None):
    """Feed frames with their inertial spans; spans share boundary samples
    (the window drops the duplicate)."""
    results = []
    prev_t = None
    for fr in frames[:limit]:
        lo = 0 if prev_t is None else int(
            np.searchsorted(imu_ts, prev_t, side="left"))
        hi = int(np.searchsorted(imu_ts, fr.t, side="right"))
        results.append(sw.insert_frame(
            fr.t, fr.obs, imu_ts[lo:hi], imu_gyro[lo:hi], imu_accel[lo:hi]))
        prev_t = fr.t
    return results


def run_on_dataset(window_cfg: WindowConfig, ds: SimDataset,
                   oracle_check: bool = False,
                   limit: Optional[int] = None):
    """Run the estimator over an in-memory dataset; used by bench too."""
    gt = ds.gt
    sw = make_window(window_cfg, gt.cam_q[0], gt.cam_p[0], gt.cam_v[0],
                     ds.scenario.gyro_bias, ds.scenario.accel_bias,
                     oracle_check=oracle_check)
    with sw:
        results = drive_frames(sw, ds.frames, ds.imu_ts, ds.imu_gyro,
                               ds.imu_accel, limit=limit)
    return sw, results


def estimates_trajectory(sw: SlidingWindow) -> Trajectory:
    records = sw.estimates()
    return Trajectory(
        np.array([r.timestamp for r in records], dtype=float),
        np.array([r.pose.p for r in records], dtype=float).reshape(-1, 3),
        np.array([r.pose.q for r in records], dtype=float).reshape(-1, 4))


def write_estimates(sw: SlidingWindow, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EST_COLUMNS)
        for r in sw.estimates():
            writer.writerow([_fmt(v) for v in
                             (r.timestamp, *r.pose.p, *r.pose.q)])


def write_timings(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TIMING_COLUMNS)
        for res in results:
            t = res.timings
            writer.writerow([
                res.global_id, _fmt(res.timestamp), int(res.keyframe),
                _fmt(1e3 * t.get("evaluate", 0.0)),
                _fmt(1e3 * t.get("forward", 0.0)),
                _fmt(1e3 * t.get("back", 0.0)),
                _fmt(1e3 * t.get("total", 0.0)),
                res.stages_skipped])


def _skipped_ratio(stats) -> float:
    swept = stats.stages_refreshed + stats.stages_skipped
    return stats.stages_skipped / swept if swept else 0.0


def build_report(sw: SlidingWindow, results, config: RunConfig,
                 gt: Trajectory) -> Dict:
    stats = sw.stats
    solve_ms = [1e3 * r.solve_seconds for r in results if r.gn is not None]
    timing = summarize_timings(solve_ms)
    report: Dict = {
        "version": version_string(),
        "seed": config.scenario.seed,
        "config_hash": config_hash(config),
        "config": config_dict(config),
        "frames": {
            "processed": stats.processed,
            "keyframes": stats.keyframes,
            "discarded": stats.discarded,
            "marginalizations": stats.marginalizations,
            "diverged_solves": stats.diverged,
        },
        "solver": {
            "gn_iterations": stats.gn_iterations,
            "stages_refreshed": stats.stages_refreshed,
            "stages_skipped": stats.stages_skipped,
            "skipped_ratio": _skipped_ratio(stats),
            "timing_ms": timing.to_dict() if timing else None,
        },
        "drift_detector": {
            "checks": stats.drift_checks,
            "flags": stats.drift_flags,
            "flag_rate": (stats.drift_flags / stats.drift_checks
                          if stats.drift_checks else 0.0),
            "observations_removed": sum(
                len(v.removed_frames) for v in sw.verdicts),
        },
    }
    if isinstance(sw.solver, OracleCheckedSolver):
        devs = sw.solver.deviations
        report["oracle_check"] = {
            "solves": len(devs),
            "max_rel_deviation": max(devs) if devs else 0.0,
        }
    metrics = evaluate_trajectory(estimates_trajectory(sw), gt,
                                  mode=config.run.align)
    report["metrics"] = metrics.to_dict()
    report["metrics"]["align"] = config.run.align
    return report


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    config = apply_flag_overrides(load_config(args.config), args)
    ds = simulate(config.scenario)
    out = Path(config.run.out)
    write_dataset(ds, out, config)
    print(f"wrote {len(ds.frames)} frames, {ds.imu_ts.size} imu samples "
          f"to {out}")
    return 0


def cmd_run(args) -> int:
    config = apply_flag_overrides(load_config(args.config), args)
    data = read_dataset(args.dataset)
    scenario_cfg = data.manifest.get("config", {}).get("scenario", {})
    gyro_bias = scenario_cfg.get("gyro_bias", (0.0, 0.0, 0.0))
    accel_bias = scenario_cfg.get("accel_bias", (0.0, 0.0, 0.0))
    config.scenario.seed = int(data.manifest.get("seed",
                                                 config.scenario.seed))

    sw = make_window(config.window, data.gt.quaternions[0],
                     data.gt.positions[0], data.gt_velocities[0],
                     gyro_bias, accel_bias,
                     oracle_check=config.run.oracle_check)
    with sw:
        results = drive_frames(sw, data.frames, data.imu_ts, data.imu_gyro,
                               data.imu_accel)
        out = Path(config.run.out)
        out.mkdir(parents=True, exist_ok=True)
        write_estimates(sw, out / "est.csv")
        write_timings(results, out / "timing.csv")
        report = build_report(sw, results, config, data.gt)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    m = report["metrics"]
    print(f"{sw.stats.keyframes} keyframes, ate {m['ate_rmse']:.6f} m, "
          f"drift {m['drift_percent']:.4f}% -> {out}")
    if "oracle_check" in report:
        print("oracle max relative deviation: "
              f"{report['oracle_check']['max_rel_deviation']:.3e}")
    return 0


def cmd_evaluate(args) -> int:
    est = load_trajectory(args.est)
    gt = load_trajectory(args.gt)
    timing_ms = None
    if args.timing is not None:
        with open(args.timing, newline="") as fh:
            timing_ms = [float(row["total_ms"])
                         for row in csv.DictReader(fh)]
    metrics = evaluate_trajectory(est, gt, mode=args.align or "sim3",
                                  timing_ms=timing_ms)
    payload = metrics.to_dict()
    payload["align"] = args.align or "sim3"
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"ate {metrics.ate_rmse:.6f} m over {metrics.pairs} poses, "
          f"drift {metrics.drift_percent:.4f}%"
          + (" (outlier)" if metrics.outlier else ""))
    return 0


def bench_settings(sweep: str, window: WindowConfig
                   ) -> List[Tuple[object, WindowConfig]]:
    """The (setting value, window config) grid one sweep walks."""
    if sweep == "capacity":
        # fixed block size, capacity changed through the block count
        return [(c, replace(window, block_size=10, num_blocks=c // 10))
                for c in CAPACITY_GRID]
    if sweep == "block-size":
        return [(m, replace(window, block_size=m, num_blocks=100 // m))
                for m in BLOCK_SIZE_GRID]
    if sweep == "k-sweep":
        return [(k, replace(window, drift_k=k)) for k in K_GRID]
    if sweep == "skip":
        return [(tau, replace(window, skip_tau=tau)) for tau in SKIP_GRID]
    raise InvalidConfig(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def dataset_gt_trajectory(ds: SimDataset) -> Trajectory:
    return Trajectory(ds.gt.frame_ts.copy(), ds.gt.cam_p.copy(),
                      ds.gt.cam_q.copy())


def bench_one(window_cfg: WindowConfig, scenario: SimScenario,
              align: str = "sim3") -> Dict[str, float]:
    """One sweep cell: simulate, run, score.  Returns the row fields."""
    ds = simulate(scenario)
    sw, results = run_on_dataset(window_cfg, ds)
    metrics = evaluate_trajectory(estimates_trajectory(sw),
                                  dataset_gt_trajectory(ds), mode=align)
    solve_ms = [1e3 * r.solve_seconds for r in results if r.gn is not None]
    return {
        "drift_percent": metrics.drift_percent,
        "ate_rmse": metrics.ate_rmse,
        "mean_solve_ms": float(np.mean(solve_ms)) if solve_ms else 0.0,
        "median_solve_ms": float(np.median(solve_ms)) if solve_ms else 0.0,
        "skipped_ratio": _skipped_ratio(sw.stats),
    }


def cmd_bench(args) -> int:
    config = apply_flag_overrides(load_config(args.config), args)
    settings = bench_settings(args.sweep, config.window)
    out = Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = ("sweep", "setting", "seed", "drift_percent", "ate_rmse",
               "mean_solve_ms", "median_solve_ms", "skipped_ratio")
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for value, window_cfg in settings:
            window_cfg.validate()
            for offset in range(config.run.seeds):
                scenario = replace(config.scenario,
                                   seed=config.scenario.seed + offset)
                row = bench_one(window_cfg, scenario, config.run.align)
                writer.writerow([
                    args.sweep, value, scenario.seed,
                    _fmt(row["drift_percent"]), _fmt(row["ate_rmse"]),
                    _fmt(row["mean_solve_ms"]),
                    _fmt(row["median_solve_ms"]),
                    _fmt(row["skipped_ratio"])])
                fh.flush()
                print(f"{args.sweep}={value} seed={scenario.seed}: "
                      f"drift {row['drift_percent']:.4f}% "
                      f"solve {row['mean_solve_ms']:.2f} ms "
                      f"skipped {row['skipped_ratio']:.2f}")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockvio",
        description="Block-partitioned sliding-window VIO backend: "
                    "simulate datasets, run the estimator, score, sweep.")
    parser.add_argument("--version", action="version",
                        version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", default=None, metavar="PATH",
                       help="sectioned key = value config file")
        p.add_argument("--out", default=None, metavar="DIR",
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        if threads:
            p.add_argument("--threads", type=int, default=None,
                           help="solver worker threads")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    common(p, threads=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the estimator over a dataset")
    p.add_argument("dataset", help="dataset directory (from simulate)")
    common(p)
    p.add_argument("--oracle-check", action="store_true",
                   help="shadow every solve with the dense reference "
                        "and report the worst relative deviation")
    p.add_argument("--align", choices=ALIGN_MODES, default=None,
                   help="alignment mode for the report metrics")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="score an estimate against truth")
    p.add_argument("est", help="estimated trajectory CSV")
    p.add_argument("gt", help="reference trajectory CSV")
    p.add_argument("--align", choices=ALIGN_MODES, default="sim3")
    p.add_argument("--timing", default=None, metavar="PATH",
                   help="timing.csv to fold into the metrics")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="directory for metrics.json (default: cwd)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="parameter sweep, one CSV row per "
                                     "setting per seed")
    p.add_argument("sweep", choices=SWEEPS)
    common(p)
    p.add_argument("--seeds", type=int, default=None,
                   help="seeds per setting (consecutive from the base)")
    p.add_argument("--align", choices=ALIGN_MODES, default=None)
    p.add_argument("--oracle-check", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidConfig, InvalidScenario) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetIncomplete, NonMonotoneTimestamps, InsufficientPairs,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DivergedSolve, SingularSystem, SingularEliminationBlock) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
