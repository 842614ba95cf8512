"""Trajectory accuracy and timing metrics.

Estimated and reference trajectories are matched by nearest timestamp,
aligned with the closed-form least-squares rigid (or similarity) transform,
and scored as absolute position RMSE.  Drift is that error as a percentage
of path length; runs past 0.5 % count as outliers and enter aggregate
tables at the cap.  Solve-time streams reduce to mean / median / p95
summaries so sweep outputs stay one row per run.

Everything here is pure: no file handles are kept open between calls and
no state survives a call, so the functions are safe to use from sweep
workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientPairs

ALIGN_MODES = ("se3", "sim3")

# drift level past which a run is reported as an outlier and capped when
# aggregated, in percent of trajectory length
OUTLIER_DRIFT_PERCENT = 0.5

# default threshold grid for cumulative accuracy tables, percent
DEFAULT_DRIFT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 11))

_MIN_PAIRS = 3


@dataclass(frozen=True)
class Trajectory:
    """Timestamped positions, optionally with orientations.

    ``quaternions`` rows are wxyz world-from-body; they ride along for
    output fidelity but the metrics below are position-only.
    """

    times: np.ndarray                      # (n,) seconds, strictly increasing
    positions: np.ndarray                  # (n, 3) meters
    quaternions: Optional[np.ndarray] = None   # (n, 4) or None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        positions = np.asarray(self.positions, dtype=float)
        if positions.shape != (times.size, 3):
            raise ValueError(
                f"positions shape {positions.shape} does not match "
                f"{times.size} timestamps")
        quats = self.quaternions
        if quats is not None:
            quats = np.asarray(quats, dtype=float)
            if quats.shape != (times.size, 4):
                raise ValueError(
                    f"quaternions shape {quats.shape} does not match "
                    f"{times.size} timestamps")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "quaternions", quats)

    def __len__(self) -> int:
        return int(self.times.size)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray,
                    scale: float = 1.0) -> "Trajectory":
        """Return a copy with positions mapped through ``s·R·p + t``."""
        moved = scale * (np.asarray(rotation) @ self.positions.T).T
        moved = moved + np.asarray(translation, dtype=float).reshape(3)
        return Trajectory(self.times.copy(), moved,
                          None if self.quaternions is None
                          else self.quaternions.copy())


def load_trajectory(path) -> Trajectory:
    """Read a trajectory CSV with columns t, px, py, pz[, qw, qx, qy, qz].

    Extra columns (ground-truth velocities, for instance) are ignored.
    """
    with open(path, "r", newline="") as handle:
        reader = csv.DictReader(handle)
        names = reader.fieldnames or []
        for required in ("t", "px", "py", "pz"):
            if required not in names:
                raise ValueError(f"{path}: missing column {required!r}")
        has_quat = all(c in names for c in ("qw", "qx", "qy", "qz"))
        times: List[float] = []
        positions: List[List[float]] = []
        quats: List[List[float]] = []
        for row in reader:
            times.append(float(row["t"]))
            positions.append([float(row["px"]), float(row["py"]),
                              float(row["pz"])])
            if has_quat:
                quats.append([float(row["qw"]), float(row["qx"]),
                              float(row["qy"]), float(row["qz"])])
    return Trajectory(np.array(times, dtype=float),
                      np.array(positions, dtype=float).reshape(-1, 3),
                      np.array(quats, dtype=float).reshape(-1, 4)
                      if has_quat else None)


@dataclass(frozen=True)
class Alignment:
    """Similarity transform mapping estimate positions onto the reference."""

    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)
    scale: float
    pairs: int                # matched timestamps the fit used

    def apply(self, positions: np.ndarray) -> np.ndarray:
        points = np.asarray(positions, dtype=float).reshape(-1, 3)
        return self.scale * (self.rotation @ points.T).T + self.translation

    def apply_trajectory(self, trajectory: Trajectory) -> Trajectory:
        return trajectory.transformed(self.rotation, self.translation,
                                      self.scale)


def associate(est_times: np.ndarray, ref_times: np.ndarray,
              tolerance: Optional[float] = None
              ) -> Tuple[np.ndarray, np.ndarray]:
    """Match each estimate timestamp to its nearest reference timestamp.

    Matching is one-to-one: candidate pairs are taken closest-first, and a
    timestamp already claimed on either side is skipped.  ``tolerance``
    defaults to half the median reference sampling period, so an estimate
    that skipped a frame still matches while anything between frames does
    not.  Returns index arrays (into est and ref) sorted by time.
    """
    est_times = np.asarray(est_times, dtype=float).reshape(-1)
    ref_times = np.asarray(ref_times, dtype=float).reshape(-1)
    if tolerance is None:
        if ref_times.size < 2:
            raise InsufficientPairs(
                "reference trajectory too short to infer a frame period")
        tolerance = 0.5 * float(np.median(np.diff(ref_times)))
    if est_times.size == 0 or ref_times.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)

    right = np.searchsorted(ref_times, est_times)
    candidates: List[Tuple[float, int, int]] = []
    for i, t in enumerate(est_times):
        for j in (right[i] - 1, right[i]):
            if 0 <= j < ref_times.size:
                gap = abs(float(ref_times[j] - t))
                if gap <= tolerance:
                    candidates.append((gap, i, int(j)))
    candidates.sort()
    used_est: set = set()
    used_ref: set = set()
    pairs: List[Tuple[int, int]] = []
    for _, i, j in candidates:
        if i in used_est or j in used_ref:
            continue
        used_est.add(i)
        used_ref.add(j)
        pairs.append((i, j))
    pairs.sort()
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    est_idx, ref_idx = zip(*pairs)
    return np.array(est_idx, dtype=int), np.array(ref_idx, dtype=int)


def align(est: Trajectory, ref: Trajectory, mode: str = "sim3",
          tolerance: Optional[float] = None) -> Alignment:
    """Fit the transform minimizing ``Σ‖s·R·p_est + t − p_ref‖²``.

    ``mode`` "se3" pins the scale at 1; "sim3" solves it, which is the
    right default for monocular outputs whose scale is estimated but not
    exact.  Needs at least three matched timestamp pairs.
    """
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}; "
                         f"expected one of {ALIGN_MODES}")
    est_idx, ref_idx = associate(est.times, ref.times, tolerance)
    if est_idx.size < _MIN_PAIRS:
        raise InsufficientPairs(
            f"alignment needs at least {_MIN_PAIRS} matched pairs, "
            f"found {est_idx.size}")
    x = est.positions[est_idx]
    y = ref.positions[ref_idx]
    mean_x = x.mean(axis=0)
    mean_y = y.mean(axis=0)
    xc = x - mean_x
    yc = y - mean_y

    # closed-form least-squares similarity fit: rotation from the SVD of
    # the cross-covariance with a determinant correction, scale from the
    # ratio of projected spread to source spread
    cov = yc.T @ xc / x.shape[0]
    u, singulars, vt = np.linalg.svd(cov)
    flip = np.ones(3)
    if np.linalg.det(u @ vt) < 0.0:
        flip[-1] = -1.0
    rotation = u @ np.diag(flip) @ vt
    if mode == "sim3":
        var_x = float(np.mean(np.sum(xc * xc, axis=1)))
        if var_x <= 0.0:
            raise InsufficientPairs(
                "estimate positions are coincident; scale is unobservable")
        scale = float(np.dot(singulars, flip)) / var_x
    else:
        scale = 1.0
    translation = mean_y - scale * rotation @ mean_x
    return Alignment(rotation=rotation, translation=translation,
                     scale=scale, pairs=int(est_idx.size))


@dataclass(frozen=True)
class TimingSummary:
    """Per-frame solve-time statistics in milliseconds."""

    mean_ms: float
    median_ms: float
    p95_ms: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return {"mean_ms": self.mean_ms, "median_ms": self.median_ms,
                "p95_ms": self.p95_ms, "count": self.count}


def summarize_timings(timing_ms: Sequence[float]) -> Optional[TimingSummary]:
    values = np.asarray(list(timing_ms), dtype=float)
    if values.size == 0:
        return None
    return TimingSummary(mean_ms=float(values.mean()),
                         median_ms=float(np.median(values)),
                         p95_ms=float(np.percentile(values, 95.0)),
                         count=int(values.size))


@dataclass(frozen=True)
class Metrics:
    """Accuracy summary for one aligned run."""

    ate_rmse: float             # meters
    trajectory_length: float    # meters, reference path length
    drift_percent: float        # ate · 100 / length
    outlier: bool               # drift past the 0.5 % cap
    capped_drift_percent: float  # drift with the outlier cap applied
    pairs: int                  # matched timestamps the RMSE used
    timing: Optional[TimingSummary] = None

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "ate_rmse": self.ate_rmse,
            "trajectory_length": self.trajectory_length,
            "drift_percent": self.drift_percent,
            "outlier": self.outlier,
            "capped_drift_percent": self.capped_drift_percent,
            "pairs": self.pairs,
        }
        if self.timing is not None:
            out["timing"] = self.timing.to_dict()
        return out


def cap_drift(drift_percent: float) -> float:
    """Apply the aggregation cap: outliers enter tables at 0.5 %."""
    return min(drift_percent, OUTLIER_DRIFT_PERCENT)


def compute_metrics(est: Trajectory, ref: Trajectory,
                    timing_ms: Optional[Sequence[float]] = None,
                    tolerance: Optional[float] = None) -> Metrics:
    """Score an already-aligned estimate against the reference.

    RMSE runs over timestamp-matched position pairs; path length sums the
    reference's consecutive displacements over its full extent, so a run
    that tracked only part of the way is still charged the whole path.
    """
    est_idx, ref_idx = associate(est.times, ref.times, tolerance)
    if est_idx.size < _MIN_PAIRS:
        raise InsufficientPairs(
            f"metrics need at least {_MIN_PAIRS} matched pairs, "
            f"found {est_idx.size}")
    diff = est.positions[est_idx] - ref.positions[ref_idx]
    ate = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    steps = np.linalg.norm(np.diff(ref.positions, axis=0), axis=1)
    length = float(steps.sum())
    if length <= 0.0:
        raise ValueError("reference path has zero length; drift is undefined")
    drift = ate * 100.0 / length
    return Metrics(ate_rmse=ate,
                   trajectory_length=length,
                   drift_percent=drift,
                   outlier=drift > OUTLIER_DRIFT_PERCENT,
                   capped_drift_percent=cap_drift(drift),
                   pairs=int(est_idx.size),
                   timing=summarize_timings(timing_ms)
                   if timing_ms is not None else None)


def evaluate_trajectory(est: Trajectory, ref: Trajectory,
                        mode: str = "sim3",
                        timing_ms: Optional[Sequence[float]] = None,
                        tolerance: Optional[float] = None) -> Metrics:
    """Align then score in one call; the alignment is refit every time."""
    transform = align(est, ref, mode=mode, tolerance=tolerance)
    return compute_metrics(transform.apply_trajectory(est), ref,
                           timing_ms=timing_ms, tolerance=tolerance)


def cumulative_table(runs: Sequence[float],
                     thresholds: Sequence[float] = DEFAULT_DRIFT_GRID
                     ) -> List[Tuple[float, int]]:
    """Count runs at or under each threshold of an ascending grid.

    The counts read as a discrete CDF of per-run drift: row ``(θ, c)``
    says ``c`` runs reached accuracy no worse than ``θ`` percent.  Counts
    are nondecreasing down the table by construction.
    """
    values = np.asarray(list(runs), dtype=float)
    if values.size == 0:
        raise ValueError("cumulative table needs at least one run")
    grid = np.asarray(list(thresholds), dtype=float)
    if grid.size == 0:
        raise ValueError("threshold grid is empty")
    if np.any(np.diff(grid) <= 0.0):
        raise ValueError("threshold grid must be strictly ascending")
    return [(float(theta), int(np.count_nonzero(values <= theta)))
            for theta in grid]
