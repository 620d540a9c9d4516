"""Rally quality filters, evaluation metrics and dataset statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .ballistics import AeroParams, TableBounceParams, WorldGeometry
from .camera import CameraModel, project_points, reprojection_error
from .errors import EmptyInput, InconsistentInputs, TimestampMismatch, TooFewSamples
from .segmentation import RallyAnnotation
from .trajectory import Trajectory, rad_to_hz
from .trajectory_fit import FitConfig, FitResult, ode_fit

REASONS = ("InvalidHumanPos", "NotEnoughSegments", "EventImplausible", "HighReproj",
           "HighOdeFit", "LowBallVisibility")

# rejection table columns; implausible events are counted with missing segments
TABLE_COLUMNS = ("success", "invalid human pos", "not enough segments", "high reproj errors",
                 "high ODE fit", "low ball vis")
REASON_COLUMN = {
    None: "success",
    "InvalidHumanPos": "invalid human pos",
    "NotEnoughSegments": "not enough segments",
    "EventImplausible": "not enough segments",
    "HighReproj": "high reproj errors",
    "HighOdeFit": "high ODE fit",
    "LowBallVisibility": "low ball vis",
}


@dataclass(frozen=True)
class CurationThresholds:
    max_norm_reproj: float = 0.2
    # compared with the largest per-sample fit distance of any segment (m)
    max_ode_rmse: float = 0.30
    min_hits: int = 2
    min_ball_visibility: float = 0.5
    min_peak_gap: float = 0.2
    min_abs_x: float = 0.3
    human_x_bounds: Tuple[float, float] = (0.5, 8.22)
    human_y_bounds: Tuple[float, float] = (0.5, 1.525)

    def __post_init__(self):
        for name in ("max_norm_reproj", "max_ode_rmse", "min_hits", "min_ball_visibility",
                     "min_peak_gap", "min_abs_x"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_norm_reproj", "min_ball_visibility"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name} is a fraction in (0, 1]")
        for name in ("human_x_bounds", "human_y_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class CurationVerdict:
    accepted: bool
    reason: Optional[str]
    metrics: Dict[str, object] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"accepted": self.accepted, "reason": self.reason, "metrics": self.metrics}


def segment_windows(traj: Trajectory, annotation: RallyAnnotation):
    """Sample windows lying strictly inside each annotated segment.

    Hit samples are excluded because they mix the incoming and outgoing
    flights. The trailing segment runs to the end of the trajectory.
    """
    out = []
    for seg in annotation.segments:
        t1 = traj.t[-1] + 1.0 if seg.trailing else seg.t_end
        out.append(traj.window(seg.t_start, t1, inclusive=False))
    return out


def fit_segments(traj: Trajectory, annotation: RallyAnnotation,
                 world: WorldGeometry = WorldGeometry(), aero: AeroParams = AeroParams(),
                 bounce_params: TableBounceParams = TableBounceParams(),
                 config: FitConfig = FitConfig()) -> List[Optional[FitResult]]:
    """ODE fit of every segment window; None where a window is too short."""
    fits = []
    for w in segment_windows(traj, annotation):
        try:
            fits.append(ode_fit(w, world, aero, bounce_params, config))
        except TooFewSamples:
            fits.append(None)
    return fits


def _human_ok(centroids, th: CurationThresholds) -> bool:
    for c in centroids:
        x, y = abs(float(c[0])), abs(float(c[1]))
        if not (th.human_x_bounds[0] <= x <= th.human_x_bounds[1]
                and th.human_y_bounds[0] <= y <= th.human_y_bounds[1]):
            return False
    return True


def curate(traj: Trajectory, annotation: RallyAnnotation, cam: Optional[CameraModel],
           fit_result: Union[FitResult, Sequence[Optional[FitResult]], None],
           human_centroids: Optional[Sequence] = None,
           thresholds: CurationThresholds = CurationThresholds(),
           world: WorldGeometry = WorldGeometry()) -> CurationVerdict:
    """Run the rally filter stack; the first failing check sets the reason.

    Checks run in the order of REASONS. Every statistic is computed and
    reported even after a failure. Checks whose inputs are absent (no
    camera, no 2D detections, no centroids, no fits) are skipped.
    """
    th = thresholds
    if fit_result is None:
        fits = []
    elif isinstance(fit_result, FitResult):
        fits = [fit_result]
    else:
        fits = list(fit_result)
    if len(traj) == 0:
        raise InconsistentInputs("empty trajectory")
    lo, hi = traj.t[0] - 1e-9, traj.t[-1] + 1e-9
    for h in annotation.hits:
        if not lo <= h.t <= hi:
            raise InconsistentInputs(f"hit at t={h.t} outside the trajectory time span")
    for f in fits:
        if f is not None and not lo <= f.x0_star.t <= hi:
            raise InconsistentInputs("fit start time outside the trajectory time span")

    m: Dict[str, object] = {}
    m["n_hits"] = len(annotation.hits)
    m["n_segments"] = len(annotation.segments)
    m["events_valid"] = bool(annotation.valid)
    m["event_reason"] = annotation.reason
    m["visibility"] = float(np.mean(traj.visible))
    if cam is not None and (traj.valid2d & traj.valid3d).any():
        _, m["max_norm_reproj"] = reprojection_error(traj, cam, world)
    else:
        m["max_norm_reproj"] = None
    errs = [f.max_error for f in fits if f is not None]
    m["max_ode_error"] = float(max(errs)) if errs else None
    m["n_fits"] = len(errs)
    if human_centroids is not None:
        m["human_centroids"] = [[float(c[0]), float(c[1])] for c in human_centroids]
        human_ok = _human_ok(human_centroids, th)
    else:
        human_ok = True

    checks = [
        ("InvalidHumanPos", human_ok),
        ("NotEnoughSegments", m["n_hits"] >= th.min_hits and m["n_segments"] >= 2),
        ("EventImplausible", bool(annotation.valid)),
        ("HighReproj", m["max_norm_reproj"] is None or m["max_norm_reproj"] <= th.max_norm_reproj),
        ("HighOdeFit", m["max_ode_error"] is None or m["max_ode_error"] <= th.max_ode_rmse),
        ("LowBallVisibility", m["visibility"] >= th.min_ball_visibility),
    ]
    for reason, ok in checks:
        if not ok:
            return CurationVerdict(False, reason, m)
    return CurationVerdict(True, None, m)


def rejection_table(verdicts: Sequence[CurationVerdict]) -> Dict[str, int]:
    table = {c: 0 for c in TABLE_COLUMNS}
    for v in verdicts:
        table[REASON_COLUMN[v.reason]] += 1
    return table


# ---------------------------------------------------------------------------
# metrics


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def metric_delta_r3d(pred, gt) -> float:
    """Mean 3D position error in cm.

    Accepts single trajectories or equal-length lists; the result is the mean
    over trajectories of each trajectory's mean error on samples valid in both.
    """
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts) or not preds:
        raise TimestampMismatch("prediction and ground-truth lists differ in length")
    per = []
    for a, b in zip(preds, gts):
        if len(a) != len(b):
            raise TimestampMismatch("trajectories differ in length")
        mask = a.valid3d & b.valid3d
        if not np.allclose(a.t[mask], b.t[mask], rtol=0, atol=1e-9):
            raise TimestampMismatch("timestamps differ on valid samples")
        if not mask.any():
            raise TimestampMismatch("no commonly valid samples")
        per.append(np.mean(np.linalg.norm(a.p3d[mask] - b.p3d[mask], axis=1)))
    return float(100.0 * np.mean(per))


def metric_delta_omega(pred_spins, gt_spins) -> float:
    """Mean spin error in Hz; inputs are (N, 3) arrays in Hz or lists of them."""
    if isinstance(pred_spins, np.ndarray) and pred_spins.ndim <= 2:
        pred_spins, gt_spins = [pred_spins], [gt_spins]
    preds, gts = list(pred_spins), list(gt_spins)
    if len(preds) != len(gts) or not preds:
        raise TimestampMismatch("prediction and ground-truth lists differ in length")
    per = []
    for a, b in zip(preds, gts):
        a = np.asarray(a, dtype=float).reshape(-1, 3)
        b = np.asarray(b, dtype=float).reshape(-1, 3)
        if a.shape != b.shape:
            raise TimestampMismatch("spin arrays differ in length")
        mask = np.all(np.isfinite(a), axis=1) & np.all(np.isfinite(b), axis=1)
        if not mask.any():
            raise TimestampMismatch("no commonly valid spins")
        per.append(np.mean(np.linalg.norm(a[mask] - b[mask], axis=1)))
    return float(np.mean(per))


def metric_delta_r2d(pred, gt2d, cam: CameraModel) -> float:
    """Mean pixel distance between projected predictions and 2D ground truth.

    ``gt2d`` is an (N, 2) array or a trajectory carrying p2d (or lists of
    either, paired with a list of predictions).
    """
    preds, gts = _as_list(pred), _as_list(gt2d)
    if len(preds) != len(gts) or not preds:
        raise TimestampMismatch("prediction and ground-truth lists differ in length")
    per = []
    for a, b in zip(preds, gts):
        b = b.p2d if isinstance(b, Trajectory) else np.asarray(b, dtype=float).reshape(-1, 2)
        if len(a) != len(b):
            raise TimestampMismatch("trajectory and 2D ground truth differ in length")
        proj = project_points(cam, a.p3d)
        mask = np.all(np.isfinite(proj), axis=1) & np.all(np.isfinite(b), axis=1)
        if not mask.any():
            raise TimestampMismatch("no commonly valid samples")
        per.append(np.mean(np.linalg.norm(proj[mask] - b[mask], axis=1)))
    return float(np.mean(per))


def macro_f1(pred_classes: Sequence[str], gt_classes: Sequence[str],
             classes: Sequence[str] = ("topspin", "backspin")) -> float:
    """Unweighted mean of per-class F1; a class absent from both lists scores 1."""
    pred = np.asarray(pred_classes, dtype=object)
    gt = np.asarray(gt_classes, dtype=object)
    if pred.shape != gt.shape:
        raise TimestampMismatch("label lists differ in length")
    scores = []
    for c in classes:
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        if tp + fp + fn == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# statistics


SPIN_EDGES = np.arange(0.0, 51.0, 1.0)
INTER_HIT_EDGES = np.round(np.arange(0.0, 3.0 + 1e-9, 0.02), 10)
DENSITY_BIN = 0.05
XY_RANGE = ((-4.0, 4.0), (-3.0, 3.0))
XZ_RANGE = ((-4.0, 4.0), (0.0, 3.0))


def _edges(lo, hi, step):
    return np.round(lo + step * np.arange(int(round((hi - lo) / step)) + 1), 10)


@dataclass
class Statistics:
    """Fixed-bin histograms; merging adds counts, so partial results combine in any order."""

    spin: Dict[str, np.ndarray] = field(default_factory=dict)
    ball_xy: np.ndarray = None
    ball_xz: np.ndarray = None
    bounce_xy: np.ndarray = None
    inter_hit: np.ndarray = None
    n_rallies: int = 0

    xy_edges = (_edges(*XY_RANGE[0], DENSITY_BIN), _edges(*XY_RANGE[1], DENSITY_BIN))
    xz_edges = (_edges(*XZ_RANGE[0], DENSITY_BIN), _edges(*XZ_RANGE[1], DENSITY_BIN))

    def __post_init__(self):
        from .segmentation import SPIN_CLASSES
        for c in SPIN_CLASSES:
            self.spin.setdefault(c, np.zeros(len(SPIN_EDGES) - 1, dtype=np.int64))
        nxy = (len(self.xy_edges[0]) - 1, len(self.xy_edges[1]) - 1)
        nxz = (len(self.xz_edges[0]) - 1, len(self.xz_edges[1]) - 1)
        if self.ball_xy is None:
            self.ball_xy = np.zeros(nxy, dtype=np.int64)
        if self.ball_xz is None:
            self.ball_xz = np.zeros(nxz, dtype=np.int64)
        if self.bounce_xy is None:
            self.bounce_xy = np.zeros(nxy, dtype=np.int64)
        if self.inter_hit is None:
            self.inter_hit = np.zeros(len(INTER_HIT_EDGES) - 1, dtype=np.int64)

    def merge(self, other: "Statistics") -> "Statistics":
        return Statistics(
            spin={c: self.spin[c] + other.spin[c] for c in self.spin},
            ball_xy=self.ball_xy + other.ball_xy,
            ball_xz=self.ball_xz + other.ball_xz,
            bounce_xy=self.bounce_xy + other.bounce_xy,
            inter_hit=self.inter_hit + other.inter_hit,
            n_rallies=self.n_rallies + other.n_rallies,
        )

    def to_records(self) -> List[dict]:
        recs = [{"histogram": "spin_strength", "spin_class": c, "unit": "Hz",
                 "edges": SPIN_EDGES.tolist(), "counts": self.spin[c].tolist()}
                for c in self.spin]
        recs.append({"histogram": "ball_xy", "unit": "m", "x_edges": self.xy_edges[0].tolist(),
                     "y_edges": self.xy_edges[1].tolist(), "counts": self.ball_xy.tolist()})
        recs.append({"histogram": "ball_xz", "unit": "m", "x_edges": self.xz_edges[0].tolist(),
                     "z_edges": self.xz_edges[1].tolist(), "counts": self.ball_xz.tolist()})
        recs.append({"histogram": "bounce_xy", "unit": "m", "x_edges": self.xy_edges[0].tolist(),
                     "y_edges": self.xy_edges[1].tolist(), "counts": self.bounce_xy.tolist()})
        recs.append({"histogram": "inter_hit_time", "unit": "s",
                     "edges": INTER_HIT_EDGES.tolist(), "counts": self.inter_hit.tolist()})
        recs.append({"histogram": "summary", "n_rallies": self.n_rallies})
        return recs

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "Statistics":
        st = cls()
        for r in records:
            kind = r["histogram"]
            if kind == "spin_strength":
                st.spin[r["spin_class"]] = np.asarray(r["counts"], dtype=np.int64)
            elif kind == "inter_hit_time":
                st.inter_hit = np.asarray(r["counts"], dtype=np.int64)
            elif kind == "summary":
                st.n_rallies = int(r["n_rallies"])
            else:
                setattr(st, kind, np.asarray(r["counts"], dtype=np.int64))
        return st


def _hist2d(a, b, edges):
    h, _, _ = np.histogram2d(a, b, bins=edges)
    return h.astype(np.int64)


def segment_spins(traj: Trajectory, annotation: RallyAnnotation):
    """(spin class, spin magnitude in Hz) of every classified segment."""
    out = []
    for seg in annotation.segments:
        if seg.spin_class is None:
            continue
        sel = np.flatnonzero((traj.t > seg.t_start) & (traj.t < seg.t_end) & traj.has_spin)
        if len(sel):
            out.append((seg.spin_class, float(np.linalg.norm(rad_to_hz(traj.omega[sel[0]])))))
    return out


def emit_statistics(rallies: Sequence[Tuple[Trajectory, RallyAnnotation]]) -> Statistics:
    """Histograms over accepted rallies given as (trajectory, annotation) pairs."""
    rallies = list(rallies)
    if not rallies:
        raise EmptyInput("statistics need at least one rally")
    st = Statistics()
    for traj, ann in rallies:
        one = Statistics(n_rallies=1)
        for cls_, mag in segment_spins(traj, ann):
            one.spin[cls_] += np.histogram([mag], bins=SPIN_EDGES)[0]
        p = traj.p3d[traj.valid3d]
        one.ball_xy = _hist2d(p[:, 0], p[:, 1], st.xy_edges)
        one.ball_xz = _hist2d(p[:, 0], p[:, 2], st.xz_edges)
        tb = [b for b in ann.bounces if b.on_table]
        if tb:
            bp = np.array([b.p for b in tb])
            one.bounce_xy = _hist2d(bp[:, 0], bp[:, 1], st.xy_edges)
        ht = np.array([h.t for h in ann.hits])
        if len(ht) > 1:
            one.inter_hit = np.histogram(np.diff(ht), bins=INTER_HIT_EDGES)[0].astype(np.int64)
        st = st.merge(one)
    return st
