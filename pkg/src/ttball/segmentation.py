"""Event annotation on a 3D rally: hits, bounces, segments and spin classes.

Hits are extrema of the along-table coordinate x(t); bounces are minima of
z(t) close to the table plane. Both are found on the raw samples, so they
need no 2D information at all.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .ballistics import WorldGeometry
from .errors import DegenerateVelocity, TooFewSamples, UnsortedInput
from .trajectory import Trajectory, rad_to_hz

SPIN_CLASSES = ("topspin", "backspin", "side_left", "side_right", "no_spin")
REJECTION_REASONS = ("MissingBounce", "TooFewHits", "ExtraBounce", "NonAlternating")
NO_SPIN_HZ = 5.0
BOUNCE_WINDOW = 0.05
GAP_FACTOR = 3.0


@dataclass(frozen=True)
class HitHeuristics:
    min_peak_gap: float = 0.2
    min_abs_x: float = 0.3
    min_hits: int = 2

    def __post_init__(self):
        if not (self.min_peak_gap > 0 and self.min_abs_x > 0 and self.min_hits > 0):
            raise ValueError("hit heuristics must be positive")


@dataclass(frozen=True, eq=False)
class HitEvent:
    t: float
    p: np.ndarray
    side: str
    kind: str  # "peak" or "trough" of x(t)
    index: int

    def to_record(self) -> dict:
        return {"t": self.t, "p": list(map(float, self.p)), "side": self.side,
                "kind": self.kind, "index": self.index}


@dataclass(frozen=True, eq=False)
class BounceDetection:
    t: float
    p: np.ndarray
    on_table: bool
    half: str  # "left", "right" or "off"
    index: int

    def to_record(self) -> dict:
        return {"t": self.t, "p": list(map(float, self.p)), "on_table": self.on_table,
                "half": self.half, "index": self.index}


@dataclass
class Segment:
    t_start: float
    t_end: float
    hitter_side: str
    bounce_count: int
    spin_class: Optional[str] = None
    trailing: bool = False

    def to_record(self) -> dict:
        return dict(t_start=self.t_start, t_end=self.t_end, hitter_side=self.hitter_side,
                    bounce_count=self.bounce_count, spin_class=self.spin_class,
                    trailing=self.trailing)


@dataclass
class RallyAnnotation:
    hits: List[HitEvent] = field(default_factory=list)
    bounces: List[BounceDetection] = field(default_factory=list)
    segments: List[Segment] = field(default_factory=list)
    serve_index: Optional[int] = None
    valid: bool = True
    reason: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "hits": [h.to_record() for h in self.hits],
            "bounces": [b.to_record() for b in self.bounces],
            "segments": [s.to_record() for s in self.segments],
            "serve_index": self.serve_index,
            "valid": self.valid,
            "reason": self.reason,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RallyAnnotation":
        hits = [HitEvent(h["t"], np.array(h["p"]), h["side"], h["kind"], h["index"])
                for h in rec["hits"]]
        bounces = [BounceDetection(b["t"], np.array(b["p"]), b["on_table"], b["half"], b["index"])
                   for b in rec["bounces"]]
        segments = [Segment(**s) for s in rec["segments"]]
        return cls(hits, bounces, segments, rec["serve_index"], rec["valid"], rec["reason"])


def side_of(x: float) -> str:
    return "right" if x > 0 else "left"


def _extrema(t: np.ndarray, y: np.ndarray, kind: str, max_gap: float) -> List[int]:
    """Indices of strict local maxima ("peak") or minima ("trough") of y.

    A plateau counts when both of its neighbours are strictly lower (higher);
    its middle index is reported. Candidates whose neighbourhood spans a time
    gap longer than ``max_gap`` are dropped.
    """
    sgn = 1.0 if kind == "peak" else -1.0
    v = sgn * y
    n = len(v)
    out = []
    i = 1
    while i < n - 1:
        if v[i] > v[i - 1]:
            j = i
            while j + 1 < n and v[j + 1] == v[i]:
                j += 1
            if j + 1 < n and v[j + 1] < v[i]:
                if np.all(np.diff(t[i - 1:j + 2]) <= max_gap):
                    out.append((i + j) // 2)
            i = j + 1
        else:
            i += 1
    return out


def _valid_series(traj: Trajectory):
    mask = traj.valid3d
    if mask.sum() < 3:
        raise TooFewSamples("need at least 3 valid 3D samples")
    idx = np.flatnonzero(mask)
    frame = float(np.median(np.diff(traj.t))) if len(traj) > 1 else 0.0
    return idx, traj.t[idx], traj.p3d[idx], GAP_FACTOR * frame


def detect_hits(traj: Trajectory, h: HitHeuristics = HitHeuristics()) -> List[HitEvent]:
    """Hit events from peaks and troughs of x(t).

    An extremum is accepted when it lies at least ``min_abs_x`` from the net
    and at least ``min_peak_gap`` after the previously accepted extremum of the
    same type.
    """
    idx, t, p, max_gap = _valid_series(traj)
    x = p[:, 0]
    found = []
    for kind in ("peak", "trough"):
        last = -math.inf
        for k in _extrema(t, x, kind, max_gap):
            if abs(x[k]) < h.min_abs_x:
                continue
            if t[k] - last < h.min_peak_gap:
                continue
            last = t[k]
            found.append(HitEvent(float(t[k]), p[k].copy(), side_of(x[k]), kind, int(idx[k])))
    found.sort(key=lambda e: e.t)
    return found


def _branch_intersection(t, zl, left, right, lo, hi):
    """Intersection time (relative to t) of two lines through sample pairs, or None."""
    (i, j), (m, n) = left, right
    bl = (zl[j] - zl[i]) / (t[j] - t[i])
    br = (zl[n] - zl[m]) / (t[n] - t[m])
    if bl >= br:
        return None
    ts = (zl[m] - br * t[m] - zl[i] + bl * t[i]) / (bl - br)
    if not (t[lo] <= ts <= t[hi]):
        return None
    return ts, zl[i] + bl * (ts - t[i]), left


def _refine_bounce(t, p, k, g, surface: Optional[float] = None):
    """Contact time and point from the two free-flight branches around sample k.

    With gravity removed, z is linear on each side of the contact. The
    default branches are the sample pairs (k-2, k-1) and (k+1, k+2). A hit
    close to the contact can spoil one pair, so the pairings that take
    sample k into one branch are tried as well; with ``surface`` given, the
    candidate contact closest to that height wins.
    """
    if k < 2 or k + 2 >= len(t):
        return float(t[k]), p[k].copy()
    tt = t - t[k]
    zl = p[:, 2] + 0.5 * g * tt ** 2
    configs = [((k - 2, k - 1), (k + 1, k + 2), k - 1, k + 1),
               ((k - 1, k), (k + 1, k + 2), k, k + 1),
               ((k - 2, k - 1), (k, k + 1), k - 1, k)]
    cands = []
    for left, right, lo, hi in configs:
        c = _branch_intersection(tt, zl, left, right, lo, hi)
        if c is not None:
            cands.append(c)
        if surface is None:
            break
    if not cands:
        return float(t[k]), p[k].copy()
    if surface is not None:
        cands.sort(key=lambda c: abs(c[1] - 0.5 * g * c[0] ** 2 - surface))
    ts, zlin, (i, j) = cands[0]
    z = zlin - 0.5 * g * ts * ts
    # horizontal position from the incoming branch
    vxy = (p[j, :2] - p[i, :2]) / (tt[j] - tt[i])
    xy = p[j, :2] + vxy * (ts - tt[j])
    return float(t[k] + ts), np.array([xy[0], xy[1], z])


def detect_bounces(traj: Trajectory, world: WorldGeometry = WorldGeometry(),
                   window: float = BOUNCE_WINDOW, gravity: float = 9.81) -> List[BounceDetection]:
    """Table bounces from local minima of z(t) near the table plane.

    Each minimum is refined to a sub-frame contact estimate; minima whose
    contact height is outside ``table_height +/- window`` are discarded.
    """
    idx, t, p, max_gap = _valid_series(traj)
    out = []
    for k in _extrema(t, p[:, 2], "trough", max_gap):
        tb, pb = _refine_bounce(t, p, k, gravity, world.table_height)
        if abs(pb[2] - world.table_height) > window:
            # a hit right next to the contact spoils one branch; keep the raw sample
            if abs(p[k, 2] - world.table_height) > window:
                continue
            tb, pb = float(t[k]), p[k].copy()
        on_table = world.on_table(pb[0], pb[1])
        half = side_of(pb[0]) if on_table else "off"
        out.append(BounceDetection(tb, pb, bool(on_table), half, int(idx[k])))
    return out


def build_segments(hits: Sequence[HitEvent], bounces: Sequence[BounceDetection],
                   h: HitHeuristics = HitHeuristics()) -> RallyAnnotation:
    """Group events into hit-to-hit segments and check rally plausibility.

    A trailing segment from the last hit to the last on-table bounce is added
    when such bounces exist. Invalid input sets ``valid=False`` with one of
    MissingBounce, TooFewHits, ExtraBounce, NonAlternating; it never raises.
    """
    hits = sorted(hits, key=lambda e: e.t)
    bounces = sorted(bounces, key=lambda e: e.t)
    table_b = [b for b in bounces if b.on_table]
    ann = RallyAnnotation(hits=list(hits), bounces=list(bounces))

    bounds = [(hits[i].t, hits[i + 1].t, hits[i].side, False) for i in range(len(hits) - 1)]
    if hits:
        after = [b for b in table_b if b.t > hits[-1].t]
        if after:
            bounds.append((hits[-1].t, after[-1].t, hits[-1].side, True))
    for t0, t1, side, trailing in bounds:
        n = sum(1 for b in table_b if t0 < b.t <= t1)
        ann.segments.append(Segment(t0, t1, side, n, trailing=trailing))

    if ann.segments and ann.segments[0].bounce_count == 2:
        ann.serve_index = 0

    reason = None
    if len(hits) < h.min_hits:
        reason = "TooFewHits"
    else:
        for i, seg in enumerate(ann.segments):
            if seg.bounce_count == 0:
                reason = "MissingBounce"
            elif seg.bounce_count > 2 or (seg.bounce_count == 2 and i != 0):
                reason = "ExtraBounce"
            if reason:
                break
        if reason is None:
            for a, b in zip(hits, hits[1:]):
                if a.side == b.side:
                    reason = "NonAlternating"
                    break
    ann.valid = reason is None
    ann.reason = reason
    return ann


def ball_frame(v) -> np.ndarray:
    """Rows are the ball-frame axes (x~, y~, z~) in world coordinates.

    y~ is horizontal and orthogonal to the velocity, z~ is world up and x~
    completes a right-handed frame (the horizontal heading).
    """
    v = np.asarray(v, dtype=float)
    y = np.array([-v[1], v[0], 0.0])  # e_z x v
    n = np.linalg.norm(y)
    if n < 1e-9:
        raise DegenerateVelocity("ball frame needs a horizontal velocity component")
    y /= n
    z = np.array([0.0, 0.0, 1.0])
    x = np.cross(y, z)
    return np.vstack([x, y, z])


def classify_spin(omega_hz, v, threshold_hz: float = NO_SPIN_HZ) -> str:
    """Spin category of a spin vector (Hz) for a ball moving with velocity v."""
    w = np.asarray(omega_hz, dtype=float)
    if np.max(np.abs(w)) <= threshold_hz:
        return "no_spin"
    wb = ball_frame(v) @ w
    wy, wz = wb[1], wb[2]
    if abs(wy) >= abs(wz):
        return "topspin" if wy > 0 else "backspin"
    return "side_left" if wz > 0 else "side_right"


def binary_spin_label(omega_hz, v) -> str:
    """Topspin/backspin label by the sign of the ball-frame y~ component."""
    wy = (ball_frame(v) @ np.asarray(omega_hz, dtype=float))[1]
    return "topspin" if wy > 0 else "backspin"


def annotate_rally(traj: Trajectory, world: WorldGeometry = WorldGeometry(),
                   h: HitHeuristics = HitHeuristics()) -> RallyAnnotation:
    """Detect events, build segments and classify the first spin of each segment."""
    ann = build_segments(detect_hits(traj, h), detect_bounces(traj, world), h)
    if traj.has_spin.any():
        vel = traj.velocity()
        for seg in ann.segments:
            # strictly after the hit sample, which still carries the incoming state
            sel = np.flatnonzero((traj.t > seg.t_start) & (traj.t < seg.t_end)
                                 & traj.has_spin & np.all(np.isfinite(vel), axis=1))
            if len(sel):
                k = sel[0]
                try:
                    seg.spin_class = classify_spin(rad_to_hz(traj.omega[k]), vel[k])
                except DegenerateVelocity:
                    seg.spin_class = None
    return ann


@dataclass(frozen=True)
class DuplicationEstimate:
    kind: str  # "periodic", "aperiodic" or "none"
    period: Optional[int] = None
    offset: Optional[int] = None


def estimate_frame_duplication(dup_indices: Sequence[int]) -> DuplicationEstimate:
    """Period and offset of duplicated video frames from their indices.

    The period is the most common spacing between consecutive duplicates,
    ignoring spacing 1; the offset is the most common residue modulo that
    period. Ties in the spacing vote go to the larger spacing, since an
    isolated false detection splits one true spacing into two shorter ones.
    """
    u = [int(i) for i in dup_indices]
    if not u:
        return DuplicationEstimate("none")
    if u[0] < 0 or any(b <= a for a, b in zip(u, u[1:])):
        raise UnsortedInput("indices must be non-negative and strictly increasing")
    if len(u) < 3:
        return DuplicationEstimate("aperiodic")
    spacings = [b - a for a, b in zip(u, u[1:]) if b - a > 1]
    if not spacings:
        return DuplicationEstimate("aperiodic")
    counts = Counter(spacings)
    f = max(counts, key=lambda d: (counts[d], d))
    residues = Counter(x % f for x in u)
    s = max(range(f), key=lambda r: (residues.get(r, 0), -r))
    return DuplicationEstimate("periodic", f, s)
