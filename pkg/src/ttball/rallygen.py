"""Synthetic full rallies stitched from validated flight segments.

A rally is a throw, a serve launched from the throw apex, and a chain of
returns. Each segment after the throw starts where the previous one ended;
only the velocity and spin are taken from a pool of pre-validated initial
conditions, chosen by nearest start position. The velocity jump at each
stitch is the hit.

All simulation runs on one global time grid of step ``dt`` so segment
boundaries fall on shared samples.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ballistics import (AeroParams, BounceEvent, TableBounceParams, WorldGeometry, _Model,
                         propagate)
from .errors import PoolExhausted
from .trajectory import Trajectory, hz_to_rad, rad_to_hz

KINDS = ("throw", "serve", "return")
INVALID_REASONS = ("NetFault", "OutOfBounds", "MissingBounce", "ExtraBounce", "WrongSide",
                   "FloorContact", "NoApex", "Reversal", "TooShort", "TooHigh", "LowEnd",
                   "EndTooClose", "Collision", "TooFewSamples")

SIM_DT = 1.0 / 240.0
MAX_SEGMENT_TIME = 2.5
MIN_SEGMENT_TIME = 0.25
# an apex ending a segment must sit this far above the table so the stitch
# sample is never mistaken for a bounce
MIN_END_CLEARANCE = 0.15
MIN_END_ABS_X = 0.5
MAX_HEIGHT = 2.8
# generated bounces keep clear of the table edges so that a coarse
# re-detection cannot place them on the wrong side of a line
EDGE_MARGIN = 0.02
THROW_JITTER = 0.02


@dataclass(frozen=True)
class PoolRanges:
    """Sampling box for initial conditions, stated for a hitter on the -x side."""

    serve_depth: Tuple[float, float] = (0.0, 0.6)
    serve_height: Tuple[float, float] = (0.2, 0.5)
    serve_speed: Tuple[float, float] = (2.0, 8.0)
    return_depth: Tuple[float, float] = (0.0, 1.0)
    return_height: Tuple[float, float] = (-0.1, 0.6)
    return_speed: Tuple[float, float] = (3.0, 12.0)
    throw_depth: Tuple[float, float] = (0.05, 0.6)
    throw_height: Tuple[float, float] = (0.0, 0.3)
    throw_speed: Tuple[float, float] = (1.0, 3.0)
    throw_back_speed: Tuple[float, float] = (0.05, 0.3)
    spin_max_hz: float = 50.0
    lateral_fraction: float = 0.8


@dataclass(frozen=True, eq=False)
class ConditionPool:
    """Validated initial conditions of one kind (spin in Hz)."""

    kind: str
    start_p: np.ndarray
    start_v: np.ndarray
    start_omega: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pool kind {self.kind!r}")
        for name in ("start_p", "start_v", "start_omega"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1, 3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.start_p)

    def entry(self, i: int):
        return self.start_p[i], self.start_v[i], self.start_omega[i]

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for arr in (self.start_p, self.start_v, self.start_omega):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_records(self) -> List[dict]:
        return [{"kind": self.kind, "p": p.tolist(), "v": v.tolist(), "omega_hz": w.tolist()}
                for p, v, w in zip(self.start_p, self.start_v, self.start_omega)]


@dataclass(frozen=True, eq=False)
class SimulatedSegment:
    kind: str
    traj: Trajectory
    bounces: Tuple[BounceEvent, ...]
    # indices into the global time grid
    k_start: int
    k_end: int
    # launch velocity at the first sample (m/s)
    v0: Optional[np.ndarray] = None

    @property
    def t_start(self) -> float:
        return float(self.traj.t[0])

    @property
    def t_end(self) -> float:
        return float(self.traj.t[-1])


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True)
class FailedPoint:
    """A rally whose stitching ran out of attempts."""

    stage: str
    n_segments: int


@dataclass(frozen=True, eq=False)
class StitchedRally:
    segments: Tuple[SimulatedSegment, ...]
    dt: float = SIM_DT
    seed: Optional[int] = None

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    @property
    def total_duration(self) -> float:
        return self.segments[-1].t_end - self.segments[0].t_start

    @property
    def hit_times(self) -> List[float]:
        return [s.t_start for s in self.segments if s.kind != "throw"]

    @property
    def hit_positions(self) -> np.ndarray:
        return np.array([s.traj.p3d[0] for s in self.segments if s.kind != "throw"])

    @property
    def bounce_events(self) -> List[BounceEvent]:
        return [b for s in self.segments for b in s.bounces]

    def trajectory(self) -> Trajectory:
        """Dense trajectory on the simulation grid; stitch samples appear once."""
        t = [self.segments[0].traj.t]
        p = [self.segments[0].traj.p3d]
        w = [self.segments[0].traj.omega]
        for s in self.segments[1:]:
            t.append(s.traj.t[1:])
            p.append(s.traj.p3d[1:])
            w.append(s.traj.omega[1:])
        return Trajectory(np.concatenate(t), np.vstack(p), np.vstack(w))

    def sampled(self, rate_hz: float, offset: int = 0) -> Trajectory:
        """Trajectory resampled to an integer divisor of the simulation rate."""
        stride = int(round(self.sample_rate / rate_hz))
        if stride < 1 or abs(self.sample_rate / stride - rate_hz) > 1e-6 * rate_hz:
            raise ValueError(f"{rate_hz} Hz does not divide the simulation rate")
        return self.trajectory().resample_every(stride, offset)

    def ground_truth(self) -> dict:
        segs = []
        for s in self.segments:
            segs.append({
                "kind": s.kind,
                "t_start": s.t_start,
                "t_end": s.t_end,
                "start_p": s.traj.p3d[0].tolist(),
                "start_v": None if s.v0 is None else s.v0.tolist(),
                "start_omega_hz": rad_to_hz(s.traj.omega[0]).tolist(),
                "bounces": [{"t": b.t, "p": b.p.tolist()} for b in s.bounces],
            })
        return {
            "seed": self.seed,
            "dt": self.dt,
            "hits": [{"t": s.t_start, "p": s.traj.p3d[0].tolist(),
                      "side": "near" if s.traj.p3d[0, 0] < 0 else "far"}
                     for s in self.segments if s.kind != "throw"],
            "bounces": [{"t": b.t, "p": b.p.tolist()} for b in self.bounce_events],
            "segments": segs,
        }

    def fingerprint(self) -> str:
        tr = self.trajectory()
        return hashlib.sha256(np.ascontiguousarray(tr.p3d).tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# validity


def _net_crossings(p: np.ndarray):
    """Interpolated z at every crossing of the net plane x = 0."""
    x = p[:, 0]
    out = []
    for i in np.flatnonzero(np.sign(x[:-1]) * np.sign(x[1:]) < 0):
        a = x[i] / (x[i] - x[i + 1])
        out.append(p[i, 2] + a * (p[i + 1, 2] - p[i, 2]))
    return out


def is_valid_trajectory(traj: Trajectory, kind: str, world: WorldGeometry = WorldGeometry(),
                        bounces: Optional[Sequence[BounceEvent]] = None,
                        edge_margin: float = 0.0) -> Validity:
    """Check one segment against the rules for its kind.

    ``bounces`` are the simulator's table contacts; when omitted they are
    detected from the samples. Bounces closer than ``edge_margin`` to a
    table edge count as out of bounds. Serves and returns must end at the first apex
    after their last bounce (this is where the next hit happens), keep a
    constant direction along x, and last at least MIN_SEGMENT_TIME.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if len(traj) < 2 or not traj.valid3d.all():
        return Validity(False, "TooFewSamples")
    p = traj.p3d
    if bounces is None:
        from .segmentation import detect_bounces
        bounces = [BounceEvent(b.t, b.p, None, None) for b in detect_bounces(traj, world)]
    H = world.table_height
    x0 = p[0, 0]
    side = np.sign(x0)
    if np.min(p[:, 2]) <= world.ball_radius:
        return Validity(False, "FloorContact")
    if np.max(p[:, 2]) > MAX_HEIGHT:
        return Validity(False, "TooHigh")

    if kind == "throw":
        if bounces:
            return Validity(False, "ExtraBounce")
        if p[-1, 2] <= p[0, 2] or not _ends_at_apex(traj):
            return Validity(False, "NoApex")
        if p[-1, 2] < H + MIN_END_CLEARANCE:
            return Validity(False, "LowEnd")
        # the ball stays behind the server's end line
        if np.any(np.abs(p[:, 0]) < world.half_length) or np.any(np.sign(p[:, 0]) != side):
            return Validity(False, "WrongSide")
        return Validity(True)

    need = 2 if kind == "serve" else 1
    for b in bounces:
        if (abs(b.p[0]) > world.half_length - edge_margin
                or abs(b.p[1]) > world.half_width - edge_margin):
            return Validity(False, "OutOfBounds")
    if len(bounces) < need:
        return Validity(False, "MissingBounce")
    if len(bounces) > need:
        return Validity(False, "ExtraBounce")
    sides = [np.sign(b.p[0]) for b in bounces]
    expected = [side, -side] if kind == "serve" else [-side]
    if sides != expected:
        return Validity(False, "WrongSide")
    crossings = _net_crossings(p)
    if len(crossings) != 1:
        return Validity(False, "Reversal")
    if crossings[0] <= world.net_top:
        return Validity(False, "NetFault")
    if kind == "serve" and not (bounces[0].t < _crossing_time(traj) < bounces[1].t):
        return Validity(False, "NetFault")
    dx = np.diff(p[:, 0])
    if np.any(dx * -side <= 0):
        return Validity(False, "Reversal")
    if traj.t[-1] - traj.t[0] < MIN_SEGMENT_TIME:
        return Validity(False, "TooShort")
    if traj.t[-1] <= bounces[-1].t:
        return Validity(False, "NoApex")
    if not _ends_at_apex(traj):
        return Validity(False, "NoApex")
    if p[-1, 2] < H + MIN_END_CLEARANCE:
        return Validity(False, "LowEnd")
    if abs(p[-1, 0]) < MIN_END_ABS_X:
        return Validity(False, "EndTooClose")
    return Validity(True)


def _ends_at_apex(traj: Trajectory) -> bool:
    """The last sample lies just past a height maximum."""
    if len(traj) < 3:
        return False
    t, z = traj.t[-3:], traj.p3d[-3:, 2]
    # second-order one-sided derivative at the last sample
    h1, h2 = t[1] - t[0], t[2] - t[1]
    vz = (z[2] - z[1]) / h2 + (z[2] - z[1]) / (h1 + h2) - (z[1] - z[0]) / h1 * h2 / (h1 + h2)
    return bool(z[1] > z[0] and -0.1 <= vz <= 0.02)


def _crossing_time(traj: Trajectory) -> float:
    x = traj.p3d[:, 0]
    i = int(np.flatnonzero(np.sign(x[:-1]) * np.sign(x[1:]) < 0)[0])
    a = x[i] / (x[i] - x[i + 1])
    return float(traj.t[i] + a * (traj.t[i + 1] - traj.t[i]))


# ---------------------------------------------------------------------------
# simulation of one segment


def _apex_stop(need: int):
    def stop(prev, new, nb):
        return nb >= need and prev[6] > 0.0 >= new[6]
    return stop


def simulate_segment(kind: str, k_start: int, p, v, omega_rad, M: _Model,
                     dt: float = SIM_DT, max_time: float = MAX_SEGMENT_TIME) -> SimulatedSegment:
    """Fly from grid index ``k_start`` until the apex that ends a segment of this kind.

    Throws end at their own apex; serves and returns at the first apex after
    two or one bounces. The flight also stops on floor contact or after
    ``max_time``.
    """
    need = {"throw": 0, "serve": 2, "return": 1}[kind]
    n = int(round(max_time / dt))
    times = [(k_start + i) * dt for i in range(n + 1)]
    start = (times[0],) + tuple(float(a) for a in p) + tuple(float(a) for a in v) \
        + tuple(float(a) for a in omega_rad)
    # one extra bounce is allowed so that illegal rollouts are recognisable
    states, bounces, _ = propagate(start, times, dt, M, need + 1, stop=_apex_stop(need))
    arr = np.array(states)
    traj = Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 7:10])
    events = tuple(BounceEvent(pre[0], np.array(pre[1:4]), None, None) for pre, _ in bounces)
    return SimulatedSegment(kind, traj, events, k_start, k_start + len(arr) - 1,
                            np.array(v, dtype=float))


def _segment_ok(seg: SimulatedSegment, world: WorldGeometry) -> Validity:
    return is_valid_trajectory(seg.traj, seg.kind, world, seg.bounces, EDGE_MARGIN)


# ---------------------------------------------------------------------------
# pools


def _mirror(a: np.ndarray) -> np.ndarray:
    """Half-turn about the vertical axis: the same shot from the other end."""
    return a * np.array([-1.0, -1.0, 1.0])


def _sample_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    if radius <= 0:
        return np.zeros(3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * radius * rng.uniform() ** (1.0 / 3.0)


def _sample_candidate(kind: str, rng: np.random.Generator, world: WorldGeometry,
                      ranges: PoolRanges):
    hl, hw, H = world.half_length, world.half_width, world.table_height
    if kind == "throw":
        p = np.array([-hl - rng.uniform(*ranges.throw_depth),
                      rng.uniform(-1, 1) * hw * ranges.lateral_fraction,
                      H + rng.uniform(*ranges.throw_height)])
        v = np.array([-rng.uniform(*ranges.throw_back_speed), rng.uniform(-0.1, 0.1),
                      rng.uniform(*ranges.throw_speed)])
        w = np.zeros(3)
    else:
        if kind == "serve":
            depth, height, speed = ranges.serve_depth, ranges.serve_height, ranges.serve_speed
            elev = math.radians(rng.uniform(-35.0, 10.0))
        else:
            depth, height, speed = ranges.return_depth, ranges.return_height, ranges.return_speed
            elev = math.radians(rng.uniform(-15.0, 30.0))
        p = np.array([-hl - rng.uniform(*depth),
                      rng.uniform(-1, 1) * hw * ranges.lateral_fraction,
                      H + rng.uniform(*height)])
        # aim at a random point across the table in plan view
        aim_y = rng.uniform(-1, 1) * hw * 0.8
        heading = math.atan2(aim_y - p[1], hl - p[0])
        s = rng.uniform(*speed)
        v = s * np.array([math.cos(elev) * math.cos(heading),
                          math.cos(elev) * math.sin(heading), math.sin(elev)])
        w = _sample_ball(rng, ranges.spin_max_hz)
    if rng.uniform() < 0.5:
        p, v, w = _mirror(p), _mirror(v), _mirror(w)
    return p, v, w


def build_pools(n_per_kind: int, world: WorldGeometry = WorldGeometry(),
                aero: AeroParams = AeroParams(),
                bounce_params: TableBounceParams = TableBounceParams(),
                rng_seed: int = 0, ranges: PoolRanges = PoolRanges(),
                dt: float = SIM_DT, kinds: Sequence[str] = KINDS):
    """Rejection-sample ``n_per_kind`` valid initial conditions for each kind.

    Returns a dict kind -> ConditionPool. Raises PoolExhausted when the
    acceptance rate falls below 0.1% after at least 1000 draws.
    """
    if n_per_kind < 1:
        raise ValueError("n_per_kind must be at least 1")
    M = _Model(world, aero, bounce_params)
    seeds = np.random.SeedSequence(rng_seed).spawn(len(KINDS))
    pools = {}
    for kind, ss in zip(KINDS, seeds):
        if kind not in kinds:
            continue
        rng = np.random.default_rng(ss)
        P, V, W = [], [], []
        draws = 0
        while len(P) < n_per_kind:
            draws += 1
            p, v, w = _sample_candidate(kind, rng, world, ranges)
            seg = simulate_segment(kind, 0, p, v, hz_to_rad(w), M, dt)
            if _segment_ok(seg, world):
                P.append(p)
                V.append(v)
                W.append(w)
            if draws >= 1000 and len(P) < 1e-3 * draws:
                raise PoolExhausted(f"{kind} pool: {len(P)} accepted of {draws} draws")
        pools[kind] = ConditionPool(kind, P, V, W)
    return pools


# ---------------------------------------------------------------------------
# stitching


def stitch_next_segment(r_start, pool: ConditionPool, max_attempts: int,
                        rng: Optional[np.random.Generator] = None, *,
                        used: Optional[np.ndarray] = None, k_start: int = 0,
                        M: Optional[_Model] = None, world: WorldGeometry = WorldGeometry(),
                        dt: float = SIM_DT) -> Optional[SimulatedSegment]:
    """Continue a rally from ``r_start`` with the nearest unused pool entries.

    Each attempt takes the entry whose start position is closest to
    ``r_start``, marks it used, and flies its velocity and spin from
    ``r_start``. Returns the first valid segment, or None after
    ``max_attempts`` tries. ``used`` is the rally-local consumption mask.
    """
    if len(pool) == 0:
        return None
    if used is None:
        used = np.zeros(len(pool), dtype=bool)
    if M is None:
        M = _Model(world, AeroParams(), TableBounceParams())
    r = np.asarray(r_start, dtype=float)
    d2 = np.sum((pool.start_p - r) ** 2, axis=1)
    for _ in range(max_attempts):
        d2m = np.where(used, np.inf, d2)
        i = int(np.argmin(d2m))
        if not np.isfinite(d2m[i]):
            return None
        used[i] = True
        seg = simulate_segment(pool.kind, k_start, r, pool.start_v[i],
                               hz_to_rad(pool.start_omega[i]), M, dt)
        if _segment_ok(seg, world):
            return seg
    return None


def build_stitched_rally(pools, max_segments: Optional[int], rng: np.random.Generator,
                         world: WorldGeometry = WorldGeometry(),
                         aero: AeroParams = AeroParams(),
                         bounce_params: TableBounceParams = TableBounceParams(),
                         max_attempts: int = 10, dt: float = SIM_DT, seed=None):
    """Throw, serve and ``max_segments`` returns (random in [1, 10] when None).

    Returns a StitchedRally, or a FailedPoint if any stitch fails.
    """
    if max_segments is None:
        max_segments = int(rng.integers(1, 11))
    M = _Model(world, aero, bounce_params)
    throws = pools["throw"]
    if len(throws) == 0:
        return FailedPoint("throw", 0)
    # a pool throw with a small random perturbation, so that every seed
    # starts from a distinct state
    throw = None
    for _ in range(max_attempts):
        i = int(rng.integers(len(throws)))
        p0 = throws.start_p[i] + rng.uniform(-THROW_JITTER, THROW_JITTER, 3)
        v0 = throws.start_v[i] * (1.0 + rng.uniform(-THROW_JITTER, THROW_JITTER, 3))
        cand = simulate_segment("throw", 0, p0, v0, hz_to_rad(throws.start_omega[i]), M, dt)
        if _segment_ok(cand, world):
            throw = cand
            break
    if throw is None:
        return FailedPoint("throw", 0)
    segments = [throw]
    used = {k: np.zeros(len(pools[k]), dtype=bool) for k in ("serve", "return")}
    plan = ["serve"] + ["return"] * max_segments
    for kind in plan:
        prev = segments[-1]
        seg = stitch_next_segment(prev.traj.p3d[-1], pools[kind], max_attempts, rng,
                                  used=used[kind], k_start=prev.k_end, M=M, world=world, dt=dt)
        if seg is None:
            return FailedPoint(kind, len(segments))
        segments.append(seg)
    return StitchedRally(tuple(segments), dt, seed)


def generate_rally(seed: int, pools, world: WorldGeometry = WorldGeometry(),
                   aero: AeroParams = AeroParams(),
                   bounce_params: TableBounceParams = TableBounceParams(),
                   max_segments: Optional[int] = None, max_attempts: int = 10,
                   dt: float = SIM_DT):
    rng = np.random.default_rng(seed)
    return build_stitched_rally(pools, max_segments, rng, world, aero, bounce_params,
                                max_attempts, dt, seed)


def cut_subsequence(traj: Trajectory, rng: np.random.Generator, min_len: int = 20,
                    max_len: int = 250) -> Trajectory:
    """Random contiguous window with a length drawn from [min_len, max_len]."""
    n = len(traj)
    if n <= min_len:
        return traj
    length = int(rng.integers(min_len, min(max_len, n) + 1))
    start = int(rng.integers(0, n - length + 1))
    return traj.subset(slice(start, start + length))
