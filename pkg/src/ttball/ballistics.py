"""Ball flight physics: aerodynamics, RK4 with table impacts, bounce and racket models.

World frame: origin on the floor below the table centre, x along the table
length (net plane x = 0), y across, z up. The table surface is z = table_height.
Spin is angular velocity in rad/s.

The integrator hot loop works on plain floats; a 3-vector numpy round trip per
RK4 stage is several times slower and the generator and fitter both run
hundreds of thousands of steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BadContact, NonFiniteState, NonUnitQuaternion
from .trajectory import Trajectory

ALPHA_SWITCH = 0.4


@dataclass(frozen=True)
class WorldGeometry:
    table_length: float = 2.74
    table_width: float = 1.525
    table_height: float = 0.78
    net_height: float = 0.1525
    ball_radius: float = 0.02
    ball_mass: float = 0.0027

    def __post_init__(self):
        for name in ("table_length", "table_width", "table_height",
                     "net_height", "ball_radius", "ball_mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def half_length(self) -> float:
        return 0.5 * self.table_length

    @property
    def half_width(self) -> float:
        return 0.5 * self.table_width

    @property
    def net_top(self) -> float:
        return self.table_height + self.net_height

    def on_table(self, x: float, y: float) -> bool:
        return abs(x) <= self.half_length and abs(y) <= self.half_width

    def corners(self) -> np.ndarray:
        """Table corners in the order near-left, near-right, far-right, far-left.

        "Near" is the -x end; "left" is +y when looking along +x.
        """
        hl, hw, h = self.half_length, self.half_width, self.table_height
        return np.array([[-hl, hw, h], [-hl, -hw, h], [hl, -hw, h], [hl, hw, h]])


@dataclass(frozen=True)
class AeroParams:
    k_d: float = 3.8e-4
    k_m: float = 3e-6
    gravity: Tuple[float, float, float] = (0.0, 0.0, -9.81)

    def __post_init__(self):
        if self.k_d < 0 or self.k_m < 0:
            raise ValueError("k_d and k_m must be non-negative")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))


@dataclass(frozen=True)
class TableBounceParams:
    """Table contact parameters.

    ``vs_sign="summed"`` evaluates the tangential slip speed with both spin terms
    added; ``"cross"`` uses the contact-point velocity v + omega x (-r e_z),
    which is the form the bounce matrices themselves drive to zero.
    """

    cor_table: float = 0.93
    mu: float = 0.25
    vs_sign: str = "summed"

    def __post_init__(self):
        if not 0 < self.cor_table <= 1:
            raise ValueError("cor_table must lie in (0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.vs_sign not in ("summed", "cross"):
            raise ValueError("vs_sign must be 'summed' or 'cross'")


@dataclass(frozen=True)
class RacketImpactParams:
    cor_racket: float = 0.75
    k_p: float = 0.002
    ball_mass: float = 0.0027
    ball_radius: float = 0.02

    def __post_init__(self):
        if not 0 < self.cor_racket <= 1:
            raise ValueError("cor_racket must lie in (0, 1]")
        if self.k_p < 0:
            raise ValueError("k_p must be non-negative")

    @property
    def inertia(self) -> float:
        """Hollow-sphere moment of inertia (2/3) m r^2."""
        return 2.0 / 3.0 * self.ball_mass * self.ball_radius ** 2

    def matrices(self):
        m, r, kp, inertia = self.ball_mass, self.ball_radius, self.k_p, self.inertia
        a = 1.0 - kp / m
        A = np.diag([a, a, -self.cor_racket])
        B = kp / m * np.array([[0.0, r, 0.0], [-r, 0.0, 0.0], [0.0, 0.0, 0.0]])
        C = kp / inertia * np.array([[0.0, -r, 0.0], [r, 0.0, 0.0], [0.0, 0.0, 0.0]])
        d = 1.0 - kp / inertia * r * r
        D = np.diag([d, d, 1.0])
        return A, B, C, D


def _vec3(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(3)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BallState:
    t: float
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        for name in ("p", "v", "omega"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        if not (math.isfinite(self.t) and np.all(np.isfinite(self.p))
                and np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.omega))):
            raise NonFiniteState("ball state has non-finite components")

    def replace(self, **changes) -> "BallState":
        kw = dict(t=self.t, p=self.p, v=self.v, omega=self.omega)
        kw.update(changes)
        return BallState(**kw)

    def as_tuple(self):
        return (self.t, *self.p.tolist(), *self.v.tolist(), *self.omega.tolist())

    @classmethod
    def from_tuple(cls, s) -> "BallState":
        return cls(s[0], s[1:4], s[4:7], s[7:10])

    def to_record(self) -> dict:
        return {"t": self.t, "p": self.p.tolist(), "v": self.v.tolist(),
                "omega_hz": (self.omega / (2 * math.pi)).tolist()}

    @classmethod
    def from_record(cls, rec: dict) -> "BallState":
        return cls(rec["t"], rec["p"], rec["v"],
                   np.asarray(rec["omega_hz"], dtype=float) * 2 * math.pi)


@dataclass(frozen=True, eq=False)
class BounceEvent:
    t: float
    p: np.ndarray
    pre: BallState
    post: BallState


def aero_acceleration(state: BallState, params: AeroParams = AeroParams(),
                      mass: float = WorldGeometry.ball_mass) -> np.ndarray:
    """Acceleration from drag, Magnus force and gravity: (-k_d|v|v + k_m w x v + m g) / m."""
    v, w = state.v, state.omega
    drag = -params.k_d * np.linalg.norm(v) * v
    magnus = params.k_m * np.cross(w, v)
    return (drag + magnus) / mass + np.asarray(params.gravity)


# ---------------------------------------------------------------------------
# table bounce


def _bounce_matrices(alpha: float, r: float, cor: float):
    """Contact matrices: alpha-parameterized below the switch, fixed above it."""
    a = min(alpha, ALPHA_SWITCH)
    A = np.diag([1.0 - a, 1.0 - a, -cor])
    B = np.array([[0.0, a * r, 0.0], [-a * r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    C = np.array([[0.0, -1.5 * a / r, 0.0], [1.5 * a / r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.diag([1.0 - 1.5 * a, 1.0 - 1.5 * a, 1.0])
    return A, B, C, D


def sliding_matrices(alpha: float, r: float, cor: float):
    """The alpha-dependent matrix set, evaluated at any alpha (used in checks)."""
    A = np.diag([1.0 - alpha, 1.0 - alpha, -cor])
    B = np.array([[0.0, alpha * r, 0.0], [-alpha * r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    C = np.array([[0.0, -1.5 * alpha / r, 0.0], [1.5 * alpha / r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.diag([1.0 - 1.5 * alpha, 1.0 - 1.5 * alpha, 1.0])
    return A, B, C, D


def rolling_matrices(r: float, cor: float):
    """The fixed matrix set (contact point brought to rest)."""
    A = np.diag([0.6, 0.6, -cor])
    B = np.array([[0.0, 0.4 * r, 0.0], [-0.4 * r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    C = np.array([[0.0, -0.6 / r, 0.0], [0.6 / r, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.diag([0.4, 0.4, 1.0])
    return A, B, C, D


def slip_speed(v, omega, r: float, vs_sign: str = "summed") -> float:
    vx, vy, _ = v
    wx, wy, _ = omega
    if vs_sign == "summed":
        return math.hypot(vx + wy * r, vy + wx * r)
    return math.hypot(vx - wy * r, vy + wx * r)


def contact_alpha(v, omega, r: float, params: TableBounceParams) -> float:
    vs = slip_speed(v, omega, r, params.vs_sign)
    num = float(params.mu * (1.0 + params.cor_table) * abs(v[2]))
    # a vanishing slip speed means pure rolling contact
    if vs == 0.0 or num > vs * 1e300:
        return math.inf
    return num / vs


def table_bounce(pre: BallState, world: WorldGeometry = WorldGeometry(),
                 params: TableBounceParams = TableBounceParams()) -> BallState:
    """Apply the linear table-contact model to a ball touching the table plane."""
    if not pre.v[2] < 0:
        raise BadContact("table bounce requires downward velocity")
    r = world.ball_radius
    alpha = contact_alpha(pre.v, pre.omega, r, params)
    A, B, C, D = _bounce_matrices(alpha, r, params.cor_table)
    v_out = A @ pre.v + B @ pre.omega
    w_out = C @ pre.v + D @ pre.omega
    return BallState(pre.t, pre.p, v_out, w_out)


# ---------------------------------------------------------------------------
# racket impact


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a scalar-first unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Scalar-first quaternion with non-negative w for a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def racket_impact(pre_world: BallState, q_r, V_r,
                  params: RacketImpactParams = RacketImpactParams()) -> BallState:
    """Ball state right after a racket contact.

    The racket frame has its z-axis along the rubber normal. Velocities are
    moved into that frame relative to the racket, the linear impact matrices
    are applied, and the result is moved back to the world frame.
    """
    q = np.asarray(q_r, dtype=float).reshape(4)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise NonUnitQuaternion(f"|q| = {np.linalg.norm(q)!r}")
    R = quat_to_matrix(q)
    V = np.asarray(V_r, dtype=float).reshape(3)
    A, B, C, D = params.matrices()
    v_r = R.T @ (pre_world.v - V)
    w_r = R.T @ pre_world.omega
    v_out = R @ (A @ v_r + B @ w_r) + V
    w_out = R @ (C @ v_r + D @ w_r)
    return BallState(pre_world.t, pre_world.p, v_out, w_out)


# ---------------------------------------------------------------------------
# integration


class _Model:
    """Flattened constants for the float-only integrator."""

    __slots__ = ("kd", "km", "gx", "gy", "gz", "H", "hl", "hw", "r", "world", "bounce")

    def __init__(self, world: WorldGeometry, aero: AeroParams, bounce: TableBounceParams):
        m = world.ball_mass
        self.kd = aero.k_d / m
        self.km = aero.k_m / m
        self.gx, self.gy, self.gz = aero.gravity
        self.H = world.table_height
        self.hl = world.half_length
        self.hw = world.half_width
        self.r = world.ball_radius
        self.world = world
        self.bounce = bounce


def _rk4(s, h, M: _Model):
    """One RK4 step of (t, p, v, w); spin is constant in flight."""
    t, px, py, pz, vx, vy, vz, wx, wy, wz = s
    kd, km, gx, gy, gz = M.kd, M.km, M.gx, M.gy, M.gz

    sp = math.sqrt(vx * vx + vy * vy + vz * vz)
    a1x = -kd * sp * vx + km * (wy * vz - wz * vy) + gx
    a1y = -kd * sp * vy + km * (wz * vx - wx * vz) + gy
    a1z = -kd * sp * vz + km * (wx * vy - wy * vx) + gz

    hh = 0.5 * h
    ux, uy, uz = vx + hh * a1x, vy + hh * a1y, vz + hh * a1z
    sp = math.sqrt(ux * ux + uy * uy + uz * uz)
    a2x = -kd * sp * ux + km * (wy * uz - wz * uy) + gx
    a2y = -kd * sp * uy + km * (wz * ux - wx * uz) + gy
    a2z = -kd * sp * uz + km * (wx * uy - wy * ux) + gz

    qx, qy, qz = vx + hh * a2x, vy + hh * a2y, vz + hh * a2z
    sp = math.sqrt(qx * qx + qy * qy + qz * qz)
    a3x = -kd * sp * qx + km * (wy * qz - wz * qy) + gx
    a3y = -kd * sp * qy + km * (wz * qx - wx * qz) + gy
    a3z = -kd * sp * qz + km * (wx * qy - wy * qx) + gz

    ex, ey, ez = vx + h * a3x, vy + h * a3y, vz + h * a3z
    sp = math.sqrt(ex * ex + ey * ey + ez * ez)
    a4x = -kd * sp * ex + km * (wy * ez - wz * ey) + gx
    a4y = -kd * sp * ey + km * (wz * ex - wx * ez) + gy
    a4z = -kd * sp * ez + km * (wx * ey - wy * ex) + gz

    h6 = h / 6.0
    return (
        t + h,
        px + h6 * (vx + 2 * ux + 2 * qx + ex),
        py + h6 * (vy + 2 * uy + 2 * qy + ey),
        pz + h6 * (vz + 2 * uz + 2 * qz + ez),
        vx + h6 * (a1x + 2 * a2x + 2 * a3x + a4x),
        vy + h6 * (a1y + 2 * a2y + 2 * a3y + a4y),
        vz + h6 * (a1z + 2 * a2z + 2 * a3z + a4z),
        wx, wy, wz,
    )


def _bounce_tuple(s, M: _Model):
    """Table bounce on a float state tuple, mirrors :func:`table_bounce`."""
    t, px, py, pz, vx, vy, vz, wx, wy, wz = s
    r, bp = M.r, M.bounce
    if bp.vs_sign == "summed":
        vs = math.hypot(vx + wy * r, vy + wx * r)
    else:
        vs = math.hypot(vx - wy * r, vy + wx * r)
    num = bp.mu * (1.0 + bp.cor_table) * abs(vz)
    a = ALPHA_SWITCH if vs == 0.0 else min(num / vs, ALPHA_SWITCH)
    return (
        t, px, py, pz,
        (1 - a) * vx + a * r * wy,
        (1 - a) * vy - a * r * wx,
        -bp.cor_table * vz,
        -1.5 * a / r * vy + (1 - 1.5 * a) * wx,
        1.5 * a / r * vx + (1 - 1.5 * a) * wy,
        wz,
    )


# event codes returned by _advance
NO_EVENT, TABLE, FLOOR = 0, 1, 2


def _crossing(s, h, level: float, z1: float, M: _Model):
    """Sub-step state where the height reaches ``level`` within [0, h].

    Starts from the linear estimate and refines it with Newton steps on the
    RK4 sub-step, using the vertical velocity as the derivative.
    """
    z0 = s[3]
    tau = h * (z0 - level) / (z0 - z1)
    imp = _rk4(s, tau, M)
    for _ in range(8):
        err = imp[3] - level
        if abs(err) <= 1e-13 or imp[6] == 0.0:
            break
        tau = min(max(tau - err / imp[6], 0.0), h)
        imp = _rk4(s, tau, M)
    return tau, imp


def _advance(s, h, M: _Model, allow_bounce: bool, new=None):
    """Advance by h, resolving at most one table or floor crossing.

    ``new`` may carry the plain RK4 step when the caller already has it.
    Returns (new_state, event_code, pre_impact_state_or_None).
    """
    if new is None:
        new = _rk4(s, h, M)
    z0, z1 = s[3], new[3]
    if not math.isfinite(z1):
        raise NonFiniteState("integration produced a non-finite state")
    H = M.H
    if allow_bounce and z0 > H >= z1:
        tau, imp = _crossing(s, h, H, z1, M)
        if abs(imp[1]) <= M.hl and abs(imp[2]) <= M.hw and imp[6] < 0:
            pre = imp[:3] + (H,) + imp[4:]
            post = _bounce_tuple(pre, M)
            rest = h - tau
            out = _rk4(post, rest, M) if rest > 0 else post
            return out, TABLE, pre
    if z0 > 0.0 >= z1:
        _, imp = _crossing(s, h, 0.0, z1, M)
        return imp[:3] + (0.0,) + imp[4:], FLOOR, None
    return new, NO_EVENT, None


def propagate(start, times: Sequence[float], dt: float, M: _Model, max_bounces: int,
              stop: Optional[Callable] = None):
    """Integrate a float state through the given output times.

    Each interval between consecutive output times is split into equal
    sub-steps no longer than ``dt``. Integration halts at floor contact or when
    ``stop(prev, new, n_bounces)`` returns True; the halting state is appended
    as a final output sample with its own timestamp.

    Returns (states, bounces, halted) where ``bounces`` is a list of
    (pre, post) float tuples.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = tuple(float(x) for x in start)
    H, isfinite = M.H, math.isfinite
    out = [s]
    bounces = []
    halted = False
    for target in times[1:]:
        span = target - s[0]
        n = max(1, int(math.ceil(span / dt - 1e-9)))
        h = span / n
        for _ in range(n):
            new = _rk4(s, h, M)
            z0, z1 = s[3], new[3]
            # plain steps (no plane crossing) skip the event logic
            if z1 > H or (z1 > 0.0 and z0 <= H) or z0 <= 0.0:
                ev = NO_EVENT
            else:
                new, ev, pre = _advance(s, h, M, len(bounces) < max_bounces, new)
            # a NaN or infinity in any component makes the sum non-finite
            if not isfinite(sum(new)):
                raise NonFiniteState("integration produced a non-finite state")
            if ev == TABLE:
                bounces.append((pre, _bounce_tuple(pre, M)))
            elif ev == FLOOR:
                out.append(new)
                return out, bounces, True
            if stop is not None and stop(s, new, len(bounces)):
                s = new
                out.append(new)
                return out, bounces, True
            s = new
        # pin the timestamp to the requested grid to avoid float drift
        s = (float(target),) + s[1:]
        out.append(s)
    return out, bounces, halted


def states_to_trajectory(states) -> Trajectory:
    arr = np.array(states, dtype=float)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 7:10])


def integrate_flight(start: BallState, duration: float, dt: float,
                     world: WorldGeometry = WorldGeometry(),
                     aero: AeroParams = AeroParams(),
                     bounce_params: TableBounceParams = TableBounceParams(),
                     max_bounces: int = 2) -> Tuple[Trajectory, List[BounceEvent]]:
    """Fixed-step RK4 flight with exact table impacts.

    Samples are returned every ``dt`` (plus a final sample at ``duration`` when
    it is not a multiple of ``dt``). A downward crossing of the table plane over
    the table footprint is located by linear interpolation of z inside the
    step, the ball is advanced to that instant, snapped to the surface and
    bounced. Integration stops when the ball reaches the floor.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration < 0:
        raise ValueError("duration must be non-negative")
    M = _Model(world, aero, bounce_params)
    n = int(math.floor(duration / dt + 1e-9))
    times = [start.t + k * dt for k in range(n + 1)]
    if duration - n * dt > 1e-12:
        times.append(start.t + duration)
    states, bounces, _ = propagate(start.as_tuple(), times, dt, M, max_bounces)
    events = [BounceEvent(pre[0], np.array(pre[1:4]), BallState.from_tuple(pre),
                          BallState.from_tuple(post)) for pre, post in bounces]
    return states_to_trajectory(states), events


def state_at_end(start: BallState, duration: float, dt: float,
                 world: WorldGeometry = WorldGeometry(), aero: AeroParams = AeroParams(),
                 bounce_params: TableBounceParams = TableBounceParams(),
                 max_bounces: int = 2) -> BallState:
    M = _Model(world, aero, bounce_params)
    states, _, _ = propagate(start.as_tuple(), [start.t, start.t + duration], dt, M, max_bounces)
    return BallState.from_tuple(states[-1])
