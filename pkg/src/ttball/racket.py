"""Racket stroke recovery from a ball's incoming state and its next bounce.

Given the incoming ball state at the hit, a target bounce point, the flight
time to that bounce and a target outgoing spin, find a racket orientation
and velocity whose impact sends the ball to the bounce point at exactly that
time while matching the spin as well as possible.

The impact model is isotropic in the racket plane, so only the racket normal
matters. For a fixed normal the outgoing velocity is affine in the racket
velocity, which lets an inner Newton solve place the bounce exactly. An
outer least-squares search over the normal then trades spin error against
penalties for the stroke constraints:

* the racket moves along its own normal,
* the racket faces the net,
* the ball approaches the racket face,
* the ball clears the net by ``net_clearance``,
* the ball does not touch the table before the target bounce.

Penalty weights grow over a few rounds; constraints are enforced with a
small internal margin so the final answer satisfies them exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
from scipy.optimize import least_squares

from .ballistics import (AeroParams, BallState, RacketImpactParams, TableBounceParams,
                         WorldGeometry, _Model, _rk4, quat_to_matrix)
from .errors import BadProblem, NonFiniteState, NonUnitQuaternion
from .trajectory import Trajectory, hz_to_rad, rad_to_hz


@dataclass(frozen=True, eq=False)
class StrokeProblem:
    pre_state: BallState
    omega_tgt_hz: np.ndarray
    p_tgt: np.ndarray
    t_flight: float
    alpha_w: float = 1.0
    beta_w: float = 100.0
    net_clearance: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "omega_tgt_hz", np.array(self.omega_tgt_hz, dtype=float).reshape(3))
        object.__setattr__(self, "p_tgt", np.array(self.p_tgt, dtype=float).reshape(3))

    def validate(self, world: WorldGeometry):
        if not (self.t_flight > 0 and math.isfinite(self.t_flight)):
            raise BadProblem("t_flight must be positive")
        if self.alpha_w < 0 or not self.beta_w > 0:
            raise BadProblem("weights must satisfy alpha_w >= 0 and beta_w > 0")
        if self.net_clearance < 0:
            raise BadProblem("net clearance must be non-negative")
        if abs(self.p_tgt[2] - world.table_height) > 1e-9:
            raise BadProblem("target must lie on the table plane")
        if not world.on_table(self.p_tgt[0], self.p_tgt[1]):
            raise BadProblem("target outside the table")
        x = self.pre_state.p[0]
        if x == 0 or np.sign(x) == np.sign(self.p_tgt[0]):
            raise BadProblem("target must be on the half opposite the hitter")
        if self.pre_state.p[2] <= world.table_height:
            raise BadProblem("hit position must be above the table plane")

    def to_record(self) -> dict:
        return {"pre_state": self.pre_state.to_record(),
                "omega_tgt_hz": self.omega_tgt_hz.tolist(), "p_tgt": self.p_tgt.tolist(),
                "t_flight": self.t_flight, "alpha_w": self.alpha_w, "beta_w": self.beta_w,
                "net_clearance": self.net_clearance}

    @classmethod
    def from_record(cls, rec: dict) -> "StrokeProblem":
        return cls(BallState.from_record(rec["pre_state"]), rec["omega_tgt_hz"], rec["p_tgt"],
                   rec["t_flight"], rec.get("alpha_w", 1.0), rec.get("beta_w", 100.0),
                   rec.get("net_clearance", 0.02))


@dataclass(frozen=True, eq=False)
class RacketStroke:
    q_r: np.ndarray
    V_r: np.ndarray
    t_net: float
    bounce_error: float
    spin_error: float
    converged: bool
    iterations: int
    objective: float = float("nan")

    def __post_init__(self):
        q = np.array(self.q_r, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise NonUnitQuaternion(f"|q| = {np.linalg.norm(q)!r}")
        object.__setattr__(self, "q_r", q)
        object.__setattr__(self, "V_r", np.array(self.V_r, dtype=float).reshape(3))

    @property
    def normal(self) -> np.ndarray:
        return quat_to_matrix(self.q_r)[:, 2]

    def to_record(self) -> dict:
        return {"q_r": self.q_r.tolist(), "V_r": self.V_r.tolist(), "t_net": self.t_net,
                "bounce_error": self.bounce_error, "spin_error": self.spin_error,
                "converged": self.converged, "iterations": self.iterations,
                "objective": self.objective}

    @classmethod
    def from_record(cls, rec: dict) -> "RacketStroke":
        return cls(rec["q_r"], rec["V_r"], rec["t_net"], rec["bounce_error"], rec["spin_error"],
                   rec["converged"], rec["iterations"], rec.get("objective", float("nan")))


@dataclass(frozen=True)
class SolverConfig:
    node_count: int = 40
    multistart: int = 8
    # angular offset (rad) of the perturbed starts from the seed normal
    start_spread: float = 0.25
    penalty_schedule: Tuple[float, ...] = (1e2, 1e4, 1e6, 1e8, 1e10)
    # internal safety margins so penalty solutions meet the true constraints
    margin_speed: float = 1e-3
    margin_facing: float = 1e-3
    margin_height: float = 1e-3
    landing_tol: float = 1e-9
    newton_max: int = 30
    outer_max_nfev: int = 200
    # stop at the first start that meets every constraint
    stop_at_feasible: bool = True


# ---------------------------------------------------------------------------
# geometry helpers


def quat_from_normal(n) -> np.ndarray:
    """Shortest-arc unit quaternion turning e_z onto the unit vector n."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    if n[2] < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    q = np.array([1.0 + n[2], -n[1], n[0], 0.0])
    return q / np.linalg.norm(q)


def _impact_affine(R: np.ndarray, pre: BallState, params: RacketImpactParams):
    """Outgoing (v, w) as affine maps of the racket velocity V.

    v+ = Gv V + cv,  w+ = Gw V + cw.
    """
    A, B, C, D = params.matrices()
    RA = R @ A @ R.T
    RC = R @ C @ R.T
    Gv = np.eye(3) - RA
    cv = RA @ pre.v + R @ B @ R.T @ pre.omega
    Gw = -RC
    cw = RC @ pre.v + R @ D @ R.T @ pre.omega
    return Gv, cv, Gw, cw


def _fly(p, v, w, t_flight: float, n: int, M: _Model):
    """``n`` fixed RK4 steps of free flight; returns the node states (t, p, v, w)."""
    s = (0.0, float(p[0]), float(p[1]), float(p[2]), float(v[0]), float(v[1]), float(v[2]),
         float(w[0]), float(w[1]), float(w[2]))
    h = t_flight / n
    nodes = [s]
    for _ in range(n):
        s = _rk4(s, h, M)
        nodes.append(s)
    return nodes


def _fly_end(p, v, w, t_flight: float, n: int, M: _Model):
    """Final position of :func:`_fly`, with the RK4 stages inlined for speed."""
    px, py, pz = float(p[0]), float(p[1]), float(p[2])
    vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
    wx, wy, wz = float(w[0]), float(w[1]), float(w[2])
    kd, km, gx, gy, gz = M.kd, M.km, M.gx, M.gy, M.gz
    sqrt = math.sqrt
    h = t_flight / n
    hh = 0.5 * h
    h6 = h / 6.0
    for _ in range(n):
        sp = sqrt(vx * vx + vy * vy + vz * vz)
        a1x = -kd * sp * vx + km * (wy * vz - wz * vy) + gx
        a1y = -kd * sp * vy + km * (wz * vx - wx * vz) + gy
        a1z = -kd * sp * vz + km * (wx * vy - wy * vx) + gz
        ux, uy, uz = vx + hh * a1x, vy + hh * a1y, vz + hh * a1z
        sp = sqrt(ux * ux + uy * uy + uz * uz)
        a2x = -kd * sp * ux + km * (wy * uz - wz * uy) + gx
        a2y = -kd * sp * uy + km * (wz * ux - wx * uz) + gy
        a2z = -kd * sp * uz + km * (wx * uy - wy * ux) + gz
        qx, qy, qz = vx + hh * a2x, vy + hh * a2y, vz + hh * a2z
        sp = sqrt(qx * qx + qy * qy + qz * qz)
        a3x = -kd * sp * qx + km * (wy * qz - wz * qy) + gx
        a3y = -kd * sp * qy + km * (wz * qx - wx * qz) + gy
        a3z = -kd * sp * qz + km * (wx * qy - wy * qx) + gz
        ex, ey, ez = vx + h * a3x, vy + h * a3y, vz + h * a3z
        sp = sqrt(ex * ex + ey * ey + ez * ez)
        a4x = -kd * sp * ex + km * (wy * ez - wz * ey) + gx
        a4y = -kd * sp * ey + km * (wz * ex - wx * ez) + gy
        a4z = -kd * sp * ez + km * (wx * ey - wy * ex) + gz
        px += h6 * (vx + 2 * ux + 2 * qx + ex)
        py += h6 * (vy + 2 * uy + 2 * qy + ey)
        pz += h6 * (vz + 2 * uz + 2 * qz + ez)
        vx += h6 * (a1x + 2 * a2x + 2 * a3x + a4x)
        vy += h6 * (a1y + 2 * a2y + 2 * a3y + a4y)
        vz += h6 * (a1z + 2 * a2z + 2 * a3z + a4z)
    return np.array([px, py, pz])


def _net_crossing(nodes) -> Tuple[float, float]:
    """(time, height) where the flight first crosses x = 0, or (nan, nan)."""
    for a, b in zip(nodes, nodes[1:]):
        if (a[1] < 0.0) != (b[1] < 0.0):
            f = a[1] / (a[1] - b[1])
            return a[0] + f * (b[0] - a[0]), a[3] + f * (b[3] - a[3])
    return float("nan"), float("nan")


def rollout_stroke(pre_state: BallState, stroke: RacketStroke, t_flight: float,
                   node_count: int = 40, params: RacketImpactParams = RacketImpactParams(),
                   aero: AeroParams = AeroParams(), world: WorldGeometry = WorldGeometry()):
    """Forward simulation of a stroke: racket impact, then free flight for t_flight.

    The flight uses ``node_count`` fixed RK4 steps and ignores table contacts.
    Returns (bounce_point, omega_plus_rad, trajectory).
    """
    from .ballistics import racket_impact
    post = racket_impact(pre_state, stroke.q_r, stroke.V_r, params)
    M = _Model(world, aero, TableBounceParams())
    nodes = _fly(post.p, post.v, post.omega, t_flight, node_count, M)
    arr = np.array(nodes)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteState("stroke rollout diverged")
    traj = Trajectory(pre_state.t + arr[:, 0], arr[:, 1:4], arr[:, 7:10])
    return arr[-1, 1:4].copy(), post.omega.copy(), traj


# ---------------------------------------------------------------------------
# solver


class _StrokeModel:
    def __init__(self, problem: StrokeProblem, params, aero, world, cfg: SolverConfig):
        self.pb = problem
        self.params = params
        self.world = world
        self.cfg = cfg
        self.M = _Model(world, aero, TableBounceParams())
        self.side = float(np.sign(problem.pre_state.p[0]))
        self.to_net = np.array([-self.side, 0.0, 0.0])
        self.w_tgt = hz_to_rad(problem.omega_tgt_hz)
        self.J = None
        self.V = None

    def frame(self, n0):
        """Tangent basis at n0: a vertical-plane direction and its horizontal partner."""
        ez = np.array([0.0, 0.0, 1.0])
        t2 = ez - (ez @ n0) * n0
        if np.linalg.norm(t2) < 1e-9:
            t2 = self.to_net - (self.to_net @ n0) * n0
        t2 /= np.linalg.norm(t2)
        t1 = np.cross(n0, t2)
        return t1, t2

    def normal(self, x, base):
        n0, t1, t2 = base
        n = n0 + x[0] * t1 + x[1] * t2
        return n / np.linalg.norm(n)

    def land(self, R, V0):
        """Racket velocity placing the bounce on target for orientation R."""
        pb, cfg = self.pb, self.cfg
        Gv, cv, Gw, cw = _impact_affine(R, pb.pre_state, self.params)
        p = pb.pre_state.p
        n = cfg.node_count

        def end(V):
            return _fly_end(p, Gv @ V + cv, Gw @ V + cw, pb.t_flight, n, self.M) - pb.p_tgt

        def jac(V, e0):
            J = np.empty((3, 3))
            for i in range(3):
                d = V.copy()
                d[i] += 1e-6
                J[:, i] = (end(d) - e0) / 1e-6
            return J

        # quasi-Newton with Broyden updates; the Jacobian is carried over
        # between calls and rebuilt only when progress stalls
        V = np.array(V0, dtype=float)
        e = end(V)
        fresh = self.J is None
        J = jac(V, e) if fresh else self.J
        err = np.linalg.norm(e)
        it = 0
        while err > cfg.landing_tol and it < cfg.newton_max:
            it += 1
            try:
                step = np.linalg.solve(J, -e)
            except np.linalg.LinAlgError:
                if fresh:
                    break
                J, fresh = jac(V, e), True
                continue
            Vn = V + step
            en = end(Vn)
            errn = np.linalg.norm(en)
            if np.isfinite(errn) and errn < 0.5 * err:
                J = J + np.outer(en - e - J @ step, step) / (step @ step)
                V, e, err, fresh = Vn, en, errn, False
                continue
            if err < 10 * cfg.landing_tol or fresh:
                if np.isfinite(errn) and errn < err:
                    V, e, err = Vn, en, errn
                    continue
                break
            J, fresh = jac(V, e), True
        self.J = J
        nodes = _fly(p, Gv @ V + cv, Gw @ V + cw, pb.t_flight, n, self.M)
        return V, e, nodes, Gw, cw

    def evaluate(self, n, V0, rho: float):
        """Residual vector and diagnostics for racket normal n."""
        pb, cfg = self.pb, self.cfg
        q = quat_from_normal(n)
        R = quat_to_matrix(q)
        V, e, nodes, Gw, cw = self.land(R, V0)
        w_plus = Gw @ V + cw
        spin_err = rad_to_hz(w_plus) - pb.omega_tgt_hz
        t_net, z_net = _net_crossing(nodes)
        g = self.constraints(n, V, nodes, z_net)
        margins = np.array([cfg.margin_speed, cfg.margin_facing, cfg.margin_speed,
                            cfg.margin_height, cfg.margin_height])
        viol = np.maximum(0.0, margins - g)
        res = np.concatenate([math.sqrt(pb.alpha_w) * spin_err,
                              math.sqrt(pb.beta_w) * e,
                              math.sqrt(rho) * viol])
        return res, dict(q=q, V=V, e=e, nodes=nodes, t_net=t_net, g=g,
                         spin_err=float(np.linalg.norm(spin_err)))

    def constraints(self, n, V, nodes, z_net):
        """Constraint values; each must be >= 0."""
        world, pb = self.world, self.pb
        v_rel_n = float(n @ (pb.pre_state.v - V))
        if math.isnan(z_net):
            net = -1.0
        else:
            net = z_net - (world.net_top + pb.net_clearance)
        dip = 0.0
        H, hl, hw = world.table_height, world.half_length, world.half_width
        for s in nodes[1:-1]:
            if abs(s[1]) <= hl and abs(s[2]) <= hw and s[3] < H:
                dip = max(dip, H - s[3])
        return np.array([
            float(n @ V),              # racket moves along its normal
            float(n @ self.to_net),    # racket faces the net
            -v_rel_n,                  # ball approaches the face
            net,                       # net clearance
            -dip,                      # no early table contact
        ])


def _seed_normal(pb: StrokeProblem, M: _Model, n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normal along the velocity change of a spin-free shot that hits the target."""
    p = pb.pre_state.p
    T = pb.t_flight
    v = (pb.p_tgt - p) / T
    v[2] += 0.5 * 9.81 * T
    for _ in range(20):
        e = np.array(_fly(p, v, np.zeros(3), T, n_nodes, M)[-1][1:4]) - pb.p_tgt
        if np.linalg.norm(e) < 1e-9:
            break
        J = np.empty((3, 3))
        for i in range(3):
            d = v.copy()
            d[i] += 1e-6
            J[:, i] = (np.array(_fly(p, d, np.zeros(3), T, n_nodes, M)[-1][1:4]) - pb.p_tgt - e) / 1e-6
        v = v - np.linalg.solve(J, e)
    dv = v - pb.pre_state.v
    n = dv / np.linalg.norm(dv)
    return n, v


def _setup(problem, params, aero, world, config):
    model = _StrokeModel(problem, params, aero, world, config)
    n0, v_seed = _seed_normal(problem, model.M, config.node_count)
    t1, t2 = model.frame(n0)
    base = (n0, t1, t2)
    # a racket velocity that yields v_seed for a pure reflection about n0
    R0 = quat_to_matrix(quat_from_normal(n0))
    Gv, cv, _, _ = _impact_affine(R0, problem.pre_state, params)
    V_init = np.linalg.solve(Gv, v_seed - cv)
    a = config.start_spread
    offsets = [(0.0, 0.0), (0.0, a), (0.0, -a), (a, 0.0), (-a, 0.0),
               (0.0, 2 * a), (a, a), (-a, a), (0.0, -2 * a)][:max(1, config.multistart)]
    starts = []
    for off in offsets:
        x = np.array(off, dtype=float)
        model.J = None
        res, info = model.evaluate(model.normal(x, base), V_init, config.penalty_schedule[0])
        starts.append((x, res, info))
    return model, base, starts


def _assess(problem, res, info):
    bounce_err = float(np.linalg.norm(info["e"]))
    feasible = bool(np.all(info["g"] >= 0.0)) and bounce_err < 1e-6
    obj = problem.alpha_w * info["spin_err"] ** 2 + problem.beta_w * bounce_err ** 2
    key = (not feasible, obj if feasible else float(np.sum(res ** 2)))
    return key, feasible, obj, bounce_err


def _stroke(info, feasible, obj, bounce_err, iterations):
    return RacketStroke(info["q"], info["V"], float(info["t_net"]), bounce_err,
                        info["spin_err"], feasible, iterations, float(obj))


def multistart_strokes(problem: StrokeProblem, params: RacketImpactParams = RacketImpactParams(),
                       aero: AeroParams = AeroParams(), world: WorldGeometry = WorldGeometry(),
                       config: SolverConfig = SolverConfig()) -> List[RacketStroke]:
    """The solver's start points as strokes, before any outer optimization.

    Each start has its racket velocity solved so that it lands on target;
    ``converged`` marks starts that already satisfy every constraint.
    """
    problem.validate(world)
    _, _, starts = _setup(problem, params, aero, world, config)
    return [_stroke(info, *_assess(problem, res, info)[1:], 0) for _, res, info in starts]


def solve_stroke(problem: StrokeProblem, params: RacketImpactParams = RacketImpactParams(),
                 aero: AeroParams = AeroParams(),
                 bounce_params: TableBounceParams = TableBounceParams(),
                 world: WorldGeometry = WorldGeometry(),
                 config: SolverConfig = SolverConfig()) -> RacketStroke:
    """Recover a racket orientation and velocity for one stroke problem.

    Returns the best stroke over the multistart; ``converged`` is set when
    the rollout lands within 1e-6 m of the target and every constraint holds.
    Infeasible problems still return their best attempt.
    """
    problem.validate(world)
    model, base, starts = _setup(problem, params, aero, world, config)

    # start points are candidates too, so the result is never worse than
    # any of them; optimization begins from the most promising one
    best = None
    for _, res, info in starts:
        key, feasible, obj, bounce_err = _assess(problem, res, info)
        if best is None or key < best[0]:
            best = (key, info, feasible, obj, bounce_err)
    order = sorted(range(len(starts)), key=lambda i: float(np.sum(starts[i][1] ** 2)))

    total_it = 0
    for i in order:
        x, _, info0 = starts[i]
        model.J = None
        state = {"V": info0["V"]}

        def fun(xx, rho):
            res, info = model.evaluate(model.normal(xx, base), state["V"], rho)
            if np.linalg.norm(info["e"]) < 1e-6:
                state["V"] = info["V"]
            return res

        for rho in config.penalty_schedule:
            try:
                sol = least_squares(fun, x, args=(rho,), method="lm", x_scale=1.0,
                                    diff_step=1e-7, max_nfev=config.outer_max_nfev,
                                    xtol=1e-12, ftol=1e-12, gtol=1e-12)
            except (np.linalg.LinAlgError, ValueError, NonFiniteState):
                break
            x = sol.x
            total_it += int(sol.nfev)
        res, info = model.evaluate(model.normal(x, base), state["V"],
                                   config.penalty_schedule[-1])
        key, feasible, obj, bounce_err = _assess(problem, res, info)
        if key < best[0]:
            best = (key, info, feasible, obj, bounce_err)
        if feasible and config.stop_at_feasible:
            break

    _, info, feasible, obj, bounce_err = best
    stroke = _stroke(info, feasible, obj, bounce_err, total_it)
    # report the error of the public rollout so callers can reproduce it
    bp, w_plus, _ = rollout_stroke(problem.pre_state, stroke, problem.t_flight,
                                   config.node_count, params, aero, world)
    err = float(np.linalg.norm(bp - problem.p_tgt))
    return replace(stroke, bounce_error=err, converged=feasible and err < 1e-6)


def check_stroke(problem: StrokeProblem, stroke: RacketStroke,
                 params: RacketImpactParams = RacketImpactParams(),
                 aero: AeroParams = AeroParams(), world: WorldGeometry = WorldGeometry(),
                 node_count: int = 40) -> dict:
    """Constraint values of a stroke recomputed from its rollout (each must be >= 0)."""
    bp, w_plus, traj = rollout_stroke(problem.pre_state, stroke, problem.t_flight, node_count,
                                      params, aero, world)
    n = stroke.normal
    nodes = [tuple(np.r_[t, p, 0, 0, 0, 0, 0, 0]) for t, p in zip(traj.t, traj.p3d)]
    model = _StrokeModel(problem, params, aero, world, SolverConfig(node_count=node_count))
    _, z_net = _net_crossing(nodes)
    g = model.constraints(n, stroke.V_r, nodes, z_net)
    names = ("normal_velocity", "facing", "approach", "net_clearance", "no_early_contact")
    out = {k: float(v) for k, v in zip(names, g)}
    out["bounce_error"] = float(np.linalg.norm(bp - problem.p_tgt))
    out["spin_error_hz"] = float(np.linalg.norm(rad_to_hz(w_plus) - problem.omega_tgt_hz))
    return out


# ---------------------------------------------------------------------------
# Monte-Carlo validation


@dataclass(frozen=True)
class MonteCarloRanges:
    hit_depth: Tuple[float, float] = (0.3, 1.0)
    hit_height: Tuple[float, float] = (0.8, 1.3)
    speed: Tuple[float, float] = (3.0, 10.0)
    spin_max_hz: float = 40.0
    t_flight: Tuple[float, float] = (0.3, 0.8)
    target_inset: float = 0.10


def _ball_sample(rng, radius):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * radius * rng.uniform() ** (1.0 / 3.0)


def sample_problem(rng: np.random.Generator, world: WorldGeometry = WorldGeometry(),
                   ranges: MonteCarloRanges = MonteCarloRanges()) -> StrokeProblem:
    """Random stroke problem for a hitter at a random end of the table."""
    hl, hw, H = world.half_length, world.half_width, world.table_height
    side = -1.0 if rng.uniform() < 0.5 else 1.0
    p = np.array([side * (hl + rng.uniform(*ranges.hit_depth)),
                  rng.uniform(-hw, hw), rng.uniform(*ranges.hit_height)])
    # incoming ball travels towards the hitter, roughly level
    heading = math.radians(rng.uniform(-20.0, 20.0))
    elev = math.radians(rng.uniform(-30.0, 10.0))
    speed = rng.uniform(*ranges.speed)
    v = speed * np.array([side * math.cos(elev) * math.cos(heading),
                          math.cos(elev) * math.sin(heading), math.sin(elev)])
    w = hz_to_rad(_ball_sample(rng, ranges.spin_max_hz))
    ins = ranges.target_inset
    tgt = np.array([-side * rng.uniform(ins, hl - ins), rng.uniform(-hw + ins, hw - ins), H])
    return StrokeProblem(BallState(0.0, p, v, w), _ball_sample(rng, ranges.spin_max_hz), tgt,
                         float(rng.uniform(*ranges.t_flight)))


def run_trial(seed: int, index: int, ranges: MonteCarloRanges = MonteCarloRanges(),
              config: SolverConfig = SolverConfig(), success_tol: float = 1e-3,
              params: RacketImpactParams = RacketImpactParams(),
              aero: AeroParams = AeroParams(),
              bounce_params: TableBounceParams = TableBounceParams(),
              world: WorldGeometry = WorldGeometry()) -> dict:
    """One Monte-Carlo trial; trial ``index`` of run ``seed`` has its own random stream."""
    rng = np.random.default_rng([seed, index])
    pb = sample_problem(rng, world, ranges)
    st = solve_stroke(pb, params, aero, bounce_params, world, config)
    return {"trial": index, "problem": pb.to_record(), "stroke": st.to_record(),
            "success": bool(st.converged and st.bounce_error < success_tol)}


def monte_carlo(n_trials: int, seed: int = 0, ranges: MonteCarloRanges = MonteCarloRanges(),
                config: SolverConfig = SolverConfig(), success_tol: float = 1e-3,
                params: RacketImpactParams = RacketImpactParams(),
                aero: AeroParams = AeroParams(),
                bounce_params: TableBounceParams = TableBounceParams(),
                world: WorldGeometry = WorldGeometry()):
    """Solve random stroke problems; returns (summary record, per-trial records).

    A trial succeeds when the solver reports convergence (all constraints
    met) and the rollout bounce error is below ``success_tol``.
    """
    trials = [run_trial(seed, i, ranges, config, success_tol, params, aero, bounce_params, world)
              for i in range(n_trials)]
    return summarize_trials(trials, success_tol), trials


def summarize_trials(trials: List[dict], success_tol: float = 1e-3) -> dict:
    n = len(trials)
    errs = np.array([t["stroke"]["bounce_error"] for t in trials], dtype=float)
    conv = sum(1 for t in trials if t["stroke"]["converged"])
    succ = sum(1 for t in trials if t["success"])
    qs = (0.5, 0.9, 0.95, 0.99)
    return {
        "trials": n,
        "converged": conv,
        "success_rate": succ / n if n else float("nan"),
        "landing_rate": float(np.mean(errs < success_tol)) if n else float("nan"),
        "success_tol_m": success_tol,
        "error_quantiles": {str(q): float(np.quantile(errs, q)) for q in qs} if n else {},
    }
