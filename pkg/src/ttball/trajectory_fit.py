"""Physics-constrained trajectory fitting.

Finds the initial state (position, velocity, spin) whose simulated flight best
explains observed 3D samples under a Huber loss on per-sample distances.
The optimizer is a bounded Levenberg-Marquardt with forward-difference
Jacobians; the Huber loss enters through iteratively reweighted residuals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .ballistics import (AeroParams, BallState, TableBounceParams, WorldGeometry,
                         _Model, propagate)
from .errors import TimestampMismatch, TooFewSamples
from .trajectory import Trajectory, hz_to_rad

MIN_SAMPLES = 8


@dataclass(frozen=True)
class FitConfig:
    huber_delta: float = 0.05
    p_min: Tuple[float, float, float] = (-4.0, -3.0, 0.0)
    p_max: Tuple[float, float, float] = (4.0, 3.0, 3.0)
    v_max: float = 40.0
    omega_max_hz: float = 60.0
    rk4_dt: float = 1.0 / 240.0
    max_iterations: int = 60
    multistart_count: int = 3
    multistart_spin_hz: float = 20.0
    convergence_tol: float = 1e-10
    max_bounces: int = 2
    # starts after the first are skipped once a start reaches this rmse (m)
    early_exit_rmse: float = 1e-6
    # after the Huber fit, samples farther than reject_factor * huber_delta
    # are dropped and the fit is polished on the rest; None disables
    reject_factor: Optional[float] = 3.0

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if not self.rk4_dt > 0:
            raise ValueError("rk4_dt must be positive")
        if np.any(np.asarray(self.p_min) >= np.asarray(self.p_max)):
            raise ValueError("empty position box")
        if not (self.v_max > 0 and self.omega_max_hz > 0):
            raise ValueError("velocity and spin bounds must be positive")

    def bounds(self):
        w = float(hz_to_rad(self.omega_max_hz))
        lo = np.r_[self.p_min, [-self.v_max] * 3, [-w] * 3]
        hi = np.r_[self.p_max, [self.v_max] * 3, [w] * 3]
        return lo, hi


@dataclass(frozen=True, eq=False)
class FitResult:
    x0_star: BallState
    fitted: Trajectory
    rmse: float
    max_error: float
    n_bounces: int
    converged: bool
    iterations: int
    objective: float = float("nan")

    def to_record(self) -> dict:
        return {
            "x0": self.x0_star.to_record(),
            "rmse": self.rmse,
            "max_error": self.max_error,
            "n_bounces": self.n_bounces,
            "converged": self.converged,
            "iterations": self.iterations,
            "objective": self.objective,
        }


def huber(d: np.ndarray, delta: float) -> np.ndarray:
    d = np.abs(d)
    return np.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def physics_residual(observed: Trajectory, fitted: Trajectory) -> Tuple[float, float]:
    """RMSE and maximum of the pointwise 3D distance over the observed valid samples."""
    mask = observed.valid3d
    if len(observed) != len(fitted) or not np.array_equal(observed.t[mask], fitted.t[mask]):
        raise TimestampMismatch("observed and fitted timestamps differ")
    if not np.all(fitted.valid3d[mask]):
        raise TimestampMismatch("fitted trajectory lacks samples at valid indices")
    d = np.linalg.norm(observed.p3d[mask] - fitted.p3d[mask], axis=1)
    if d.size == 0:
        return 0.0, 0.0
    return float(np.sqrt(np.mean(d * d))), float(np.max(d))


class _Problem:
    def __init__(self, t, r, M: _Model, config: FitConfig):
        self.t = t
        self.r = r
        self.M = M
        self.cfg = config
        self.times = t.tolist()
        self.active = np.ones(len(t), dtype=bool)

    def simulate(self, x):
        start = (self.t[0],) + tuple(x)
        states, bounces, _ = propagate(start, self.times, self.cfg.rk4_dt, self.M,
                                       self.cfg.max_bounces)
        pos = np.array([s[1:4] for s in states[:len(self.times)]])
        if len(pos) < len(self.times):
            # halted on the floor: the ball stays where it landed
            pad = np.repeat(pos[-1:], len(self.times) - len(pos), axis=0)
            pos = np.vstack([pos, pad])
        return pos, len(bounces)

    def objective(self, pos):
        d = np.linalg.norm(pos - self.r, axis=1)
        return float(np.sum(huber(d[self.active], self.cfg.huber_delta))), d

    def jacobian(self, x, pos):
        n = len(self.times)
        J = np.empty((3 * n, 9))
        for i in range(9):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp = x.copy()
            xp[i] += h
            pp, _ = self.simulate(xp)
            J[:, i] = ((pp - pos) / h).reshape(-1)
        return J


def _initial_guess(t, r, delta, gravity, window: int = 10):
    """Position and velocity at t[0] by consensus over sample pairs.

    Every pair among the leading samples defines a gravity-only parabola; the
    pair explaining the most leading samples within ``2 * delta`` wins and is
    refined by least squares on its inliers. Outliers and an early bounce
    therefore do not corrupt the starting point.
    """
    g = np.asarray(gravity, dtype=float)
    k = min(window, len(t))
    tt = t[:k] - t[0]
    rr = r[:k] - 0.5 * np.outer(tt * tt, g)
    best, best_count = None, -1
    for i in range(k - 1):
        for j in range(i + 1, k):
            v = (rr[j] - rr[i]) / (tt[j] - tt[i])
            p = rr[i] - v * tt[i]
            err = np.linalg.norm(rr - (p + np.outer(tt, v)), axis=1)
            inl = err <= 2 * delta
            count = int(inl.sum())
            if count > best_count:
                best, best_count = inl, count
    A = np.c_[np.ones(best.sum()), tt[best]]
    coef, *_ = np.linalg.lstsq(A, rr[best], rcond=None)
    return coef[0], coef[1]


def _lm(problem: _Problem, x0, lo, hi):
    cfg = problem.cfg
    x = np.clip(x0, lo, hi)
    pos, nb = problem.simulate(x)
    F, d = problem.objective(pos)
    lam = 1e-3
    it = 0
    converged = False
    history = [F]
    while it < cfg.max_iterations:
        it += 1
        w = np.where(d <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(d, 1e-300))
        w = np.where(problem.active, w, 0.0)
        sw = np.repeat(np.sqrt(w), 3)
        res = ((pos - problem.r).reshape(-1)) * sw
        J = problem.jacobian(x, pos) * sw[:, None]
        JtJ = J.T @ J
        g = J.T @ res
        diag = np.maximum(np.diag(JtJ), 1e-12)
        improved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(JtJ + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            xn = np.clip(x + step, lo, hi)
            try:
                pn, nbn = problem.simulate(xn)
            except Exception:
                lam *= 10
                continue
            Fn, dn = problem.objective(pn)
            if Fn < F:
                rel = (F - Fn) / max(F, 1e-300)
                x, pos, nb, d = xn, pn, nbn, dn
                F = Fn
                history.append(F)
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved:
            converged = True
            break
        if F < 1e-20 or rel < cfg.convergence_tol or np.max(np.abs(step)) < 1e-12:
            converged = True
            break
    return x, pos, nb, F, it, converged, history


def ode_fit(observed: Trajectory, world: WorldGeometry = WorldGeometry(),
            aero: AeroParams = AeroParams(),
            bounce_params: TableBounceParams = TableBounceParams(),
            config: FitConfig = FitConfig()) -> FitResult:
    """Fit the initial ball state of one flight segment to observed 3D samples.

    Residuals use only the valid samples. The best of ``multistart_count``
    starts (zero spin, then alternating +/- ``multistart_spin_hz`` on every
    axis) is returned. A start that runs out of iterations still yields its
    best state, flagged ``converged=False``.
    """
    mask = observed.valid3d
    if mask.sum() < MIN_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_SAMPLES} valid 3D samples, got {int(mask.sum())}")
    t = observed.t[mask]
    r = observed.p3d[mask]
    M = _Model(world, aero, bounce_params)
    problem = _Problem(t, r, M, config)
    lo, hi = config.bounds()

    p0, v0 = _initial_guess(t, r, config.huber_delta, aero.gravity)
    w_step = float(hz_to_rad(config.multistart_spin_hz))
    best = None
    for k in range(max(1, config.multistart_count)):
        if k == 0:
            w0 = np.zeros(3)
        else:
            sign = 1.0 if k % 2 else -1.0
            w0 = sign * w_step * ((k + 1) // 2) * np.ones(3)
        problem.active[:] = True
        x, pos, nb, F, it, conv, _ = _lm(problem, np.r_[p0, v0, w0], lo, hi)
        if config.reject_factor is not None:
            d = np.linalg.norm(pos - r, axis=1)
            keep = d <= config.reject_factor * config.huber_delta
            if not keep.all() and keep.sum() >= MIN_SAMPLES:
                problem.active[:] = keep
                x, pos, nb, _, it2, conv, _ = _lm(problem, x, lo, hi)
                it += it2
                problem.active[:] = True
                F, _ = problem.objective(pos)
        if best is None or F < best[3]:
            best = (x, pos, nb, F, it, conv)
        d = np.linalg.norm(best[1] - r, axis=1)
        if np.sqrt(np.mean(d * d)) < config.early_exit_rmse:
            break
    x, pos, nb, F, it, conv = best

    fitted_p = np.full((len(observed), 3), np.nan)
    fitted_p[mask] = pos
    missing = (~mask) & (observed.t > t[0]) & (observed.t < t[-1])
    if missing.any():
        fill_times = np.sort(np.r_[t[0], observed.t[missing]])
        sub = _Problem(fill_times, np.zeros((fill_times.size, 3)), M, config)
        fpos, _ = sub.simulate(x)
        fitted_p[missing] = fpos[1:]
    fitted = Trajectory(observed.t, fitted_p,
                        np.where(np.isfinite(fitted_p[:, :1]), x[6:9], np.nan))
    d = np.linalg.norm(pos - r, axis=1)
    return FitResult(
        x0_star=BallState(t[0], x[0:3], x[3:6], x[6:9]),
        fitted=fitted,
        rmse=float(np.sqrt(np.mean(d * d))),
        max_error=float(np.max(d)),
        n_bounces=int(nb),
        converged=bool(conv),
        iterations=int(it),
        objective=float(F),
    )


def fit_history(observed: Trajectory, world: WorldGeometry = WorldGeometry(),
                aero: AeroParams = AeroParams(),
                bounce_params: TableBounceParams = TableBounceParams(),
                config: FitConfig = FitConfig(), start: Optional[np.ndarray] = None):
    """Objective values of the accepted iterations of a single LM run (diagnostics)."""
    mask = observed.valid3d
    t, r = observed.t[mask], observed.p3d[mask]
    problem = _Problem(t, r, _Model(world, aero, bounce_params), config)
    lo, hi = config.bounds()
    if start is None:
        p0, v0 = _initial_guess(t, r, config.huber_delta, aero.gravity)
        start = np.r_[p0, v0, np.zeros(3)]
    return _lm(problem, np.asarray(start, dtype=float), lo, hi)[-1]
