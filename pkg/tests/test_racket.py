import numpy as np
import pytest
from scipy.optimize import brentq

from ttball.ballistics import BallState, RacketImpactParams, WorldGeometry, racket_impact
from ttball.errors import BadProblem, NonUnitQuaternion
from ttball.racket import (MonteCarloRanges, RacketStroke, SolverConfig, StrokeProblem,
                           check_stroke, multistart_strokes, quat_from_normal, rollout_stroke,
                           run_trial, sample_problem, solve_stroke, summarize_trials)
from ttball.trajectory import hz_to_rad, rad_to_hz

W = WorldGeometry()
H = W.table_height


def forward_problem(p=(-1.8, 0.1, 1.0), v=(-5.0, 0.3, -0.5), w_hz=(0.0, 0.0, 0.0),
                    n=(0.85, 0.0, 0.52), speed=1.2, **kw):
    """Stroke problem whose target comes from flying a known stroke to the table."""
    pre = BallState(0.0, p, v, hz_to_rad(w_hz))
    n = np.asarray(n, dtype=float) / np.linalg.norm(n)
    truth = RacketStroke(quat_from_normal(n), speed * n, 0.0, 0.0, 0.0, True, 0)

    def height(t):
        return rollout_stroke(pre, truth, t)[0][2] - H

    ts = np.linspace(0.1, 1.2, 45)
    zs = [height(t) for t in ts]
    k = next(i for i in range(len(ts) - 1) if zs[i] > 0 >= zs[i + 1])
    tf = brentq(height, ts[k], ts[k + 1], xtol=1e-14)
    bp, w_plus, _ = rollout_stroke(pre, truth, tf)
    pb = StrokeProblem(pre, rad_to_hz(w_plus), [bp[0], bp[1], H], tf, **kw)
    return pb, truth


@pytest.fixture(scope="module")
def solved():
    pb, truth = forward_problem()
    return pb, truth, solve_stroke(pb)


def test_forward_oracle_is_reproduced(solved):
    pb, _, st = solved
    assert st.converged
    bp, w_plus, _ = rollout_stroke(pb.pre_state, st, pb.t_flight)
    assert np.linalg.norm(bp - pb.p_tgt) < 1e-3
    assert np.linalg.norm(rad_to_hz(w_plus) - pb.omega_tgt_hz) < 0.1


def test_forward_oracle_family(rng):
    tested = 0
    while tested < 6:
        pb, _ = forward_problem(p=(-1.6 - rng.uniform(0, 0.6), rng.uniform(-0.5, 0.5),
                                   rng.uniform(0.9, 1.2)),
                                v=(-rng.uniform(3, 7), rng.uniform(-0.5, 0.5), -0.5),
                                w_hz=rng.uniform(-20, 20, 3),
                                n=(0.85, rng.uniform(-0.1, 0.1), rng.uniform(0.4, 0.6)),
                                speed=rng.uniform(0.8, 1.6))
        if not W.on_table(pb.p_tgt[0], pb.p_tgt[1]):
            continue
        st = solve_stroke(pb)
        bp, _, _ = rollout_stroke(pb.pre_state, st, pb.t_flight)
        assert np.linalg.norm(bp - pb.p_tgt) < 1e-3
        tested += 1


def test_reported_error_matches_rollout(solved):
    pb, _, st = solved
    bp, _, _ = rollout_stroke(pb.pre_state, st, pb.t_flight)
    assert abs(np.linalg.norm(bp - pb.p_tgt) - st.bounce_error) <= 1e-9


def test_converged_stroke_meets_constraints(solved):
    pb, _, st = solved
    g = check_stroke(pb, st)
    for name in ("normal_velocity", "facing", "approach", "net_clearance", "no_early_contact"):
        assert g[name] >= 0.0, name
    assert g["bounce_error"] < 1e-6
    assert abs(np.linalg.norm(st.q_r) - 1.0) <= 1e-9


def test_node_doubling_moves_bounce_little(solved):
    pb, _, st = solved
    a, _, _ = rollout_stroke(pb.pre_state, st, pb.t_flight, node_count=40)
    b, _, _ = rollout_stroke(pb.pre_state, st, pb.t_flight, node_count=80)
    assert np.linalg.norm(a - b) < 5e-4


def test_serialized_stroke_reproduces_rollout_exactly(solved):
    pb, _, st = solved
    back = RacketStroke.from_record(st.to_record())
    a = rollout_stroke(pb.pre_state, st, pb.t_flight)
    b = rollout_stroke(pb.pre_state, back, pb.t_flight)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[2].p3d, b[2].p3d)
    pb2 = StrokeProblem.from_record(pb.to_record())
    assert np.array_equal(pb2.p_tgt, pb.p_tgt) and pb2.t_flight == pb.t_flight


def test_objective_not_worse_than_any_start(solved):
    pb, _, st = solved
    for start in multistart_strokes(pb):
        g = check_stroke(pb, start)
        feasible = min(g[k] for k in g if k not in ("bounce_error", "spin_error_hz")) >= 0
        if feasible and start.bounce_error < 1e-6:
            assert st.objective <= start.objective + 1e-12


def test_zero_spin_weight_still_lands():
    pb, _ = forward_problem(alpha_w=0.0)
    pb = StrokeProblem(pb.pre_state, [30.0, -10.0, 5.0], pb.p_tgt, pb.t_flight, alpha_w=0.0)
    st = solve_stroke(pb)
    assert st.converged and st.bounce_error < 1e-6
    assert st.objective < 1e-9


def test_mirror_symmetry(solved):
    pb, _, st = solved
    flip = np.array([1.0, -1.0, 1.0])
    pseudo = np.array([-1.0, 1.0, -1.0])
    s = pb.pre_state
    mirrored = StrokeProblem(BallState(s.t, s.p * flip, s.v * flip, s.omega * pseudo),
                             pb.omega_tgt_hz * pseudo, pb.p_tgt * flip, pb.t_flight)
    sm = solve_stroke(mirrored)
    _, _, a = rollout_stroke(pb.pre_state, st, pb.t_flight)
    _, _, b = rollout_stroke(mirrored.pre_state, sm, pb.t_flight)
    assert np.allclose(a.p3d * flip, b.p3d, atol=1e-6)


def test_racket_at_rest_restitution():
    cor = RacketImpactParams().cor_racket
    pre = BallState(0.0, [-1.8, 0, 1.0], [-4.0, 0, 0], np.zeros(3))
    st = RacketStroke(quat_from_normal([1.0, 0, 0]), np.zeros(3), 0, 0, 0, True, 0)
    post = racket_impact(pre, st.q_r, st.V_r)
    assert post.v[0] == pytest.approx(cor * 4.0)
    _, _, tr = rollout_stroke(pre, st, 0.01, node_count=4)
    assert tr.p3d[1, 0] > tr.p3d[0, 0]


def test_stroke_requires_unit_quaternion():
    with pytest.raises(NonUnitQuaternion):
        RacketStroke([1.0, 0.1, 0, 0], np.zeros(3), 0, 0, 0, False, 0)


def test_quat_from_normal(rng):
    for _ in range(100):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        st = RacketStroke(quat_from_normal(n), np.zeros(3), 0, 0, 0, False, 0)
        assert np.allclose(st.normal, n)


@pytest.mark.parametrize("change", [
    dict(t_flight=0.0), dict(p_tgt=[1.0, 0.0, H + 0.1]), dict(p_tgt=[2.0, 0.0, H]),
    dict(p_tgt=[-1.0, 0.0, H]), dict(alpha_w=-1.0), dict(beta_w=0.0),
])
def test_bad_problems(change):
    pre = BallState(0.0, [-1.8, 0, 1.0], [-4.0, 0, 0], np.zeros(3))
    base = dict(pre_state=pre, omega_tgt_hz=np.zeros(3), p_tgt=[1.0, 0.0, H], t_flight=0.5)
    base.update(change)
    with pytest.raises(BadProblem):
        solve_stroke(StrokeProblem(**base))


def test_hit_below_table_is_bad():
    pre = BallState(0.0, [-1.8, 0, 0.5], [-4.0, 0, 0], np.zeros(3))
    with pytest.raises(BadProblem):
        solve_stroke(StrokeProblem(pre, np.zeros(3), [1.0, 0.0, H], 0.5))


def test_sampled_problems_are_valid(rng):
    for _ in range(200):
        sample_problem(rng).validate(W)


def test_trials_are_seeded_per_index():
    cfg = SolverConfig(multistart=2)
    a = run_trial(4, 3, config=cfg)
    b = run_trial(4, 3, config=cfg)
    assert a == b
    assert a["problem"] != run_trial(4, 2, config=cfg)["problem"]


def test_summary_fields():
    trials = [{"stroke": {"bounce_error": e, "converged": c}, "success": s}
              for e, c, s in ((1e-9, True, True), (0.2, False, False))]
    out = summarize_trials(trials)
    assert out["trials"] == 2 and out["converged"] == 1 and out["success_rate"] == 0.5
    assert set(out["error_quantiles"]) == {"0.5", "0.9", "0.95", "0.99"}
    assert MonteCarloRanges().spin_max_hz == 40.0
